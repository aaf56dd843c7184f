//! File formats: datasets, attention maps, and analysis reports.
//!
//! Everything is delimited text with a one-line versioned header, written
//! with shortest-round-trip float formatting so identical runs produce
//! identical bytes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::analysis::{EntropyReport, ParMatrix, SlopeReport};
use crate::encoder::CollectedMaps;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Scalar};
use crate::phoneme::Utterance;
use crate::trainer::EpochStats;

pub const DATASET_HEADER: &str = "# phsa dataset v1";
pub const HISTORY_HEADER: &str = "# phsa history v1";
pub const PAR_HEADER: &str = "# phsa par v1";
pub const METRIC_HEADER: &str = "# phsa metrics v1";
pub const ABLATION_HEADER: &str = "# phsa ablation v1";
pub const CONFUSION_HEADER: &str = "# phsa confusion v1";
pub const BENCH_HEADER: &str = "# phsa bench v1";

/// One utterance per line: id, frame count, feature dims, comma-joined
/// labels, comma-joined row-major features.
pub fn write_dataset<F: Scalar>(path: &Path, utterances: &[Utterance<F>]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{DATASET_HEADER}")?;
    writeln!(w, "# fields: id\tframes\tdims\tlabels\tfeatures")?;
    for utt in utterances {
        let labels: Vec<String> = utt.labels.iter().map(|l| l.to_string()).collect();
        let feats: Vec<String> = utt.features.data().iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            utt.id,
            utt.features.rows(),
            utt.features.cols(),
            labels.join(","),
            feats.join(",")
        )?;
    }
    Ok(())
}

pub fn read_dataset<F: Scalar>(path: &Path) -> Result<Vec<Utterance<F>>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty dataset file".to_string()))??;
    if header.trim() != DATASET_HEADER {
        return Err(Error::Data(format!(
            "unexpected dataset header {header:?}"
        )));
    }
    let mut utterances = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(Error::Data(format!(
                "dataset line has {} fields, expected 5",
                parts.len()
            )));
        }
        let id: u64 = parse_field(parts[0], "id")?;
        let frames: usize = parse_field(parts[1], "frames")?;
        let dims: usize = parse_field(parts[2], "dims")?;
        let labels: Vec<usize> = parts[3]
            .split(',')
            .map(|s| parse_field(s, "label"))
            .collect::<Result<_>>()?;
        let data: Vec<F> = parts[4]
            .split(',')
            .map(|s| {
                s.parse::<F>()
                    .map_err(|_| Error::Data(format!("bad float {s:?}")))
            })
            .collect::<Result<_>>()?;
        if labels.len() != frames {
            return Err(Error::Data(format!(
                "utterance {id}: {} labels for {frames} frames",
                labels.len()
            )));
        }
        let features = Matrix::new(frames, dims, data)?;
        utterances.push(Utterance {
            id,
            features,
            labels,
        });
    }
    Ok(utterances)
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| Error::Data(format!("bad {what}: {s:?}")))
}

/// One file per (layer, head): header `layer,head,T`, then T comma-joined
/// rows of the map.
pub fn export_attention_maps(dir: &Path, maps: &CollectedMaps) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (layer, heads) in maps.iter().enumerate() {
        for (head, map) in heads.iter().enumerate() {
            let path = dir.join(format!("map_l{layer}_h{head}.csv"));
            let file = fs::File::create(&path)?;
            let mut w = BufWriter::new(file);
            writeln!(w, "{},{},{}", layer, head, map.rows())?;
            for i in 0..map.rows() {
                let row: Vec<String> = map.row(i).iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{}", row.join(","))?;
            }
            written.push(path);
        }
    }
    Ok(written)
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{HISTORY_HEADER}")?;
    writeln!(w, "epoch\tloss\taccuracy")?;
    for row in history {
        writeln!(w, "{}\t{}\t{}", row.epoch, row.loss, row.accuracy)?;
    }
    Ok(())
}

pub fn write_par(path: &Path, par: &ParMatrix) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{PAR_HEADER}")?;
    writeln!(w, "class_i,class_j,value,support_i")?;
    for i in 0..par.num_classes() {
        for j in 0..par.num_classes() {
            writeln!(
                w,
                "{},{},{},{}",
                par.class_names[i],
                par.class_names[j],
                par.values.get(i, j),
                par.support[i]
            )?;
        }
    }
    Ok(())
}

/// Entropy report rows: per-head stats then an `overall` row, with a stable
/// column order for downstream plotting. Entropy is in nats.
pub fn write_entropy_report(path: &Path, report: &EntropyReport) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{METRIC_HEADER}")?;
    writeln!(w, "# entropy base: natural log")?;
    writeln!(w, "layer,head,metric,mean,std")?;
    for (layer, head, stats) in &report.per_head {
        writeln!(
            w,
            "{layer},{head},entropy,{},{}",
            stats.mean, stats.std
        )?;
    }
    writeln!(
        w,
        "all,all,entropy,{},{}",
        report.overall.mean, report.overall.std
    )?;
    Ok(())
}

pub fn write_slope_report(path: &Path, report: &SlopeReport) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{METRIC_HEADER}")?;
    writeln!(w, "layer,head,metric,mean,std")?;
    for (layer, head, alpha_s, alpha_c) in &report.entries {
        writeln!(w, "{layer},{head},alpha_s,{alpha_s},0")?;
        writeln!(w, "{layer},{head},alpha_c,{alpha_c},0")?;
    }
    Ok(())
}

/// Three-row ablation table: both terms, similarity only, content only.
pub fn write_ablation_report(
    path: &Path,
    rows: &[(bool, bool, f64, f64)],
    similarity_only_below_content_only: bool,
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{ABLATION_HEADER}")?;
    writeln!(w, "s,c,entropy_mean,entropy_std")?;
    for (s, c, mean, std) in rows {
        writeln!(
            w,
            "{},{},{},{}",
            *s as u8, *c as u8, mean, std
        )?;
    }
    writeln!(
        w,
        "# entropy(similarity_only) < entropy(content_only): {similarity_only_below_content_only}"
    )?;
    Ok(())
}

pub fn write_confusion(path: &Path, confusion: &[Vec<u64>]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CONFUSION_HEADER}")?;
    writeln!(w, "true_class,predicted_class,frames")?;
    for (i, row) in confusion.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            writeln!(w, "{i},{j},{count}")?;
        }
    }
    Ok(())
}
