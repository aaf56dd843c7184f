use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use phsa_core::analysis::{
    compute_par_filtered, entropy_report, AblationTag, LabeledMap, SlopeReport,
};
use phsa_core::attention::TermDrop;
use phsa_core::encoder::CollectedMaps;
use phsa_core::io::{
    export_attention_maps, read_dataset, write_ablation_report, write_entropy_report, write_par,
    write_slope_report,
};
use phsa_core::numeric::Matrix;
use phsa_core::phoneme::{Utterance, SILENCE_CLASS};
use phsa_core::trainer::{classifier_maps, ClassifierConfig, ClassifierParams};

use crate::checkpoint;
use crate::commands::dataset_path;
use crate::config::resolve_out_dir;
use crate::error::{CliError, CliResult};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Par,
    Entropy,
    Slopes,
    Ablation,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or the directory written by `gen` (uses dev.tsv)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub which: Which,
    #[arg(long)]
    pub out: Option<String>,
    /// Additionally export the raw attention maps of this utterance index
    #[arg(long)]
    pub dump_maps: Option<usize>,
    /// Drop silence-labeled query frames from PAR aggregation
    #[arg(long)]
    pub exclude_silence: bool,
}

fn collect_all_maps(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<f32>>,
    data: &[Utterance<f32>],
    drop: Option<TermDrop>,
) -> CliResult<Vec<CollectedMaps>> {
    data.iter()
        .map(|utt| classifier_maps(cfg, params, &utt.features, drop).map_err(CliError::from))
        .collect()
}

pub fn run(args: &AnalyzeArgs) -> CliResult<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let data = read_dataset::<f32>(&dataset_path(&args.data, "dev")?)?;
    if data.is_empty() {
        return Err(CliError::Usage("dataset is empty".to_string()));
    }
    let model_cfg = ckpt.config.classifier_config();
    let out = resolve_out_dir(args.out.as_deref().unwrap_or("analysis"));
    fs::create_dir_all(&out)?;

    match args.which {
        Which::Par => cmd_par(args, &model_cfg, &ckpt.params, &data, &out)?,
        Which::Entropy => cmd_entropy(&model_cfg, &ckpt.params, &data, &out)?,
        Which::Slopes => cmd_slopes(&model_cfg, &ckpt.params, &out)?,
        Which::Ablation => cmd_ablation(&model_cfg, &ckpt.params, &data, &out)?,
    }

    if let Some(index) = args.dump_maps {
        let utt = data
            .get(index)
            .ok_or_else(|| CliError::Usage(format!("utterance index {index} out of range")))?;
        let maps = classifier_maps(&model_cfg, &ckpt.params, &utt.features, None)?;
        let dir = out.join(format!("maps_utt{index}"));
        let files = export_attention_maps(&dir, &maps)?;
        println!("wrote {} map files to {}", files.len(), dir.display());
    }
    Ok(())
}

fn cmd_par(
    args: &AnalyzeArgs,
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<f32>>,
    data: &[Utterance<f32>],
    out: &Path,
) -> CliResult<()> {
    let collections = collect_all_maps(cfg, params, data, None)?;
    let num_classes = cfg.num_classes;
    let skip = args.exclude_silence.then_some(SILENCE_CLASS);
    for layer in 0..cfg.encoder.num_layers {
        for head in 0..cfg.encoder.num_heads {
            let items: Vec<LabeledMap<'_>> = collections
                .iter()
                .zip(data.iter())
                .map(|(maps, utt)| LabeledMap {
                    map: &maps[layer][head],
                    labels: &utt.labels,
                })
                .collect();
            let par = compute_par_filtered(&items, num_classes, skip)?;
            let path = out.join(format!("par_l{layer}_h{head}.csv"));
            write_par(&path, &par)?;
        }
    }
    println!(
        "wrote {} PAR files ({} classes) to {}",
        cfg.encoder.num_layers * cfg.encoder.num_heads,
        num_classes,
        out.display()
    );
    Ok(())
}

fn cmd_entropy(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<f32>>,
    data: &[Utterance<f32>],
    out: &Path,
) -> CliResult<()> {
    let collections = collect_all_maps(cfg, params, data, None)?;
    let layers: Vec<usize> = (0..cfg.encoder.num_layers).collect();
    let report = entropy_report(&collections, &layers, AblationTag::Full)?;
    let path = out.join("entropy.csv");
    write_entropy_report(&path, &report)?;
    println!(
        "entropy over {} rows: mean {:.4} std {:.4} nats -> {}",
        report.overall.rows,
        report.overall.mean,
        report.overall.std,
        path.display()
    );
    Ok(())
}

fn cmd_slopes(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<f32>>,
    out: &Path,
) -> CliResult<()> {
    let report: SlopeReport = phsa_core::analysis::slope_report(
        &cfg.encoder,
        &params.encoder,
        |m| m.item() as f64,
    )?;
    let path = out.join("slopes.csv");
    write_slope_report(&path, &report)?;
    println!(
        "wrote {} slope pairs to {}",
        report.entries.len(),
        path.display()
    );
    Ok(())
}

fn cmd_ablation(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<f32>>,
    data: &[Utterance<f32>],
    out: &Path,
) -> CliResult<()> {
    if cfg.encoder.num_phsa_layers == 0 {
        return Err(CliError::Usage(
            "ablation requires a checkpoint with phonetic layers".to_string(),
        ));
    }
    // entropy of the phonetic layers only, under all three term settings
    let phsa_layers: Vec<usize> = (0..cfg.encoder.num_phsa_layers).collect();
    let settings = [
        (AblationTag::Full, None),
        (AblationTag::SimilarityOnly, Some(TermDrop::Content)),
        (AblationTag::ContentOnly, Some(TermDrop::Similarity)),
    ];
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (tag, drop) in settings {
        let collections = collect_all_maps(cfg, params, data, drop)?;
        let report = entropy_report(&collections, &phsa_layers, tag)?;
        let (s, c) = tag.flags();
        rows.push((s, c, report.overall.mean, report.overall.std));
        means.push(report.overall.mean);
    }
    let similarity_only_below_content_only = means[1] < means[2];
    let path = out.join("ablation.csv");
    write_ablation_report(&path, &rows, similarity_only_below_content_only)?;
    for (s, c, mean, std) in &rows {
        println!(
            "s={} c={} entropy {:.4} +- {:.4} nats",
            *s as u8, *c as u8, mean, std
        );
    }
    println!(
        "entropy(similarity-only) < entropy(content-only): {similarity_only_below_content_only} -> {}",
        path.display()
    );
    Ok(())
}
