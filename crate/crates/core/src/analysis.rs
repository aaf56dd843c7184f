//! Attention-map analysis: class-to-class attention (PAR), row entropy,
//! and trained PReLU slopes.
//!
//! Everything here aggregates in check-grade (f64) regardless of the
//! precision the maps were produced in. Entropy is reported in nats.

use crate::attention::VariantId;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// How far a map row may deviate from summing to one before it is rejected
/// as data corruption (train-grade forward passes accumulate ~1e-7).
const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Class-to-class average attention. Entry (i, j) is the mean attention
/// mass that query frames of class i assign to key frames of class j,
/// averaged over every query frame with that class across all maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ParMatrix {
    pub values: Matrix<f64>,
    pub class_names: Vec<String>,
    /// Query-frame count per class; rows with zero support are all-zero.
    pub support: Vec<u64>,
}

impl ParMatrix {
    pub fn num_classes(&self) -> usize {
        self.support.len()
    }
}

/// One attention map plus the frame labels of its utterance.
pub struct LabeledMap<'a> {
    pub map: &'a Matrix<f64>,
    pub labels: &'a [usize],
}

fn check_row_stochastic(map: &Matrix<f64>) -> Result<()> {
    for i in 0..map.rows() {
        let sum: f64 = map.row(i).iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Data(format!(
                "attention map row {i} sums to {sum}, not 1"
            )));
        }
        if map.row(i).iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(Error::Data(format!("attention map row {i} outside [0,1]")));
        }
    }
    Ok(())
}

/// Aggregates labeled attention maps into a [`ParMatrix`].
///
/// Input rows are validated against `ROW_SUM_TOLERANCE` and then
/// renormalized exactly, so supported PAR rows sum to one at f64 precision
/// even when the maps came from a train-grade forward pass.
pub fn compute_par(items: &[LabeledMap<'_>], num_classes: usize) -> Result<ParMatrix> {
    compute_par_filtered(items, num_classes, None)
}

/// [`compute_par`] with query frames of one class (typically silence)
/// excluded; the excluded class still appears as a key column, and its PAR
/// row stays all-zero with zero support.
pub fn compute_par_filtered(
    items: &[LabeledMap<'_>],
    num_classes: usize,
    skip_query_class: Option<usize>,
) -> Result<ParMatrix> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".to_string()));
    }
    let mut mass = vec![vec![0.0f64; num_classes]; num_classes];
    let mut support = vec![0u64; num_classes];

    for item in items {
        let t = item.map.rows();
        if item.map.cols() != t {
            return Err(Error::Data(format!(
                "attention map is {}x{}, not square",
                t,
                item.map.cols()
            )));
        }
        if item.labels.len() != t {
            return Err(Error::Data(format!(
                "{} labels for a {t}-frame map",
                item.labels.len()
            )));
        }
        if let Some(&bad) = item.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range")));
        }
        check_row_stochastic(item.map)?;

        for qi in 0..t {
            let query_class = item.labels[qi];
            if skip_query_class == Some(query_class) {
                continue;
            }
            let row_sum: f64 = item.map.row(qi).iter().sum();
            support[query_class] += 1;
            for (kj, &weight) in item.map.row(qi).iter().enumerate() {
                mass[query_class][item.labels[kj]] += weight / row_sum;
            }
        }
    }

    let values = Matrix::from_fn(num_classes, num_classes, |i, j| {
        if support[i] == 0 {
            0.0
        } else {
            mass[i][j] / support[i] as f64
        }
    });
    Ok(ParMatrix {
        values,
        class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
        support,
    })
}

/// Symmetry of a PAR matrix over its supported classes:
/// 1 - |P - P^T|_1 / (|P|_1 + |P^T|_1), so 1 means perfectly symmetric.
pub fn par_symmetry_score(par: &ParMatrix) -> f64 {
    let supported: Vec<usize> = (0..par.num_classes())
        .filter(|&c| par.support[c] > 0)
        .collect();
    let mut diff = 0.0;
    let mut norm = 0.0;
    for &i in &supported {
        for &j in &supported {
            let a = par.values.get(i, j);
            let b = par.values.get(j, i);
            diff += (a - b).abs();
            norm += a.abs() + b.abs();
        }
    }
    if norm == 0.0 {
        1.0
    } else {
        1.0 - diff / norm
    }
}

/// Mean/std summary of row entropies (natural log).
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyStats {
    pub mean: f64,
    /// Population standard deviation over rows.
    pub std: f64,
    pub rows: u64,
}

/// Entropy of one distribution row, with 0 ln 0 = 0.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Row-entropy statistics over a set of attention maps.
pub fn attention_entropy(maps: &[&Matrix<f64>]) -> Result<EntropyStats> {
    let mut entropies = Vec::new();
    for map in maps {
        check_row_stochastic(map)?;
        for i in 0..map.rows() {
            entropies.push(row_entropy(map.row(i)));
        }
    }
    if entropies.is_empty() {
        return Err(Error::Data("no attention rows to aggregate".to_string()));
    }
    let n = entropies.len() as f64;
    let mean = entropies.iter().sum::<f64>() / n;
    let var = entropies.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(EntropyStats {
        mean,
        std: var.sqrt(),
        rows: entropies.len() as u64,
    })
}

/// Which score terms were active when the analyzed maps were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTag {
    Full,
    SimilarityOnly,
    ContentOnly,
}

impl AblationTag {
    /// (similarity active, content active)
    pub fn flags(self) -> (bool, bool) {
        match self {
            AblationTag::Full => (true, true),
            AblationTag::SimilarityOnly => (true, false),
            AblationTag::ContentOnly => (false, true),
        }
    }
}

/// Per-(layer, head) and overall entropy of a map collection.
#[derive(Clone, Debug)]
pub struct EntropyReport {
    pub ablation: AblationTag,
    /// (layer, head, stats), in layer-major order.
    pub per_head: Vec<(usize, usize, EntropyStats)>,
    pub overall: EntropyStats,
}

/// Aggregates entropy over `collections[utterance][layer][head]` maps,
/// restricted to the given layers (e.g. only the phonetic ones).
pub fn entropy_report(
    collections: &[Vec<Vec<Matrix<f64>>>],
    layers: &[usize],
    ablation: AblationTag,
) -> Result<EntropyReport> {
    if collections.is_empty() {
        return Err(Error::Data("no utterances to aggregate".to_string()));
    }
    let num_heads = collections
        .first()
        .and_then(|layers| layers.first())
        .map(|heads| heads.len())
        .unwrap_or(0);
    let mut per_head = Vec::new();
    let mut all_maps: Vec<&Matrix<f64>> = Vec::new();
    for &layer in layers {
        for head in 0..num_heads {
            let mut maps = Vec::new();
            for utt_maps in collections {
                if layer >= utt_maps.len() {
                    return Err(Error::Data(format!("layer {layer} missing from maps")));
                }
                maps.push(&utt_maps[layer][head]);
                all_maps.push(&utt_maps[layer][head]);
            }
            per_head.push((layer, head, attention_entropy(&maps)?));
        }
    }
    Ok(EntropyReport {
        ablation,
        per_head,
        overall: attention_entropy(&all_maps)?,
    })
}

/// Trained PReLU slopes, one pair per (phonetic layer, head).
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeReport {
    /// (layer, head, alpha_s, alpha_c)
    pub entries: Vec<(usize, usize, f64, f64)>,
}

pub fn slope_report<T>(
    cfg: &EncoderConfig,
    params: &EncoderParams<T>,
    read_scalar: impl Fn(&T) -> f64,
) -> Result<SlopeReport> {
    if cfg.num_phsa_layers == 0 {
        return Err(Error::Config(
            "slope report requires at least one phonetic layer".to_string(),
        ));
    }
    let mut entries = Vec::new();
    for (layer_index, layer) in params.layers.iter().enumerate() {
        if cfg.layer_variant(layer_index) != VariantId::M5 {
            continue;
        }
        for (head_index, head) in layer.attn.heads.iter().enumerate() {
            entries.push((
                layer_index,
                head_index,
                read_scalar(&head.alpha_s),
                read_scalar(&head.alpha_c),
            ));
        }
    }
    Ok(SlopeReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Scalar;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn par_identity_when_one_frame_per_class() {
        let map = Matrix::from_rows(&[&[0.7, 0.3], &[0.4, 0.6]]);
        let labels = vec![0usize, 1];
        let par = compute_par(
            &[LabeledMap {
                map: &map,
                labels: &labels,
            }],
            2,
        )
        .unwrap();
        assert!(par.values.max_abs_diff(&map) < 1e-15);
        assert_eq!(par.support, vec![1, 1]);
    }

    #[test]
    fn par_of_uniform_map_is_key_class_frequency() {
        let t = 5;
        let map = Matrix::filled(t, t, 1.0 / t as f64);
        let labels = vec![0usize, 1, 1, 2, 1];
        let par = compute_par(
            &[LabeledMap {
                map: &map,
                labels: &labels,
            }],
            3,
        )
        .unwrap();
        for i in 0..3 {
            assert!((par.values.get(i, 0) - 1.0 / 5.0).abs() < 1e-12);
            assert!((par.values.get(i, 1) - 3.0 / 5.0).abs() < 1e-12);
            assert!((par.values.get(i, 2) - 1.0 / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn par_averages_across_utterances() {
        // hand-built 3-frame maps; expected PAR from per-query class masses
        let map_a = Matrix::from_rows(&[
            &[0.5, 0.25, 0.25],
            &[0.1, 0.8, 0.1],
            &[0.3, 0.3, 0.4],
        ]);
        let labels_a = vec![0usize, 1, 0];
        let map_b = Matrix::from_rows(&[&[1.0, 0.0], &[0.2, 0.8]]);
        let labels_b = vec![1usize, 0];
        let par = compute_par(
            &[
                LabeledMap {
                    map: &map_a,
                    labels: &labels_a,
                },
                LabeledMap {
                    map: &map_b,
                    labels: &labels_b,
                },
            ],
            2,
        )
        .unwrap();
        // class 0 queries: map_a row0 keys labeled [0,1,0] -> (0.75, 0.25);
        // map_a row2 -> (0.7, 0.3); map_b row1 keys labeled [1,0] -> (0.8, 0.2)
        let want_00 = (0.75 + 0.7 + 0.8) / 3.0;
        let want_01 = (0.25 + 0.3 + 0.2) / 3.0;
        assert!((par.values.get(0, 0) - want_00).abs() < 1e-12);
        assert!((par.values.get(0, 1) - want_01).abs() < 1e-12);
        // class 1 queries: map_a row1 -> (0.2, 0.8); map_b row0 -> (0.0, 1.0)
        assert!((par.values.get(1, 0) - (0.2 + 0.0) / 2.0).abs() < 1e-12);
        assert!((par.values.get(1, 1) - (0.8 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn par_rows_with_support_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 7;
        let scores = Matrix::<f64>::from_fn(t, t, |_, _| rng.gen_range(-2.0..2.0));
        let map = scores.softmax_rows();
        let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..4)).collect();
        let par = compute_par(
            &[LabeledMap {
                map: &map,
                labels: &labels,
            }],
            5,
        )
        .unwrap();
        for c in 0..5 {
            let sum: f64 = (0..5).map(|j| par.values.get(c, j)).sum();
            if par.support[c] > 0 {
                assert!((sum - 1.0).abs() < 1e-9, "row {c} sums to {sum}");
            } else {
                assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn par_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 6;
        let map = Matrix::<f64>::from_fn(t, t, |_, _| rng.gen_range(-1.0..1.0)).softmax_rows();
        let labels = vec![0usize, 1, 2, 0, 1, 2];
        let perm = [2usize, 0, 1]; // class c -> perm[c]
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let par_a = compute_par(
            &[LabeledMap {
                map: &map,
                labels: &labels,
            }],
            3,
        )
        .unwrap();
        let par_b = compute_par(
            &[LabeledMap {
                map: &map,
                labels: &relabeled,
            }],
            3,
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let a = par_a.values.get(i, j);
                let b = par_b.values.get(perm[i], perm[j]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_length_mismatch_rejected() {
        let map = Matrix::from_rows(&[&[1.0]]);
        let labels = vec![0usize, 1];
        assert!(matches!(
            compute_par(
                &[LabeledMap {
                    map: &map,
                    labels: &labels
                }],
                2
            ),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn symmetry_score_cases() {
        let symmetric = ParMatrix {
            values: Matrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]),
            class_names: vec!["class_0".into(), "class_1".into()],
            support: vec![1, 1],
        };
        assert_eq!(par_symmetry_score(&symmetric), 1.0);

        // a single nonzero off-diagonal entry p: |P-P^T|_1 = 2p over the
        // (i,j)/(j,i) pair while |P|_1 + |P^T|_1 = 2p, so the score is 0
        let single = ParMatrix {
            values: Matrix::from_rows(&[&[0.0, 0.3], &[0.0, 0.0]]),
            class_names: vec!["class_0".into(), "class_1".into()],
            support: vec![1, 1],
        };
        assert_eq!(par_symmetry_score(&single), 0.0);

        // column-constant pattern (vertical lines) with non-uniform columns
        let vertical = ParMatrix {
            values: Matrix::from_rows(&[&[0.8, 0.2], &[0.8, 0.2]]),
            class_names: vec!["class_0".into(), "class_1".into()],
            support: vec![1, 1],
        };
        assert!(par_symmetry_score(&vertical) < 1.0);
    }

    #[test]
    fn entropy_hand_cases() {
        assert_eq!(row_entropy(&[1.0, 0.0, 0.0]), 0.0);
        let uniform4 = [0.25; 4];
        assert!((row_entropy(&uniform4) - 4.0f64.ln()).abs() < 1e-12);
        let skew = [0.5, 0.25, 0.25];
        assert!((row_entropy(&skew) - 1.5 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_by_ln_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t = rng.gen_range(2..9);
            let map = Matrix::<f64>::from_fn(1, t, |_, _| rng.gen_range(-3.0..3.0)).softmax_rows();
            let h = row_entropy(map.row(0));
            assert!(h >= 0.0 && h <= (t as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn entropy_stats_aggregate_rows() {
        let one_hot = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let stats = attention_entropy(&[&one_hot]).unwrap();
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.rows, 2);

        let uniform = Matrix::filled(3, 4, 0.25);
        let stats = attention_entropy(&[&uniform]).unwrap();
        assert!((stats.mean - 4.0f64.ln()).abs() < 1e-12);
        assert!(stats.std < 1e-12);
    }

    #[test]
    fn non_stochastic_maps_rejected() {
        let bad = Matrix::from_rows(&[&[0.5, 0.2]]);
        assert!(matches!(attention_entropy(&[&bad]), Err(Error::Data(_))));
    }

    #[test]
    fn slope_report_shapes_and_init_values() {
        let cfg = EncoderConfig {
            num_layers: 3,
            num_heads: 2,
            d_model: 8,
            d_h: 4,
            ffn_dim: 16,
            num_phsa_layers: 2,
            ..EncoderConfig::default()
        };
        let params = EncoderParams::<Matrix<f64>>::init(&cfg).unwrap();
        let report = slope_report(&cfg, &params, |m| m.item().to_f64_lossy()).unwrap();
        assert_eq!(report.entries.len(), cfg.num_phsa_layers * cfg.num_heads);
        for (_, _, alpha_s, alpha_c) in report.entries {
            assert_eq!(alpha_s, 1.0);
            assert_eq!(alpha_c, 1.0);
        }

        let mut no_phsa = cfg;
        no_phsa.num_phsa_layers = 0;
        let params = EncoderParams::<Matrix<f64>>::init(&no_phsa).unwrap();
        assert!(matches!(
            slope_report(&no_phsa, &params, |m| m.item().to_f64_lossy()),
            Err(Error::Config(_))
        ));
    }
}
