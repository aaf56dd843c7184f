//! Runtime verification suite.
//!
//! Re-derives the algebraic claims behind the score variants on fresh
//! random draws, checks every gradient against central differences, and
//! validates the analysis pipeline against a literal transcription of the
//! class-attention definition. Everything runs in check-grade precision.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{compute_par, row_entropy, LabeledMap};
use crate::attention::{
    eval_full_dot_product, eval_head_forward, eval_score, similarity_term, score_with,
    ContentActivation, HeadParams, VariantId,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numeric::{grad_check, GradCheckReport, Matrix, Tape};
use crate::trainer::{classifier_logits, ClassifierConfig, ClassifierParams};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub max_grad_error: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub draws: usize,
    pub par_instances: usize,
    pub seed: u64,
    /// Test fixture: skews the PReLU backward to prove the suite fails on a
    /// corrupted gradient.
    pub corrupt_prelu_backward: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            draws: 100,
            par_instances: 50,
            seed: 20_26,
            corrupt_prelu_backward: None,
        }
    }
}

fn random_head(in_dim: usize, d_h: usize, rng: &mut ChaCha8Rng) -> HeadParams<Matrix<f64>> {
    let mut head = HeadParams::init(VariantId::M5, in_dim, d_h, rng);
    head.b_q = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.8..0.8));
    head.b_k = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.8..0.8));
    head.b_v = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.8..0.8));
    head.c = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.8..0.8));
    head.alpha_s = Matrix::scalar(rng.gen_range(0.2..1.8));
    head.alpha_c = Matrix::scalar(rng.gen_range(0.2..1.8));
    head
}

fn random_x(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))
}

/// Max post-softmax difference between the literal four-term biased product
/// and the M2 form, over random draws with a random key bias.
pub fn bias_removal_max_diff(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let d = rng.gen_range(2..7);
        let t = rng.gen_range(1..9);
        let head = random_head(d, d, &mut rng);
        let x = random_x(t, d, &mut rng);
        let full = eval_full_dot_product(&x, &head)?.softmax_rows();
        let m2 = eval_score(VariantId::M2, &x, &head)?.softmax_rows();
        worst = worst.max(full.max_abs_diff(&m2));
    }
    Ok(worst)
}

/// Max difference across the M5 -> M4 -> M3 -> M2 -> M1 reductions, each
/// step via the parameter substitution that collapses it.
pub fn reduction_chain_max_diff(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let d = rng.gen_range(2..7);
        let t = rng.gen_range(2..9);
        let x = random_x(t, d, &mut rng);
        let head = random_head(d, d, &mut rng);

        // (a) unit slopes turn M5 into M4
        let mut unit = head.clone();
        unit.alpha_s = Matrix::scalar(1.0);
        unit.alpha_c = Matrix::scalar(1.0);
        let m5 = eval_score(VariantId::M5, &x, &unit)?;
        let m4 = eval_score(VariantId::M4, &x, &unit)?;
        worst = worst.max(m5.max_abs_diff(&m4));

        // (b) with the swish removed, M4's content collapses into M3's
        // c := (W_C c^T)^T
        let m4_linear = {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let staged = head.stage(&mut tape);
            let s = score_with(
                &mut tape,
                VariantId::M4,
                xid,
                &staged,
                ContentActivation::Identity,
            )?;
            tape.value(s).clone()
        };
        let mut collapsed = head.clone();
        collapsed.c = head.w_c.matmul(&head.c.transpose())?.transpose();
        let m3 = eval_score(VariantId::M3, &x, &collapsed)?;
        worst = worst.max(m4_linear.max_abs_diff(&m3));

        // (c) c := (W_K b_Q^T)^T turns M3 into M2
        let mut keyed = head.clone();
        keyed.c = head.w_k.matmul(&head.b_q.transpose())?.transpose();
        let m3_keyed = eval_score(VariantId::M3, &x, &keyed)?;
        let m2 = eval_score(VariantId::M2, &x, &head)?;
        worst = worst.max(m3_keyed.max_abs_diff(&m2));

        // (d) zero query bias turns M2 into M1
        let mut unbiased = head.clone();
        unbiased.b_q = Matrix::zeros(1, d);
        let m2_zero = eval_score(VariantId::M2, &x, &unbiased)?;
        let m1 = eval_score(VariantId::M1, &x, &unbiased)?;
        worst = worst.max(m2_zero.max_abs_diff(&m1));
    }
    Ok(worst)
}

/// Row constancy of the content offset: for M3/M4/M5 the score minus the
/// (gated) similarity term must have identical rows. Returns the max row
/// spread observed.
pub fn content_row_constancy_max_spread(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let d = rng.gen_range(2..7);
        let t = rng.gen_range(2..9);
        let x = random_x(t, d, &mut rng);
        for variant in [VariantId::M3, VariantId::M4, VariantId::M5] {
            let mut head = random_head(d, d, &mut rng);
            if variant == VariantId::M3 {
                head.c = Matrix::from_fn(1, d, |_, _| rng.gen_range(-0.8..0.8));
            }
            let score = eval_score(variant, &x, &head)?;
            let sim_part = {
                let mut tape = Tape::new();
                let xid = tape.leaf(x.clone());
                let staged = head.stage(&mut tape);
                let sim = similarity_term(&mut tape, xid, &staged)?;
                let sim = if variant.trains_alpha() {
                    tape.prelu(sim, staged.alpha_s)?
                } else {
                    sim
                };
                tape.value(sim).clone()
            };
            let offset = score.sub(&sim_part)?;
            for j in 0..offset.cols() {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..offset.rows() {
                    lo = lo.min(offset.get(i, j));
                    hi = hi.max(offset.get(i, j));
                }
                worst = worst.max(hi - lo);
            }
        }
    }
    Ok(worst)
}

/// Permutation equivariance of the attention map for every variant:
/// permuting the input frames permutes the map on both axes. Exact up to
/// summation reorder in the softmax denominator, so the deviation sits at
/// the ulp level. Returns the max deviation observed.
pub fn permutation_equivariance_max_diff(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let d = rng.gen_range(2..7);
        let t = rng.gen_range(2..9);
        let x = random_x(t, d, &mut rng);
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let xp = Matrix::from_fn(t, d, |i, j| x.get(perm[i], j));
        for variant in VariantId::ALL {
            let head = random_head(d, d, &mut rng);
            let (_, map) = eval_head_forward(variant, &x, &head, true)?;
            let (_, map_p) = eval_head_forward(variant, &xp, &head, true)?;
            for i in 0..t {
                for j in 0..t {
                    let diff = (map_p.get(i, j) - map.get(perm[i], perm[j])).abs();
                    worst = worst.max(diff);
                }
            }
        }
    }
    Ok(worst)
}

/// The reference model for whole-model gradient checks: two layers (one
/// phonetic, one vanilla), two heads, d_h 8, so every trainable parameter
/// class is present.
pub fn reference_model_config() -> ClassifierConfig {
    ClassifierConfig {
        d_in: 10,
        num_classes: 5,
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_h: 8,
            ffn_dim: 32,
            num_phsa_layers: 1,
            variant_for_upper: VariantId::M2,
            use_abs_pe: true,
            scale_scores: true,
            seed: 0,
        },
    }
}

/// Central-difference check of every trainable tensor of the reference
/// model against the tape gradients of the training loss.
///
/// Inputs are re-drawn until every PReLU preactivation clears the kink by a
/// safe margin; the scan is deterministic.
pub fn model_grad_check(corrupt: Option<f64>) -> Result<GradCheckReport> {
    let t = 12;
    let base_cfg = reference_model_config();

    for attempt in 0..64u64 {
        let mut cfg = base_cfg.clone();
        cfg.encoder.seed = 4000 + attempt;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder.seed ^ 0xABCD);
        let mut params = ClassifierParams::<Matrix<f64>>::init(&cfg)?;
        for (i, layer) in params.encoder.layers.iter_mut().enumerate() {
            let variant = cfg.encoder.layer_variant(i);
            for head in &mut layer.attn.heads {
                if variant.trains_c() {
                    head.c = Matrix::from_fn(1, head.c.cols(), |_, _| rng.gen_range(-0.5..0.5));
                }
                if variant.trains_b_q() {
                    head.b_q = Matrix::from_fn(1, 8, |_, _| rng.gen_range(-0.5..0.5));
                }
                if variant.trains_alpha() {
                    head.alpha_s = Matrix::scalar(rng.gen_range(0.5..1.6));
                    head.alpha_c = Matrix::scalar(rng.gen_range(0.5..1.6));
                }
            }
        }
        let x = random_x(t, cfg.d_in, &mut rng);
        let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..cfg.num_classes)).collect();

        // probe the PReLU margin before spending time on differencing
        let margin = {
            let mut tape = Tape::new();
            let staged = params.stage(&mut tape);
            let xid = tape.leaf(x.clone());
            classifier_logits(&mut tape, &cfg, &staged, xid)?;
            tape.min_abs_prelu_input()
                .ok_or_else(|| Error::Config("model has no PReLU".to_string()))?
        };
        if margin < 1e-3 {
            continue;
        }

        let mut named = Vec::new();
        params.for_each_trainable(&cfg.encoder, |name, m| named.push((name, m.clone())));
        let template = params.clone();
        let cfg2 = cfg.clone();
        return grad_check(&named, 1e-5, move |tape, ids| {
            if let Some(skew) = corrupt {
                tape.set_prelu_backward_skew(skew);
            }
            let mut staged = template.stage(tape);
            let mut idx = 0;
            staged.for_each_trainable_mut(&cfg2.encoder, |_, slot| {
                *slot = ids[idx];
                idx += 1;
            });
            let xid = tape.leaf(x.clone());
            let logits = classifier_logits(tape, &cfg2, &staged, xid)?;
            tape.cross_entropy_mean(logits, &labels)
        });
    }
    Err(Error::Config(
        "no draw cleared the PReLU kink margin".to_string(),
    ))
}

/// Gradient checks of the individual primitives, away from the PReLU kink.
pub fn primitive_grad_check_max_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;

    let x = random_x(3, 5, &mut rng);
    let w = random_x(5, 4, &mut rng);
    let report = grad_check(
        &[("w".to_string(), w)],
        1e-5,
        move |tape, ids| {
            let xid = tape.leaf(x.clone());
            let h = tape.matmul(xid, ids[0])?;
            let y = tape.softmax_rows(h);
            Ok(tape.sum(y))
        },
    )?;
    worst = worst.max(report.max_rel_error);

    let x = random_x(3, 4, &mut rng);
    let report = grad_check(&[("x".to_string(), x)], 1e-5, |tape, ids| {
        let y = tape.swish(ids[0]);
        Ok(tape.sum(y))
    })?;
    worst = worst.max(report.max_rel_error);

    // strictly negative inputs keep finite differencing off the kink
    let x = Matrix::from_fn(2, 3, |_, _| -rng.gen_range(0.5..2.0));
    let alpha = Matrix::scalar(rng.gen_range(0.3..1.5));
    let report = grad_check(
        &[("x".to_string(), x), ("alpha".to_string(), alpha)],
        1e-5,
        |tape, ids| {
            let y = tape.prelu(ids[0], ids[1])?;
            Ok(tape.sum(y))
        },
    )?;
    worst = worst.max(report.max_rel_error);

    let x = random_x(3, 6, &mut rng);
    let gain = Matrix::from_fn(1, 6, |_, _| rng.gen_range(0.5..1.5));
    let bias = Matrix::from_fn(1, 6, |_, _| rng.gen_range(-0.5..0.5));
    let report = grad_check(
        &[
            ("x".to_string(), x),
            ("gain".to_string(), gain),
            ("bias".to_string(), bias),
        ],
        1e-5,
        |tape, ids| {
            let y = tape.layer_norm_rows(ids[0], ids[1], ids[2])?;
            Ok(tape.sum(y))
        },
    )?;
    worst = worst.max(report.max_rel_error);

    let logits = random_x(4, 3, &mut rng);
    let labels = vec![0usize, 2, 1, 0];
    let report = grad_check(&[("logits".to_string(), logits)], 1e-5, move |tape, ids| {
        tape.cross_entropy_mean(ids[0], &labels)
    })?;
    worst = worst.max(report.max_rel_error);

    Ok(worst)
}

/// Literal transcription of the class-attention definition: a double loop
/// over (query frame, key frame) pairs, kept independent of
/// [`compute_par`].
pub fn par_bruteforce(items: &[LabeledMap<'_>], num_classes: usize) -> (Matrix<f64>, Vec<u64>) {
    let mut acc = vec![vec![0.0f64; num_classes]; num_classes];
    let mut support = vec![0u64; num_classes];
    for item in items {
        for q in 0..item.map.rows() {
            support[item.labels[q]] += 1;
            for k in 0..item.map.cols() {
                acc[item.labels[q]][item.labels[k]] += item.map.get(q, k);
            }
        }
    }
    let values = Matrix::from_fn(num_classes, num_classes, |i, j| {
        if support[i] == 0 {
            0.0
        } else {
            acc[i][j] / support[i] as f64
        }
    });
    (values, support)
}

/// compute_par vs the brute-force oracle on random instances; returns
/// (max elementwise difference, max row-sum deviation on supported rows).
pub fn par_oracle_max_diff(instances: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_row_sum = 0.0f64;
    for _ in 0..instances {
        let num_classes = rng.gen_range(2..=5);
        let n_maps = rng.gen_range(1..=3);
        let mut maps = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n_maps {
            let t = rng.gen_range(2..=8);
            maps.push(random_x(t, t, &mut rng).softmax_rows());
            labels.push(
                (0..t)
                    .map(|_| rng.gen_range(0..num_classes))
                    .collect::<Vec<usize>>(),
            );
        }
        let items: Vec<LabeledMap<'_>> = maps
            .iter()
            .zip(labels.iter())
            .map(|(map, labels)| LabeledMap {
                map,
                labels: labels.as_slice(),
            })
            .collect();
        let par = compute_par(&items, num_classes)?;
        let (oracle, support) = par_bruteforce(&items, num_classes);
        worst = worst.max(par.values.max_abs_diff(&oracle));
        assert_eq!(par.support, support);
        for c in 0..num_classes {
            if par.support[c] > 0 {
                let sum: f64 = (0..num_classes).map(|j| par.values.get(c, j)).sum();
                worst_row_sum = worst_row_sum.max((sum - 1.0).abs());
            }
        }
    }
    Ok((worst, worst_row_sum))
}

/// Hand-checkable entropy values; returns the max deviation.
pub fn entropy_case_max_diff() -> f64 {
    let mut worst = (row_entropy(&[0.0, 1.0, 0.0]) - 0.0).abs();
    worst = worst.max((row_entropy(&[0.25; 4]) - 4.0f64.ln()).abs());
    worst = worst.max((row_entropy(&[0.5, 0.25, 0.25]) - 1.5 * 2.0f64.ln()).abs());
    worst
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

/// Runs the whole suite. Thresholds are fixed here, not configurable.
pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();

    let diff = bias_removal_max_diff(opts.draws, opts.seed)?;
    checks.push(check(
        "bias_removal_invariance",
        diff < 1e-12,
        format!("max post-softmax diff {diff:.3e} (tol 1e-12, {} draws)", opts.draws),
    ));

    let diff = reduction_chain_max_diff(opts.draws, opts.seed.wrapping_add(1))?;
    checks.push(check(
        "reduction_chain",
        diff < 1e-10,
        format!("max score diff {diff:.3e} (tol 1e-10, {} draws)", opts.draws),
    ));

    let spread = content_row_constancy_max_spread(opts.draws, opts.seed.wrapping_add(2))?;
    checks.push(check(
        "content_row_constancy",
        spread <= 1e-14,
        format!("max row spread {spread:.3e} (tol 1e-14)"),
    ));

    let diff = permutation_equivariance_max_diff(opts.draws, opts.seed.wrapping_add(3))?;
    checks.push(check(
        "permutation_equivariance",
        diff <= 1e-12,
        format!("max map diff {diff:.3e} (tol 1e-12)"),
    ));

    let primitive_err = primitive_grad_check_max_error(opts.seed.wrapping_add(4))?;
    checks.push(check(
        "primitive_gradients",
        primitive_err < 1e-6,
        format!("max rel error {primitive_err:.3e} (tol 1e-6)"),
    ));

    let model_report = model_grad_check(opts.corrupt_prelu_backward)?;
    checks.push(check(
        "model_gradients",
        model_report.max_rel_error < 1e-4,
        format!(
            "max rel error {:.3e} over {} parameters (tol 1e-4, worst {:?})",
            model_report.max_rel_error, model_report.params_checked, model_report.worst
        ),
    ));

    let (par_diff, row_sum_dev) = par_oracle_max_diff(opts.par_instances, opts.seed.wrapping_add(5))?;
    checks.push(check(
        "par_oracle_equivalence",
        par_diff < 1e-12 && row_sum_dev < 1e-9,
        format!(
            "max diff {par_diff:.3e} (tol 1e-12), row-sum dev {row_sum_dev:.3e} (tol 1e-9), {} instances",
            opts.par_instances
        ),
    ));

    let entropy_diff = entropy_case_max_diff();
    checks.push(check(
        "entropy_hand_cases",
        entropy_diff < 1e-12,
        format!("max diff {entropy_diff:.3e} (tol 1e-12)"),
    ));

    Ok(VerifyReport {
        checks,
        max_grad_error: primitive_err.max(model_report.max_rel_error),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_removal_holds() {
        assert!(bias_removal_max_diff(40, 1).unwrap() < 1e-12);
    }

    #[test]
    fn reduction_chain_holds() {
        assert!(reduction_chain_max_diff(40, 2).unwrap() < 1e-10);
    }

    #[test]
    fn row_constancy_holds() {
        assert!(content_row_constancy_max_spread(40, 3).unwrap() <= 1e-14);
    }

    #[test]
    fn equivariance_holds_at_ulp_level() {
        assert!(permutation_equivariance_max_diff(25, 4).unwrap() <= 1e-12);
    }

    #[test]
    fn par_oracle_agrees() {
        let (diff, row_dev) = par_oracle_max_diff(25, 5).unwrap();
        assert!(diff < 1e-12);
        assert!(row_dev < 1e-9);
    }

    #[test]
    fn corrupted_prelu_backward_is_caught() {
        let clean = model_grad_check(None).unwrap();
        assert!(clean.max_rel_error < 1e-4, "{clean:?}");
        let corrupted = model_grad_check(Some(0.05)).unwrap();
        assert!(
            corrupted.max_rel_error > 1e-3,
            "corruption went undetected: {corrupted:?}"
        );
    }
}
