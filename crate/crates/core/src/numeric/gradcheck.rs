//! Central-difference gradient verification.
//!
//! The checker is the independent oracle for every differentiable primitive
//! and for whole-model losses: it rebuilds the forward computation from
//! scratch for each perturbed parameter and never reuses the tape under test.

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::scalar::{real, Precision, Scalar};
use crate::numeric::tape::{Tape, ValueId};

/// Outcome of one gradient check run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over parameters of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (tensor name, flat index) of the worst parameter.
    pub worst: Option<(String, usize)>,
    pub params_checked: usize,
}

/// Verifies tape gradients of a scalar-valued function against central
/// finite differences, (f(p+eps) - f(p-eps)) / 2 eps.
///
/// `build` must construct the same computation every time it is called,
/// given the parameter leaves in the order of `named_params`.
pub fn grad_check<F, B>(
    named_params: &[(String, Matrix<F>)],
    eps: f64,
    mut build: B,
) -> Result<GradCheckReport>
where
    F: Scalar,
    B: FnMut(&mut Tape<F>, &[ValueId]) -> Result<ValueId>,
{
    if F::PRECISION != Precision::Check {
        return Err(Error::CheckGradeRequired);
    }
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::BadEpsilon(eps));
    }

    let eval = |params: &[(String, Matrix<F>)],
                build: &mut B|
     -> Result<(F, Tape<F>, Vec<ValueId>, ValueId)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = params.iter().map(|(_, m)| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let value = tape.value(out);
        if value.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                lhs: value.shape(),
                rhs: (1, 1),
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        Ok((value.item(), tape, ids, out))
    };

    let (_, tape, ids, out) = eval(named_params, &mut build)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix<F>> = named_params
        .iter()
        .zip(ids.iter())
        .map(|((_, m), &id)| grads.get(id, m))
        .collect();

    let mut work: Vec<(String, Matrix<F>)> = named_params.to_vec();
    let step = real::<F>(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        params_checked: 0,
    };

    for t in 0..work.len() {
        for k in 0..work[t].1.data().len() {
            let orig = work[t].1.data()[k];

            work[t].1.data_mut()[k] = orig + step;
            let (f_plus, ..) = eval(&work, &mut build)?;
            work[t].1.data_mut()[k] = orig - step;
            let (f_minus, ..) = eval(&work, &mut build)?;
            work[t].1.data_mut()[k] = orig;

            let numeric = (f_plus - f_minus).to_f64_lossy() / (2.0 * eps);
            let a = analytic[t].data()[k].to_f64_lossy();
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            report.params_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((work[t].0.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn named(name: &str, m: Matrix<f64>) -> (String, Matrix<f64>) {
        (name.to_string(), m)
    }

    #[test]
    fn square_function_checks_cleanly() {
        let params = vec![named("w", Matrix::scalar(3.0))];
        let report = grad_check(&params, 1e-5, |tape, ids| tape.matmul(ids[0], ids[0]))
            .expect("grad check");
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn softmax_matmul_chain_below_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let w = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let params = vec![named("w", w)];
        let report = grad_check(&params, 1e-5, move |tape, ids| {
            let xid = tape.leaf(x.clone());
            let s = tape.matmul(xid, ids[0])?;
            let y = tape.softmax_rows(s);
            Ok(tape.sum(y))
        })
        .expect("grad check");
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn prelu_away_from_kink_below_1e6() {
        // strictly negative inputs keep the central difference off the kink
        let x = Matrix::from_rows(&[&[-2.0, -0.5, -1.25]]);
        let params = vec![
            named("x", x),
            named("alpha", Matrix::scalar(0.8)),
        ];
        let report = grad_check(&params, 1e-5, |tape, ids| {
            let y = tape.prelu(ids[0], ids[1])?;
            Ok(tape.sum(y))
        })
        .expect("grad check");
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn layer_norm_below_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_fn(3, 6, |_, _| rng.gen_range(-1.5..1.5));
        let gain = Matrix::from_fn(1, 6, |_, _| rng.gen_range(0.5..1.5));
        let bias = Matrix::from_fn(1, 6, |_, _| rng.gen_range(-0.5..0.5));
        let params = vec![named("x", x), named("gain", gain), named("bias", bias)];
        let report = grad_check(&params, 1e-5, |tape, ids| {
            let y = tape.layer_norm_rows(ids[0], ids[1], ids[2])?;
            Ok(tape.sum(y))
        })
        .expect("grad check");
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn train_grade_is_rejected() {
        let params = vec![("w".to_string(), Matrix::<f32>::scalar(1.0))];
        let err = grad_check(&params, 1e-5, |tape, ids| tape.matmul(ids[0], ids[0]));
        assert!(matches!(err, Err(Error::CheckGradeRequired)));
    }

    #[test]
    fn epsilon_bounds_enforced() {
        let params = vec![named("w", Matrix::scalar(1.0))];
        let err = grad_check(&params, 1e-2, |tape, ids| tape.matmul(ids[0], ids[0]));
        assert!(matches!(err, Err(Error::BadEpsilon(_))));
    }
}
