//! Reverse-mode differentiation over matrix-level operations.
//!
//! A [`Tape`] records each primitive as it executes. [`Tape::backward`]
//! replays the record in exact reverse order, accumulating gradients into
//! per-value slots. Tapes are confined to one logical thread; values are
//! immutable once produced.

use crate::error::{Error, Result};
use crate::numeric::matrix::{swish, swish_derivative, Matrix};
use crate::numeric::scalar::{real, Scalar};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId),
    /// (MxN, 1xN): the row vector is added to every row.
    AddRowBroadcast(ValueId, ValueId),
    ScaleConst(ValueId),
    Transpose(ValueId),
    SoftmaxRows(ValueId),
    Swish(ValueId),
    /// alpha is a 1x1 tape value so its slope is itself differentiable.
    PRelu {
        x: ValueId,
        alpha: ValueId,
    },
    LayerNormRows {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
    },
    ConcatCols(Vec<ValueId>),
    Sum(ValueId),
    CrossEntropyMean {
        logits: ValueId,
        labels: Vec<usize>,
    },
}

struct Node<F> {
    value: Matrix<F>,
    op: Op,
    /// Constant factor for ScaleConst; unused otherwise.
    k: F,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
pub struct Gradients<F> {
    slots: Vec<Option<Matrix<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. the given value; zeros if it never
    /// contributed to the loss.
    pub fn get(&self, id: ValueId, shape_of: &Matrix<F>) -> Matrix<F> {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape_of.rows(), shape_of.cols()),
        }
    }

    pub fn try_get(&self, id: ValueId) -> Option<&Matrix<F>> {
        self.slots[id.0].as_ref()
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    prelu_backward_skew: F,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            prelu_backward_skew: F::zero(),
        }
    }

    /// Test support: biases every PReLU slope gradient by `skew` so the
    /// verification suite can prove its gradient checks catch a corrupted
    /// backward pass. Forward values are unaffected.
    #[doc(hidden)]
    pub fn set_prelu_backward_skew(&mut self, skew: F) {
        self.prelu_backward_skew = skew;
    }

    /// Smallest |x| feeding any recorded PReLU; used to keep finite
    /// differencing away from the kink.
    pub fn min_abs_prelu_input(&self) -> Option<F> {
        let mut best: Option<F> = None;
        for node in &self.nodes {
            if let Op::PRelu { x, .. } = &node.op {
                for &v in self.nodes[x.0].value.data() {
                    let a = v.abs();
                    best = Some(match best {
                        Some(b) if b <= a => b,
                        _ => a,
                    });
                }
            }
        }
        best
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Matrix<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix<F>, op: Op) -> ValueId {
        self.push_k(value, op, F::one())
    }

    fn push_k(&mut self, value: Matrix<F>, op: Op, k: F) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op, k });
        id
    }

    /// Inserts an input or parameter value.
    pub fn leaf(&mut self, value: Matrix<F>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row_broadcast(&mut self, a: ValueId, row: ValueId) -> Result<ValueId> {
        let value = self.value(a).add_row_broadcast(self.value(row))?;
        Ok(self.push(value, Op::AddRowBroadcast(a, row)))
    }

    pub fn scale(&mut self, a: ValueId, k: F) -> ValueId {
        let value = self.value(a).scale(k);
        self.push_k(value, Op::ScaleConst(a), k)
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn swish(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(swish);
        self.push(value, Op::Swish(a))
    }

    /// Elementwise PReLU with a trainable 1x1 slope.
    pub fn prelu(&mut self, x: ValueId, alpha: ValueId) -> Result<ValueId> {
        if self.value(alpha).shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: self.value(x).shape(),
                rhs: self.value(alpha).shape(),
            });
        }
        let a = self.value(alpha).item();
        let value = self
            .value(x)
            .map(|v| if v >= F::zero() { v } else { a * v });
        Ok(self.push(value, Op::PRelu { x, alpha }))
    }

    /// Per-row normalization with learned gain and bias (both 1xN).
    pub fn layer_norm_rows(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.value(id).shape() != (1, cols) {
                let _ = name;
                return Err(Error::ShapeMismatch {
                    op: "layer_norm_rows",
                    lhs: (rows, cols),
                    rhs: self.value(id).shape(),
                });
            }
        }
        let eps = real::<F>(LAYER_NORM_EPS);
        let g = self.value(gain).clone();
        let b = self.value(bias).clone();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let (mean, var) = row_moments(xm.row(i));
            let inv_std = F::one() / (var + eps).sqrt();
            for j in 0..cols {
                let xhat = (xm.get(i, j) - mean) * inv_std;
                out.set(i, j, xhat * g.get(0, j) + b.get(0, j));
            }
        }
        Ok(self.push(out, Op::LayerNormRows { x, gain, bias }))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mats: Vec<&Matrix<F>> = parts.iter().map(|&id| self.value(id)).collect();
        let value = Matrix::concat_cols(&mats)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of all entries, as a 1x1 value.
    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean per-frame cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy_mean(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let lm = self.value(logits);
        let (rows, cols) = lm.shape();
        if labels.len() != rows {
            return Err(Error::Data(format!(
                "label count {} does not match {} logit rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut total = F::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = lm.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            total += lse - row[label];
        }
        let value = Matrix::scalar(total / real::<F>(rows as f64));
        Ok(self.push(
            value,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Runs the backward pass from a 1x1 loss with seed gradient 1.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<F>> {
        self.backward_weighted(loss, F::one())
    }

    /// Backward pass seeded with an arbitrary scalar weight; used when a
    /// batch loss is a weighted sum of per-utterance losses.
    pub fn backward_weighted(&self, loss: ValueId, seed: F) -> Result<Gradients<F>> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: loss_value.shape(),
                rhs: (1, 1),
            });
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut slots: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Matrix::scalar(seed));

        // Tape order is a topological order, so one reverse sweep visits
        // every consumer before its producers.
        for idx in (0..=loss.0).rev() {
            let grad = match slots[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &grad, &mut slots)?;
            slots[idx] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(
        &self,
        idx: usize,
        grad: &Matrix<F>,
        slots: &mut [Option<Matrix<F>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = grad.matmul(&self.value(*b).transpose())?;
                let db = self.value(*a).transpose().matmul(grad)?;
                add_into(slots, *a, da)?;
                add_into(slots, *b, db)?;
            }
            Op::Add(a, b) => {
                add_into(slots, *a, grad.clone())?;
                add_into(slots, *b, grad.clone())?;
            }
            Op::AddRowBroadcast(a, row) => {
                add_into(slots, *a, grad.clone())?;
                add_into(slots, *row, grad.sum_rows())?;
            }
            Op::ScaleConst(a) => {
                add_into(slots, *a, grad.scale(node.k))?;
            }
            Op::Transpose(a) => {
                add_into(slots, *a, grad.transpose())?;
            }
            Op::SoftmaxRows(a) => {
                // dS = y ⊙ (g − <g, y>) per row, with y the softmax output.
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut ds = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let mut dot = F::zero();
                    for j in 0..cols {
                        dot += grad.get(i, j) * y.get(i, j);
                    }
                    for j in 0..cols {
                        ds.set(i, j, y.get(i, j) * (grad.get(i, j) - dot));
                    }
                }
                add_into(slots, *a, ds)?;
            }
            Op::Swish(a) => {
                let x = self.value(*a);
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    grad.get(i, j) * swish_derivative(x.get(i, j))
                });
                add_into(slots, *a, dx)?;
            }
            Op::PRelu { x, alpha } => {
                let xv = self.value(*x);
                let a = self.value(*alpha).item();
                let mut dalpha = F::zero();
                let dx = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
                    let v = xv.get(i, j);
                    if v >= F::zero() {
                        grad.get(i, j)
                    } else {
                        dalpha += grad.get(i, j) * v;
                        grad.get(i, j) * a
                    }
                });
                dalpha += self.prelu_backward_skew;
                add_into(slots, *x, dx)?;
                add_into(slots, *alpha, Matrix::scalar(dalpha))?;
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xm = self.value(*x);
                let g = self.value(*gain);
                let (rows, cols) = xm.shape();
                let n = real::<F>(cols as f64);
                let eps = real::<F>(LAYER_NORM_EPS);
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                for i in 0..rows {
                    let (mean, var) = row_moments(xm.row(i));
                    let inv_std = F::one() / (var + eps).sqrt();
                    // gp = grad ⊙ gain; the two row means below fold the
                    // mean/variance dependencies back into dx.
                    let mut gp_mean = F::zero();
                    let mut gpx_mean = F::zero();
                    let mut xhat = vec![F::zero(); cols];
                    let mut gp = vec![F::zero(); cols];
                    for j in 0..cols {
                        xhat[j] = (xm.get(i, j) - mean) * inv_std;
                        gp[j] = grad.get(i, j) * g.get(0, j);
                        gp_mean += gp[j];
                        gpx_mean += gp[j] * xhat[j];
                    }
                    gp_mean = gp_mean / n;
                    gpx_mean = gpx_mean / n;
                    for j in 0..cols {
                        dx.set(i, j, inv_std * (gp[j] - gp_mean - xhat[j] * gpx_mean));
                        dgain.set(0, j, dgain.get(0, j) + grad.get(i, j) * xhat[j]);
                        dbias.set(0, j, dbias.get(0, j) + grad.get(i, j));
                    }
                }
                add_into(slots, *x, dx)?;
                add_into(slots, *gain, dgain)?;
                add_into(slots, *bias, dbias)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let pm = self.value(part);
                    let (rows, cols) = pm.shape();
                    let dp =
                        Matrix::from_fn(rows, cols, |i, j| grad.get(i, offset + j));
                    offset += cols;
                    add_into(slots, part, dp)?;
                }
            }
            Op::Sum(a) => {
                let am = self.value(*a);
                let g = grad.item();
                add_into(slots, *a, Matrix::filled(am.rows(), am.cols(), g))?;
            }
            Op::CrossEntropyMean { logits, labels } => {
                let lm = self.value(*logits);
                let probs = lm.softmax_rows();
                let scale = grad.item() / real::<F>(lm.rows() as f64);
                let mut dl = probs.scale(scale);
                for (i, &label) in labels.iter().enumerate() {
                    dl.set(i, label, dl.get(i, label) - scale);
                }
                add_into(slots, *logits, dl)?;
            }
        }
        Ok(())
    }
}

fn row_moments<F: Scalar>(row: &[F]) -> (F, F) {
    let n = real::<F>(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, var)
}

fn add_into<F: Scalar>(
    slots: &mut [Option<Matrix<F>>],
    id: ValueId,
    delta: Matrix<F>,
) -> Result<()> {
    match &mut slots[id.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_via_matmul_has_gradient_two_w() {
        // f(w) = w^2 at w = 3: analytic gradient 6.
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Matrix::scalar(3.0));
        let f = tape.matmul(w, w).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.try_get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn prelu_gradient_splits_by_sign() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::from_rows(&[&[2.0, -3.0]]));
        let alpha = tape.leaf(Matrix::scalar(0.5));
        let y = tape.prelu(x, alpha).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let dx = grads.try_get(x).unwrap();
        assert_eq!(dx.get(0, 0), 1.0);
        assert_eq!(dx.get(0, 1), 0.5);
        // alpha only sees the negative entry: d/dalpha = x = -3.
        assert_eq!(grads.try_get(alpha).unwrap().item(), -3.0);
    }

    #[test]
    fn prelu_at_zero_uses_nonnegative_branch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::from_rows(&[&[0.0]]));
        let alpha = tape.leaf(Matrix::scalar(0.7));
        let y = tape.prelu(x, alpha).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.try_get(x).unwrap().item(), 1.0);
        assert_eq!(grads.try_get(alpha).unwrap().item(), 0.0);
    }

    #[test]
    fn cross_entropy_matches_log_softmax_by_hand() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Matrix::from_rows(&[&[1.0, 2.0], &[0.5, -0.5]]));
        let loss = tape.cross_entropy_mean(logits, &[1, 0]).unwrap();
        let want = {
            let l1 = (1.0f64.exp() + 2.0f64.exp()).ln() - 2.0;
            let l2 = (0.5f64.exp() + (-0.5f64).exp()).ln() - 0.5;
            (l1 + l2) / 2.0
        };
        assert!((tape.value(loss).item() - want).abs() < 1e-14);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // f = sum(x) + sum(x): dx = 2 everywhere.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::from_rows(&[&[1.0, 2.0]]));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let f = tape.add(s1, s2).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.try_get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
