//! Attention score variants and multi-head attention.
//!
//! The score function comes in five forms. M2 is the vanilla
//! dot product written with the key bias folded away,
//!
//! ```text
//!   M1: (XWq)(XWk)^T
//!   M2: (XWq)(XWk)^T + ((XWk) bq^T)^T
//!   M3: (XWq)(XWk)^T + (X c^T)^T
//!   M4: (XWq)(XWk)^T + (swish(XWc) c^T)^T
//!   M5: prelu_s((XWq)(XWk)^T) + prelu_c((swish(XWc) c^T))^T
//! ```
//!
//! and M5 is the phonetic form: the first term scores the similarity of a
//! query/key pair, the second scores each key frame's own content and is
//! broadcast down every query row. The PReLU slopes `alpha_s`/`alpha_c`
//! let training rebalance the two terms independently.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{real, Matrix, Scalar, Tape, ValueId};

/// Which score function a head computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantId {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl VariantId {
    pub const ALL: [VariantId; 5] = [
        VariantId::M1,
        VariantId::M2,
        VariantId::M3,
        VariantId::M4,
        VariantId::M5,
    ];

    pub fn trains_b_q(self) -> bool {
        self == VariantId::M2
    }

    pub fn trains_c(self) -> bool {
        matches!(self, VariantId::M3 | VariantId::M4 | VariantId::M5)
    }

    pub fn trains_w_c(self) -> bool {
        matches!(self, VariantId::M4 | VariantId::M5)
    }

    pub fn trains_alpha(self) -> bool {
        self == VariantId::M5
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(VariantId::M1),
            "M2" => Ok(VariantId::M2),
            "M3" => Ok(VariantId::M3),
            "M4" => Ok(VariantId::M4),
            "M5" => Ok(VariantId::M5),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected M1..M5)"
            ))),
        }
    }
}

/// All symbols of one attention head, generic over the storage so the same
/// struct describes both in-memory tensors (`HeadParams<Matrix<F>>`) and
/// values staged on a tape (`HeadParams<ValueId>`).
///
/// Projections are `in_dim x d_h`; row vectors are `1 x d_h`; the PReLU
/// slopes are 1x1. `b_k` exists only for the fully biased reference product
/// and is never trained.
#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub b_q: T,
    pub b_k: T,
    pub b_v: T,
    pub w_c: T,
    pub c: T,
    pub alpha_s: T,
    pub alpha_c: T,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            b_q: f(&self.b_q),
            b_k: f(&self.b_k),
            b_v: f(&self.b_v),
            w_c: f(&self.w_c),
            c: f(&self.c),
            alpha_s: f(&self.alpha_s),
            alpha_c: f(&self.alpha_c),
        }
    }

    /// Every stored field, for checkpointing.
    pub fn for_each(&self, mut f: impl FnMut(&'static str, &T)) {
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        f("w_v", &self.w_v);
        f("b_q", &self.b_q);
        f("b_k", &self.b_k);
        f("b_v", &self.b_v);
        f("w_c", &self.w_c);
        f("c", &self.c);
        f("alpha_s", &self.alpha_s);
        f("alpha_c", &self.alpha_c);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut T)) {
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        f("w_v", &mut self.w_v);
        f("b_q", &mut self.b_q);
        f("b_k", &mut self.b_k);
        f("b_v", &mut self.b_v);
        f("w_c", &mut self.w_c);
        f("c", &mut self.c);
        f("alpha_s", &mut self.alpha_s);
        f("alpha_c", &mut self.alpha_c);
    }

    /// Fields the given variant actually trains. The value path always
    /// trains; the score path depends on the variant.
    pub fn for_each_trainable(&self, variant: VariantId, mut f: impl FnMut(&'static str, &T)) {
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        if variant.trains_b_q() {
            f("b_q", &self.b_q);
        }
        if variant.trains_w_c() {
            f("w_c", &self.w_c);
        }
        if variant.trains_c() {
            f("c", &self.c);
        }
        if variant.trains_alpha() {
            f("alpha_s", &self.alpha_s);
            f("alpha_c", &self.alpha_c);
        }
        f("w_v", &self.w_v);
        f("b_v", &self.b_v);
    }

    /// Mutable view of the trainable fields, in [`Self::for_each_trainable`]
    /// order.
    pub fn for_each_trainable_mut(
        &mut self,
        variant: VariantId,
        mut f: impl FnMut(&'static str, &mut T),
    ) {
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        if variant.trains_b_q() {
            f("b_q", &mut self.b_q);
        }
        if variant.trains_w_c() {
            f("w_c", &mut self.w_c);
        }
        if variant.trains_c() {
            f("c", &mut self.c);
        }
        if variant.trains_alpha() {
            f("alpha_s", &mut self.alpha_s);
            f("alpha_c", &mut self.alpha_c);
        }
        f("w_v", &mut self.w_v);
        f("b_v", &mut self.b_v);
    }
}

impl<F: Scalar> HeadParams<Matrix<F>> {
    /// Uniform +-sqrt(6/(fan_in+fan_out)) for the projections; zero biases
    /// and content vector; unit PReLU slopes.
    ///
    /// The content bias `c` multiplies `swish(X W_C)` for M4/M5 but the raw
    /// input for M3, so its width follows the variant.
    pub fn init(variant: VariantId, in_dim: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let c_width = if variant == VariantId::M3 { in_dim } else { d_h };
        HeadParams {
            w_q: xavier(in_dim, d_h, rng),
            w_k: xavier(in_dim, d_h, rng),
            w_v: xavier(in_dim, d_h, rng),
            b_q: Matrix::zeros(1, d_h),
            b_k: Matrix::zeros(1, d_h),
            b_v: Matrix::zeros(1, d_h),
            w_c: xavier(in_dim, d_h, rng),
            c: Matrix::zeros(1, c_width),
            alpha_s: Matrix::scalar(F::one()),
            alpha_c: Matrix::scalar(F::one()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> HeadParams<ValueId> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

pub fn xavier<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| real(rng.gen_range(-bound..bound)))
}

/// Multi-head parameters: per-head projections from the full model width,
/// plus the output projection over the concatenated head outputs.
#[derive(Clone, Debug)]
pub struct MultiHeadParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub w_o: T,
    pub b_o: T,
}

impl<T> MultiHeadParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MultiHeadParams<U> {
        MultiHeadParams {
            heads: self.heads.iter().map(|h| h.map(&mut f)).collect(),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
        }
    }
}

impl<F: Scalar> MultiHeadParams<Matrix<F>> {
    pub fn init(
        variant: VariantId,
        d_model: usize,
        num_heads: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MultiHeadParams {
            heads: (0..num_heads)
                .map(|_| HeadParams::init(variant, d_model, d_h, rng))
                .collect(),
            w_o: xavier(d_model, d_model, rng),
            b_o: Matrix::zeros(1, d_model),
        }
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> MultiHeadParams<ValueId> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

/// Non-linearity applied inside the content term. `Identity` exists so the
/// M4 -> M3 reduction can be exercised directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContentActivation {
    Swish,
    Identity,
}

fn check_input<F: Scalar>(tape: &Tape<F>, x: ValueId, p: &HeadParams<ValueId>) -> Result<()> {
    let x_shape = tape.value(x).shape();
    let w_shape = tape.value(p.w_q).shape();
    if x_shape.1 != w_shape.0 {
        return Err(Error::ShapeMismatch {
            op: "attention score",
            lhs: x_shape,
            rhs: w_shape,
        });
    }
    Ok(())
}

/// The similarity term (XWq)(XWk)^T, before any PReLU.
pub fn similarity_term<F: Scalar>(
    tape: &mut Tape<F>,
    x: ValueId,
    p: &HeadParams<ValueId>,
) -> Result<ValueId> {
    check_input(tape, x, p)?;
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let kt = tape.transpose(k);
    tape.matmul(q, kt)
}

/// The content term as a 1xT row: one score per key frame, identical for
/// every query. M1 has no content term and yields zeros.
pub fn content_term<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &HeadParams<ValueId>,
) -> Result<ValueId> {
    content_term_with(tape, variant, x, p, ContentActivation::Swish)
}

pub(crate) fn content_term_with<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &HeadParams<ValueId>,
    act: ContentActivation,
) -> Result<ValueId> {
    check_input(tape, x, p)?;
    let t = tape.value(x).rows();
    let col = match variant {
        VariantId::M1 => {
            let zeros = tape.leaf(Matrix::zeros(t, 1));
            zeros
        }
        VariantId::M2 => {
            let k = tape.matmul(x, p.w_k)?;
            let bqt = tape.transpose(p.b_q);
            tape.matmul(k, bqt)?
        }
        VariantId::M3 => {
            let ct = tape.transpose(p.c);
            tape.matmul(x, ct)?
        }
        VariantId::M4 | VariantId::M5 => {
            let h = tape.matmul(x, p.w_c)?;
            let h = match act {
                ContentActivation::Swish => tape.swish(h),
                ContentActivation::Identity => h,
            };
            let ct = tape.transpose(p.c);
            let col = tape.matmul(h, ct)?;
            if variant == VariantId::M5 {
                // gate the Tx1 column before the broadcast; elementwise, so
                // equal to gating after
                tape.prelu(col, p.alpha_c)?
            } else {
                col
            }
        }
    };
    Ok(tape.transpose(col))
}

/// Pre-softmax scores for the requested variant.
pub fn score<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &HeadParams<ValueId>,
) -> Result<ValueId> {
    score_with(tape, variant, x, p, ContentActivation::Swish)
}

pub(crate) fn score_with<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &HeadParams<ValueId>,
    act: ContentActivation,
) -> Result<ValueId> {
    let sim = similarity_term(tape, x, p)?;
    let sim = if variant.trains_alpha() {
        tape.prelu(sim, p.alpha_s)?
    } else {
        sim
    };
    if variant == VariantId::M1 {
        return Ok(sim);
    }
    let content = content_term_with(tape, variant, x, p, act)?;
    tape.add_row_broadcast(sim, content)
}

/// The literal four-term product (XWq + bq)(XWk + bk)^T. Exists to verify
/// that the key bias drops out after softmax.
pub fn full_dot_product_with_biases<F: Scalar>(
    tape: &mut Tape<F>,
    x: ValueId,
    p: &HeadParams<ValueId>,
) -> Result<ValueId> {
    check_input(tape, x, p)?;
    let xq = tape.matmul(x, p.w_q)?;
    let q = tape.add_row_broadcast(xq, p.b_q)?;
    let xk = tape.matmul(x, p.w_k)?;
    let k = tape.add_row_broadcast(xk, p.b_k)?;
    let kt = tape.transpose(k);
    tape.matmul(q, kt)
}

/// One head end to end: scores (optionally 1/sqrt(d_h)-scaled), row softmax,
/// weighted value sum. Returns (output, attention map).
pub fn attention_head_forward<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &HeadParams<ValueId>,
    scale: bool,
) -> Result<(ValueId, ValueId)> {
    let s = score(tape, variant, x, p)?;
    let map = scaled_softmax(tape, s, p, scale);
    let xv = tape.matmul(x, p.w_v)?;
    let v = tape.add_row_broadcast(xv, p.b_v)?;
    let out = tape.matmul(map, v)?;
    Ok((out, map))
}

fn scaled_softmax<F: Scalar>(
    tape: &mut Tape<F>,
    s: ValueId,
    p: &HeadParams<ValueId>,
    scale: bool,
) -> ValueId {
    // scaling covers the whole variant score, content term included, so a
    // phonetic head stays a drop-in replacement for a vanilla one
    let s = if scale {
        let d_h = tape.value(p.w_q).shape().1;
        tape.scale(s, real::<F>(1.0 / (d_h as f64).sqrt()))
    } else {
        s
    };
    tape.softmax_rows(s)
}

/// Multi-head attention over the full model width: concatenated head
/// outputs, projected by `w_o` and shifted by `b_o`. Returns the projected
/// output and one attention map per head.
pub fn multi_head_forward<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &MultiHeadParams<ValueId>,
    scale: bool,
) -> Result<(ValueId, Vec<ValueId>)> {
    multi_head_forward_ablated(tape, variant, x, p, scale, None)
}

/// Which score term to zero out when replaying a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermDrop {
    Similarity,
    Content,
}

impl FromStr for TermDrop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "similarity" => Ok(TermDrop::Similarity),
            "content" => Ok(TermDrop::Content),
            other => Err(Error::Config(format!(
                "unknown term {other:?} (expected similarity or content)"
            ))),
        }
    }
}

pub(crate) fn multi_head_forward_ablated<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &MultiHeadParams<ValueId>,
    scale: bool,
    drop: Option<TermDrop>,
) -> Result<(ValueId, Vec<ValueId>)> {
    let d_model = tape.value(x).shape().1;
    let head_width: usize = p
        .heads
        .iter()
        .map(|h| tape.value(h.w_q).shape().1)
        .sum();
    if head_width != d_model {
        return Err(Error::ShapeMismatch {
            op: "multi_head_forward",
            lhs: (tape.value(x).shape().0, d_model),
            rhs: (1, head_width),
        });
    }

    let mut outputs = Vec::with_capacity(p.heads.len());
    let mut maps = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let (out, map) = match drop {
            None => attention_head_forward(tape, variant, x, head, scale)?,
            Some(term) => ablated_head_forward(tape, variant, x, head, scale, term)?,
        };
        outputs.push(out);
        maps.push(map);
    }
    let concat = tape.concat_cols(&outputs)?;
    let projected = tape.matmul(concat, p.w_o)?;
    let out = tape.add_row_broadcast(projected, p.b_o)?;
    Ok((out, maps))
}

fn ablated_head_forward<F: Scalar>(
    tape: &mut Tape<F>,
    variant: VariantId,
    x: ValueId,
    p: &HeadParams<ValueId>,
    scale: bool,
    drop: TermDrop,
) -> Result<(ValueId, ValueId)> {
    let t = tape.value(x).rows();
    let s = match drop {
        TermDrop::Content => {
            let sim = similarity_term(tape, x, p)?;
            if variant.trains_alpha() {
                tape.prelu(sim, p.alpha_s)?
            } else {
                sim
            }
        }
        TermDrop::Similarity => {
            let zeros = tape.leaf(Matrix::zeros(t, t));
            let content = content_term(tape, variant, x, p)?;
            tape.add_row_broadcast(zeros, content)?
        }
    };
    let map = scaled_softmax(tape, s, p, scale);
    let xv = tape.matmul(x, p.w_v)?;
    let v = tape.add_row_broadcast(xv, p.b_v)?;
    let out = tape.matmul(map, v)?;
    Ok((out, map))
}

/// Eager score evaluation on a throwaway tape.
pub fn eval_score<F: Scalar>(
    variant: VariantId,
    x: &Matrix<F>,
    p: &HeadParams<Matrix<F>>,
) -> Result<Matrix<F>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let pid = p.stage(&mut tape);
    let s = score(&mut tape, variant, xid, &pid)?;
    Ok(tape.value(s).clone())
}

/// Eager single-head forward; returns (output, map).
pub fn eval_head_forward<F: Scalar>(
    variant: VariantId,
    x: &Matrix<F>,
    p: &HeadParams<Matrix<F>>,
    scale: bool,
) -> Result<(Matrix<F>, Matrix<F>)> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let pid = p.stage(&mut tape);
    let (out, map) = attention_head_forward(&mut tape, variant, xid, &pid, scale)?;
    Ok((tape.value(out).clone(), tape.value(map).clone()))
}

/// Eager content term (1xT).
pub fn eval_content_term<F: Scalar>(
    variant: VariantId,
    x: &Matrix<F>,
    p: &HeadParams<Matrix<F>>,
) -> Result<Matrix<F>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let pid = p.stage(&mut tape);
    let c = content_term(&mut tape, variant, xid, &pid)?;
    Ok(tape.value(c).clone())
}

/// Eager four-term reference product.
pub fn eval_full_dot_product<F: Scalar>(
    x: &Matrix<F>,
    p: &HeadParams<Matrix<F>>,
) -> Result<Matrix<F>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let pid = p.stage(&mut tape);
    let s = full_dot_product_with_biases(&mut tape, xid, &pid)?;
    Ok(tape.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, swish};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_1d(w_q: f64, w_k: f64) -> HeadParams<Matrix<f64>> {
        HeadParams {
            w_q: Matrix::scalar(w_q),
            w_k: Matrix::scalar(w_k),
            w_v: Matrix::scalar(1.0),
            b_q: Matrix::scalar(0.0),
            b_k: Matrix::scalar(0.0),
            b_v: Matrix::scalar(0.0),
            w_c: Matrix::scalar(1.0),
            c: Matrix::scalar(0.0),
            alpha_s: Matrix::scalar(1.0),
            alpha_c: Matrix::scalar(1.0),
        }
    }

    fn random_head(in_dim: usize, d_h: usize, seed: u64) -> HeadParams<Matrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = HeadParams::init(VariantId::M5, in_dim, d_h, &mut rng);
        // populate the zero-initialized fields so every term is live
        head.b_q = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.5..0.5));
        head.b_k = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.5..0.5));
        head.b_v = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.5..0.5));
        head.c = Matrix::from_fn(1, d_h, |_, _| rng.gen_range(-0.5..0.5));
        head.alpha_s = Matrix::scalar(rng.gen_range(0.3..1.7));
        head.alpha_c = Matrix::scalar(rng.gen_range(0.3..1.7));
        head
    }

    fn random_x(t: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn m1_scalar_case_by_hand() {
        // d_h=1, X=[[1],[2]], Wq=2, Wk=3 -> [[6,12],[12,24]]
        let p = head_1d(2.0, 3.0);
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let s = eval_score(VariantId::M1, &x, &p).unwrap();
        assert_eq!(s, Matrix::from_rows(&[&[6.0, 12.0], &[12.0, 24.0]]));
    }

    #[test]
    fn m2_adds_column_content_offset() {
        // content = (XWk bq^T)^T = [3, 6], broadcast over rows of M1
        let mut p = head_1d(2.0, 3.0);
        p.b_q = Matrix::scalar(1.0);
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let s = eval_score(VariantId::M2, &x, &p).unwrap();
        assert_eq!(s, Matrix::from_rows(&[&[9.0, 18.0], &[15.0, 30.0]]));
    }

    #[test]
    fn m5_scalar_case_composes_swish_and_prelu() {
        let mut p = head_1d(1.0, 1.0);
        p.c = Matrix::scalar(1.0);
        p.alpha_s = Matrix::scalar(0.5);
        let x = Matrix::from_rows(&[&[1.0], &[-1.0]]);
        let s = eval_score(VariantId::M5, &x, &p).unwrap();
        let phi1 = swish(1.0);
        let phim1 = swish(-1.0);
        let want = Matrix::from_rows(&[
            &[1.0 + phi1, -0.5 + phim1],
            &[-0.5 + phi1, 1.0 + phim1],
        ]);
        assert!(s.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn m5_with_unit_slopes_equals_m4() {
        let mut p = random_head(4, 4, 3);
        p.alpha_s = Matrix::scalar(1.0);
        p.alpha_c = Matrix::scalar(1.0);
        let x = random_x(5, 4, 4);
        let m5 = eval_score(VariantId::M5, &x, &p).unwrap();
        let m4 = eval_score(VariantId::M4, &x, &p).unwrap();
        assert_eq!(m5, m4);
    }

    #[test]
    fn full_product_matches_m2_after_softmax() {
        let p = random_head(6, 6, 9);
        let x = random_x(5, 6, 10);
        let full = eval_full_dot_product(&x, &p).unwrap().softmax_rows();
        let m2 = eval_score(VariantId::M2, &x, &p).unwrap().softmax_rows();
        assert!(full.max_abs_diff(&m2) < 1e-12);
    }

    #[test]
    fn full_product_equals_m2_exactly_when_bk_zero() {
        let mut p = random_head(4, 4, 12);
        p.b_k = Matrix::zeros(1, 4);
        let x = random_x(3, 4, 13);
        let full = eval_full_dot_product(&x, &p).unwrap();
        let m2 = eval_score(VariantId::M2, &x, &p).unwrap();
        assert!(full.max_abs_diff(&m2) < 1e-12);
    }

    #[test]
    fn degenerate_single_frame_map_is_one() {
        let p = random_head(4, 4, 20);
        let x = random_x(1, 4, 21);
        for variant in VariantId::ALL {
            let (_, map) = eval_head_forward(variant, &x, &p, true).unwrap();
            assert_eq!(map.shape(), (1, 1));
            assert!((map.item() - 1.0).abs() < 1e-15);
        }
        let full = eval_full_dot_product(&x, &p).unwrap().softmax_rows();
        assert_eq!(full.item(), 1.0);
    }

    #[test]
    fn identical_frames_give_uniform_map() {
        let p = random_head(4, 4, 30);
        let row = [0.3, -0.7, 1.1, 0.2];
        let x = Matrix::from_rows(&[&row, &row, &row, &row, &row]);
        let (_, map) = eval_head_forward(VariantId::M5, &x, &p, true).unwrap();
        let t = 5.0;
        for i in 0..5 {
            for j in 0..5 {
                assert!((map.get(i, j) - 1.0 / t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn content_term_zero_when_c_zero() {
        let mut p = random_head(4, 4, 40);
        p.c = Matrix::zeros(1, 4);
        let x = random_x(6, 4, 41);
        let ct = eval_content_term(VariantId::M5, &x, &p).unwrap();
        assert_eq!(ct.shape(), (1, 6));
        assert!(ct.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn content_plus_similarity_reconstructs_score() {
        let p = random_head(5, 5, 50);
        let x = random_x(4, 5, 51);
        for variant in [VariantId::M2, VariantId::M3, VariantId::M4, VariantId::M5] {
            let s = eval_score(variant, &x, &p).unwrap();
            let ct = eval_content_term(variant, &x, &p).unwrap();
            // rebuild: (psi_s applied) similarity + broadcast content
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let pid = p.stage(&mut tape);
            let sim = similarity_term(&mut tape, xid, &pid).unwrap();
            let sim = if variant.trains_alpha() {
                tape.prelu(sim, pid.alpha_s).unwrap()
            } else {
                sim
            };
            let rebuilt = tape
                .value(sim)
                .add_row_broadcast(&ct)
                .unwrap();
            assert_eq!(s, rebuilt, "variant {variant}");
        }
    }

    #[test]
    fn content_term_is_position_free() {
        let p = random_head(4, 4, 60);
        let x = random_x(5, 4, 61);
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Matrix::from_fn(5, 4, |i, j| x.get(perm[i], j));
        let ct = eval_content_term(VariantId::M5, &x, &p).unwrap();
        let ctp = eval_content_term(VariantId::M5, &xp, &p).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(ctp.get(0, i), ct.get(0, src));
        }
    }

    #[test]
    fn similarity_matrix_symmetric_when_wq_equals_wk() {
        let mut p = random_head(4, 4, 70);
        p.w_k = p.w_q.clone();
        let x = random_x(6, 4, 71);
        let s = eval_score(VariantId::M1, &x, &p).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }

    #[test]
    fn single_head_mha_with_identity_projection_matches_head() {
        let head = random_head(4, 4, 80);
        let x = random_x(5, 4, 81);
        let (head_out, head_map) = eval_head_forward(VariantId::M2, &x, &head, true).unwrap();

        let mhp = MultiHeadParams {
            heads: vec![head],
            w_o: Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 }),
            b_o: Matrix::zeros(1, 4),
        };
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let pid = mhp.stage(&mut tape);
        let (out, maps) = multi_head_forward(&mut tape, VariantId::M2, xid, &pid, true).unwrap();
        assert!(tape.value(out).max_abs_diff(&head_out) < 1e-12);
        assert!(tape.value(maps[0]).max_abs_diff(&head_map) < 1e-12);
    }

    #[test]
    fn duplicate_heads_with_averaging_projection_reproduce_one_head() {
        // two identical d_model=8 heads; w_o averages the duplicated blocks
        // so the first d_h output columns equal the single-head output
        let head = random_head(8, 4, 90);
        let x = random_x(5, 8, 91);
        let (head_out, _) = eval_head_forward(VariantId::M5, &x, &head, true).unwrap();

        let mut w_o = Matrix::zeros(8, 8);
        for i in 0..4 {
            w_o.set(i, i, 0.5);
            w_o.set(i + 4, i, 0.5);
            w_o.set(i, i + 4, 0.5);
            w_o.set(i + 4, i + 4, 0.5);
        }
        let mhp = MultiHeadParams {
            heads: vec![head.clone(), head],
            w_o,
            b_o: Matrix::zeros(1, 8),
        };
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let pid = mhp.stage(&mut tape);
        let (out, _) = multi_head_forward(&mut tape, VariantId::M5, xid, &pid, true).unwrap();
        let got = tape.value(out);
        for i in 0..5 {
            for j in 0..4 {
                assert!((got.get(i, j) - head_out.get(i, j)).abs() < 1e-12);
                assert!((got.get(i, j + 4) - head_out.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        // all trainable fields of an M5 head through a scalar loss
        let head = random_head(4, 4, 100);
        let x = random_x(5, 4, 101);
        let mut named = Vec::new();
        head.for_each_trainable(VariantId::M5, |name, m| {
            named.push((name.to_string(), m.clone()));
        });
        let template = head.clone();
        let report = grad_check(&named, 1e-5, move |tape, ids| {
            let mut head = template.stage(tape);
            let mut idx = 0;
            head.for_each_trainable_mut(VariantId::M5, |_, slot| {
                *slot = ids[idx];
                idx += 1;
            });
            let xid = tape.leaf(x.clone());
            let (out, _) = attention_head_forward(tape, VariantId::M5, xid, &head, true)?;
            Ok(tape.sum(out))
        })
        .expect("grad check");
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn multi_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let mut mhp = MultiHeadParams::<Matrix<f64>>::init(VariantId::M5, 8, 2, 4, &mut rng);
        for head in &mut mhp.heads {
            head.c = Matrix::from_fn(1, 4, |_, _| rng.gen_range(-0.5..0.5));
            head.alpha_s = Matrix::scalar(rng.gen_range(0.5..1.5));
            head.alpha_c = Matrix::scalar(rng.gen_range(0.5..1.5));
        }
        let x = random_x(6, 8, 111);

        let mut named = Vec::new();
        for (h, head) in mhp.heads.iter().enumerate() {
            head.for_each_trainable(VariantId::M5, |name, m| {
                named.push((format!("head{h}.{name}"), m.clone()));
            });
        }
        named.push(("w_o".to_string(), mhp.w_o.clone()));
        named.push(("b_o".to_string(), mhp.b_o.clone()));

        let template = mhp;
        let report = grad_check(&named, 1e-5, move |tape, ids| {
            let mut staged = template.stage(tape);
            let mut idx = 0;
            for head in &mut staged.heads {
                head.for_each_trainable_mut(VariantId::M5, |_, slot| {
                    *slot = ids[idx];
                    idx += 1;
                });
            }
            staged.w_o = ids[idx];
            idx += 1;
            staged.b_o = ids[idx];
            let xid = tape.leaf(x.clone());
            let (out, _) = multi_head_forward(tape, VariantId::M5, xid, &staged, true)?;
            Ok(tape.sum(out))
        })
        .expect("grad check");
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
