use crate::error::{Error, Result};
use crate::numeric::scalar::{real, Scalar};

/// Dense 2-D array in row-major order, the universal carrier for inputs,
/// weights, scores, and attention maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![F::zero(); rows * cols]).expect("non-empty shape")
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self::new(rows, cols, vec![v; rows * cols]).expect("non-empty shape")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("non-empty shape")
    }

    /// Row-major construction from f64 literals; handy in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| real(rows[i][j]))
    }

    /// A 1x1 matrix holding one scalar (used for PReLU slopes and losses).
    pub fn scalar(v: F) -> Self {
        Self::new(1, 1, vec![v]).expect("1x1")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single element of a 1x1 matrix.
    pub fn item(&self) -> F {
        assert_eq!(
            (self.rows, self.cols),
            (1, 1),
            "item() requires a 1x1 matrix"
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Self::new(m, n, out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, k: F) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.rows, self.cols, data).expect("same shape")
    }

    /// Adds a 1xN row vector to every row of an MxN matrix.
    pub fn add_row_broadcast(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] += row.data[j];
            }
        }
        Ok(out)
    }

    /// Column-wise sum, producing a 1xN row vector.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![F::zero(); self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += self.get(i, j);
            }
        }
        Self::new(1, self.cols, out).expect("row vector")
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        out
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let rows = parts[0].rows;
        for p in parts {
            if p.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }
}

/// Swish activation x * sigmoid(x) with the slope parameter fixed to 1.
pub fn swish<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// d/dx of swish: sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn swish_derivative<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Parametric rectifier: x for x >= 0, alpha * x otherwise.
///
/// The non-negative branch owns x == 0, so the subgradient there is 1
/// w.r.t. x and 0 w.r.t. alpha.
pub fn prelu<F: Scalar>(x: F, alpha: F) -> F {
    if x >= F::zero() {
        x
    } else {
        alpha * x
    }
}
