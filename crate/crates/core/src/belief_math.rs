//! Categorical distributions, column-stochastic matrices, and the
//! entropy/divergence primitives shared by both agent layers.
//!
//! Probabilities are kept in linear space; the discrete problem is small
//! enough (36 states) that underflow is not a concern and the multiplicative
//! belief update maps directly onto the stored values. Renormalization only
//! happens at explicit construction sites (`Categorical::from_weights`),
//! never silently inside an operation.

use thiserror::Error;

/// Tolerance for normalization and stochasticity checks at construction.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BeliefMathError {
    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entries sum to {sum}, expected 1 within 1e-9")]
    NotNormalized { sum: f64 },
    #[error("matrix entry ({row},{col}) = {value} outside [0,1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("column {col} sums to {sum}, expected 1 within 1e-9")]
    ColumnNotStochastic { col: usize, sum: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("data length {got} does not match {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, got: usize },
    #[error("absolute continuity violated: q[{index}] > 0 where p[{index}] = 0")]
    AbsoluteContinuity { index: usize },
    #[error("degenerate evidence: all weights are zero")]
    DegenerateEvidence,
}

/// A normalized probability vector over a finite outcome set.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates non-negativity and normalization within [`STOCHASTIC_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self, BeliefMathError> {
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) {
                return Err(BeliefMathError::NegativeEntry { index: i, value: p });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(BeliefMathError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Normalizes a non-negative weight vector. All-zero input is a
    /// degenerate-evidence error; the caller decides the fallback.
    pub fn from_weights(weights: &[f64]) -> Result<Self, BeliefMathError> {
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0) {
                return Err(BeliefMathError::NegativeEntry { index: i, value: w });
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(BeliefMathError::DegenerateEvidence);
        }
        Ok(Self {
            probs: weights.iter().map(|w| w / sum).collect(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Shannon entropy in nats, with the 0 ln 0 = 0 convention.
    pub fn entropy(&self) -> f64 {
        entropy_of(&self.probs)
    }

    /// KL(q || p) in nats. Errors where q places mass outside p's support.
    pub fn kl_divergence(&self, p: &Categorical) -> Result<f64, BeliefMathError> {
        if self.len() != p.len() {
            return Err(BeliefMathError::DimensionMismatch {
                expected: self.len(),
                got: p.len(),
            });
        }
        let mut sum = 0.0;
        for (i, (&qi, &pi)) in self.probs.iter().zip(p.probs.iter()).enumerate() {
            if qi == 0.0 {
                continue;
            }
            if pi == 0.0 {
                return Err(BeliefMathError::AbsoluteContinuity { index: i });
            }
            sum += qi * (qi / pi).ln();
        }
        // Gib's inequality guarantees non-negativity; squash fp dust.
        if sum < 0.0 && sum > -1e-12 {
            sum = 0.0;
        }
        Ok(sum)
    }
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// A matrix whose columns are conditional distributions over its rows
/// (p(outcome | condition)); the storage convention for both the likelihood
/// A and the transitions B[u].
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    /// Row-major entries.
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl StochasticMatrix {
    /// Validates entry range and column-stochasticity within [`STOCHASTIC_TOL`].
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, BeliefMathError> {
        if data.len() != rows * cols {
            return Err(BeliefMathError::BadDataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        for r in 0..rows {
            for c in 0..cols {
                let v = data[r * cols + c];
                if !(v >= 0.0 && v <= 1.0 + STOCHASTIC_TOL) {
                    return Err(BeliefMathError::EntryOutOfRange {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
        }
        for c in 0..cols {
            let sum: f64 = (0..rows).map(|r| data[r * cols + c]).sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(BeliefMathError::ColumnNotStochastic { col: c, sum });
            }
        }
        Ok(Self { data, rows, cols })
    }

    /// Internal constructor for results that are stochastic by algebra
    /// (Kronecker products of validated inputs).
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            data,
            rows: n,
            cols: n,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    /// Entropy of the conditional distribution in column `col`, in nats.
    pub fn column_entropy(&self, col: usize) -> f64 {
        (0..self.rows)
            .map(|r| self.get(r, col))
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    /// out[r] = sum_c M[r,c] q[c]; the prediction step B[u] q.
    pub fn forward(&self, q: &[f64]) -> Vec<f64> {
        assert_eq!(q.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out[r] = row.iter().zip(q.iter()).map(|(m, qi)| m * qi).sum();
        }
        out
    }

    /// Kronecker product: the (i*b.rows+k, j*b.cols+l) entry of the result
    /// is a[i,j] * b[k,l]. Column-stochasticity is preserved.
    pub fn kron(&self, other: &StochasticMatrix) -> StochasticMatrix {
        let rows = self.rows * other.rows;
        let cols = self.cols * other.cols;
        let mut data = vec![0.0; rows * cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let aij = self.get(i, j);
                for k in 0..other.rows {
                    let r = i * other.rows + k;
                    for l in 0..other.cols {
                        let c = j * other.cols + l;
                        data[r * cols + c] = aij * other.get(k, l);
                    }
                }
            }
        }
        StochasticMatrix::from_raw(rows, cols, data)
    }
}
