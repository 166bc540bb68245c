use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::pinv_psd;
use crate::trajectory::numerical_rank;

/// Binary column-inclusion vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndicatorVector(Vec<bool>);

impl IndicatorVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.0.iter().map(|&b| f64::from(u8::from(b))))
    }

    /// Little-endian bitmask: bit `j` is bit `j % 8` of byte `j / 8`.
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.len().div_ceil(8)];
        for (j, _) in self.0.iter().enumerate().filter(|(_, &b)| b) {
            bytes[j / 8] |= 1 << (j % 8);
        }
        hex::encode(bytes)
    }

    pub fn from_hex(text: &str, len: usize) -> Result<Self> {
        let bytes = hex::decode(text).map_err(|e| Error::format("indicator bitmask", e.to_string()))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::format(
                "indicator bitmask",
                format!("{} bytes for {len} columns", bytes.len()),
            ));
        }
        if !len.is_multiple_of(8) && bytes.last().is_some_and(|&b| b >> (len % 8) != 0) {
            return Err(Error::format("indicator bitmask", "bits set beyond the column count"));
        }
        Ok(Self((0..len).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect()))
    }
}

/// Fixed-context linear datamodel `J(s) ≈ sᵀθ + θ0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDatamodel {
    pub theta: DVector<f64>,
    pub theta0: f64,
}

impl LinearDatamodel {
    pub fn predict(&self, s: &IndicatorVector) -> f64 {
        predict_linear(self, s)
    }
}

pub fn predict_linear(dm: &LinearDatamodel, s: &IndicatorVector) -> f64 {
    debug_assert_eq!(dm.theta.len(), s.len());
    dm.theta.iter().zip(s.bits()).filter(|(_, &b)| b).map(|(t, _)| t).sum::<f64>() + dm.theta0
}

/// Stacks indicators as rows of an `N × M` 0/1 matrix.
pub fn indicator_matrix(rows: &[IndicatorVector]) -> DMatrix<f64> {
    let m = rows.first().map_or(0, IndicatorVector::len);
    DMatrix::from_fn(rows.len(), m, |i, j| f64::from(u8::from(rows[i].bits()[j])))
}

/// Ridge estimate of `(θ, θ0)` with an unpenalized intercept:
/// `min Σ (sᵢᵀθ + θ0 - Jᵢ)² + λ‖θ‖²`.
///
/// At `λ = 0` with collinear columns the minimum-norm `θ` is returned and a
/// warning is logged.
pub fn ridge_fit(s: &DMatrix<f64>, j: &DVector<f64>, lambda: f64) -> Result<LinearDatamodel> {
    let (n, m) = s.shape();
    if n == 0 {
        return Err(Error::Empty("ridge training set"));
    }
    if j.len() != n {
        return Err(Error::dims(format!("{n} indicator rows but {} costs", j.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be non-negative"));
    }
    let s_mean = s.row_mean().transpose();
    let j_mean = j.mean();
    let mut centered = s.clone();
    for mut row in centered.row_iter_mut() {
        row -= s_mean.transpose();
    }
    let jc = j.add_scalar(-j_mean);
    let mut gram = centered.tr_mul(&centered);
    for i in 0..m {
        gram[(i, i)] += lambda;
    }
    let rhs = centered.tr_mul(&jc);
    let chol = if lambda > 0.0 { gram.clone().cholesky() } else { None };
    let theta = match chol {
        Some(c) => c.solve(&rhs),
        None => {
            if numerical_rank(&gram, 1e-12) < m {
                log::warn!("ridge system is singular; returning the minimum-norm solution");
            }
            pinv_psd(&gram, 1e-12) * rhs
        }
    };
    let theta0 = j_mean - s_mean.dot(&theta);
    Ok(LinearDatamodel { theta, theta0 })
}
