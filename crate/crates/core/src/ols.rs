//! Ordinary least squares via Householder QR.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative size below which an `R` diagonal entry marks a dependent column.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    /// Residual variance `RSS / (n - p)`.
    pub sigma2: f64,
    pub rss: f64,
    pub n: usize,
}

impl OlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(b, x)| b * x).sum()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.coefficients[k])
    }
}

/// Checks that the columns of `x` are linearly independent, naming the first
/// column that is (numerically) a combination of the ones before it.
pub fn check_full_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let r = x.clone().qr().r();
    for k in 0..x.ncols() {
        let col_norm = x.column(k).norm();
        if col_norm == 0.0 || r[(k, k)].abs() <= RANK_TOL * col_norm {
            return Err(Error::RankDeficient {
                column: names.get(k).cloned().unwrap_or_else(|| format!("column {k}")),
            });
        }
    }
    Ok(())
}

/// Fits `y ~ x` where `x` already contains any intercept column.
pub fn fit_ols(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if names.len() != p {
        return Err(Error::Invalid(format!("{} names for {p} columns", names.len())));
    }
    if y.len() != n {
        return Err(Error::Invalid(format!("response has {} rows, design has {n}", y.len())));
    }
    if n < p + 1 {
        return Err(Error::Invalid(format!("{n} rows cannot fit {p} terms (need at least {})", p + 1)));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    for k in 0..p {
        let col_norm = x.column(k).norm();
        if col_norm == 0.0 || r[(k, k)].abs() <= RANK_TOL * col_norm {
            return Err(Error::RankDeficient { column: names[k].clone() });
        }
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let fitted = x * &beta;
    let resid = y - fitted;
    let rss = resid.norm_squared();
    let dof = (n - p) as f64;
    let sigma2 = rss / dof;

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("triangular inverse failed".into()))?;
    // (X'X)^-1 = R^-1 R^-T, so the diagonal is the squared row norms of R^-1.
    let std_errors: Vec<f64> = (0..p).map(|k| (sigma2 * r_inv.row(k).norm_squared()).sqrt()).collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let t_values = coefficients.iter().zip(&std_errors).map(|(b, s)| b / s).collect();

    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 0.0 };
    let adj_r_squared = if n > p && tss > 0.0 {
        1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / dof
    } else {
        r_squared
    };
    Ok(OlsFit {
        names: names.to_vec(),
        coefficients,
        std_errors,
        t_values,
        r_squared,
        adj_r_squared,
        sigma2,
        rss,
        n,
    })
}
