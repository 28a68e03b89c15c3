//! Linear least squares on dense designs.
//!
//! Solves min ||sqrt(W)(y - X b)||^2 through a Householder QR of the
//! column-equilibrated design rather than normal equations: high even
//! powers of frequency produce badly scaled columns, and the QR keeps the
//! effective condition number at the square root of the normal-equation
//! one. The parameter covariance factor (X'WX)^-1 comes from the
//! triangular factor of the same decomposition.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold on the R diagonal below which the design is treated
/// as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Solution of a (weighted) least-squares problem.
#[derive(Debug, Clone)]
pub struct LsSolution {
    /// Fitted coefficients, one per design column.
    pub coeffs: Vec<f64>,
    /// (X'WX)^-1; multiply by the residual variance to get the
    /// coefficient covariance.
    pub xtwx_inv: DMatrix<f64>,
    /// Weighted residual sum of squares.
    pub weighted_rss: f64,
    pub n: usize,
    pub p: usize,
}

/// Pre-factored unweighted design, reusable across many right-hand sides.
///
/// Cross-validation refits the same design for thousands of pooled
/// spectra; factoring once reduces each fit to a Q' multiply and a back
/// substitution.
pub struct QrDesign {
    qr: nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: DMatrix<f64>,
    col_scales: Vec<f64>,
    n: usize,
    p: usize,
}

impl QrDesign {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let (n, p) = (x.nrows(), x.ncols());
        if n < p {
            return Err(Error::Underdetermined { needed: p, got: n });
        }
        let (scaled, col_scales) = equilibrate(x)?;
        let qr = scaled.qr();
        let r = qr.r();
        check_rank(&r)?;
        Ok(Self {
            qr,
            r,
            col_scales,
            n,
            p,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Coefficients of the least-squares fit to `y`.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let mut qty = DVector::from_column_slice(y);
        self.qr.q_tr_mul(&mut qty);
        let mut beta = back_substitute(&self.r, &qty, self.p);
        for (b, s) in beta.iter_mut().zip(&self.col_scales) {
            *b /= s;
        }
        beta
    }

    /// Coefficients plus the residual sum of squares of the fit.
    pub fn solve_with_rss(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let mut qty = DVector::from_column_slice(y);
        self.qr.q_tr_mul(&mut qty);
        let mut beta = back_substitute(&self.r, &qty, self.p);
        for (b, s) in beta.iter_mut().zip(&self.col_scales) {
            *b /= s;
        }
        let rss = qty.rows(self.p, self.n - self.p).norm_squared();
        (beta, rss)
    }
}

/// One-shot weighted least squares with covariance factor.
///
/// `weights` are inverse-variance weights; `None` means unweighted.
pub fn solve_weighted(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<LsSolution> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::Argument(format!(
            "response length {} does not match design rows {}",
            y.len(),
            n
        )));
    }
    if n < p {
        return Err(Error::Underdetermined { needed: p, got: n });
    }

    let sqrt_w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::Argument(format!(
                    "weight length {} does not match design rows {}",
                    w.len(),
                    n
                )));
            }
            if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Argument(format!("weights must be positive, got {bad}")));
            }
            w.iter().map(|v| v.sqrt()).collect()
        }
        None => vec![1.0; n],
    };

    let mut xw = x.clone();
    for i in 0..n {
        for j in 0..p {
            xw[(i, j)] *= sqrt_w[i];
        }
    }
    let yw: Vec<f64> = y.iter().zip(&sqrt_w).map(|(v, s)| v * s).collect();

    let (scaled, col_scales) = equilibrate(xw)?;
    let qr = scaled.qr();
    let r = qr.r();
    check_rank(&r)?;

    let mut qty = DVector::from_column_slice(&yw);
    qr.q_tr_mul(&mut qty);
    let mut coeffs = back_substitute(&r, &qty, p);
    for (b, s) in coeffs.iter_mut().zip(&col_scales) {
        *b /= s;
    }
    let weighted_rss = qty.rows(p, n - p).norm_squared();

    // (X'WX)^-1 = D R^-1 R^-T D with D the inverse column scales.
    let r_inv = invert_upper(&r);
    let mut xtwx_inv = &r_inv * r_inv.transpose();
    for i in 0..p {
        for j in 0..p {
            xtwx_inv[(i, j)] /= col_scales[i] * col_scales[j];
        }
    }

    Ok(LsSolution {
        coeffs,
        xtwx_inv,
        weighted_rss,
        n,
        p,
    })
}

/// Scale every column to unit Euclidean norm; returns the scaled matrix
/// and the applied scales.
fn equilibrate(mut x: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let p = x.ncols();
    let mut scales = Vec::with_capacity(p);
    for j in 0..p {
        let norm = x.column(j).norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::SingularFit(format!(
                "design column {j} has norm {norm}"
            )));
        }
        x.column_mut(j).scale_mut(1.0 / norm);
        scales.push(norm);
    }
    Ok((x, scales))
}

fn check_rank(r: &DMatrix<f64>) -> Result<()> {
    let p = r.ncols();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
    if max_diag == 0.0 {
        return Err(Error::SingularFit("zero triangular factor".into()));
    }
    for i in 0..p {
        if r[(i, i)].abs() < RANK_TOL * max_diag {
            return Err(Error::SingularFit(format!(
                "rank-deficient design (pivot {i} of {p})"
            )));
        }
    }
    Ok(())
}

/// Solve R b = rhs[0..p] for upper-triangular R.
fn back_substitute(r: &DMatrix<f64>, rhs: &DVector<f64>, p: usize) -> Vec<f64> {
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..p {
            acc -= r[(i, j)] * beta[j];
        }
        beta[i] = acc / r[(i, i)];
    }
    beta
}

/// Inverse of an upper-triangular matrix by columnwise back substitution.
fn invert_upper(r: &DMatrix<f64>) -> DMatrix<f64> {
    let p = r.ncols();
    let mut inv = DMatrix::zeros(p, p);
    for col in 0..p {
        let mut e = DVector::zeros(p);
        e[col] = 1.0;
        let b = back_substitute(r, &e, p);
        for row in 0..p {
            inv[(row, col)] = b[row];
        }
    }
    inv
}
