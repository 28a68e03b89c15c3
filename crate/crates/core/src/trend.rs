//! Temporal stability of the per-run offsets.
//!
//! Each run's offset estimate `y_i` (with asymptotic variance `V_i` from
//! its own fit) is regressed on acquisition day by weighted least squares
//! with weights `1/V_i`. Uncertainties of the trend parameters come from
//! a nonparametric bootstrap on variance-equalized residuals; a two-sided
//! no-trend p-value comes from rerunning the bootstrap around the
//! weighted-mean constant fit. The weighted residual sum of squares
//! doubles as a chi-square consistency statistic for the trend model, and
//! a Breusch-Pagan regression of squared spectrum residuals on the design
//! columns tests for frequency-dependent noise variance.

use nalgebra::DMatrix;
use rand_distr::Distribution;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{correct_spectra, pool_ratio, Dataset, RatioSpectrum};
use crate::error::{Error, Result};
use crate::lstsq::{solve_weighted, QrDesign};
use crate::polyfit::{PolyFit, PolyModel};
use crate::rng::substream;

/// Default bootstrap replicate count.
pub const DEFAULT_N_BOOT: usize = 50_000;

/// Per-run offset estimates ordered by acquisition day.
#[derive(Debug, Clone)]
pub struct RunOffsets {
    pub run_ids: Vec<u32>,
    /// Offset estimate per run, relative to the mean calibration
    /// reference.
    pub y: Vec<f64>,
    /// Asymptotic variance of each estimate.
    pub v: Vec<f64>,
    /// Acquisition day relative to the first run; non-decreasing.
    pub t: Vec<f64>,
}

impl RunOffsets {
    pub fn new(run_ids: Vec<u32>, y: Vec<f64>, v: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        let n = run_ids.len();
        if y.len() != n || v.len() != n || t.len() != n {
            return Err(Error::Argument(format!(
                "offset component lengths differ ({n}, {}, {}, {})",
                y.len(),
                v.len(),
                t.len()
            )));
        }
        if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::Argument(format!(
                "asymptotic variances must be non-negative, got {bad}"
            )));
        }
        if !t.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::Argument("day offsets must be non-decreasing".into()));
        }
        Ok(Self { run_ids, y, v, t })
    }

    pub fn len(&self) -> usize {
        self.run_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.run_ids.is_empty()
    }

    fn weights(&self) -> Result<Vec<f64>> {
        if let Some((i, _)) = self.v.iter().enumerate().find(|(_, x)| **x == 0.0) {
            return Err(Error::Argument(format!(
                "run {} has zero asymptotic variance; weights 1/V are undefined",
                self.run_ids[i]
            )));
        }
        Ok(self.v.iter().map(|v| 1.0 / v).collect())
    }

    fn design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 2, |i, j| if j == 0 { 1.0 } else { self.t[i] })
    }
}

/// Weighted least-squares linear trend fit.
#[derive(Debug, Clone)]
pub struct TrendFit {
    pub beta0: f64,
    /// Slope per day.
    pub beta1: f64,
    /// Weighted residual sum of squares.
    pub chi2_obs: f64,
    /// Hat-matrix diagonal (leverages).
    pub hat_diag: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Upper-tail chi-square p-value of `chi2_obs` at n-2 dof; absent for
    /// a saturated two-point fit.
    pub p_consistency: Option<f64>,
    /// chi2_obs / (n - 2), the implied scale on the stated variances.
    pub variance_scale: Option<f64>,
    pub bootstrap: Option<TrendBootstrap>,
}

/// Bootstrap augmentation of a trend fit.
#[derive(Debug, Clone)]
pub struct TrendBootstrap {
    pub n_boot: usize,
    pub se_beta0: f64,
    pub se_beta1: f64,
    /// Null replicates whose |slope| reached the observed |slope|.
    pub null_exceedances: usize,
}

impl TrendBootstrap {
    /// Two-sided no-trend p-value. Zero exceedances report the resolution
    /// bound 1/n_boot; `p_trend_is_upper_bound` flags that case.
    pub fn p_trend(&self) -> f64 {
        if self.null_exceedances == 0 {
            1.0 / self.n_boot as f64
        } else {
            self.null_exceedances as f64 / self.n_boot as f64
        }
    }

    pub fn p_trend_is_upper_bound(&self) -> bool {
        self.null_exceedances == 0
    }
}

/// Fit the selected ratio model to each run of the corrected dataset and
/// collect offset estimates, asymptotic variances and day offsets,
/// ordered by acquisition day.
pub fn per_run_offsets(dataset: &Dataset, model: &PolyModel, fmax: f64) -> Result<RunOffsets> {
    let corrected_storage;
    let corrected = if dataset.is_corrected() {
        dataset
    } else {
        corrected_storage = correct_spectra(dataset);
        &corrected_storage
    };
    let a_ref = corrected.a0_calc_bar();

    let mut order: Vec<usize> = (0..corrected.n_runs()).collect();
    order.sort_by(|a, b| {
        let ra = &corrected.runs()[*a];
        let rb = &corrected.runs()[*b];
        ra.day_offset()
            .total_cmp(&rb.day_offset())
            .then(ra.run_id().cmp(&rb.run_id()))
    });

    let mut run_ids = Vec::with_capacity(order.len());
    let mut y = Vec::with_capacity(order.len());
    let mut v = Vec::with_capacity(order.len());
    let mut t = Vec::with_capacity(order.len());
    let day0 = corrected.runs()[order[0]].day_offset();
    for idx in order {
        let run = &corrected.runs()[idx];
        let run_id = run.run_id();
        let spectrum = pool_ratio(corrected, &[run_id], fmax)?;
        let fit = model
            .fit(&spectrum, fmax, None)
            .map_err(|e| Error::Run {
                run_id,
                source: Box::new(e),
            })?;
        run_ids.push(run_id);
        y.push(fit.a0() - a_ref);
        v.push(fit.a0_variance());
        t.push(run.day_offset() - day0);
    }
    RunOffsets::new(run_ids, y, v, t)
}

/// Weighted least-squares line through the offsets with weights `1/V_i`.
pub fn wls_trend(offsets: &RunOffsets) -> Result<TrendFit> {
    let n = offsets.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "trend fit needs at least 2 runs, got {n}"
        )));
    }
    let weights = offsets.weights()?;
    let x = offsets.design();
    let sol = solve_weighted(&x, &offsets.y, Some(&weights))?;

    let beta0 = sol.coeffs[0];
    let beta1 = sol.coeffs[1];
    let fitted: Vec<f64> = offsets.t.iter().map(|t| beta0 + beta1 * t).collect();
    let chi2_obs: f64 = offsets
        .y
        .iter()
        .zip(&fitted)
        .zip(&weights)
        .map(|((y, f), w)| w * (y - f) * (y - f))
        .sum();

    // Leverages: h_i = w_i x_i' (X'WX)^-1 x_i.
    let hat_diag: Vec<f64> = (0..n)
        .map(|i| {
            let xi = [1.0, offsets.t[i]];
            let mut q = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    q += xi[a] * sol.xtwx_inv[(a, b)] * xi[b];
                }
            }
            weights[i] * q
        })
        .collect();

    let dof = n - 2;
    let (p_consistency, variance_scale) = if dof == 0 {
        (None, None)
    } else {
        let chi = ChiSquared::new(dof as f64)
            .map_err(|e| Error::Inconsistency(format!("chi-square dof {dof}: {e}")))?;
        (Some(1.0 - chi.cdf(chi2_obs)), Some(chi2_obs / dof as f64))
    };

    Ok(TrendFit {
        beta0,
        beta1,
        chi2_obs,
        hat_diag,
        fitted,
        p_consistency,
        variance_scale,
        bootstrap: None,
    })
}

/// Modified residuals `(y - fit) / sqrt(V (1 - h))`, centered: resampled
/// errors then share a common variance.
fn centered_modified_residuals(
    offsets: &RunOffsets,
    fitted: &[f64],
    hat_diag: &[f64],
) -> Result<Vec<f64>> {
    let mut r = Vec::with_capacity(offsets.len());
    for i in 0..offsets.len() {
        if hat_diag[i] >= 1.0 {
            return Err(Error::Leverage {
                index: i,
                value: hat_diag[i],
            });
        }
        r.push((offsets.y[i] - fitted[i]) / (offsets.v[i] * (1.0 - hat_diag[i])).sqrt());
    }
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    for ri in &mut r {
        *ri -= mean;
    }
    Ok(r)
}

/// Solves the weighted trend system for many replicate responses.
struct TrendRefitter {
    design: QrDesign,
    sqrt_w: Vec<f64>,
}

impl TrendRefitter {
    fn new(offsets: &RunOffsets, weights: &[f64]) -> Result<Self> {
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let mut x = offsets.design();
        for i in 0..offsets.len() {
            x[(i, 0)] *= sqrt_w[i];
            x[(i, 1)] *= sqrt_w[i];
        }
        Ok(Self {
            design: QrDesign::new(x)?,
            sqrt_w,
        })
    }

    fn fit(&self, y: &[f64], scratch: &mut Vec<f64>) -> (f64, f64) {
        scratch.clear();
        scratch.extend(y.iter().zip(&self.sqrt_w).map(|(v, s)| v * s));
        let beta = self.design.solve(scratch);
        (beta[0], beta[1])
    }
}

fn sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Nonparametric bootstrap of the trend parameters plus the no-trend
/// test.
///
/// Replicates resample the centered modified residuals with replacement
/// and rebuild `y* = beta0 + beta1 t + sqrt(V) e*`; standard errors are
/// the replicate standard deviations. The null distribution of the slope
/// repeats the procedure around the weighted-mean constant fit, and the
/// p-value is the fraction of null slopes at least as large in magnitude
/// as the observed one.
pub fn bootstrap_trend(offsets: &RunOffsets, n_boot: usize, seed: u64) -> Result<TrendFit> {
    if n_boot == 0 {
        return Err(Error::Argument("bootstrap needs at least 1 replicate".into()));
    }
    let mut fit = wls_trend(offsets)?;
    let n = offsets.len();
    let weights = offsets.weights()?;
    let sqrt_v: Vec<f64> = offsets.v.iter().map(|v| v.sqrt()).collect();
    let refitter = TrendRefitter::new(offsets, &weights)?;

    // Standard errors around the trend fit.
    let resid = centered_modified_residuals(offsets, &fit.fitted, &fit.hat_diag)?;
    let replicates: Vec<(f64, f64)> = (0..n_boot)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], Vec::with_capacity(n)),
            |(y_star, scratch), b| {
                let mut rng = substream(seed, b as u64);
                for i in 0..n {
                    let e = resid[rand::Rng::gen_range(&mut rng, 0..n)];
                    y_star[i] = fit.fitted[i] + sqrt_v[i] * e;
                }
                refitter.fit(y_star, scratch)
            },
        )
        .collect();
    let intercepts: Vec<f64> = replicates.iter().map(|r| r.0).collect();
    let slopes: Vec<f64> = replicates.iter().map(|r| r.1).collect();

    // Null distribution: same recipe around the weighted-mean constant
    // fit, whose leverages are w_i / sum(w).
    let w_sum: f64 = weights.iter().sum();
    let y_bar_w: f64 = offsets
        .y
        .iter()
        .zip(&weights)
        .map(|(y, w)| y * w)
        .sum::<f64>()
        / w_sum;
    let null_fitted = vec![y_bar_w; n];
    let null_hat: Vec<f64> = weights.iter().map(|w| w / w_sum).collect();
    let null_resid = centered_modified_residuals(offsets, &null_fitted, &null_hat)?;
    let observed_slope = fit.beta1.abs();
    let exceedances: usize = (0..n_boot)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], Vec::with_capacity(n)),
            |(y_star, scratch), b| {
                let mut rng = substream(seed, (n_boot + b) as u64);
                for i in 0..n {
                    let e = null_resid[rand::Rng::gen_range(&mut rng, 0..n)];
                    y_star[i] = y_bar_w + sqrt_v[i] * e;
                }
                let (_, slope) = refitter.fit(y_star, scratch);
                usize::from(slope.abs() >= observed_slope)
            },
        )
        .sum();

    fit.bootstrap = Some(TrendBootstrap {
        n_boot,
        se_beta0: sd(&intercepts),
        se_beta1: sd(&slopes),
        null_exceedances: exceedances,
    });
    Ok(fit)
}

/// Parametric bootstrap of the slope standard error: replicates add
/// Gaussian noise with the stated asymptotic variances to the fitted
/// trend.
pub fn parametric_bootstrap_trend(offsets: &RunOffsets, n_boot: usize, seed: u64) -> Result<f64> {
    if n_boot < 2 {
        return Err(Error::Argument(
            "parametric bootstrap needs at least 2 replicates".into(),
        ));
    }
    let fit = wls_trend(offsets)?;
    let n = offsets.len();
    let weights = offsets.weights()?;
    let sqrt_v: Vec<f64> = offsets.v.iter().map(|v| v.sqrt()).collect();
    let refitter = TrendRefitter::new(offsets, &weights)?;

    let slopes: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], Vec::with_capacity(n)),
            |(y_star, scratch), b| {
                let mut rng = substream(seed, b as u64);
                for i in 0..n {
                    let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    y_star[i] = fit.fitted[i] + sqrt_v[i] * e;
                }
                refitter.fit(y_star, scratch).1
            },
        )
        .collect();
    Ok(sd(&slopes))
}

/// Breusch-Pagan test for frequency-dependent noise variance: squared fit
/// residuals are regressed on the fit's design columns and `n R^2` is
/// referred to a chi-square with one dof per non-constant column.
pub fn breusch_pagan(fit: &PolyFit, spectrum: &RatioSpectrum, fmax: f64) -> Result<f64> {
    let residuals = fit.residuals(spectrum, fmax);
    let n = residuals.len();
    let p = fit.model().n_params();
    if n <= p {
        return Err(Error::DegenerateTest(format!(
            "need more blocks than parameters for the auxiliary regression, got {n} for {p}"
        )));
    }
    let sq: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    let mean_sq = sq.iter().sum::<f64>() / n as f64;
    let tss: f64 = sq.iter().map(|s| (s - mean_sq) * (s - mean_sq)).sum();
    if tss <= 0.0 || !tss.is_finite() {
        return Err(Error::DegenerateTest(
            "squared residuals are constant; auxiliary regression is undefined".into(),
        ));
    }

    let freqs = &spectrum.frequencies()[..n];
    let x = fit.model().design_matrix(freqs);
    let aux = solve_weighted(&x, &sq, None).map_err(|e| match e {
        Error::SingularFit(msg) => Error::DegenerateTest(format!("auxiliary design: {msg}")),
        other => other,
    })?;
    let r_squared = (1.0 - aux.weighted_rss / tss).clamp(0.0, 1.0);
    let lm = n as f64 * r_squared;

    let dof = fit.model().i_max() as f64;
    let chi = ChiSquared::new(dof)
        .map_err(|e| Error::DegenerateTest(format!("chi-square dof {dof}: {e}")))?;
    Ok(1.0 - chi.cdf(lm))
}
