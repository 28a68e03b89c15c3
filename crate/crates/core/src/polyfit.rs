//! Even-polynomial ratio spectrum model and its least-squares fit.
//!
//! The model of order `d` is `r(f) = sum_i a_{2i} (f/f0)^{2i}` for
//! `i = 0..d/2` with reference frequency `f0` (1 MHz by default). Fits are
//! unweighted least squares unless diagnostic weights are supplied; the
//! offset `a_0` carries the physics and its asymptotic standard
//! uncertainty comes from the triangular factor of the design QR.

use nalgebra::DMatrix;

use crate::data::RatioSpectrum;
use crate::error::{Error, Result};
use crate::lstsq::{solve_weighted, QrDesign};

/// Default reference frequency (Hz).
pub const DEFAULT_F0: f64 = 1e6;

/// Candidate polynomial orders considered during model selection.
pub const DEFAULT_ORDERS: [u32; 7] = [2, 4, 6, 8, 10, 12, 14];

/// An even-polynomial model of given order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyModel {
    d: u32,
    f0: f64,
}

impl PolyModel {
    pub fn new(d: u32, f0: f64) -> Result<Self> {
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "polynomial order must be even and at least 2, got {d}"
            )));
        }
        if !(f0.is_finite() && f0 > 0.0) {
            return Err(Error::Argument(format!(
                "reference frequency must be positive, got {f0}"
            )));
        }
        Ok(Self { d, f0 })
    }

    /// Order with the default 1 MHz reference frequency.
    pub fn with_order(d: u32) -> Result<Self> {
        Self::new(d, DEFAULT_F0)
    }

    pub fn order(&self) -> u32 {
        self.d
    }

    pub fn f0(&self) -> f64 {
        self.f0
    }

    /// Highest power index: d = 2 i_max.
    pub fn i_max(&self) -> usize {
        (self.d / 2) as usize
    }

    pub fn n_params(&self) -> usize {
        self.i_max() + 1
    }

    /// Fit the model to the blocks of `spectrum` with midpoint <= `fmax`.
    ///
    /// `weights` (inverse-variance, one per included block) are accepted
    /// for diagnostics; the selection pipeline always fits unweighted.
    pub fn fit(
        &self,
        spectrum: &RatioSpectrum,
        fmax: f64,
        weights: Option<&[f64]>,
    ) -> Result<PolyFit> {
        let n = spectrum.blocks_within(fmax);
        let p = self.n_params();
        if n < p {
            return Err(Error::Underdetermined { needed: p, got: n });
        }
        let freqs = &spectrum.frequencies()[..n];
        let obs = &spectrum.ratios()[..n];

        let x = self.design_matrix(freqs);
        let sol = solve_weighted(&x, obs, weights)?;

        let dof = n - p;
        let residual_variance = if dof == 0 {
            0.0
        } else {
            sol.weighted_rss / dof as f64
        };
        let coeff_cov = sol.xtwx_inv * residual_variance;
        let sigma_a0_ran = coeff_cov[(0, 0)].max(0.0).sqrt();

        Ok(PolyFit {
            model: *self,
            coeffs: sol.coeffs,
            coeff_cov,
            sigma_a0_ran,
            residual_variance,
            n_points: n,
        })
    }

    /// Design matrix with column i = (f/f0)^(2i).
    pub(crate) fn design_matrix(&self, freqs: &[f64]) -> DMatrix<f64> {
        let p = self.n_params();
        let t: Vec<f64> = freqs.iter().map(|f| (f / self.f0).powi(2)).collect();
        DMatrix::from_fn(freqs.len(), p, |row, col| t[row].powi(col as i32))
    }

    pub(crate) fn squared_norm_freqs(&self, freqs: &[f64]) -> Vec<f64> {
        freqs.iter().map(|f| (f / self.f0).powi(2)).collect()
    }
}

/// Evaluate `sum_i coeffs[i] t^i` by Horner's scheme.
pub(crate) fn eval_poly(coeffs: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for c in coeffs.iter().rev() {
        acc = acc * t + c;
    }
    acc
}

/// A fitted even-polynomial model.
#[derive(Debug, Clone)]
pub struct PolyFit {
    model: PolyModel,
    /// Coefficients of the even powers, constant term first.
    coeffs: Vec<f64>,
    coeff_cov: DMatrix<f64>,
    sigma_a0_ran: f64,
    residual_variance: f64,
    n_points: usize,
}

impl PolyFit {
    pub fn model(&self) -> &PolyModel {
        &self.model
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// The fitted offset a_0.
    pub fn a0(&self) -> f64 {
        self.coeffs[0]
    }

    /// Asymptotic standard uncertainty of a_0.
    pub fn sigma_a0_ran(&self) -> f64 {
        self.sigma_a0_ran
    }

    /// Asymptotic variance of a_0.
    pub fn a0_variance(&self) -> f64 {
        self.coeff_cov[(0, 0)]
    }

    pub fn coeff_cov(&self) -> &DMatrix<f64> {
        &self.coeff_cov
    }

    pub fn residual_variance(&self) -> f64 {
        self.residual_variance
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Evaluate the fitted polynomial at the given frequencies.
    pub fn predict(&self, frequencies: &[f64]) -> Vec<f64> {
        frequencies
            .iter()
            .map(|f| eval_poly(&self.coeffs, (f / self.model.f0).powi(2)))
            .collect()
    }

    /// Observed minus predicted for blocks with midpoint <= `fmax`.
    pub fn residuals(&self, spectrum: &RatioSpectrum, fmax: f64) -> Vec<f64> {
        let n = spectrum.blocks_within(fmax);
        let pred = self.predict(&spectrum.frequencies()[..n]);
        spectrum.ratios()[..n]
            .iter()
            .zip(pred)
            .map(|(obs, fit)| obs - fit)
            .collect()
    }
}

/// Pre-factored design for one (grid window, model) pair.
///
/// The selection engine refits the same design against thousands of
/// pooled spectra; the QR is computed once and each fit costs a Q'
/// multiply plus a back substitution.
pub(crate) struct PolyDesign {
    t: Vec<f64>,
    design: QrDesign,
}

impl PolyDesign {
    pub fn new(model: &PolyModel, freqs: &[f64]) -> Result<Self> {
        let design = QrDesign::new(model.design_matrix(freqs))?;
        Ok(Self {
            t: model.squared_norm_freqs(freqs),
            design,
        })
    }

    pub fn solve(&self, pooled_ratios: &[f64]) -> Vec<f64> {
        self.design.solve(pooled_ratios)
    }

    /// Mean squared deviation between `observed` and the polynomial with
    /// the given coefficients, over the design's blocks.
    pub fn msd(&self, coeffs: &[f64], observed: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (t, obs) in self.t.iter().zip(observed) {
            let diff = obs - eval_poly(coeffs, *t);
            acc += diff * diff;
        }
        acc / self.t.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpectrumKind;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn spectrum_from_fn(n: usize, mut f: impl FnMut(f64) -> f64) -> RatioSpectrum {
        let freqs: Vec<f64> = (0..n).map(|k| 900.0 + 1800.0 * k as f64).collect();
        let ratios: Vec<f64> = freqs.iter().map(|x| f(*x)).collect();
        RatioSpectrum::new(freqs, ratios, SpectrumKind::PooledRaw).unwrap()
    }

    #[test]
    fn constant_spectrum_fits_exactly() {
        let spectrum = spectrum_from_fn(10, |_| 1.0);
        for d in [2u32, 6, 14] {
            let model = PolyModel::with_order(d).unwrap();
            let fit = model.fit(&spectrum, f64::INFINITY, None).unwrap();
            assert_relative_eq!(fit.a0(), 1.0, max_relative = 1e-12);
            for c in &fit.coeffs()[1..] {
                assert!(c.abs() < 1e-9, "higher coefficient {c} not negligible");
            }
            assert!(fit.residual_variance() < 1e-20);
        }
    }

    #[test]
    fn exact_quadratic_recovered() {
        let f0 = DEFAULT_F0;
        let spectrum = spectrum_from_fn(10, |f| 1.0 + 0.5 * (f / f0).powi(2));
        let fit = PolyModel::with_order(2)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        assert!((fit.coeffs()[0] - 1.0).abs() < 1e-12);
        assert!((fit.coeffs()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_constant_and_linear_terms() {
        let spectrum = spectrum_from_fn(6, |_| 2.0);
        let fit = PolyModel::with_order(2)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        for f in [0.0, 1e5, 2e6] {
            assert_relative_eq!(fit.predict(&[f])[0], 2.0, max_relative = 1e-10);
        }

        let f0 = DEFAULT_F0;
        let spectrum = spectrum_from_fn(6, |f| 1.0 + 0.5 * (f / f0).powi(2));
        let fit = PolyModel::with_order(2)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        assert_relative_eq!(fit.predict(&[f0])[0], 1.5, max_relative = 1e-10);
    }

    #[test]
    fn prediction_at_zero_frequency_is_the_offset() {
        let f0 = DEFAULT_F0;
        let spectrum = spectrum_from_fn(
            700,
            |f| {
                let t = (f / f0).powi(2);
                1.0001 + -4.33e-4 * t + 1.66e-3 * t * t - 2.25e-3 * t.powi(3) + 6.26e-4 * t.powi(4)
            },
        );
        let fit = PolyModel::with_order(8)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        assert_relative_eq!(fit.predict(&[0.0])[0], fit.a0(), max_relative = 1e-15);
    }

    #[test]
    fn residuals_of_exact_polynomial_are_zero() {
        let f0 = DEFAULT_F0;
        let spectrum = spectrum_from_fn(20, |f| 1.0 - 0.3 * (f / f0).powi(2));
        let fit = PolyModel::with_order(4)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        for r in fit.residuals(&spectrum, f64::INFINITY) {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn residual_mean_of_ls_fit_vanishes() {
        let mut rng = crate::rng::substream(11, 0);
        let spectrum = spectrum_from_fn(200, |f| 1.0 + 1e-4 * (f / 1e6) + rng.gen::<f64>() * 1e-3);
        let fit = PolyModel::with_order(4)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        let res = fit.residuals(&spectrum, f64::INFINITY);
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        assert!(mean.abs() < 1e-10, "residual mean {mean}");
    }

    #[test]
    fn residual_variance_estimates_noise_variance() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::substream(12, 0);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let spectrum = spectrum_from_fn(500, |_| 1.0 + noise.sample(&mut rng));
        let fit = PolyModel::with_order(2)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        let truth = 1e-6;
        assert!(
            (fit.residual_variance() - truth).abs() < 0.2 * truth,
            "residual variance {} vs noise variance {truth}",
            fit.residual_variance()
        );
    }

    #[test]
    fn nesting_recovers_offset_and_zeroes_extra_terms() {
        let f0 = DEFAULT_F0;
        let truth = [1.0002, -3e-4, 2e-3];
        let spectrum = spectrum_from_fn(300, |f| eval_poly(&truth, (f / f0).powi(2)));
        let t_max = (spectrum.frequencies().last().unwrap() / f0).powi(2);
        for d in [4u32, 6, 8, 10, 12, 14] {
            let fit = PolyModel::with_order(d)
                .unwrap()
                .fit(&spectrum, f64::INFINITY, None)
                .unwrap();
            assert_relative_eq!(fit.a0(), truth[0], max_relative = 1e-10);
            // Terms above the true order must not contribute anywhere in
            // the fitted window.
            for (i, c) in fit.coeffs().iter().enumerate().skip(3) {
                let contribution = c.abs() * t_max.powi(i as i32);
                assert!(
                    contribution < 1e-10,
                    "order {d}: term {i} contributes {contribution}"
                );
            }
        }
    }

    #[test]
    fn scale_equivariance_in_reference_frequency() {
        let f0 = DEFAULT_F0;
        let truth = [1.0001, -4e-4, 1.5e-3];
        let spectrum = spectrum_from_fn(120, |f| eval_poly(&truth, (f / f0).powi(2)));
        let base = PolyModel::new(4, f0)
            .unwrap()
            .fit(&spectrum, f64::INFINITY, None)
            .unwrap();
        for c in [0.5, 2.0, 3.7] {
            let scaled = PolyModel::new(4, c * f0)
                .unwrap()
                .fit(&spectrum, f64::INFINITY, None)
                .unwrap();
            assert_relative_eq!(scaled.a0(), base.a0(), max_relative = 1e-10);
            for (i, (a, b)) in base.coeffs().iter().zip(scaled.coeffs()).enumerate() {
                let expect = a * c.powi(2 * i as i32);
                assert_relative_eq!(*b, expect, max_relative = 1e-9, epsilon = 1e-14);
            }
            let probe = [1e5, 7e5, 1.3e6];
            for (pa, pb) in base.predict(&probe).iter().zip(scaled.predict(&probe)) {
                assert_relative_eq!(pa, &pb, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn covariance_matches_normal_equations_oracle() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::substream(13, 0);
        let noise = Normal::new(0.0, 1e-4).unwrap();
        let spectrum = spectrum_from_fn(80, |f| 1.0 + 2e-4 * (f / 1e6).powi(2) + noise.sample(&mut rng));
        let model = PolyModel::with_order(4).unwrap();
        let fit = model.fit(&spectrum, f64::INFINITY, None).unwrap();

        // Explicit (X'X)^-1 by Gauss-Jordan elimination.
        let x = model.design_matrix(spectrum.frequencies());
        let xtx = x.transpose() * &x;
        let inv = gauss_jordan(xtx);
        let oracle = inv[(0, 0)] * fit.residual_variance();
        assert_relative_eq!(fit.a0_variance(), oracle, max_relative = 1e-8);
    }

    fn gauss_jordan(mut a: DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut inv = DMatrix::<f64>::identity(n, n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|i, j| a[(*i, col)].abs().total_cmp(&a[(*j, col)].abs()))
                .unwrap();
            if pivot != col {
                a.swap_rows(col, pivot);
                inv.swap_rows(col, pivot);
            }
            let diag = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= diag;
                inv[(col, j)] /= diag;
            }
            for row in 0..n {
                if row != col {
                    let factor = a[(row, col)];
                    for j in 0..n {
                        a[(row, j)] -= factor * a[(col, j)];
                        inv[(row, j)] -= factor * inv[(col, j)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn too_few_points_rejected() {
        let spectrum = spectrum_from_fn(3, |_| 1.0);
        let res = PolyModel::with_order(8).unwrap().fit(&spectrum, f64::INFINITY, None);
        assert!(matches!(res, Err(Error::Underdetermined { needed: 5, got: 3 })));
    }

    #[test]
    fn odd_or_small_orders_rejected() {
        assert!(PolyModel::with_order(3).is_err());
        assert!(PolyModel::with_order(0).is_err());
        assert!(PolyModel::with_order(2).is_ok());
    }

    #[test]
    fn design_reuse_matches_fresh_fit() {
        let mut rng = crate::rng::substream(14, 0);
        let spectrum = spectrum_from_fn(60, |_| 1.0 + rng.gen::<f64>() * 1e-3);
        let model = PolyModel::with_order(6).unwrap();
        let design = PolyDesign::new(&model, spectrum.frequencies()).unwrap();
        let reused = design.solve(spectrum.ratios());
        let fresh = model.fit(&spectrum, f64::INFINITY, None).unwrap();
        for (a, b) in reused.iter().zip(fresh.coeffs()) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-16);
        }
    }
}
