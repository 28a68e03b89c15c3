//! Selection-aware uncertainty of the fitted offset.
//!
//! For a given bandwidth, the sampling distribution of the offset is
//! approximated by a Gaussian mixture: one component per candidate order,
//! weighted by its selection fraction, centered on that order's fitted
//! offset with the asymptotic standard uncertainty as spread. The mixture
//! mean and variance give
//!
//! ```text
//! a0_bar     = sum_d p(d) a0(d)
//! sigma_a^2  = sum_d p(d) sigma_ran(d)^2          (within-model)
//! sigma_b^2  = sum_d p(d) (a0(d) - a0_bar)^2      (between-model)
//! sigma_tot  = sqrt(sigma_a^2 + sigma_b^2)
//! ```
//!
//! The bandwidth scan minimizes `sigma_tot` over a frequency grid and adds
//! a spread penalty for imperfect bandwidth selection: the standard
//! deviation of the selected-order offsets at the k bandwidths with the
//! lowest `sigma_tot`, combined in quadrature with the minimum.

use std::collections::BTreeMap;

use crate::crossval::{selection_fractions, CvConfig, SelectionFractions};
use crate::data::{pool_ratio_all, Dataset, RatioSpectrum};
use crate::error::{Error, Result};
use crate::polyfit::PolyModel;
use crate::rng::substream_seed;

/// Default number of lowest-sigma bandwidths entering the spread penalty.
pub const DEFAULT_K_LOWEST: usize = 5;

/// Offset estimate of one candidate order, relative to the mean
/// calibration reference.
#[derive(Debug, Clone, Copy)]
pub struct OrderEstimate {
    pub a0: f64,
    pub sigma_ran: f64,
}

/// One mixture component: an order's estimate and its selection fraction.
#[derive(Debug, Clone, Copy)]
pub struct MixtureComponent {
    pub a0: f64,
    pub sigma_ran: f64,
    pub p: f64,
}

/// Mixture statistics of the offset at one bandwidth.
#[derive(Debug, Clone)]
pub struct MixtureStats {
    pub fmax: f64,
    pub selected_d: u32,
    /// Offset of the selected order.
    pub a0_hat: f64,
    /// Asymptotic standard uncertainty of the selected order's offset.
    pub sigma_ran: f64,
    /// Mixture mean of the offset.
    pub a0_bar: f64,
    /// Within-model (random) component.
    pub sigma_alpha: f64,
    /// Between-model (selection) component.
    pub sigma_beta: f64,
    /// Root sum of squares of the two components.
    pub sigma_tot: f64,
    pub per_order: BTreeMap<u32, MixtureComponent>,
}

/// Evaluate the mixture statistics from per-order offset estimates and
/// selection fractions. Estimates must come from fits of the uncorrected
/// pooled spectrum at the same bandwidth the fractions were computed for.
pub fn mixture_stats(
    per_order: &BTreeMap<u32, OrderEstimate>,
    fractions: &SelectionFractions,
) -> Result<MixtureStats> {
    if fractions.p.is_empty() {
        return Err(Error::Inconsistency("no selection fractions".into()));
    }
    let mut components = BTreeMap::new();
    for (d, p) in &fractions.p {
        let est = per_order.get(d).ok_or_else(|| {
            Error::Inconsistency(format!(
                "order {d} has selection fraction {p} but no offset estimate"
            ))
        })?;
        components.insert(
            *d,
            MixtureComponent {
                a0: est.a0,
                sigma_ran: est.sigma_ran,
                p: *p,
            },
        );
    }

    let a0_bar: f64 = components.values().map(|c| c.p * c.a0).sum();
    let var_alpha: f64 = components
        .values()
        .map(|c| c.p * c.sigma_ran * c.sigma_ran)
        .sum();
    let var_beta: f64 = components
        .values()
        .map(|c| c.p * (c.a0 - a0_bar) * (c.a0 - a0_bar))
        .sum();

    // Largest fraction wins; ties go to the smaller order.
    let mut selected_d = 0;
    let mut best_p = f64::NEG_INFINITY;
    for (d, c) in &components {
        if c.p > best_p {
            best_p = c.p;
            selected_d = *d;
        }
    }
    let sel = components[&selected_d];

    Ok(MixtureStats {
        fmax: fractions.fmax,
        selected_d,
        a0_hat: sel.a0,
        sigma_ran: sel.sigma_ran,
        a0_bar,
        sigma_alpha: var_alpha.sqrt(),
        sigma_beta: var_beta.sqrt(),
        sigma_tot: (var_alpha + var_beta).sqrt(),
        per_order: components,
    })
}

/// Fit every order to the spectrum below `fmax` and report offsets
/// relative to `a0_ref`.
pub fn per_order_fits(
    spectrum: &RatioSpectrum,
    orders: &[u32],
    f0: f64,
    fmax: f64,
    a0_ref: f64,
) -> Result<BTreeMap<u32, OrderEstimate>> {
    let mut out = BTreeMap::new();
    for d in orders {
        let fit = PolyModel::new(*d, f0)?.fit(spectrum, fmax, None)?;
        out.insert(
            *d,
            OrderEstimate {
                a0: fit.a0() - a0_ref,
                sigma_ran: fit.sigma_a0_ran(),
            },
        );
    }
    Ok(out)
}

/// Evenly spaced bandwidth grid, inclusive of `stop_hz` when it lands on
/// a step.
#[derive(Debug, Clone, Copy)]
pub struct BandwidthGrid {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub step_hz: f64,
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        Self {
            start_hz: 200e3,
            stop_hz: 1400e3,
            step_hz: 25e3,
        }
    }
}

impl BandwidthGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step_hz > 0.0 && self.start_hz > 0.0 && self.start_hz < self.stop_hz) {
            return Err(Error::Config(format!(
                "bandwidth grid must satisfy 0 < start < stop with positive step, got \
                 start {} Hz, stop {} Hz, step {} Hz",
                self.start_hz, self.stop_hz, self.step_hz
            )));
        }
        let mut values = Vec::new();
        let mut k = 0u32;
        loop {
            let f = self.start_hz + self.step_hz * k as f64;
            if f > self.stop_hz * (1.0 + 1e-12) {
                break;
            }
            values.push(f);
            k += 1;
        }
        Ok(values)
    }
}

/// Result of a bandwidth scan.
#[derive(Debug, Clone)]
pub struct ScanResult {
    /// Mixture statistics per surviving bandwidth, ascending in fmax.
    pub stats: Vec<MixtureStats>,
    pub fmax_star: f64,
    pub sigma_tot_star: f64,
    pub sigma_fmax: f64,
    pub sigma_tot_final: f64,
    pub k_lowest: usize,
}

impl ScanResult {
    pub fn grid(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.fmax).collect()
    }

    /// Statistics at the selected bandwidth.
    pub fn star(&self) -> &MixtureStats {
        self.stats
            .iter()
            .find(|s| s.fmax == self.fmax_star)
            .expect("fmax_star is drawn from stats")
    }

    /// Indices of the k bandwidths with the lowest sigma_tot.
    pub fn k_lowest_indices(&self, k: usize) -> Vec<usize> {
        k_lowest_indices(&self.stats, k)
    }
}

fn k_lowest_indices(stats: &[MixtureStats], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..stats.len()).collect();
    idx.sort_by(|a, b| {
        stats[*a]
            .sigma_tot
            .total_cmp(&stats[*b].sigma_tot)
            .then(stats[*a].fmax.total_cmp(&stats[*b].fmax))
    });
    idx.truncate(k);
    idx
}

/// Sample standard deviation (n-1 denominator) of the selected-order
/// offsets at the `k` bandwidths with the lowest `sigma_tot`.
pub fn sigma_fmax(stats: &[MixtureStats], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Argument(format!(
            "spread penalty needs at least 2 bandwidths, got k = {k}"
        )));
    }
    if stats.len() < k {
        return Err(Error::Argument(format!(
            "spread penalty over {k} bandwidths needs at least that many scanned, got {}",
            stats.len()
        )));
    }
    let chosen = k_lowest_indices(stats, k);
    let values: Vec<f64> = chosen.iter().map(|i| stats[*i].a0_hat).collect();
    let mean = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    Ok(var.sqrt())
}

/// Combine the minimum total uncertainty with the bandwidth spread
/// penalty in quadrature.
pub fn sigma_tot_final(sigma_tot_star: f64, sigma_fmax: f64) -> f64 {
    (sigma_tot_star * sigma_tot_star + sigma_fmax * sigma_fmax).sqrt()
}

/// Scan fitting bandwidths: per bandwidth, selection fractions on the
/// corrected spectra, per-order fits on the raw pooled spectrum, mixture
/// statistics; then pick the bandwidth minimizing `sigma_tot` and assemble
/// the final uncertainty.
///
/// Each bandwidth draws its cross-validation seed from a substream of
/// `cv.seed`, so a concurrent scan reproduces the sequential one.
pub fn bandwidth_scan(
    dataset: &Dataset,
    cv: &CvConfig,
    grid: &BandwidthGrid,
    k_lowest: usize,
) -> Result<ScanResult> {
    if dataset.is_corrected() {
        return Err(Error::Config(
            "bandwidth scan needs the uncorrected dataset: offsets are estimated from the \
             raw pooled spectrum"
                .into(),
        ));
    }
    let fmax_values = grid.values()?;
    let a0_ref = dataset.a0_calc_bar();
    // One pooled raw spectrum covering the widest window serves all fits.
    let pooled_raw = pool_ratio_all(dataset, *fmax_values.last().unwrap())?;

    let mut stats: Vec<MixtureStats> = Vec::with_capacity(fmax_values.len());
    for (idx, fmax) in fmax_values.iter().enumerate() {
        let cv_band = CvConfig {
            seed: substream_seed(cv.seed, idx as u64),
            ..cv.clone()
        };
        let band = selection_fractions(dataset, &cv_band, *fmax).and_then(|fractions| {
            let orders: Vec<u32> = fractions.p.keys().copied().collect();
            let fits = per_order_fits(&pooled_raw, &orders, cv.f0, *fmax, a0_ref)?;
            mixture_stats(&fits, &fractions)
        });
        match band {
            Ok(s) => stats.push(s),
            Err(
                e @ (Error::Underdetermined { .. } | Error::SingularFit(_) | Error::CvSplit { .. }),
            ) => {
                log::warn!("dropping bandwidth {fmax} Hz: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    if stats.is_empty() {
        return Err(Error::Scan(
            "no bandwidth on the grid produced a usable fit".into(),
        ));
    }

    // Smallest sigma_tot wins; ties go to the lower bandwidth.
    let mut star = 0;
    for (i, s) in stats.iter().enumerate() {
        if s.sigma_tot < stats[star].sigma_tot {
            star = i;
        }
    }
    let fmax_star = stats[star].fmax;
    let sigma_tot_star = stats[star].sigma_tot;
    let spread = sigma_fmax(&stats, k_lowest)?;

    Ok(ScanResult {
        stats,
        fmax_star,
        sigma_tot_star,
        sigma_fmax: spread,
        sigma_tot_final: sigma_tot_final(sigma_tot_star, spread),
        k_lowest,
    })
}
