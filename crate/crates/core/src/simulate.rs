//! Synthetic multi-run datasets for validating the selection pipeline.
//!
//! Every simulated run has unit synthesizer PSD, so its resistor PSD is
//! the truth polynomial plus Gaussian white noise, independent across
//! blocks and runs. Calibration offsets are all one with equal weights;
//! an optional linear drift moves the per-run offsets with acquisition
//! day.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::data::{CalibrationRecord, Dataset, RunSpectrum};
use crate::error::{Error, Result};
use crate::polyfit::{eval_poly, DEFAULT_F0};
use crate::rng::substream;

/// Truth coefficients of an eighth-order ratio spectrum with curvature
/// comparable to a measured thermometry spectrum (constant term first).
pub const DEFAULT_TRUTH_COEFFS: [f64; 5] = [1.0, -4.33e-4, 1.66e-3, -2.25e-3, 6.26e-4];

/// Default per-block noise standard deviation. Calibrated so that a
/// pooled 45-run order-8 fit at 1250 kHz carries an offset uncertainty
/// near 3.2e-6, the scale seen in measured data.
pub const DEFAULT_NOISE_SD: f64 = 2.5e-4;

/// Default number of runs.
pub const DEFAULT_N_RUNS: usize = 45;

/// Default span of acquisition days from first to last run.
pub const DEFAULT_DAY_SPAN: f64 = 90.0;

/// Frequency grid of block midpoints: `start + k step` up to `stop`.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub start_hz: f64,
    pub step_hz: f64,
    pub stop_hz: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        // 1.8 kHz blocks with midpoints from 900 Hz up to 2 MHz.
        Self {
            start_hz: 900.0,
            step_hz: 1800.0,
            stop_hz: 2e6,
        }
    }
}

impl GridSpec {
    pub fn midpoints(&self) -> Result<Vec<f64>> {
        if !(self.start_hz > 0.0 && self.step_hz > 0.0 && self.stop_hz >= self.start_hz) {
            return Err(Error::Config(format!(
                "grid must satisfy 0 < start <= stop with positive step, got \
                 start {} Hz, step {} Hz, stop {} Hz",
                self.start_hz, self.step_hz, self.stop_hz
            )));
        }
        let mut mids = Vec::new();
        let mut k = 0u32;
        loop {
            let f = self.start_hz + self.step_hz * k as f64;
            if f > self.stop_hz {
                break;
            }
            mids.push(f);
            k += 1;
        }
        Ok(mids)
    }
}

/// Simulation parameters.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Even-polynomial truth coefficients, constant term first. The
    /// constant term doubles as the common calibration reference, so the
    /// true residual offset is zero.
    pub truth_coeffs: Vec<f64>,
    pub n_runs: usize,
    /// Per-block noise standard deviation, one entry per run.
    pub per_run_noise_sd: Vec<f64>,
    pub grid: GridSpec,
    pub seed: u64,
    /// Drift of the per-run offset per day (0 = stable experiment).
    pub trend_slope: f64,
    /// Days between the first and last run; runs are evenly spaced.
    pub day_span: f64,
    /// Reference frequency the truth coefficients refer to.
    pub f0: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            truth_coeffs: DEFAULT_TRUTH_COEFFS.to_vec(),
            n_runs: DEFAULT_N_RUNS,
            per_run_noise_sd: vec![DEFAULT_NOISE_SD; DEFAULT_N_RUNS],
            grid: GridSpec::default(),
            seed: 0,
            trend_slope: 0.0,
            day_span: DEFAULT_DAY_SPAN,
            f0: DEFAULT_F0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.truth_coeffs.is_empty() {
            return Err(Error::Config("truth coefficient list is empty".into()));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.per_run_noise_sd.len() != self.n_runs {
            return Err(Error::Config(format!(
                "{} noise entries for {} runs",
                self.per_run_noise_sd.len(),
                self.n_runs
            )));
        }
        if let Some(bad) = self
            .per_run_noise_sd
            .iter()
            .find(|sd| !(sd.is_finite() && **sd >= 0.0))
        {
            return Err(Error::Config(format!(
                "noise standard deviations must be non-negative, got {bad}"
            )));
        }
        if !(self.day_span.is_finite() && self.day_span >= 0.0) {
            return Err(Error::Config(format!(
                "day span must be non-negative, got {}",
                self.day_span
            )));
        }
        if !(self.f0.is_finite() && self.f0 > 0.0) {
            return Err(Error::Config(format!(
                "reference frequency must be positive, got {}",
                self.f0
            )));
        }
        Ok(())
    }

    /// Parse a TOML simulation config. A scalar `noise_sd` applies to all
    /// runs; `per_run_noise_sd` overrides it entry by entry.
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: RawSimConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        raw.resolve()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimConfig {
    truth_coeffs: Option<Vec<f64>>,
    n_runs: Option<usize>,
    noise_sd: Option<f64>,
    per_run_noise_sd: Option<Vec<f64>>,
    grid_start_hz: Option<f64>,
    grid_step_hz: Option<f64>,
    grid_stop_hz: Option<f64>,
    seed: Option<u64>,
    trend_slope: Option<f64>,
    day_span: Option<f64>,
    f0: Option<f64>,
}

impl RawSimConfig {
    fn resolve(self) -> Result<SimConfig> {
        let defaults = SimConfig::default();
        let n_runs = self.n_runs.unwrap_or(defaults.n_runs);
        let per_run_noise_sd = match (self.per_run_noise_sd, self.noise_sd) {
            (Some(list), None) => list,
            (None, Some(sd)) => vec![sd; n_runs],
            (None, None) => vec![DEFAULT_NOISE_SD; n_runs],
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either noise_sd or per_run_noise_sd, not both".into(),
                ))
            }
        };
        let cfg = SimConfig {
            truth_coeffs: self.truth_coeffs.unwrap_or(defaults.truth_coeffs),
            n_runs,
            per_run_noise_sd,
            grid: GridSpec {
                start_hz: self.grid_start_hz.unwrap_or(defaults.grid.start_hz),
                step_hz: self.grid_step_hz.unwrap_or(defaults.grid.step_hz),
                stop_hz: self.grid_stop_hz.unwrap_or(defaults.grid.stop_hz),
            },
            seed: self.seed.unwrap_or(defaults.seed),
            trend_slope: self.trend_slope.unwrap_or(defaults.trend_slope),
            day_span: self.day_span.unwrap_or(defaults.day_span),
            f0: self.f0.unwrap_or(defaults.f0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generate a dataset according to the simulation design. Each run draws
/// from its own substream of the master seed, so the dataset is a pure
/// function of the configuration.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let grid = cfg.grid.midpoints()?;
    let t: Vec<f64> = grid.iter().map(|f| (f / cfg.f0).powi(2)).collect();
    let truth: Vec<f64> = t.iter().map(|tk| eval_poly(&cfg.truth_coeffs, *tk)).collect();

    let day_step = if cfg.n_runs > 1 {
        cfg.day_span / (cfg.n_runs - 1) as f64
    } else {
        0.0
    };

    let mut runs = Vec::with_capacity(cfg.n_runs);
    let mut calibrations = Vec::with_capacity(cfg.n_runs);
    for i in 0..cfg.n_runs {
        let day = day_step * i as f64;
        let drift = cfg.trend_slope * day;
        let mut rng = substream(cfg.seed, i as u64);
        let noise = Normal::new(0.0, cfg.per_run_noise_sd[i]).map_err(|e| {
            Error::Config(format!("invalid noise distribution for run {}: {e}", i + 1))
        })?;
        let s_r: Vec<f64> = truth
            .iter()
            .map(|v| v + drift + noise.sample(&mut rng))
            .collect();
        let run_id = (i + 1) as u32;
        runs.push(RunSpectrum::new(
            run_id,
            grid.clone(),
            s_r,
            vec![1.0; grid.len()],
            1.0,
            day,
        )?);
        calibrations.push(CalibrationRecord {
            run_id,
            a0_calc: 1.0,
            weight: 1.0,
        });
    }
    Dataset::new(runs, calibrations)
}
