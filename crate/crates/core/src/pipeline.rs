//! End-to-end orchestration behind the command-line interface.
//!
//! `run_select` walks the full bandwidth-selection workflow: correct the
//! spectra, estimate selection fractions per bandwidth, fit every
//! candidate order to the raw pooled spectrum, form mixture statistics,
//! minimize the total uncertainty over the grid and attach the bandwidth
//! spread penalty. `run_trend` builds the per-run offset series and its
//! bootstrap trend analysis. `run_simulate` writes synthetic datasets in
//! the ingestion formats. Every command leaves a manifest naming its
//! artifacts, the seed and a hash of the analysis configuration.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::crossval::{selection_fractions, CvConfig, ValidationSpectra};
use crate::data::{load_dataset, pool_ratio_all, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::physics::{boltzmann_from_ratio, PhysicalConfig};
use crate::polyfit::{PolyModel, DEFAULT_F0, DEFAULT_ORDERS};
use crate::report;
use crate::rng::substream_seed;
use crate::simulate::{simulate_dataset, SimConfig};
use crate::trend::{
    bootstrap_trend, breusch_pagan, parametric_bootstrap_trend, per_run_offsets,
};
use crate::uncertainty::{
    bandwidth_scan, mixture_stats, per_order_fits, BandwidthGrid, ScanResult, DEFAULT_K_LOWEST,
};

/// Reduced resampling counts for quick turnaround runs.
pub const FAST_N_SPLITS: usize = 2000;
pub const FAST_N_BOOT: usize = 5000;

/// Full-size defaults.
pub const DEFAULT_N_SPLITS: usize = crate::crossval::DEFAULT_N_SPLITS;
pub const DEFAULT_N_BOOT: usize = crate::trend::DEFAULT_N_BOOT;

/// Configuration shared by the pipeline commands.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub spectra: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub physics: Option<PathBuf>,
    pub grid: BandwidthGrid,
    /// Five-way splits per bandwidth; `None` takes the full or fast
    /// default.
    pub n_splits: Option<usize>,
    /// Bootstrap replicates for trend analysis; `None` as above.
    pub n_boot: Option<usize>,
    pub candidate_orders: Vec<u32>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub k_lowest: usize,
    pub fast: bool,
    /// Worker-pool budget; `None` uses all cores.
    pub threads: Option<usize>,
    /// Pool uncorrected spectra on the validation side of the
    /// cross-validation.
    pub raw_validation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            spectra: None,
            calib: None,
            physics: None,
            grid: BandwidthGrid::default(),
            n_splits: None,
            n_boot: None,
            candidate_orders: DEFAULT_ORDERS.to_vec(),
            seed: 0,
            out_dir: PathBuf::from("jntfit-out"),
            k_lowest: DEFAULT_K_LOWEST,
            fast: false,
            threads: None,
            raw_validation: false,
        }
    }
}

impl PipelineConfig {
    pub fn effective_n_splits(&self) -> usize {
        self.n_splits
            .unwrap_or(if self.fast { FAST_N_SPLITS } else { DEFAULT_N_SPLITS })
    }

    pub fn effective_n_boot(&self) -> usize {
        self.n_boot
            .unwrap_or(if self.fast { FAST_N_BOOT } else { DEFAULT_N_BOOT })
    }

    fn cv_config(&self) -> CvConfig {
        CvConfig {
            n_splits: self.effective_n_splits(),
            candidate_orders: self.candidate_orders.clone(),
            seed: self.seed,
            validation: if self.raw_validation {
                ValidationSpectra::Raw
            } else {
                ValidationSpectra::Corrected
            },
            f0: DEFAULT_F0,
        }
    }

    fn load(&self) -> Result<Dataset> {
        let spectra = self
            .spectra
            .as_ref()
            .ok_or_else(|| Error::Config("a spectra file is required".into()))?;
        let calib = self
            .calib
            .as_ref()
            .ok_or_else(|| Error::Config("a calibration file is required".into()))?;
        let dataset = load_dataset(spectra, calib)?;
        log::info!("loaded {}", report::dataset_line(dataset.runs()));
        Ok(dataset)
    }

    /// Hash of the analysis-relevant configuration. Thread budget and
    /// output directory are excluded: they must not change any result.
    fn config_hash(&self, command: &str, extra: &str) -> String {
        let canonical = format!(
            "command={command};spectra={:?};calib={:?};physics={:?};grid={},{},{};\
             n_splits={};n_boot={};orders={:?};seed={};k_lowest={};raw_validation={};{extra}",
            self.spectra,
            self.calib,
            self.physics,
            self.grid.start_hz,
            self.grid.stop_hz,
            self.grid.step_hz,
            self.effective_n_splits(),
            self.effective_n_boot(),
            self.candidate_orders,
            self.seed,
            self.k_lowest,
            self.raw_validation,
        );
        hex_digest(&canonical)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|source| Error::Io {
            path: self.out_dir.clone(),
            source,
        })
    }
}

fn hex_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn with_thread_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Bandwidth-selection workflow. Writes the selection-fraction table, the
/// per-bandwidth scan table, the summary row and the plot-data files;
/// returns the scan result.
pub fn run_select(cfg: &PipelineConfig) -> Result<ScanResult> {
    let dataset = cfg.load()?;
    let cv = cfg.cv_config();
    let scan = with_thread_pool(cfg.threads, || {
        bandwidth_scan(&dataset, &cv, &cfg.grid, cfg.k_lowest)
    })??;

    cfg.ensure_out_dir()?;
    let dir = &cfg.out_dir;
    let mut artifacts = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        report::write_text(&path, &content)?;
        artifacts.push(path);
        Ok(())
    };

    emit(
        "selection_fractions.txt",
        report::selection_table(&scan.stats, &cfg.candidate_orders),
    )?;
    emit(
        "selection_fractions.csv",
        report::selection_csv(&scan.stats, &cfg.candidate_orders),
    )?;
    emit("scan_table.txt", report::scan_table(&scan.stats))?;
    emit("scan_table.csv", report::scan_csv(&scan.stats))?;
    emit("summary.txt", report::summary_table(&scan))?;
    emit("summary.csv", report::summary_csv(&scan))?;
    emit(
        "fig_selected_order.csv",
        report::plot_selected_order_csv(&scan.stats),
    )?;
    emit("fig_sigma_tot.csv", report::plot_sigma_tot_csv(&scan.stats))?;
    emit("fig_offset_band.csv", report::plot_offset_csv(&scan.stats))?;
    emit("fig_k_lowest.csv", report::plot_k_lowest_csv(&scan))?;

    report::write_manifest(
        dir,
        "select",
        cfg.seed,
        &cfg.config_hash("select", ""),
        &artifacts,
    )?;
    Ok(scan)
}

/// Trend workflow at one bandwidth and order: per-run offsets, WLS trend
/// with both bootstraps, heteroscedasticity test and the pooled offset
/// with its mixture uncertainty.
pub fn run_trend(cfg: &PipelineConfig, fmax: f64, order: u32) -> Result<report::TrendSummary> {
    let dataset = cfg.load()?;
    let model = PolyModel::new(order, DEFAULT_F0)?;
    let n_boot = cfg.effective_n_boot();

    let (summary, offsets) = with_thread_pool(cfg.threads, || -> Result<_> {
        let offsets = per_run_offsets(&dataset, &model, fmax)?;
        let fit = bootstrap_trend(&offsets, n_boot, substream_seed(cfg.seed, 0))?;
        let parametric_se_beta1 =
            parametric_bootstrap_trend(&offsets, n_boot, substream_seed(cfg.seed, 1))?;

        let pooled = pool_ratio_all(&dataset, fmax)?;
        let pooled_fit = model.fit(&pooled, fmax, None)?;
        let bp_p_value = breusch_pagan(&pooled_fit, &pooled, fmax)?;

        // Pooled offset with selection-aware uncertainty at this
        // bandwidth.
        let mut cv = cfg.cv_config();
        cv.seed = substream_seed(cfg.seed, 2);
        let fractions = selection_fractions(&dataset, &cv, fmax)?;
        let orders: Vec<u32> = fractions.p.keys().copied().collect();
        let fits = per_order_fits(&pooled, &orders, DEFAULT_F0, fmax, dataset.a0_calc_bar())?;
        let stats = mixture_stats(&fits, &fractions)?;

        let summary = report::TrendSummary {
            fmax,
            order,
            fit,
            parametric_se_beta1,
            bp_p_value,
            pooled_offset: stats.a0_hat,
            pooled_sigma_tot: stats.sigma_tot,
        };
        Ok((summary, offsets))
    })??;

    cfg.ensure_out_dir()?;
    let dir = &cfg.out_dir;
    let rows = std::slice::from_ref(&summary);
    let mut artifacts = Vec::new();
    for (name, content) in [
        ("trend_table.txt", report::trend_table(rows)),
        ("trend_table.csv", report::trend_csv(rows)),
        ("fig_run_offsets.csv", report::run_offsets_csv(&offsets)),
    ] {
        let path = dir.join(name);
        report::write_text(&path, &content)?;
        artifacts.push(path);
    }
    report::write_manifest(
        dir,
        "trend",
        cfg.seed,
        &cfg.config_hash("trend", &format!("fmax={fmax};order={order}")),
        &artifacts,
    )?;
    Ok(summary)
}

/// Write a simulated dataset in the ingestion formats.
pub fn run_simulate(sim: &SimConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let dataset = simulate_dataset(sim)?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let spectra = out_dir.join("spectra.csv");
    let calib = out_dir.join("calibration.csv");
    write_dataset(&dataset, &spectra, &calib)?;

    let canonical = format!(
        "command=simulate;truth={:?};n_runs={};noise={:?};grid={},{},{};seed={};\
         trend_slope={};day_span={};f0={}",
        sim.truth_coeffs,
        sim.n_runs,
        sim.per_run_noise_sd,
        sim.grid.start_hz,
        sim.grid.step_hz,
        sim.grid.stop_hz,
        sim.seed,
        sim.trend_slope,
        sim.day_span,
        sim.f0,
    );
    report::write_manifest(
        out_dir,
        "simulate",
        sim.seed,
        &hex_digest(&canonical),
        &[spectra.clone(), calib.clone()],
    )?;
    Ok((spectra, calib))
}

/// Single-fit diagnostic: fit one order at one bandwidth on the raw
/// pooled spectrum, optionally converting the offset to a Boltzmann value
/// through a physics configuration.
pub fn run_fit(cfg: &PipelineConfig, fmax: f64, order: u32) -> Result<serde_json::Value> {
    let dataset = cfg.load()?;
    let pooled = pool_ratio_all(&dataset, fmax)?;
    let fit = PolyModel::new(order, DEFAULT_F0)?.fit(&pooled, fmax, None)?;

    let boltzmann = match &cfg.physics {
        Some(path) => {
            let phys = PhysicalConfig::from_toml_path(path)?;
            Some(boltzmann_from_ratio(&phys, fit.a0())?)
        }
        None => None,
    };
    let value = report::fit_report_json(&fit, fmax, boltzmann);

    cfg.ensure_out_dir()?;
    let json_path = cfg.out_dir.join("fit_report.json");
    report::write_text(&json_path, &format!("{:#}\n", value))?;
    let spectrum_path = cfg.out_dir.join("pooled_spectrum.csv");
    pooled.write_csv(&spectrum_path)?;
    report::write_manifest(
        &cfg.out_dir,
        "fit",
        cfg.seed,
        &cfg.config_hash("fit", &format!("fmax={fmax};order={order}")),
        &[json_path, spectrum_path],
    )?;
    Ok(value)
}

/// Breusch-Pagan diagnostic at one bandwidth and order.
pub fn run_bp_test(cfg: &PipelineConfig, fmax: f64, order: u32) -> Result<f64> {
    let dataset = cfg.load()?;
    let pooled = pool_ratio_all(&dataset, fmax)?;
    let fit = PolyModel::new(order, DEFAULT_F0)?.fit(&pooled, fmax, None)?;
    let p = breusch_pagan(&fit, &pooled, fmax)?;

    cfg.ensure_out_dir()?;
    let path = cfg.out_dir.join("bp_test.txt");
    report::write_text(
        &path,
        &format!(
            "fmax_khz = {}\norder = {}\nbp_p_value = {}\n",
            fmax / 1e3,
            order,
            p
        ),
    )?;
    report::write_manifest(
        &cfg.out_dir,
        "bp-test",
        cfg.seed,
        &cfg.config_hash("bp-test", &format!("fmax={fmax};order={order}")),
        &[path],
    )?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::GridSpec;

    fn sim_files(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
        let sim = SimConfig {
            n_runs: 8,
            per_run_noise_sd: vec![1e-4; 8],
            grid: GridSpec {
                start_hz: 900.0,
                step_hz: 1800.0,
                stop_hz: 120e3,
            },
            seed,
            ..SimConfig::default()
        };
        run_simulate(&sim, dir).unwrap()
    }

    #[test]
    fn simulate_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let (spectra, calib) = sim_files(dir.path(), 3);
        let ds = load_dataset(&spectra, &calib).unwrap();
        assert_eq!(ds.n_runs(), 8);
        assert_eq!(ds.grid().len(), 67);
    }

    #[test]
    fn simulate_is_byte_identical_under_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (sa, ca) = sim_files(dir_a.path(), 9);
        let (sb, cb) = sim_files(dir_b.path(), 9);
        assert_eq!(
            std::fs::read(&sa).unwrap(),
            std::fs::read(&sb).unwrap()
        );
        assert_eq!(
            std::fs::read(&ca).unwrap(),
            std::fs::read(&cb).unwrap()
        );
    }

    #[test]
    fn select_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (spectra, calib) = sim_files(dir.path(), 5);
        let out = dir.path().join("out");
        let cfg = PipelineConfig {
            spectra: Some(spectra),
            calib: Some(calib),
            grid: BandwidthGrid {
                start_hz: 30e3,
                stop_hz: 110e3,
                step_hz: 20e3,
            },
            n_splits: Some(50),
            candidate_orders: vec![2, 4, 6],
            seed: 1,
            out_dir: out.clone(),
            k_lowest: 3,
            ..PipelineConfig::default()
        };
        let scan = run_select(&cfg).unwrap();
        assert_eq!(scan.stats.len(), 5);
        for name in [
            "selection_fractions.txt",
            "selection_fractions.csv",
            "scan_table.txt",
            "scan_table.csv",
            "summary.txt",
            "summary.csv",
            "fig_selected_order.csv",
            "fig_sigma_tot.csv",
            "fig_offset_band.csv",
            "fig_k_lowest.csv",
            "manifest.txt",
        ] {
            assert!(out.join(name).exists(), "missing {name}");
        }
    }

    #[test]
    fn noiseless_select_picks_the_truth_order_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimConfig {
            truth_coeffs: vec![1.0, -2e-3, 1e-3],
            n_runs: 6,
            per_run_noise_sd: vec![0.0; 6],
            grid: GridSpec {
                start_hz: 900.0,
                step_hz: 1800.0,
                stop_hz: 300e3,
            },
            seed: 2,
            ..SimConfig::default()
        };
        let (spectra, calib) = run_simulate(&sim, dir.path()).unwrap();
        let cfg = PipelineConfig {
            spectra: Some(spectra),
            calib: Some(calib),
            grid: BandwidthGrid {
                start_hz: 50e3,
                stop_hz: 250e3,
                step_hz: 50e3,
            },
            n_splits: Some(20),
            seed: 8,
            out_dir: dir.path().join("out"),
            k_lowest: 3,
            ..PipelineConfig::default()
        };
        let scan = run_select(&cfg).unwrap();
        for stats in &scan.stats {
            assert_eq!(stats.selected_d, 4, "at fmax {}", stats.fmax);
        }
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let cfg = PipelineConfig::default();
        match run_select(&cfg) {
            Err(e @ Error::Config(_)) => assert_eq!(e.exit_code(), 4),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
