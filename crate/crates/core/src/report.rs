//! Report and plot-data writers.
//!
//! Every analysis emits a human-readable fixed-width table and a
//! machine-readable delimited twin. Offsets and uncertainties are printed
//! in parts in 10^6; full precision lives in the delimited files and in
//! memory, rounding happens only here.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::RunSpectrum;
use crate::error::{Error, Result};
use crate::polyfit::PolyFit;
use crate::trend::{RunOffsets, TrendFit};
use crate::uncertainty::{MixtureStats, ScanResult};

fn micro(x: f64) -> f64 {
    x * 1e6
}

fn khz(f: f64) -> f64 {
    f / 1e3
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Selection fractions (rows: bandwidth, columns: order)
// ---------------------------------------------------------------------------

pub fn selection_table(stats: &[MixtureStats], orders: &[u32]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>9}", "fmax_khz");
    for d in orders {
        let _ = write!(out, " {:>7}", format!("p(d={d})"));
    }
    out.push('\n');
    for s in stats {
        let _ = write!(out, "{:>9.0}", khz(s.fmax));
        for d in orders {
            match s.per_order.get(d) {
                Some(c) => {
                    let _ = write!(out, " {:>7.4}", c.p);
                }
                None => {
                    let _ = write!(out, " {:>7}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn selection_csv(stats: &[MixtureStats], orders: &[u32]) -> String {
    let mut out = String::from("fmax_hz");
    for d in orders {
        let _ = write!(out, ",p_d{d}");
    }
    out.push('\n');
    for s in stats {
        let _ = write!(out, "{}", s.fmax);
        for d in orders {
            match s.per_order.get(d) {
                Some(c) => {
                    let _ = write!(out, ",{}", c.p);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Bandwidth scan (one row per bandwidth)
// ---------------------------------------------------------------------------

pub fn scan_table(stats: &[MixtureStats]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9} {:>3} {:>9} {:>10} {:>9} {:>11} {:>10} {:>10}   (offset columns x1e6)",
        "fmax_khz", "d", "a0_hat", "sigma_ran", "a0_bar", "sigma_alpha", "sigma_beta", "sigma_tot"
    );
    for s in stats {
        let _ = writeln!(
            out,
            "{:>9.0} {:>3} {:>9.2} {:>10.2} {:>9.2} {:>11.2} {:>10.3} {:>10.3}",
            khz(s.fmax),
            s.selected_d,
            micro(s.a0_hat),
            micro(s.sigma_ran),
            micro(s.a0_bar),
            micro(s.sigma_alpha),
            micro(s.sigma_beta),
            micro(s.sigma_tot),
        );
    }
    out
}

pub fn scan_csv(stats: &[MixtureStats]) -> String {
    let mut out = String::from(
        "fmax_hz,selected_d,a0_hat,sigma_ran,a0_bar,sigma_alpha,sigma_beta,sigma_tot\n",
    );
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.fmax,
            s.selected_d,
            s.a0_hat,
            s.sigma_ran,
            s.a0_bar,
            s.sigma_alpha,
            s.sigma_beta,
            s.sigma_tot
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Scan summary (single row)
// ---------------------------------------------------------------------------

pub fn summary_table(scan: &ScanResult) -> String {
    let s = scan.star();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9} {:>3} {:>9} {:>10} {:>9} {:>11} {:>10} {:>14} {:>11} {:>15}   (offset columns x1e6)",
        "fmax_khz",
        "d",
        "a0_hat",
        "sigma_ran",
        "a0_bar",
        "sigma_alpha",
        "sigma_beta",
        "sigma_tot_star",
        "sigma_fmax",
        "sigma_tot_final"
    );
    let _ = writeln!(
        out,
        "{:>9.0} {:>3} {:>9.2} {:>10.2} {:>9.2} {:>11.2} {:>10.2} {:>14.2} {:>11.2} {:>15.2}",
        khz(scan.fmax_star),
        s.selected_d,
        micro(s.a0_hat),
        micro(s.sigma_ran),
        micro(s.a0_bar),
        micro(s.sigma_alpha),
        micro(s.sigma_beta),
        micro(scan.sigma_tot_star),
        micro(scan.sigma_fmax),
        micro(scan.sigma_tot_final),
    );
    out
}

pub fn summary_csv(scan: &ScanResult) -> String {
    let s = scan.star();
    format!(
        "fmax_star_hz,selected_d,a0_hat,sigma_ran,a0_bar,sigma_alpha,sigma_beta,\
         sigma_tot_star,sigma_fmax,sigma_tot_final,k_lowest\n{},{},{},{},{},{},{},{},{},{},{}\n",
        scan.fmax_star,
        s.selected_d,
        s.a0_hat,
        s.sigma_ran,
        s.a0_bar,
        s.sigma_alpha,
        s.sigma_beta,
        scan.sigma_tot_star,
        scan.sigma_fmax,
        scan.sigma_tot_final,
        scan.k_lowest
    )
}

// ---------------------------------------------------------------------------
// Plot data
// ---------------------------------------------------------------------------

pub fn plot_selected_order_csv(stats: &[MixtureStats]) -> String {
    let mut out = String::from("fmax_hz,selected_d\n");
    for s in stats {
        let _ = writeln!(out, "{},{}", s.fmax, s.selected_d);
    }
    out
}

pub fn plot_sigma_tot_csv(stats: &[MixtureStats]) -> String {
    let mut out = String::from("fmax_hz,sigma_tot\n");
    for s in stats {
        let _ = writeln!(out, "{},{}", s.fmax, s.sigma_tot);
    }
    out
}

/// Offset with a +/- sigma_tot band per bandwidth.
pub fn plot_offset_csv(stats: &[MixtureStats]) -> String {
    let mut out = String::from("fmax_hz,a0_hat,band_lo,band_hi\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.fmax,
            s.a0_hat,
            s.a0_hat - s.sigma_tot,
            s.a0_hat + s.sigma_tot
        );
    }
    out
}

/// The k bandwidths with the lowest sigma_tot, ascending in fmax.
pub fn plot_k_lowest_csv(scan: &ScanResult) -> String {
    let mut idx = scan.k_lowest_indices(scan.k_lowest);
    idx.sort_unstable();
    let mut out = String::from("fmax_hz,sigma_tot,a0_hat\n");
    for i in idx {
        let s = &scan.stats[i];
        let _ = writeln!(out, "{},{},{}", s.fmax, s.sigma_tot, s.a0_hat);
    }
    out
}

/// Per-run offsets with their asymptotic standard uncertainties.
pub fn run_offsets_csv(offsets: &RunOffsets) -> String {
    let mut out = String::from("run_id,day,offset,sigma\n");
    for i in 0..offsets.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            offsets.run_ids[i],
            offsets.t[i],
            offsets.y[i],
            offsets.v[i].sqrt()
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Trend report
// ---------------------------------------------------------------------------

/// One row of the trend-analysis report.
pub struct TrendSummary {
    pub fmax: f64,
    pub order: u32,
    pub fit: TrendFit,
    pub parametric_se_beta1: f64,
    pub bp_p_value: f64,
    /// Offset of the selected model on the pooled spectrum with its
    /// mixture uncertainty.
    pub pooled_offset: f64,
    pub pooled_sigma_tot: f64,
}

fn format_p_trend(fit: &TrendFit) -> String {
    match &fit.bootstrap {
        Some(b) if b.p_trend_is_upper_bound() => format!("<{:.3}", b.p_trend()),
        Some(b) => format!("{:.3}", b.p_trend()),
        None => "-".into(),
    }
}

pub fn trend_table(rows: &[TrendSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9} {:>3} {:>16} {:>16} {:>8} {:>8} {:>8} {:>8} {:>18}   (offset columns x1e6, slope x1e6/day)",
        "fmax_khz",
        "d",
        "intercept(se)",
        "slope(se)",
        "p_trend",
        "chi2",
        "p_cons",
        "bp_p",
        "pooled(sigma_tot)"
    );
    for row in rows {
        let boot = row.fit.bootstrap.as_ref();
        let intercept = format!(
            "{:.2}({:.2})",
            micro(row.fit.beta0),
            boot.map_or(f64::NAN, |b| micro(b.se_beta0))
        );
        let slope = format!(
            "{:.3}({:.3})",
            micro(row.fit.beta1),
            boot.map_or(f64::NAN, |b| micro(b.se_beta1))
        );
        let p_cons = row
            .fit
            .p_consistency
            .map_or("-".to_string(), |p| format!("{p:.3}"));
        let _ = writeln!(
            out,
            "{:>9.0} {:>3} {:>16} {:>16} {:>8} {:>8.1} {:>8} {:>8.3} {:>18}",
            khz(row.fmax),
            row.order,
            intercept,
            slope,
            format_p_trend(&row.fit),
            row.fit.chi2_obs,
            p_cons,
            row.bp_p_value,
            format!(
                "{:.2}({:.2})",
                micro(row.pooled_offset),
                micro(row.pooled_sigma_tot)
            ),
        );
    }
    out
}

pub fn trend_csv(rows: &[TrendSummary]) -> String {
    let mut out = String::from(
        "fmax_hz,order,intercept,se_intercept,slope_per_day,se_slope,p_trend,\
         p_trend_is_upper_bound,chi2_obs,p_consistency,variance_scale,\
         parametric_se_slope,bp_p_value,pooled_offset,pooled_sigma_tot\n",
    );
    for row in rows {
        let boot = row.fit.bootstrap.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.fmax,
            row.order,
            row.fit.beta0,
            boot.map_or(f64::NAN, |b| b.se_beta0),
            row.fit.beta1,
            boot.map_or(f64::NAN, |b| b.se_beta1),
            boot.map_or(f64::NAN, |b| b.p_trend()),
            boot.is_some_and(|b| b.p_trend_is_upper_bound()),
            row.fit.chi2_obs,
            row.fit.p_consistency.unwrap_or(f64::NAN),
            row.fit.variance_scale.unwrap_or(f64::NAN),
            row.parametric_se_beta1,
            row.bp_p_value,
            row.pooled_offset,
            row.pooled_sigma_tot
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Fit report
// ---------------------------------------------------------------------------

pub fn fit_report_json(fit: &PolyFit, fmax: f64, boltzmann: Option<f64>) -> serde_json::Value {
    let p = fit.coeffs().len();
    let cov: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| fit.coeff_cov()[(i, j)]).collect())
        .collect();
    let mut value = serde_json::json!({
        "order": fit.model().order(),
        "f0_hz": fit.model().f0(),
        "fmax_hz": fmax,
        "coefficients": fit.coeffs(),
        "covariance": cov,
        "sigma_a0_ran": fit.sigma_a0_ran(),
        "residual_variance": fit.residual_variance(),
        "n_points": fit.n_points(),
    });
    if let Some(k) = boltzmann {
        value["boltzmann_j_per_k"] = serde_json::json!(k);
    }
    value
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// List of artifacts written by one command, with the seed and a hash of
/// the analysis configuration. No timestamps: identical inputs must give
/// identical manifests.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config_hash: &str,
    artifacts: &[PathBuf],
) -> Result<PathBuf> {
    let mut out = String::new();
    let _ = writeln!(out, "command = {command}");
    let _ = writeln!(out, "seed = {seed}");
    let _ = writeln!(out, "config_sha256 = {config_hash}");
    let mut names: Vec<String> = artifacts
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect();
    names.sort();
    for name in names {
        let _ = writeln!(out, "artifact = {name}");
    }
    let path = dir.join("manifest.txt");
    write_text(&path, &out)?;
    Ok(path)
}

/// Dataset summary line printed by loaders.
pub fn dataset_line(runs: &[RunSpectrum]) -> String {
    format!(
        "{} runs, {} blocks from {} Hz to {} Hz",
        runs.len(),
        runs[0].len(),
        runs[0].frequencies().first().unwrap(),
        runs[0].frequencies().last().unwrap()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use crate::uncertainty::MixtureComponent;

    fn stats() -> Vec<MixtureStats> {
        let mut per_order = BTreeMap::new();
        per_order.insert(
            4,
            MixtureComponent {
                a0: 1.81e-6,
                sigma_ran: 3.18e-6,
                p: 0.9446,
            },
        );
        per_order.insert(
            12,
            MixtureComponent {
                a0: 0.4e-6,
                sigma_ran: 3.9e-6,
                p: 0.0554,
            },
        );
        vec![MixtureStats {
            fmax: 575e3,
            selected_d: 4,
            a0_hat: 1.81e-6,
            sigma_ran: 3.18e-6,
            a0_bar: 1.48e-6,
            sigma_alpha: 3.31e-6,
            sigma_beta: 1.36e-6,
            sigma_tot: 3.579e-6,
            per_order,
        }]
    }

    #[test]
    fn selection_table_shape() {
        let table = selection_table(&stats(), &[2, 4, 12]);
        let mut lines = table.lines();
        assert!(lines.next().unwrap().contains("p(d=4)"));
        let row = lines.next().unwrap();
        assert!(row.contains("575"));
        assert!(row.contains("0.9446"));
        assert!(row.contains("-")); // order 2 absent at this bandwidth
    }

    #[test]
    fn scan_table_scales_to_micro() {
        let table = scan_table(&stats());
        let row = table.lines().nth(1).unwrap();
        assert!(row.contains("1.81"), "{row}");
        assert!(row.contains("3.579"), "{row}");
    }

    #[test]
    fn rounding_happens_only_at_output() {
        // Full-precision value prints to two decimals half-up.
        let combined = (3.246e-6f64.powi(2) + 0.56e-6f64.powi(2)).sqrt();
        assert_eq!(format!("{:.2}", micro(combined)), "3.29");
        assert_eq!(format!("{:.2}", micro(3.246e-6)), "3.25");
    }

    #[test]
    fn manifest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let artifacts = vec![dir.path().join("b.csv"), dir.path().join("a.csv")];
        let path = write_manifest(dir.path(), "select", 7, "abc123", &artifacts).unwrap();
        let content = fs::read_to_string(&path).unwrap();
        assert_eq!(
            content,
            "command = select\nseed = 7\nconfig_sha256 = abc123\nartifact = a.csv\nartifact = b.csv\n"
        );
    }
}
