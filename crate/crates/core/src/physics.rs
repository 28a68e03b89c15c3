//! Forward conversion between the fitted ratio offset and the Boltzmann
//! constant via the Nyquist and synthesizer PSD models.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Physical parameters of the measurement chain. All constants are
/// configuration inputs so that revised recommended values never require
/// code changes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConfig {
    /// Planck constant (J s).
    pub h: f64,
    /// Elementary charge (C).
    pub e: f64,
    /// Triple-point-of-water temperature (K).
    pub t_w: f64,
    /// Sense resistance in von Klitzing units (dimensionless).
    pub x_r: f64,
    /// Synthesizer clock frequency (Hz).
    pub f_s: f64,
    /// Bit-length parameter (dimensionless).
    pub m: f64,
    /// Software amplitude parameter of the synthesized waveform.
    pub d_amp: f64,
    /// Number of junctions in the Josephson array.
    pub n_j: u32,
}

impl PhysicalConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("h", self.h),
            ("e", self.e),
            ("t_w", self.t_w),
            ("x_r", self.x_r),
            ("f_s", self.f_s),
            ("m", self.m),
            ("d_amp", self.d_amp),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!(
                    "physical parameter {name} must be positive, got {value}"
                )));
            }
        }
        if self.n_j == 0 {
            return Err(Error::Config("junction count n_j must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: PhysicalConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Josephson constant 2e/h (Hz/V).
    pub fn k_j(&self) -> f64 {
        2.0 * self.e / self.h
    }

    /// von Klitzing resistance h/e^2 (ohm).
    pub fn r_k(&self) -> f64 {
        self.h / (self.e * self.e)
    }
}

/// PSD of the synthesized quantum-accurate noise:
/// `D^2 N_J^2 f_s M / K_J^2`.
pub fn qvns_psd(cfg: &PhysicalConfig) -> f64 {
    let n_j = cfg.n_j as f64;
    let k_j = cfg.k_j();
    cfg.d_amp * cfg.d_amp * n_j * n_j * cfg.f_s * cfg.m / (k_j * k_j)
}

/// Nyquist PSD of the thermal noise across the sense resistor for a given
/// Boltzmann constant: `4 k T_w X_R R_K`.
pub fn resistor_psd(cfg: &PhysicalConfig, k: f64) -> Result<f64> {
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Domain(format!(
            "Boltzmann constant must be positive, got {k}"
        )));
    }
    Ok(4.0 * k * cfg.t_w * cfg.x_r * cfg.r_k())
}

/// Boltzmann constant from the measured PSD ratio S_R/S_Q.
///
/// The amplitude parameter enters squared, inverting the synthesizer PSD
/// model exactly, so the composition with `resistor_psd` and `qvns_psd`
/// is an identity in k.
pub fn boltzmann_from_ratio(cfg: &PhysicalConfig, ratio: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Domain(format!(
            "PSD ratio must be positive, got {ratio}"
        )));
    }
    let n_j = cfg.n_j as f64;
    Ok(cfg.h * cfg.d_amp * cfg.d_amp * n_j * n_j * cfg.f_s * cfg.m * ratio
        / (16.0 * cfg.t_w * cfg.x_r))
}
