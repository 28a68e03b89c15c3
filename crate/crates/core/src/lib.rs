//! Data-driven spectral model selection and uncertainty quantification
//! for Johnson noise thermometry with a quantum-accurate noise source.
//!
//! The pipeline fits even-polynomial models to PSD ratio spectra, selects
//! the polynomial order by repeated five-fold cross-validation over runs,
//! selects the fitting bandwidth by minimizing a total uncertainty that
//! mixes random and model-selection components, and audits temporal
//! stability of the fitted offsets with bootstrap trend analysis.

pub mod crossval;
pub mod data;
pub mod error;
pub mod lstsq;
pub mod physics;
pub mod pipeline;
pub mod polyfit;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod trend;
pub mod uncertainty;

pub use error::{Error, Result};
