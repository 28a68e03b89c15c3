//! Experimental quantities: per-run spectra, calibration records, pooled
//! ratio spectra.
//!
//! A dataset is a set of runs sharing one frequency grid. Each run carries
//! blockwise mean PSD estimates for the resistor channel and the
//! synthesizer channel, plus the calibration reference offset measured for
//! that run. Pooling forms one ratio per block as the ratio of blockwise
//! sums across runs; the calibration correction removes run-to-run
//! variation of the reference offset before pooling.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Blockwise mean PSD pair for one run.
#[derive(Debug, Clone)]
pub struct RunSpectrum {
    run_id: u32,
    frequencies: Vec<f64>,
    s_r: Vec<f64>,
    s_q: Vec<f64>,
    acquisition_hours: f64,
    day_offset: f64,
}

impl RunSpectrum {
    pub fn new(
        run_id: u32,
        frequencies: Vec<f64>,
        s_r: Vec<f64>,
        s_q: Vec<f64>,
        acquisition_hours: f64,
        day_offset: f64,
    ) -> Result<Self> {
        if run_id == 0 {
            return Err(Error::Domain("run_id must be a positive integer".into()));
        }
        if frequencies.len() != s_r.len() || frequencies.len() != s_q.len() {
            return Err(Error::Domain(format!(
                "run {run_id}: frequency/PSD lengths differ ({}, {}, {})",
                frequencies.len(),
                s_r.len(),
                s_q.len()
            )));
        }
        if frequencies.is_empty() {
            return Err(Error::Domain(format!("run {run_id}: empty spectrum")));
        }
        if !frequencies.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Domain(format!(
                "run {run_id}: frequencies must be strictly increasing"
            )));
        }
        if let Some(idx) = s_q.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain(format!(
                "run {run_id}: synthesizer PSD must be positive at every block \
                 (block {idx}, f = {} Hz, value {})",
                frequencies[idx], s_q[idx]
            )));
        }
        if !(acquisition_hours.is_finite() && acquisition_hours > 0.0) {
            return Err(Error::Domain(format!(
                "run {run_id}: acquisition time must be positive, got {acquisition_hours}"
            )));
        }
        Ok(Self {
            run_id,
            frequencies,
            s_r,
            s_q,
            acquisition_hours,
            day_offset,
        })
    }

    pub fn run_id(&self) -> u32 {
        self.run_id
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn s_r(&self) -> &[f64] {
        &self.s_r
    }

    pub fn s_q(&self) -> &[f64] {
        &self.s_q
    }

    pub fn acquisition_hours(&self) -> f64 {
        self.acquisition_hours
    }

    /// Acquisition date as days since the first run of the experiment.
    pub fn day_offset(&self) -> f64 {
        self.day_offset
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Calibration reference offset for one run.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationRecord {
    pub run_id: u32,
    pub a0_calc: f64,
    /// Normalized relative acquisition-time weight; weights over a dataset
    /// sum to one.
    pub weight: f64,
}

impl CalibrationRecord {
    fn validate(&self) -> Result<()> {
        if self.run_id == 0 {
            return Err(Error::Reference("run_id must be a positive integer".into()));
        }
        if !(self.a0_calc.is_finite() && self.a0_calc > 0.0) {
            return Err(Error::Reference(format!(
                "run {}: reference offset must be positive, got {}",
                self.run_id, self.a0_calc
            )));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::Reference(format!(
                "run {}: weight must be positive, got {}",
                self.run_id, self.weight
            )));
        }
        Ok(())
    }
}

/// Tag on a ratio spectrum recording how it was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    PooledRaw,
    PooledCorrected,
    SingleRun,
}

impl fmt::Display for SpectrumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumKind::PooledRaw => write!(f, "pooled_raw"),
            SpectrumKind::PooledCorrected => write!(f, "pooled_corrected"),
            SpectrumKind::SingleRun => write!(f, "single_run"),
        }
    }
}

/// Ratio of blockwise PSD sums versus frequency.
#[derive(Debug, Clone)]
pub struct RatioSpectrum {
    frequencies: Vec<f64>,
    ratios: Vec<f64>,
    kind: SpectrumKind,
}

impl RatioSpectrum {
    pub fn new(frequencies: Vec<f64>, ratios: Vec<f64>, kind: SpectrumKind) -> Result<Self> {
        if frequencies.len() != ratios.len() {
            return Err(Error::Domain(format!(
                "ratio spectrum lengths differ ({} frequencies, {} ratios)",
                frequencies.len(),
                ratios.len()
            )));
        }
        if !frequencies.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Domain(
                "ratio spectrum frequencies must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            frequencies,
            ratios,
            kind,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn kind(&self) -> SpectrumKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Number of blocks with midpoint at or below `fmax` (inclusive cut).
    pub fn blocks_within(&self, fmax: f64) -> usize {
        self.frequencies.partition_point(|f| *f <= fmax)
    }

    /// Write as delimited text `frequency_hz,ratio` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(create(path)?);
        write_io(path, writeln!(out, "frequency_hz,ratio"))?;
        for (f, r) in self.frequencies.iter().zip(&self.ratios) {
            write_io(path, writeln!(out, "{f},{r}"))?;
        }
        write_io(path, out.flush())
    }
}

/// A set of runs on one grid with their calibrations.
#[derive(Debug, Clone)]
pub struct Dataset {
    runs: Vec<RunSpectrum>,
    calibrations: Vec<CalibrationRecord>,
    a0_calc_bar: f64,
    corrected: bool,
}

impl Dataset {
    /// Assemble and validate a dataset. `calibrations` carry raw
    /// (unnormalized) weights; they are normalized to sum to one here.
    pub fn new(mut runs: Vec<RunSpectrum>, calibrations: Vec<CalibrationRecord>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Domain("dataset has no runs".into()));
        }
        runs.sort_by_key(|r| r.run_id);
        for w in runs.windows(2) {
            if w[0].run_id == w[1].run_id {
                return Err(Error::Domain(format!("duplicate run_id {}", w[0].run_id)));
            }
        }

        // Exact blockwise grid equality across runs; pooling is only
        // defined when every run contributes the same blocks.
        let grid = runs[0].frequencies.clone();
        for run in &runs[1..] {
            if run.frequencies.len() != grid.len() {
                return Err(Error::Grid(format!(
                    "run {} has {} blocks, run {} has {}",
                    run.run_id,
                    run.frequencies.len(),
                    runs[0].run_id,
                    grid.len()
                )));
            }
            for (k, (a, b)) in grid.iter().zip(&run.frequencies).enumerate() {
                if a.to_bits() != b.to_bits() {
                    return Err(Error::Grid(format!(
                        "run {} block {k} midpoint {b} differs from run {} midpoint {a}",
                        run.run_id, runs[0].run_id
                    )));
                }
            }
        }

        // One calibration per run, no orphans.
        let mut sorted_cal = calibrations;
        sorted_cal.sort_by_key(|c| c.run_id);
        for w in sorted_cal.windows(2) {
            if w[0].run_id == w[1].run_id {
                return Err(Error::Reference(format!(
                    "duplicate calibration for run {}",
                    w[0].run_id
                )));
            }
        }
        let run_ids: BTreeSet<u32> = runs.iter().map(|r| r.run_id).collect();
        let cal_ids: BTreeSet<u32> = sorted_cal.iter().map(|c| c.run_id).collect();
        if let Some(missing) = run_ids.difference(&cal_ids).next() {
            return Err(Error::Reference(format!("missing calibration for run {missing}")));
        }
        if let Some(orphan) = cal_ids.difference(&run_ids).next() {
            return Err(Error::Reference(format!(
                "calibration for unknown run {orphan}"
            )));
        }
        for cal in &sorted_cal {
            cal.validate()?;
        }

        let total_weight: f64 = sorted_cal.iter().map(|c| c.weight).sum();
        for cal in &mut sorted_cal {
            cal.weight /= total_weight;
        }
        let a0_calc_bar = sorted_cal.iter().map(|c| c.weight * c.a0_calc).sum();

        Ok(Self {
            runs,
            calibrations: sorted_cal,
            a0_calc_bar,
            corrected: false,
        })
    }

    pub fn runs(&self) -> &[RunSpectrum] {
        &self.runs
    }

    pub fn calibrations(&self) -> &[CalibrationRecord] {
        &self.calibrations
    }

    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    /// The common frequency grid.
    pub fn grid(&self) -> &[f64] {
        self.runs[0].frequencies()
    }

    /// Weighted mean reference offset over all runs.
    pub fn a0_calc_bar(&self) -> f64 {
        self.a0_calc_bar
    }

    /// True once the calibration correction has been applied.
    pub fn is_corrected(&self) -> bool {
        self.corrected
    }

    pub fn run_ids(&self) -> Vec<u32> {
        self.runs.iter().map(|r| r.run_id).collect()
    }

    fn run_index(&self, run_id: u32) -> Result<usize> {
        self.runs
            .binary_search_by_key(&run_id, |r| r.run_id)
            .map_err(|_| Error::Argument(format!("unknown run_id {run_id}")))
    }
}

/// Pool a subset of runs into one ratio spectrum over blocks with
/// midpoint at or below `fmax`.
pub fn pool_ratio(dataset: &Dataset, run_subset: &[u32], fmax: f64) -> Result<RatioSpectrum> {
    if run_subset.is_empty() {
        return Err(Error::Argument("run subset must not be empty".into()));
    }
    let unique: BTreeSet<u32> = run_subset.iter().copied().collect();
    if unique.len() != run_subset.len() {
        return Err(Error::Argument("run subset contains duplicates".into()));
    }
    let grid = dataset.grid();
    if fmax < grid[0] {
        return Err(Error::Argument(format!(
            "fmax {fmax} Hz is below the first grid midpoint {} Hz",
            grid[0]
        )));
    }
    let n_blocks = grid.partition_point(|f| *f <= fmax);

    let mut num = vec![0.0; n_blocks];
    let mut den = vec![0.0; n_blocks];
    for id in &unique {
        let run = &dataset.runs[dataset.run_index(*id)?];
        for k in 0..n_blocks {
            num[k] += run.s_r[k];
            den[k] += run.s_q[k];
        }
    }
    let ratios: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n / d).collect();
    let kind = if run_subset.len() == 1 {
        SpectrumKind::SingleRun
    } else if dataset.corrected {
        SpectrumKind::PooledCorrected
    } else {
        SpectrumKind::PooledRaw
    };
    RatioSpectrum::new(grid[..n_blocks].to_vec(), ratios, kind)
}

/// Pool every run of the dataset.
pub fn pool_ratio_all(dataset: &Dataset, fmax: f64) -> Result<RatioSpectrum> {
    pool_ratio(dataset, &dataset.run_ids(), fmax)
}

/// Apply the calibration correction: each run's resistor PSD becomes
/// `s_r - (a0_calc(run) - a0_calc_bar) * s_q`, so all runs share the mean
/// reference offset. Calibrations in the returned dataset carry that
/// common value, which makes the correction idempotent.
pub fn correct_spectra(dataset: &Dataset) -> Dataset {
    let a_bar = dataset.a0_calc_bar;
    let runs = dataset
        .runs
        .iter()
        .zip(&dataset.calibrations)
        .map(|(run, cal)| {
            let delta = cal.a0_calc - a_bar;
            let s_r = run
                .s_r
                .iter()
                .zip(&run.s_q)
                .map(|(r, q)| r - delta * q)
                .collect();
            RunSpectrum {
                run_id: run.run_id,
                frequencies: run.frequencies.clone(),
                s_r,
                s_q: run.s_q.clone(),
                acquisition_hours: run.acquisition_hours,
                day_offset: run.day_offset,
            }
        })
        .collect();
    let calibrations = dataset
        .calibrations
        .iter()
        .map(|c| CalibrationRecord {
            a0_calc: a_bar,
            ..*c
        })
        .collect();
    Dataset {
        runs,
        calibrations,
        a0_calc_bar: a_bar,
        corrected: true,
    }
}

/// Difference between the largest and smallest reference offsets.
pub fn spread_a0_calc(dataset: &Dataset) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for cal in &dataset.calibrations {
        lo = lo.min(cal.a0_calc);
        hi = hi.max(cal.a0_calc);
    }
    hi - lo
}

// ---------------------------------------------------------------------------
// File ingestion
// ---------------------------------------------------------------------------

/// Load a dataset from a spectra file and a calibration file.
///
/// Spectra: one row per `(run_id, frequency_hz, s_r, s_q)`.
/// Calibration: one row per `(run_id, a0_calc, acquisition_hours,
/// day_offset)` with an optional `weight` column overriding the
/// acquisition-time weights. Both files need a header row; fields may be
/// separated by commas, semicolons, tabs or spaces, and `#` starts a
/// comment line.
pub fn load_dataset(spectra_path: &Path, calib_path: &Path) -> Result<Dataset> {
    let spectra_rows = read_rows(spectra_path, &["run_id", "frequency_hz", "s_r", "s_q"], 4)?;
    let calib_header = ["run_id", "a0_calc", "acquisition_hours", "day_offset"];
    let calib_rows = read_rows(calib_path, &calib_header, 4)?;

    struct CalRow {
        a0_calc: f64,
        hours: f64,
        day: f64,
        weight: Option<f64>,
    }
    let mut cal_map: Vec<(u32, CalRow)> = Vec::new();
    for (line, cols) in &calib_rows {
        let id = as_run_id(calib_path, *line, cols[0])?;
        if cal_map.iter().any(|(existing, _)| *existing == id) {
            return Err(Error::Parse {
                path: calib_path.to_path_buf(),
                line: *line,
                msg: format!("duplicate calibration row for run {id}"),
            });
        }
        cal_map.push((
            id,
            CalRow {
                a0_calc: cols[1],
                hours: cols[2],
                day: cols[3],
                weight: cols.get(4).copied(),
            },
        ));
    }

    // Group spectra rows by run, preserving within-run order, then sort
    // blocks by frequency.
    struct RunRows {
        id: u32,
        freqs: Vec<f64>,
        s_r: Vec<f64>,
        s_q: Vec<f64>,
    }
    let mut by_run: Vec<RunRows> = Vec::new();
    for (line, cols) in &spectra_rows {
        let id = as_run_id(spectra_path, *line, cols[0])?;
        let entry = match by_run.iter_mut().find(|r| r.id == id) {
            Some(e) => e,
            None => {
                by_run.push(RunRows {
                    id,
                    freqs: Vec::new(),
                    s_r: Vec::new(),
                    s_q: Vec::new(),
                });
                by_run.last_mut().unwrap()
            }
        };
        entry.freqs.push(cols[1]);
        entry.s_r.push(cols[2]);
        entry.s_q.push(cols[3]);
    }
    if by_run.is_empty() {
        return Err(Error::Parse {
            path: spectra_path.to_path_buf(),
            line: 0,
            msg: "no data rows".into(),
        });
    }

    let mut runs = Vec::with_capacity(by_run.len());
    let mut calibrations = Vec::with_capacity(by_run.len());
    for rows in by_run {
        let id = rows.id;
        let cal = cal_map
            .iter()
            .find(|(rid, _)| *rid == id)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Reference(format!("missing calibration for run {id}")))?;
        let mut order: Vec<usize> = (0..rows.freqs.len()).collect();
        order.sort_by(|a, b| rows.freqs[*a].total_cmp(&rows.freqs[*b]));
        let freqs = order.iter().map(|i| rows.freqs[*i]).collect();
        let s_r = order.iter().map(|i| rows.s_r[*i]).collect();
        let s_q = order.iter().map(|i| rows.s_q[*i]).collect();
        runs.push(RunSpectrum::new(id, freqs, s_r, s_q, cal.hours, cal.day)?);
        calibrations.push(CalibrationRecord {
            run_id: id,
            a0_calc: cal.a0_calc,
            weight: cal.weight.unwrap_or(cal.hours),
        });
    }

    Dataset::new(runs, calibrations)
}

/// Write the spectra and calibration files for a dataset, in the formats
/// `load_dataset` ingests.
pub fn write_dataset(dataset: &Dataset, spectra_path: &Path, calib_path: &Path) -> Result<()> {
    let mut spectra = BufWriter::new(create(spectra_path)?);
    write_io(spectra_path, writeln!(spectra, "run_id,frequency_hz,s_r,s_q"))?;
    for run in &dataset.runs {
        for k in 0..run.len() {
            write_io(
                spectra_path,
                writeln!(
                    spectra,
                    "{},{},{},{}",
                    run.run_id, run.frequencies[k], run.s_r[k], run.s_q[k]
                ),
            )?;
        }
    }
    write_io(spectra_path, spectra.flush())?;

    let mut calib = BufWriter::new(create(calib_path)?);
    write_io(
        calib_path,
        writeln!(calib, "run_id,a0_calc,acquisition_hours,day_offset"),
    )?;
    for (run, cal) in dataset.runs.iter().zip(&dataset.calibrations) {
        write_io(
            calib_path,
            writeln!(
                calib,
                "{},{},{},{}",
                run.run_id, cal.a0_calc, run.acquisition_hours, run.day_offset
            ),
        )?;
    }
    write_io(calib_path, calib.flush())
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_io(path: &Path, res: std::io::Result<()>) -> Result<()> {
    res.map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn as_run_id(path: &Path, line: usize, value: f64) -> Result<u32> {
    if value.fract() == 0.0 && value >= 1.0 && value <= u32::MAX as f64 {
        Ok(value as u32)
    } else {
        Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("run_id must be a positive integer, got {value}"),
        })
    }
}

fn tokenize(line: &str) -> Vec<&str> {
    line.split([',', ';', '\t', ' '])
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Read numeric rows from a delimited text file. The header must start
/// with `expected` column names (case-insensitive); extra columns are
/// kept. Returns `(line_number, values)` per row.
fn read_rows(
    path: &Path,
    expected: &[&str],
    min_cols: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut rows = Vec::new();
    let mut header_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens = tokenize(trimmed);
        if !header_seen {
            for (tok, want) in tokens.iter().zip(expected) {
                if !tok.eq_ignore_ascii_case(want) {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        msg: format!("expected header column '{want}', found '{tok}'"),
                    });
                }
            }
            if tokens.len() < expected.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!(
                        "header has {} columns, expected at least {}",
                        tokens.len(),
                        expected.len()
                    ),
                });
            }
            header_seen = true;
            continue;
        }
        if tokens.len() < min_cols {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("row has {} fields, expected at least {min_cols}", tokens.len()),
            });
        }
        let mut values = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("cannot parse '{tok}' as a number"),
            })?;
            values.push(v);
        }
        rows.push((line_no, values));
    }
    if !header_seen {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "missing header row".into(),
        });
    }
    Ok(rows)
}
