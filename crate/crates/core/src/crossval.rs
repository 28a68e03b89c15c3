//! Model selection fractions from repeated five-fold cross-validation
//! over runs.
//!
//! Each random split permutes the runs and slices the permutation into
//! five subsets. For every fold, the four training subsets are pooled
//! into one ratio spectrum, each candidate order is fitted to it, and the
//! prediction is scored against the pooled validation spectrum by mean
//! squared deviation. The order with the smallest five-fold average wins
//! the split; fractions are tallies over splits.
//!
//! Resampling is by run, never by block, so within-run structure stays
//! intact. Splits draw their generators from per-index substreams of the
//! master seed, which makes the fractions independent of thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::polyfit::{PolyDesign, PolyModel, DEFAULT_F0, DEFAULT_ORDERS};

/// Fold count of the five-way split.
pub const FOLDS: usize = 5;

/// Default number of random five-way splits.
pub const DEFAULT_N_SPLITS: usize = 20_000;

/// Relative and absolute slack under which two cross-validation values
/// count as tied. Fits of nested noiseless models differ only by rounding
/// noise; without the slack the smallest-order tie rule would be decided
/// by ulps.
const CV_TIE_REL: f64 = 1e-9;
const CV_TIE_ABS: f64 = 1e-24;

/// Which spectra form the pooled validation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationSpectra {
    /// Validation pools use the calibration-corrected resistor spectra,
    /// like the training side.
    Corrected,
    /// Validation pools use the uncorrected resistor spectra.
    Raw,
}

/// Cross-validation configuration.
#[derive(Debug, Clone)]
pub struct CvConfig {
    pub n_splits: usize,
    pub candidate_orders: Vec<u32>,
    pub seed: u64,
    pub validation: ValidationSpectra,
    /// Reference frequency of the candidate models.
    pub f0: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_splits: DEFAULT_N_SPLITS,
            candidate_orders: DEFAULT_ORDERS.to_vec(),
            seed: 0,
            validation: ValidationSpectra::Corrected,
            f0: DEFAULT_F0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::Config("n_splits must be at least 1".into()));
        }
        if self.candidate_orders.is_empty() {
            return Err(Error::Config("candidate order list is empty".into()));
        }
        for w in self.candidate_orders.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(
                    "candidate orders must be distinct and ascending".into(),
                ));
            }
        }
        for d in &self.candidate_orders {
            PolyModel::new(*d, self.f0)?;
        }
        Ok(())
    }
}

/// Empirical probability that each order wins a random split.
#[derive(Debug, Clone)]
pub struct SelectionFractions {
    pub fmax: f64,
    pub p: BTreeMap<u32, f64>,
    pub n_splits: usize,
}

impl SelectionFractions {
    /// Order with the largest fraction; ties go to the smaller order.
    pub fn selected_order(&self) -> u32 {
        let mut best_d = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (d, p) in &self.p {
            if *p > best_p {
                best_p = *p;
                best_d = *d;
            }
        }
        best_d
    }
}

/// Partition run indices `0..n_runs` into five subsets by permutation:
/// the first ceil-sized chunks absorb the remainder.
pub fn five_way_split(n_runs: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n_runs < FOLDS {
        return Err(Error::Argument(format!(
            "need at least {FOLDS} runs for a five-way split, got {n_runs}"
        )));
    }
    let mut perm: Vec<usize> = (0..n_runs).collect();
    perm.shuffle(rng);
    let mut subsets = Vec::with_capacity(FOLDS);
    let mut offset = 0;
    for size in chunk_sizes(n_runs) {
        subsets.push(perm[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(subsets)
}

fn chunk_sizes(n_runs: usize) -> [usize; FOLDS] {
    let base = n_runs / FOLDS;
    let extra = n_runs % FOLDS;
    let mut sizes = [base; FOLDS];
    for s in sizes.iter_mut().take(extra) {
        *s += 1;
    }
    sizes
}

/// Five-fold cross-validation statistic for one model on one split:
/// the average over folds of the validation mean squared deviation.
pub fn cv_statistic(
    dataset_corrected: &Dataset,
    split: &[Vec<usize>],
    model: &PolyModel,
    fmax: f64,
) -> Result<f64> {
    let engine = CvEngine::new(
        dataset_corrected,
        &CvConfig {
            candidate_orders: vec![model.order()],
            f0: model.f0(),
            ..CvConfig::default()
        },
        fmax,
    )?;
    validate_split(split, dataset_corrected.n_runs())?;
    let cv = engine.cv_values(split);
    Ok(cv[0])
}

fn validate_split(split: &[Vec<usize>], n_runs: usize) -> Result<()> {
    if split.len() != FOLDS {
        return Err(Error::Argument(format!(
            "split must have {FOLDS} subsets, got {}",
            split.len()
        )));
    }
    let mut seen = vec![false; n_runs];
    for subset in split {
        for idx in subset {
            if *idx >= n_runs || seen[*idx] {
                return Err(Error::Argument(format!(
                    "split is not a partition of 0..{n_runs}"
                )));
            }
            seen[*idx] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Argument(format!(
            "split does not cover all {n_runs} runs"
        )));
    }
    Ok(())
}

/// Estimate selection fractions over `cfg.n_splits` random five-way
/// splits. The dataset is calibration-corrected internally when it is not
/// already; orders that cannot be fitted inside the bandwidth are dropped
/// from the candidate set with a warning.
pub fn selection_fractions(
    dataset: &Dataset,
    cfg: &CvConfig,
    fmax: f64,
) -> Result<SelectionFractions> {
    cfg.validate()?;
    let engine = CvEngine::new(dataset, cfg, fmax)?;
    let winners: Vec<usize> = (0..cfg.n_splits)
        .into_par_iter()
        .map(|split_idx| {
            let mut rng = crate::rng::substream(cfg.seed, split_idx as u64);
            let split = five_way_split(engine.n_runs, &mut rng)
                .expect("run count checked at engine construction");
            engine.winner(&split)
        })
        .collect();

    let mut tallies = vec![0usize; engine.orders.len()];
    for w in winners {
        tallies[w] += 1;
    }
    let mut p = BTreeMap::new();
    for (idx, (d, _)) in engine.orders.iter().enumerate() {
        p.insert(*d, tallies[idx] as f64 / cfg.n_splits as f64);
    }
    Ok(SelectionFractions {
        fmax,
        p,
        n_splits: cfg.n_splits,
    })
}

/// Shared read-only state for evaluating splits at one bandwidth.
pub(crate) struct CvEngine {
    n_runs: usize,
    n_blocks: usize,
    /// Training-channel resistor sums per run over the window.
    run_r_train: Vec<Vec<f64>>,
    /// Validation-channel resistor sums per run (same storage when the
    /// validation side is corrected).
    run_r_val: Vec<Vec<f64>>,
    run_q: Vec<Vec<f64>>,
    tot_r_train: Vec<f64>,
    tot_q: Vec<f64>,
    /// Ascending candidate orders with their pre-factored designs.
    orders: Vec<(u32, PolyDesign)>,
}

impl CvEngine {
    pub fn new(dataset: &Dataset, cfg: &CvConfig, fmax: f64) -> Result<Self> {
        let n_runs = dataset.n_runs();
        if n_runs < FOLDS {
            return Err(Error::Argument(format!(
                "need at least {FOLDS} runs for five-fold cross-validation, got {n_runs}"
            )));
        }
        if dataset.is_corrected() && cfg.validation == ValidationSpectra::Raw {
            return Err(Error::Config(
                "raw validation spectra requested but the dataset is already corrected".into(),
            ));
        }
        let grid = dataset.grid();
        let n_blocks = grid.partition_point(|f| *f <= fmax);
        if n_blocks == 0 {
            return Err(Error::Argument(format!(
                "fmax {fmax} Hz is below the first grid midpoint {} Hz",
                grid[0]
            )));
        }
        let window = &grid[..n_blocks];

        let mut orders = Vec::new();
        for d in &cfg.candidate_orders {
            let model = PolyModel::new(*d, cfg.f0)?;
            if model.n_params() > n_blocks {
                log::warn!(
                    "order {d} needs {} blocks but only {n_blocks} lie at or below {fmax} Hz; \
                     dropping it from the candidate set",
                    model.n_params()
                );
                continue;
            }
            orders.push((*d, PolyDesign::new(&model, window)?));
        }
        if orders.is_empty() {
            return Err(Error::Underdetermined {
                needed: PolyModel::new(cfg.candidate_orders[0], cfg.f0)?.n_params(),
                got: n_blocks,
            });
        }

        // Training always pools calibration-corrected spectra; apply the
        // correction here when the caller hands in raw data.
        let a_bar = dataset.a0_calc_bar();
        let run_q: Vec<Vec<f64>> = dataset
            .runs()
            .iter()
            .map(|r| r.s_q()[..n_blocks].to_vec())
            .collect();
        let run_r_train: Vec<Vec<f64>> = dataset
            .runs()
            .iter()
            .zip(dataset.calibrations())
            .map(|(r, cal)| {
                let delta = cal.a0_calc - a_bar;
                r.s_r()[..n_blocks]
                    .iter()
                    .zip(&r.s_q()[..n_blocks])
                    .map(|(sr, sq)| sr - delta * sq)
                    .collect()
            })
            .collect();
        let run_r_val: Vec<Vec<f64>> = match cfg.validation {
            ValidationSpectra::Corrected => run_r_train.clone(),
            ValidationSpectra::Raw => dataset
                .runs()
                .iter()
                .map(|r| r.s_r()[..n_blocks].to_vec())
                .collect(),
        };

        let mut tot_r_train = vec![0.0; n_blocks];
        let mut tot_q = vec![0.0; n_blocks];
        for (r, q) in run_r_train.iter().zip(&run_q) {
            for k in 0..n_blocks {
                tot_r_train[k] += r[k];
                tot_q[k] += q[k];
            }
        }

        Ok(Self {
            n_runs,
            n_blocks,
            run_r_train,
            run_r_val,
            run_q,
            tot_r_train,
            tot_q,
            orders,
        })
    }

    /// CV(d) for every surviving order on one split, in candidate order.
    fn cv_values(&self, split: &[Vec<usize>]) -> Vec<f64> {
        let nb = self.n_blocks;
        let mut cv = vec![0.0; self.orders.len()];
        let mut y_train = vec![0.0; nb];
        let mut y_val = vec![0.0; nb];

        // Blockwise sums of each held-out subset.
        let mut sub_r_train = vec![vec![0.0; nb]; FOLDS];
        let mut sub_r_val = vec![vec![0.0; nb]; FOLDS];
        let mut sub_q = vec![vec![0.0; nb]; FOLDS];
        for (v, subset) in split.iter().enumerate() {
            for run in subset {
                let rt = &self.run_r_train[*run];
                let rv = &self.run_r_val[*run];
                let q = &self.run_q[*run];
                for k in 0..nb {
                    sub_r_train[v][k] += rt[k];
                    sub_r_val[v][k] += rv[k];
                    sub_q[v][k] += q[k];
                }
            }
        }

        for v in 0..FOLDS {
            for k in 0..nb {
                y_train[k] =
                    (self.tot_r_train[k] - sub_r_train[v][k]) / (self.tot_q[k] - sub_q[v][k]);
                y_val[k] = sub_r_val[v][k] / sub_q[v][k];
            }
            for (idx, (_, design)) in self.orders.iter().enumerate() {
                let coeffs = design.solve(&y_train);
                cv[idx] += design.msd(&coeffs, &y_val);
            }
        }
        for c in &mut cv {
            *c /= FOLDS as f64;
        }
        cv
    }

    /// Index (into the surviving-order list) of the split winner: the
    /// smallest order whose CV is tied with the minimum.
    fn winner(&self, split: &[Vec<usize>]) -> usize {
        let cv = self.cv_values(split);
        let min = cv.iter().copied().fold(f64::INFINITY, f64::min);
        let tol = CV_TIE_REL * min + CV_TIE_ABS;
        cv.iter().position(|c| *c <= min + tol).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{correct_spectra, CalibrationRecord, RunSpectrum};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    fn dataset_from_runs(s_r_rows: &[Vec<f64>], grid: &[f64], a0: &[f64]) -> Dataset {
        let runs: Vec<RunSpectrum> = s_r_rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                RunSpectrum::new(
                    (i + 1) as u32,
                    grid.to_vec(),
                    row.clone(),
                    vec![1.0; grid.len()],
                    1.0,
                    i as f64,
                )
                .unwrap()
            })
            .collect();
        let cals = (0..s_r_rows.len())
            .map(|i| CalibrationRecord {
                run_id: (i + 1) as u32,
                a0_calc: a0[i],
                weight: 1.0,
            })
            .collect();
        Dataset::new(runs, cals).unwrap()
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|k| 900.0 + 1800.0 * k as f64).collect()
    }

    #[test]
    fn split_sizes_forty_five() {
        let mut rng = crate::rng::substream(1, 0);
        let split = five_way_split(45, &mut rng).unwrap();
        assert!(split.iter().all(|s| s.len() == 9));
    }

    #[test]
    fn split_sizes_five_and_seven() {
        let mut rng = crate::rng::substream(1, 1);
        let split = five_way_split(5, &mut rng).unwrap();
        assert!(split.iter().all(|s| s.len() == 1));

        let split = five_way_split(7, &mut rng).unwrap();
        let sizes: Vec<usize> = split.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn split_is_a_partition() {
        let mut rng = crate::rng::substream(2, 0);
        for n in [5usize, 7, 23, 45] {
            let split = five_way_split(n, &mut rng).unwrap();
            let mut seen = vec![false; n];
            for subset in &split {
                for idx in subset {
                    assert!(!seen[*idx], "run {idx} assigned twice");
                    seen[*idx] = true;
                }
            }
            assert!(seen.iter().all(|s| *s));
        }
    }

    #[test]
    fn too_few_runs_rejected() {
        let mut rng = crate::rng::substream(3, 0);
        assert!(matches!(
            five_way_split(4, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn cv_zero_for_noiseless_nested_models() {
        let g = grid(30);
        let f0 = DEFAULT_F0;
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| g.iter().map(|f| 1.0 + 0.2 * (f / f0).powi(2)).collect())
            .collect();
        let ds = dataset_from_runs(&rows, &g, &[1.0; 5]);
        let corrected = correct_spectra(&ds);
        let mut rng = crate::rng::substream(4, 0);
        let split = five_way_split(5, &mut rng).unwrap();
        for d in [2u32, 4, 8] {
            let cv = cv_statistic(&corrected, &split, &PolyModel::with_order(d).unwrap(), 1e8)
                .unwrap();
            assert!(cv < 1e-18, "order {d}: CV = {cv}");
        }
    }

    #[test]
    fn cv_matches_hand_enumerated_folds() {
        // Two blocks, five singleton subsets, order-2 interpolation:
        // the prediction equals the training pool exactly, so each fold's
        // MSD is the squared gap between held-out and pooled-training
        // values, averaged over the two blocks.
        let g = grid(2);
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![a[i], b[i]]).collect();
        let ds = dataset_from_runs(&rows, &g, &[1.0; 5]);
        let corrected = correct_spectra(&ds);
        let split: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();

        let sum_a: f64 = a.iter().sum();
        let sum_b: f64 = b.iter().sum();
        let mut expected = 0.0;
        for v in 0..5 {
            let pred_a = (sum_a - a[v]) / 4.0;
            let pred_b = (sum_b - b[v]) / 4.0;
            expected += ((a[v] - pred_a).powi(2) + (b[v] - pred_b).powi(2)) / 2.0;
        }
        expected /= 5.0;
        assert_relative_eq!(expected, 3.125, max_relative = 1e-15);

        let cv = cv_statistic(&corrected, &split, &PolyModel::with_order(2).unwrap(), 1e8)
            .unwrap();
        assert_relative_eq!(cv, expected, max_relative = 1e-10);
    }

    #[test]
    fn validation_noise_sets_the_cv_level() {
        // Singleton validation subsets: E[CV] is the per-block noise
        // variance up to a small training-side term.
        let v: f64 = 4e-8;
        let g = grid(2000);
        let mut rng = crate::rng::substream(5, 0);
        let noise = Normal::new(0.0, v.sqrt()).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| g.iter().map(|_| 1.0 + noise.sample(&mut rng)).collect())
            .collect();
        let ds = dataset_from_runs(&rows, &g, &[1.0; 5]);
        let corrected = correct_spectra(&ds);
        let mut cv_sum = 0.0;
        let n_rep = 20;
        for rep in 0..n_rep {
            let mut split_rng = crate::rng::substream(6, rep);
            let split = five_way_split(5, &mut split_rng).unwrap();
            cv_sum +=
                cv_statistic(&corrected, &split, &PolyModel::with_order(2).unwrap(), 1e8).unwrap();
        }
        let cv_mean = cv_sum / n_rep as f64;
        assert!(
            (cv_mean - v).abs() < 0.1 * v,
            "mean CV {cv_mean} vs noise variance {v}"
        );
    }

    #[test]
    fn noiseless_data_selects_smallest_adequate_order() {
        let g = grid(40);
        let f0 = DEFAULT_F0;
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| g.iter().map(|f| 1.0 - 0.1 * (f / f0).powi(2)).collect())
            .collect();
        let ds = dataset_from_runs(&rows, &g, &[1.0; 6]);
        let cfg = CvConfig {
            n_splits: 50,
            seed: 9,
            ..CvConfig::default()
        };
        let fractions = selection_fractions(&ds, &cfg, 1e8).unwrap();
        assert_eq!(fractions.p[&2], 1.0);
        assert_eq!(fractions.selected_order(), 2);
    }

    #[test]
    fn fractions_sum_to_one_and_are_deterministic() {
        let g = grid(25);
        let mut rng = crate::rng::substream(7, 0);
        let noise = Normal::new(0.0, 1e-4).unwrap();
        let rows: Vec<Vec<f64>> = (0..9)
            .map(|_| g.iter().map(|_| 1.0 + noise.sample(&mut rng)).collect())
            .collect();
        let ds = dataset_from_runs(&rows, &g, &[1.0; 9]);
        let cfg = CvConfig {
            n_splits: 200,
            seed: 11,
            ..CvConfig::default()
        };
        let a = selection_fractions(&ds, &cfg, 1e8).unwrap();
        let total: f64 = a.p.values().sum();
        assert!((total - 1.0).abs() < 1e-12);

        // Same seed, different thread counts: identical fractions.
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let b = pool1.install(|| selection_fractions(&ds, &cfg, 1e8).unwrap());
        let c = pool4.install(|| selection_fractions(&ds, &cfg, 1e8).unwrap());
        assert_eq!(a.p, b.p);
        assert_eq!(b.p, c.p);
    }

    #[test]
    fn correction_with_equal_offsets_leaves_fractions_unchanged() {
        let g = grid(25);
        let mut rng = crate::rng::substream(8, 0);
        let noise = Normal::new(0.0, 1e-4).unwrap();
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| g.iter().map(|_| 1.0 + noise.sample(&mut rng)).collect())
            .collect();
        let ds = dataset_from_runs(&rows, &g, &[1.0; 7]);
        let cfg = CvConfig {
            n_splits: 100,
            seed: 13,
            ..CvConfig::default()
        };
        let raw = selection_fractions(&ds, &cfg, 1e8).unwrap();
        let corrected = selection_fractions(&correct_spectra(&ds), &cfg, 1e8).unwrap();
        assert_eq!(raw.p, corrected.p);
    }

    #[test]
    fn infeasible_orders_dropped_not_fatal() {
        let g = grid(4); // only 4 blocks: orders above 6 cannot fit
        let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0; 4]).collect();
        let ds = dataset_from_runs(&rows, &g, &[1.0; 5]);
        let cfg = CvConfig {
            n_splits: 10,
            seed: 1,
            ..CvConfig::default()
        };
        let fractions = selection_fractions(&ds, &cfg, 1e8).unwrap();
        let orders: Vec<u32> = fractions.p.keys().copied().collect();
        assert_eq!(orders, vec![2, 4, 6]);
    }
}
