//! Hyper-parameter selection: the hold-out rule for `n` with `N` tied to
//! `n^(d-1)`, and exhaustive grid search over `(J, n, N, tau)`.
//!
//! Every candidate is fitted on the training side of a split and scored by
//! mean squared error on the validation side. One factorization of the
//! design matrix serves all ridge weights of a cell.

use std::cmp::Ordering;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{assemble, check_inputs, make_spec, SketchParams, SketchSpec};
use crate::data::{Dataset, BALL_TOL};
use crate::error::{Error, Result};
use crate::report::fmt_f64;
use crate::seed::derive;
use crate::solver::{fit_model_with, matvec, truncate, FitOptions, Factored, FittedModel};
use crate::sphere::SketchMode;

/// Fraction of the data on the fitting side of a split.
pub const DEFAULT_SPLIT: f64 = 0.8;

/// Smallest sample accepted by the hold-out rule.
pub const MIN_HOLDOUT_SIZE: usize = 10;

/// Which rows the reported model is refitted on once a cell is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refit {
    /// The fitting side of the first split.
    #[default]
    Train,
    /// All of the data.
    Full,
}

/// Row indices of the two sides of a split, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub id: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Random partition of `0..p` with `round(fraction * p)` fitting rows.
pub fn split_indices(p: usize, fraction: f64, id: usize, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let n_train = (fraction * p as f64).round() as usize;
    if n_train == 0 || n_train >= p {
        return Err(Error::InvalidParameter(format!(
            "splitting {p} rows at {fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    Ok(Split { id, train, validation })
}

/// One point of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub freq: usize,
    pub intervals: usize,
    pub directions: usize,
    pub tau: f64,
    pub lambda: f64,
}

impl Candidate {
    /// Capacity order used to break ties: `n`, then `J`, then `tau`, then
    /// `N`, then `lambda`.
    fn capacity_cmp(&self, other: &Self) -> Ordering {
        self.intervals
            .cmp(&other.intervals)
            .then(self.freq.cmp(&other.freq))
            .then(self.tau.total_cmp(&other.tau))
            .then(self.directions.cmp(&other.directions))
            .then(self.lambda.total_cmp(&other.lambda))
    }
}

/// How `N` is chosen for each `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionGrid {
    /// An independent grid axis.
    Free(Vec<usize>),
    /// `N = n^(d-1)`.
    Tied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub freqs: Vec<usize>,
    pub intervals: Vec<usize>,
    pub directions: DirectionGrid,
    pub taus: Vec<f64>,
    /// Ridge weights; a single `0` gives plain minimum-norm fits.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0]
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        let empty = |name: &str| Error::InvalidParameter(format!("grid for {name} is empty"));
        if self.freqs.is_empty() {
            return Err(empty("J"));
        }
        if self.intervals.is_empty() {
            return Err(empty("n"));
        }
        if matches!(&self.directions, DirectionGrid::Free(v) if v.is_empty()) {
            return Err(empty("N"));
        }
        if self.taus.is_empty() {
            return Err(empty("tau"));
        }
        if self.lambdas.is_empty() {
            return Err(empty("lambda"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!("ridge weight {l} must be >= 0")));
        }
        Ok(())
    }

    /// Basis cells `(J, n, N, tau)` in grid order; ridge weights are swept
    /// inside each cell.
    pub fn cells(&self, dim: usize) -> Vec<(usize, usize, usize, f64)> {
        let mut out = Vec::new();
        for &freq in &self.freqs {
            for &n in &self.intervals {
                let ns = match &self.directions {
                    DirectionGrid::Free(v) => v.clone(),
                    DirectionGrid::Tied => vec![tied_directions(n, dim)],
                };
                for big_n in ns {
                    for &tau in &self.taus {
                        out.push((freq, n, big_n, tau));
                    }
                }
            }
        }
        out
    }
}

/// `n^(d-1)`, the direction count matched to `n` grid intervals.
pub fn tied_directions(n: usize, dim: usize) -> usize {
    n.pow(dim.saturating_sub(1) as u32)
}

/// `{1, ..., ceil(p^(1/(2d-1)))}` computed in integers.
pub fn holdout_candidates(p: usize, dim: usize) -> Vec<usize> {
    let e = (2 * dim).saturating_sub(1).max(1) as u32;
    let mut c = 1usize;
    while c.checked_pow(e).is_some_and(|v| v < p) {
        c += 1;
    }
    (1..=c).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub split_fraction: f64,
    pub repeats: usize,
    pub seed: u64,
    pub mode: SketchMode,
    /// Component depth; `None` uses the default for each `n`.
    pub m: Option<u32>,
    pub refit: Refit,
    pub fit: FitOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            split_fraction: DEFAULT_SPLIT,
            repeats: 1,
            seed: 0,
            mode: SketchMode::EqualArea,
            m: None,
            refit: Refit::Train,
            fit: FitOptions::default(),
        }
    }
}

impl SearchOptions {
    /// Sketch parameters of a candidate. Random sketches are seeded by the
    /// cell only, so every split and the refit see the same basis.
    pub fn params(&self, c: &Candidate) -> SketchParams {
        let seed = derive(self.seed, &[1, c.freq as u64, c.intervals as u64, c.directions as u64]);
        SketchParams {
            freq: c.freq,
            intervals: c.intervals,
            directions: c.directions,
            tau: c.tau,
            m: self.m,
            mode: self.mode,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub candidate: Candidate,
    pub split: usize,
    pub val_mse: f64,
    pub val_rmse: f64,
    /// Assembly, factorization and solve on the fitting side.
    pub fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub candidate: Candidate,
    /// Validation MSE averaged over splits.
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Candidate,
    pub params: SketchParams,
    pub scores: Vec<CellScore>,
    pub table: Vec<ValidationRow>,
    pub splits: Vec<Split>,
    pub refit: Refit,
    pub model: FittedModel,
}

impl SelectionResult {
    /// Validation table with columns `J,n,N,tau,lambda,split,val_rmse,fit_seconds`.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["J", "n", "N", "tau", "lambda", "split", "val_rmse", "fit_seconds"])?;
        for row in &self.table {
            let c = &row.candidate;
            w.write_record([
                c.freq.to_string(),
                c.intervals.to_string(),
                c.directions.to_string(),
                fmt_f64(c.tau),
                fmt_f64(c.lambda),
                row.split.to_string(),
                fmt_f64(row.val_rmse),
                fmt_f64(row.fit_seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Scores of one basis cell on a set of evaluation samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFit {
    pub lambda: f64,
    /// Truncated-prediction MSE on each evaluation sample.
    pub mse: Vec<f64>,
    pub rank: usize,
    pub fit_seconds: f64,
}

/// Fits `spec` on `train` once per ridge weight and scores every fit on
/// each of `evals`. Rows of the evaluation samples only ever enter through
/// their own design matrices.
pub fn score_cell(
    train: &Dataset,
    evals: &[&Dataset],
    spec: &SketchSpec,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<Vec<CellFit>> {
    check_inputs(&train.x, spec, BALL_TOL)?;
    let start = Instant::now();
    let phi = assemble(&train.x, spec);
    let factored = Factored::new(phi.as_ref(), opts)?;
    let shared = start.elapsed().as_secs_f64();

    let eval_phis = evals
        .iter()
        .map(|e| {
            check_inputs(&e.x, spec, BALL_TOL)?;
            Ok(assemble(&e.x, spec))
        })
        .collect::<Result<Vec<_>>>()?;
    let bound = train.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    lambdas
        .iter()
        .map(|&lambda| {
            let t = Instant::now();
            let sol = factored.solve(&train.y, lambda)?;
            let fit_seconds = shared + t.elapsed().as_secs_f64();
            let mse = eval_phis
                .iter()
                .zip(evals)
                .map(|(phi_e, e)| {
                    let raw = matvec(phi_e.as_ref(), &sol.coefficients);
                    let sse: f64 = raw
                        .iter()
                        .zip(&e.y)
                        .map(|(r, y)| (truncate(*r, bound) - y).powi(2))
                        .sum();
                    sse / e.len().max(1) as f64
                })
                .collect();
            Ok(CellFit {
                lambda,
                mse,
                rank: sol.rank,
                fit_seconds,
            })
        })
        .collect()
}

/// Exhaustive search over `grid` with validation MSE averaged over
/// `opts.repeats` independent splits.
pub fn grid_search(data: &Dataset, grid: &GridSpec, opts: &SearchOptions) -> Result<SelectionResult> {
    grid.validate()?;
    if opts.repeats == 0 {
        return Err(Error::InvalidParameter("at least one split is required".into()));
    }
    let splits = (0..opts.repeats)
        .map(|r| split_indices(data.len(), opts.split_fraction, r, derive(opts.seed, &[0, r as u64])))
        .collect::<Result<Vec<_>>>()?;
    let sides: Vec<(Dataset, Dataset)> = splits
        .iter()
        .map(|s| (data.subset(&s.train), data.subset(&s.validation)))
        .collect();

    let mut table = Vec::new();
    let mut scores = Vec::new();
    for (freq, n, big_n, tau) in grid.cells(data.dim()) {
        let base = Candidate {
            freq,
            intervals: n,
            directions: big_n,
            tau,
            lambda: 0.0,
        };
        let spec = make_spec(data.dim(), &opts.params(&base))?;
        let mut sums = vec![0.0; grid.lambdas.len()];
        let mut rows = Vec::with_capacity(grid.lambdas.len() * splits.len());
        for (split, (fit_side, val_side)) in splits.iter().zip(&sides) {
            let fits = score_cell(fit_side, &[val_side], &spec, &grid.lambdas, &opts.fit)?;
            for (i, f) in fits.into_iter().enumerate() {
                sums[i] += f.mse[0];
                rows.push(ValidationRow {
                    candidate: Candidate { lambda: f.lambda, ..base },
                    split: split.id,
                    val_mse: f.mse[0],
                    val_rmse: f.mse[0].sqrt(),
                    fit_seconds: f.fit_seconds,
                });
            }
        }
        log::debug!("cell J={freq} n={n} N={big_n} tau={tau}: mean mse {:?}", sums);
        table.extend(rows);
        for (&lambda, sum) in grid.lambdas.iter().zip(sums) {
            scores.push(CellScore {
                candidate: Candidate { lambda, ..base },
                mean_mse: sum / splits.len() as f64,
            });
        }
    }

    let chosen = argmin(&scores).candidate;
    let params = opts.params(&chosen);
    let spec = make_spec(data.dim(), &params)?;
    let refit_data = match opts.refit {
        Refit::Train => &sides[0].0,
        Refit::Full => data,
    };
    let fit = FitOptions {
        lambda: chosen.lambda,
        ..opts.fit
    };
    let model = fit_model_with(refit_data, &spec, &fit)?;
    Ok(SelectionResult {
        chosen,
        params,
        scores,
        table,
        splits,
        refit: opts.refit,
        model,
    })
}

/// Minimum mean MSE, ties going to the smaller capacity.
fn argmin(scores: &[CellScore]) -> &CellScore {
    scores
        .iter()
        .min_by(|a, b| {
            a.mean_mse
                .total_cmp(&b.mean_mse)
                .then_with(|| a.candidate.capacity_cmp(&b.candidate))
        })
        .expect("grid has at least one cell")
}

/// The hold-out rule: `n` ranges over [`holdout_candidates`], `N = n^(d-1)`,
/// and `J`, `tau`, `lambda` are fixed.
pub fn holdout_select(
    data: &Dataset,
    split_fraction: f64,
    freq: usize,
    tau: f64,
    lambda: f64,
    opts: &SearchOptions,
) -> Result<SelectionResult> {
    if data.len() < MIN_HOLDOUT_SIZE {
        return Err(Error::InvalidParameter(format!(
            "hold-out selection needs at least {MIN_HOLDOUT_SIZE} samples, got {}",
            data.len()
        )));
    }
    let grid = GridSpec {
        freqs: vec![freq],
        intervals: holdout_candidates(data.len(), data.dim()),
        directions: DirectionGrid::Tied,
        taus: vec![tau],
        lambdas: vec![lambda],
    };
    let opts = SearchOptions {
        split_fraction,
        repeats: 1,
        ..opts.clone()
    };
    grid_search(data, &grid, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, Target};

    #[test]
    fn candidate_sets() {
        assert_eq!(holdout_candidates(2000, 3), vec![1, 2, 3, 4, 5]);
        assert_eq!(holdout_candidates(2000, 4), vec![1, 2, 3]);
        // exact powers must not round up
        assert_eq!(holdout_candidates(32, 3), vec![1, 2]);
        assert_eq!(holdout_candidates(33, 3), vec![1, 2, 3]);
        assert_eq!(tied_directions(4, 3), 16);
        assert_eq!(tied_directions(1, 4), 1);
    }

    #[test]
    fn split_partitions_rows() {
        let s = split_indices(103, 0.8, 0, 9).unwrap();
        assert_eq!(s.train.len(), 82);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(s, split_indices(103, 0.8, 0, 9).unwrap());
        assert_ne!(s.train, split_indices(103, 0.8, 0, 10).unwrap().train);
        assert!(split_indices(3, 0.1, 0, 0).is_err());
        assert!(split_indices(10, 1.0, 0, 0).is_err());
    }

    #[test]
    fn tie_breaks_by_capacity() {
        let c = |n, j, tau| Candidate {
            freq: j,
            intervals: n,
            directions: 4,
            tau,
            lambda: 0.0,
        };
        let scores = vec![
            CellScore { candidate: c(3, 1, 0.1), mean_mse: 1.0 },
            CellScore { candidate: c(2, 2, 0.1), mean_mse: 1.0 },
            CellScore { candidate: c(2, 1, 0.5), mean_mse: 1.0 },
            CellScore { candidate: c(2, 1, 0.3), mean_mse: 1.0 },
            CellScore { candidate: c(5, 5, 0.5), mean_mse: 2.0 },
        ];
        assert_eq!(argmin(&scores).candidate, c(2, 1, 0.3));
    }

    #[test]
    fn empty_grids_rejected() {
        let data = make_dataset(Target::F1, 40, 0.0, 1).unwrap();
        let grid = GridSpec {
            freqs: vec![],
            intervals: vec![2],
            directions: DirectionGrid::Free(vec![4]),
            taus: vec![0.1],
            lambdas: vec![0.0],
        };
        assert!(grid_search(&data, &grid, &SearchOptions::default()).is_err());
        let small = data.subset(&[0, 1, 2]);
        assert!(holdout_select(&small, 0.8, 1, 0.1, 0.0, &SearchOptions::default()).is_err());
    }
}
