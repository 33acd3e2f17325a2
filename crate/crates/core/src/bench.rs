//! Benchmark harness: the sketching comparison (`sim2`), the frequency
//! study (`sim3`), best-grid accuracy and timing (`sim4`) and selection on
//! user-supplied CSV data (`real`).
//!
//! Every experiment writes deterministic CSV tables holding the raw
//! per-trial values, static SVG charts and a JSON report. Wall-clock
//! timings only go into the JSON report so that reruns under the same
//! master seed reproduce the CSV bytes exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{make_spec, SketchParams};
use crate::data::{
    apply_record, ingest_csv, make_dataset, make_test_dataset, Dataset, Points, Target, TargetTransform,
    BALL_RADIUS, RNG_ALGORITHM,
};
use crate::error::{Error, Result};
use crate::report::{fmt_f64, mean_std, LineChart, Series};
use crate::seed::derive;
use crate::selection::{
    grid_search, score_cell, split_indices, Candidate, DirectionGrid, GridSpec, Refit, SearchOptions,
    SelectionResult, DEFAULT_SPLIT,
};
use crate::solver::{predict, rmse, FitOptions};
use crate::sphere::SketchMode;

pub const DEFAULT_TRIALS: usize = 5;
pub const DEFAULT_TRAIN_SIZE: usize = 2000;
pub const DEFAULT_TEST_SIZE: usize = 1000;
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.01, 0.1, 0.3, 0.5];

/// Ridge weights searched by `sim4` and `real`.
pub const RIDGE_GRID: [f64; 5] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    #[default]
    Sim2,
    Sim3,
    Sim4,
    Real,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Sim2 => "sim2",
            Experiment::Sim3 => "sim3",
            Experiment::Sim4 => "sim4",
            Experiment::Real => "real",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim2" => Ok(Experiment::Sim2),
            "sim3" => Ok(Experiment::Sim3),
            "sim4" => Ok(Experiment::Sim4),
            "real" => Ok(Experiment::Real),
            other => Err(Error::InvalidParameter(format!(
                "unknown experiment `{other}` (expected sim2, sim3, sim4 or real)"
            ))),
        }
    }
}

/// CSV inputs of the `real` experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealData {
    pub train: PathBuf,
    /// Held-out rows; without it every trial splits `train` at random.
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub target_column: String,
    #[serde(default)]
    pub log_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub experiment: Experiment,
    pub target: Target,
    pub deltas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Use the complete published grid instead of the desk-scale one.
    pub full: bool,
    /// Overrides the default grid.
    pub grid: Option<GridSpec>,
    pub modes: Vec<SketchMode>,
    pub split_fraction: f64,
    pub repeats: usize,
    pub refit: Refit,
    pub m: Option<u32>,
    pub real: Option<RealData>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Sim2,
            target: Target::F1,
            deltas: NOISE_LEVELS.to_vec(),
            trials: DEFAULT_TRIALS,
            seed: 0,
            train_size: DEFAULT_TRAIN_SIZE,
            test_size: DEFAULT_TEST_SIZE,
            full: false,
            grid: None,
            modes: vec![SketchMode::EqualArea, SketchMode::Random],
            split_fraction: DEFAULT_SPLIT,
            repeats: 1,
            refit: Refit::Full,
            m: None,
            real: None,
        }
    }
}

impl BenchConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
            .clone()
            .unwrap_or_else(|| default_grid(self.experiment, self.target, self.full))
    }

    /// Sketch modes actually run; `sim3` studies the equal-area basis only.
    pub fn active_modes(&self) -> Vec<SketchMode> {
        match self.experiment {
            Experiment::Sim3 => vec![SketchMode::EqualArea],
            _ => self.modes.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trial count must be at least 1".into()));
        }
        if self.active_modes().is_empty() {
            return Err(Error::InvalidParameter("no sketch mode selected".into()));
        }
        if self.experiment != Experiment::Real {
            if self.deltas.is_empty() {
                return Err(Error::InvalidParameter("no noise level selected".into()));
            }
            if let Some(d) = self.deltas.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
                return Err(Error::InvalidParameter(format!("noise level {d} must be >= 0")));
            }
            if self.train_size < 2 || self.test_size < 1 {
                return Err(Error::InvalidParameter("train and test sizes must be positive".into()));
            }
        } else if self.real.is_none() {
            return Err(Error::InvalidParameter("the real experiment needs CSV inputs".into()));
        }
        Ok(())
    }
}

fn range(lo: usize, hi: usize, step: usize) -> Vec<usize> {
    (lo..=hi).step_by(step).collect()
}

/// Grid of an experiment. The desk-scale grids keep `N <= 200` and `tau`
/// within one decade; `full` gives the published grid.
pub fn default_grid(experiment: Experiment, target: Target, full: bool) -> GridSpec {
    let lambdas = match experiment {
        Experiment::Sim2 | Experiment::Sim3 => vec![0.0],
        Experiment::Sim4 | Experiment::Real => RIDGE_GRID.to_vec(),
    };
    if full {
        return GridSpec {
            freqs: if experiment == Experiment::Sim2 { vec![1] } else { range(1, 5, 1) },
            intervals: range(1, 10, 1),
            directions: DirectionGrid::Free(range(10, 400, 10)),
            taus: vec![0.001, 0.01, 0.1, 0.3, 0.5],
            lambdas,
        };
    }
    match (experiment, target) {
        (Experiment::Sim2, _) => GridSpec {
            freqs: vec![1],
            intervals: vec![1, 2, 4, 6, 8, 10],
            directions: DirectionGrid::Free(vec![10, 40, 80, 100]),
            taus: vec![0.01, 0.1, 0.5],
            lambdas,
        },
        (Experiment::Sim3, _) => GridSpec {
            freqs: range(1, 5, 1),
            intervals: vec![2, 4, 6, 8],
            directions: DirectionGrid::Free(vec![20, 40, 60]),
            taus: vec![0.1, 0.5],
            lambdas,
        },
        (_, Target::F2) => GridSpec {
            freqs: vec![1, 2, 3],
            intervals: vec![2, 4, 6],
            directions: DirectionGrid::Free(vec![50, 100, 200]),
            taus: vec![0.1, 0.3],
            lambdas,
        },
        (_, Target::F1) => GridSpec {
            freqs: vec![1, 2, 3, 4],
            intervals: vec![1, 2, 4, 6, 8],
            directions: DirectionGrid::Free(vec![10, 20, 40, 80]),
            taus: vec![0.1, 0.5],
            lambdas,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub master_seed: u64,
    pub rng: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub debug_assertions: bool,
    pub trials: usize,
}

impl Environment {
    pub fn capture(seed: u64, trials: usize) -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: seed,
            rng: RNG_ALGORITHM.to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon::current_num_threads(),
            debug_assertions: cfg!(debug_assertions),
            trials,
        }
    }
}

/// Test RMSE of one basis cell aggregated over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub delta: f64,
    pub mode: SketchMode,
    pub candidate: Candidate,
    pub trials: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub mean_fit_seconds: f64,
}

/// Best configuration of a group: a noise level and sketch mode, plus the
/// frequency parameter in `sim3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumRow {
    pub delta: Option<f64>,
    pub mode: SketchMode,
    /// The winning cell when it is shared by all trials.
    pub candidate: Option<Candidate>,
    pub trials: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub mean_fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub experiment: Experiment,
    pub config: BenchConfig,
    pub grid: GridSpec,
    pub trials: usize,
    pub cells: Vec<CellSummary>,
    pub optimum: Vec<OptimumRow>,
    pub total_seconds: f64,
    pub environment: Environment,
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn optimum_for(&self, delta: f64, mode: SketchMode) -> impl Iterator<Item = &OptimumRow> {
        self.optimum
            .iter()
            .filter(move |o| o.delta == Some(delta) && o.mode == mode)
    }
}

/// Runs one experiment and writes its artifacts into `out_dir`.
pub fn run(config: &BenchConfig, out_dir: &Path) -> Result<BenchReport> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = Instant::now();
    let mut out = Outputs::new(out_dir, config.experiment.as_str());
    let grid = config.grid();
    let (cells, optimum, notes) = match config.experiment {
        Experiment::Sim2 | Experiment::Sim3 => sweep(config, &grid, &mut out)?,
        Experiment::Sim4 => {
            let (optimum, notes) = selection_trials(config, &grid, &mut out)?;
            (Vec::new(), optimum, notes)
        }
        Experiment::Real => {
            let (optimum, notes) = real_trials(config, &grid, &mut out)?;
            (Vec::new(), optimum, notes)
        }
    };
    let mut report = BenchReport {
        experiment: config.experiment,
        config: config.clone(),
        grid,
        trials: config.trials,
        cells,
        optimum,
        total_seconds: start.elapsed().as_secs_f64(),
        environment: Environment::capture(config.seed, config.trials),
        files: Vec::new(),
        notes,
    };
    let report_name = format!("{}_report.json", config.experiment.as_str());
    out.files.push(report_name.clone());
    report.files = out.files.clone();
    let path = out_dir.join(report_name);
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Tracks every file an experiment writes.
struct Outputs {
    dir: PathBuf,
    prefix: String,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path, prefix: &str) -> Self {
        Self {
            dir: dir.to_path_buf(),
            prefix: prefix.to_string(),
            files: Vec::new(),
        }
    }

    fn csv(&mut self, name: &str, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
        let file = format!("{}_{name}.csv", self.prefix);
        let path = self.dir.join(&file);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(f));
        w.write_record(header)?;
        self.files.push(file);
        Ok(w)
    }

    fn svg(&mut self, name: &str, chart: &LineChart) -> Result<()> {
        let file = format!("{}_{name}.svg", self.prefix);
        let path = self.dir.join(&file);
        fs::write(&path, chart.to_svg()).map_err(|e| Error::io(&path, e))?;
        self.files.push(file);
        Ok(())
    }
}

fn flush<W: Write>(w: &mut csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn candidate_fields(c: &Candidate) -> [String; 5] {
    [
        c.freq.to_string(),
        c.intervals.to_string(),
        c.directions.to_string(),
        fmt_f64(c.tau),
        fmt_f64(c.lambda),
    ]
}

/// Training and noise-free test samples of trial `t` at noise level `di`.
pub fn trial_data(config: &BenchConfig, di: usize, t: usize) -> Result<(Dataset, Dataset)> {
    let delta = config.deltas[di];
    let train = make_dataset(config.target, config.train_size, delta, derive(config.seed, &[10, di as u64, t as u64]))?;
    let test = make_test_dataset(config.target, config.test_size, derive(config.seed, &[11, di as u64, t as u64]))?;
    Ok((train, test))
}

struct TrialRow {
    di: usize,
    mode: SketchMode,
    candidate: Candidate,
    test_rmse: f64,
    fit_seconds: f64,
}

type SweepOutput = (Vec<CellSummary>, Vec<OptimumRow>, Vec<String>);

/// Scores every grid cell on the test sample of every trial.
fn sweep(config: &BenchConfig, grid: &GridSpec, out: &mut Outputs) -> Result<SweepOutput> {
    let dim = config.target.dim();
    let modes = config.active_modes();
    let fit = FitOptions::default();
    let mut raw = out.csv("trials", &["delta", "mode", "trial", "J", "n", "N", "tau", "lambda", "test_rmse"])?;
    let mut rows = Vec::new();
    for di in 0..config.deltas.len() {
        for t in 0..config.trials {
            let (train, test) = trial_data(config, di, t)?;
            for &mode in &modes {
                for (freq, n, big_n, tau) in grid.cells(dim) {
                    let params = SketchParams {
                        freq,
                        intervals: n,
                        directions: big_n,
                        tau,
                        m: config.m,
                        mode,
                        seed: derive(config.seed, &[12, di as u64, t as u64, freq as u64, n as u64, big_n as u64]),
                    };
                    let spec = make_spec(dim, &params)?;
                    for cf in score_cell(&train, &[&test], &spec, &grid.lambdas, &fit)? {
                        let candidate = Candidate {
                            freq,
                            intervals: n,
                            directions: big_n,
                            tau,
                            lambda: cf.lambda,
                        };
                        let test_rmse = cf.mse[0].sqrt();
                        let mut rec = vec![fmt_f64(config.deltas[di]), mode.as_str().to_string(), t.to_string()];
                        rec.extend(candidate_fields(&candidate));
                        rec.push(fmt_f64(test_rmse));
                        raw.write_record(&rec)?;
                        rows.push(TrialRow {
                            di,
                            mode,
                            candidate,
                            test_rmse,
                            fit_seconds: cf.fit_seconds,
                        });
                    }
                }
            }
            flush(&mut raw)?;
            log::info!("{} delta={} trial {t} done", config.experiment.as_str(), config.deltas[di]);
        }
    }
    drop(raw);

    // aggregate in first-seen order
    let mut cells: Vec<CellSummary> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let delta = config.deltas[r.di];
        match cells
            .iter()
            .position(|c| c.delta == delta && c.mode == r.mode && c.candidate == r.candidate)
        {
            Some(k) => members[k].push(i),
            None => {
                cells.push(CellSummary {
                    delta,
                    mode: r.mode,
                    candidate: r.candidate,
                    trials: 0,
                    mean_rmse: 0.0,
                    std_rmse: 0.0,
                    mean_fit_seconds: 0.0,
                });
                members.push(vec![i]);
            }
        }
    }
    for (cell, idx) in cells.iter_mut().zip(&members) {
        let vals: Vec<f64> = idx.iter().map(|&i| rows[i].test_rmse).collect();
        let (mean, std) = mean_std(&vals);
        cell.trials = vals.len();
        cell.mean_rmse = mean;
        cell.std_rmse = std;
        cell.mean_fit_seconds = idx.iter().map(|&i| rows[i].fit_seconds).sum::<f64>() / vals.len() as f64;
    }
    let mut w = out.csv("cells", &["delta", "mode", "J", "n", "N", "tau", "lambda", "trials", "mean_rmse", "std_rmse"])?;
    for c in &cells {
        let mut rec = vec![fmt_f64(c.delta), c.mode.as_str().to_string()];
        rec.extend(candidate_fields(&c.candidate));
        rec.extend([c.trials.to_string(), fmt_f64(c.mean_rmse), fmt_f64(c.std_rmse)]);
        w.write_record(&rec)?;
    }
    flush(&mut w)?;

    // one optimum per noise level and mode, and per J in the frequency study
    let by_freq = config.experiment == Experiment::Sim3;
    let mut best: Vec<usize> = Vec::new();
    for (k, c) in cells.iter().enumerate() {
        let same_group = |o: &CellSummary| {
            o.delta == c.delta && o.mode == c.mode && (!by_freq || o.candidate.freq == c.candidate.freq)
        };
        match best.iter().position(|&b| same_group(&cells[b])) {
            Some(g) => {
                if better(c, &cells[best[g]]) {
                    best[g] = k;
                }
            }
            None => best.push(k),
        }
    }
    let optimum: Vec<OptimumRow> = best
        .iter()
        .map(|&b| {
            let c = &cells[b];
            OptimumRow {
                delta: Some(c.delta),
                mode: c.mode,
                candidate: Some(c.candidate),
                trials: c.trials,
                mean_rmse: c.mean_rmse,
                std_rmse: c.std_rmse,
                mean_fit_seconds: c.mean_fit_seconds,
            }
        })
        .collect();
    let mut w = out.csv("optimum", &["delta", "mode", "J", "n", "N", "tau", "lambda", "trials", "mean_rmse", "std_rmse"])?;
    for &b in &best {
        let c = &cells[b];
        let mut rec = vec![fmt_f64(c.delta), c.mode.as_str().to_string()];
        rec.extend(candidate_fields(&c.candidate));
        rec.extend([c.trials.to_string(), fmt_f64(c.mean_rmse), fmt_f64(c.std_rmse)]);
        w.write_record(&rec)?;
    }
    flush(&mut w)?;

    write_curves(config, &rows, &cells, &best, out)?;
    let notes = vec![format!(
        "test RMSE of every cell averaged over {} trials; optima are taken on the test sample",
        config.trials
    )];
    Ok((cells, optimum, notes))
}

/// Smaller mean RMSE, ties going to the smaller capacity.
fn better(a: &CellSummary, b: &CellSummary) -> bool {
    let key = |c: &CellSummary| (c.candidate.intervals, c.candidate.freq, c.candidate.directions);
    match a.mean_rmse.total_cmp(&b.mean_rmse) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            (key(a), a.candidate.tau, a.candidate.lambda) < (key(b), b.candidate.tau, b.candidate.lambda)
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Axis {
    Directions,
    Intervals,
    Tau,
}

impl Axis {
    fn name(&self) -> &'static str {
        match self {
            Axis::Directions => "N",
            Axis::Intervals => "n",
            Axis::Tau => "tau",
        }
    }

    fn value(&self, c: &Candidate) -> f64 {
        match self {
            Axis::Directions => c.directions as f64,
            Axis::Intervals => c.intervals as f64,
            Axis::Tau => c.tau,
        }
    }

    /// Same cell apart from this axis.
    fn matches(&self, a: &Candidate, b: &Candidate) -> bool {
        a.freq == b.freq
            && a.lambda == b.lambda
            && (*self == Axis::Directions || a.directions == b.directions)
            && (*self == Axis::Intervals || a.intervals == b.intervals)
            && (*self == Axis::Tau || a.tau == b.tau)
    }
}

/// One-parameter slices through each optimum, with raw per-trial values.
fn write_curves(
    config: &BenchConfig,
    rows: &[TrialRow],
    cells: &[CellSummary],
    best: &[usize],
    out: &mut Outputs,
) -> Result<()> {
    let sim3 = config.experiment == Experiment::Sim3;
    let axes: &[Axis] = if sim3 {
        &[Axis::Tau]
    } else {
        &[Axis::Directions, Axis::Intervals, Axis::Tau]
    };
    let mut w = out.csv(
        "curves",
        &["delta", "mode", "varied", "J", "n", "N", "tau", "lambda", "trial", "test_rmse"],
    )?;
    for (di, &delta) in config.deltas.iter().enumerate() {
        for &axis in axes {
            let mut chart = LineChart {
                title: format!("{} {}, delta = {delta}", config.experiment.as_str(), config.target.as_str()),
                x_label: axis.name().into(),
                y_label: "test RMSE".into(),
                log_x: axis == Axis::Tau,
                log_y: true,
                series: Vec::new(),
            };
            for &b in best.iter().filter(|&&b| cells[b].delta == delta) {
                let opt = &cells[b];
                let mut points = Vec::new();
                for c in cells
                    .iter()
                    .filter(|c| c.delta == delta && c.mode == opt.mode && axis.matches(&c.candidate, &opt.candidate))
                {
                    points.push((axis.value(&c.candidate), c.mean_rmse));
                    for (t, r) in rows
                        .iter()
                        .filter(|r| r.di == di && r.mode == c.mode && r.candidate == c.candidate)
                        .enumerate()
                    {
                        let mut rec = vec![fmt_f64(delta), c.mode.as_str().to_string(), axis.name().to_string()];
                        rec.extend(candidate_fields(&c.candidate));
                        rec.extend([t.to_string(), fmt_f64(r.test_rmse)]);
                        w.write_record(&rec)?;
                    }
                }
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                let name = if sim3 {
                    format!("J = {}", opt.candidate.freq)
                } else {
                    opt.mode.as_str().to_string()
                };
                chart.series.push(Series { name, points });
            }
            out.svg(&format!("delta{di}_{}", axis.name()), &chart)?;
        }
    }
    flush(&mut w)?;

    // optimum against noise level (sim2) or against J (sim3)
    let chart = if sim3 {
        LineChart {
            title: format!("sim3 {}: best RMSE per J", config.target.as_str()),
            x_label: "J".into(),
            y_label: "test RMSE".into(),
            log_x: false,
            log_y: true,
            series: config
                .deltas
                .iter()
                .map(|&delta| Series {
                    name: format!("delta = {delta}"),
                    points: best
                        .iter()
                        .map(|&b| &cells[b])
                        .filter(|c| c.delta == delta)
                        .map(|c| (c.candidate.freq as f64, c.mean_rmse))
                        .collect(),
                })
                .collect(),
        }
    } else {
        let modes = config.active_modes();
        LineChart {
            title: format!("sim2 {}: grid-optimal RMSE", config.target.as_str()),
            x_label: "noise level delta".into(),
            y_label: "test RMSE".into(),
            log_x: false,
            log_y: true,
            series: modes
                .iter()
                .map(|&mode| Series {
                    name: mode.as_str().to_string(),
                    points: best
                        .iter()
                        .map(|&b| &cells[b])
                        .filter(|c| c.mode == mode)
                        .map(|c| (c.delta, c.mean_rmse))
                        .collect(),
                })
                .collect(),
        }
    };
    out.svg("optimum", &chart)
}

/// Outcome of selecting on a training sample and scoring on a test sample.
#[derive(Debug, Clone)]
pub struct SelectedTrial {
    pub selection: SelectionResult,
    pub val_rmse: f64,
    pub test_rmse: f64,
}

/// Grid search on `train`, then the test RMSE of the refitted model.
pub fn select_and_test(train: &Dataset, test: &Dataset, grid: &GridSpec, opts: &SearchOptions) -> Result<SelectedTrial> {
    let selection = grid_search(train, grid, opts)?;
    let val_mse = selection
        .scores
        .iter()
        .find(|s| s.candidate == selection.chosen)
        .map(|s| s.mean_mse)
        .unwrap_or(f64::NAN);
    let pred = predict(&selection.model, &test.x)?;
    let test_rmse = rmse(&pred, &test.y)?;
    Ok(SelectedTrial {
        selection,
        val_rmse: val_mse.sqrt(),
        test_rmse,
    })
}

fn search_options(config: &BenchConfig, mode: SketchMode, seed: u64) -> SearchOptions {
    SearchOptions {
        split_fraction: config.split_fraction,
        repeats: config.repeats,
        seed,
        mode,
        m: config.m,
        refit: config.refit,
        fit: FitOptions::default(),
    }
}

struct SelectedRow {
    key: Option<f64>,
    mode: SketchMode,
    candidate: Candidate,
    test_rmse: f64,
    fit_seconds: f64,
}

const SELECTED_HEADER: [&str; 11] = [
    "delta", "mode", "trial", "J", "n", "N", "tau", "lambda", "val_rmse", "test_rmse", "effective_rank",
];

fn record_selected(
    w: &mut csv::Writer<BufWriter<File>>,
    delta: Option<f64>,
    mode: SketchMode,
    t: usize,
    st: &SelectedTrial,
) -> Result<SelectedRow> {
    let c = st.selection.chosen;
    let mut rec = vec![
        delta.map(fmt_f64).unwrap_or_default(),
        mode.as_str().to_string(),
        t.to_string(),
    ];
    rec.extend(candidate_fields(&c));
    rec.extend([
        fmt_f64(st.val_rmse),
        fmt_f64(st.test_rmse),
        st.selection.model.diagnostics.effective_rank.to_string(),
    ]);
    w.write_record(&rec)?;
    flush(w)?;
    Ok(SelectedRow {
        key: delta,
        mode,
        candidate: c,
        test_rmse: st.test_rmse,
        fit_seconds: st.selection.model.diagnostics.fit_seconds,
    })
}

fn summarize_selected(rows: &[SelectedRow], keys: &[Option<f64>], modes: &[SketchMode], out: &mut Outputs) -> Result<Vec<OptimumRow>> {
    let mut w = out.csv("summary", &["delta", "mode", "trials", "mean_rmse", "std_rmse"])?;
    let mut optimum = Vec::new();
    for &key in keys {
        for &mode in modes {
            let group: Vec<&SelectedRow> = rows.iter().filter(|r| r.key == key && r.mode == mode).collect();
            if group.is_empty() {
                continue;
            }
            let vals: Vec<f64> = group.iter().map(|r| r.test_rmse).collect();
            let (mean, std) = mean_std(&vals);
            let shared = group.iter().all(|r| r.candidate == group[0].candidate);
            w.write_record([
                key.map(fmt_f64).unwrap_or_default(),
                mode.as_str().to_string(),
                vals.len().to_string(),
                fmt_f64(mean),
                fmt_f64(std),
            ])?;
            optimum.push(OptimumRow {
                delta: key,
                mode,
                candidate: shared.then_some(group[0].candidate),
                trials: vals.len(),
                mean_rmse: mean,
                std_rmse: std,
                mean_fit_seconds: group.iter().map(|r| r.fit_seconds).sum::<f64>() / vals.len() as f64,
            });
        }
    }
    flush(&mut w)?;
    Ok(optimum)
}

/// Hold-out grid search per trial, scored on the test sample.
fn selection_trials(config: &BenchConfig, grid: &GridSpec, out: &mut Outputs) -> Result<(Vec<OptimumRow>, Vec<String>)> {
    let modes = config.active_modes();
    let mut w = out.csv("trials", &SELECTED_HEADER)?;
    let mut rows = Vec::new();
    for (di, &delta) in config.deltas.iter().enumerate() {
        for t in 0..config.trials {
            let (train, test) = trial_data(config, di, t)?;
            for (mi, &mode) in modes.iter().enumerate() {
                let opts = search_options(config, mode, derive(config.seed, &[13, di as u64, t as u64, mi as u64]));
                let st = select_and_test(&train, &test, grid, &opts)?;
                rows.push(record_selected(&mut w, Some(delta), mode, t, &st)?);
            }
            log::info!("sim4 delta={delta} trial {t} done");
        }
    }
    drop(w);
    let keys: Vec<Option<f64>> = config.deltas.iter().map(|&d| Some(d)).collect();
    let optimum = summarize_selected(&rows, &keys, &modes, out)?;

    let series = |f: fn(&OptimumRow) -> f64| -> Vec<Series> {
        modes
            .iter()
            .map(|&mode| Series {
                name: mode.as_str().to_string(),
                points: optimum
                    .iter()
                    .filter(|o| o.mode == mode)
                    .map(|o| (o.delta.unwrap_or(f64::NAN), f(o)))
                    .collect(),
            })
            .collect()
    };
    out.svg(
        "rmse",
        &LineChart {
            title: format!("sim4 {}: selected model", config.target.as_str()),
            x_label: "noise level delta".into(),
            y_label: "test RMSE".into(),
            log_x: false,
            log_y: true,
            series: series(|o| o.mean_rmse),
        },
    )?;
    out.svg(
        "fit_time",
        &LineChart {
            title: format!("sim4 {}: fit time of the selected model", config.target.as_str()),
            x_label: "noise level delta".into(),
            y_label: "seconds".into(),
            log_x: false,
            log_y: false,
            series: series(|o| o.mean_fit_seconds),
        },
    )?;
    let notes = vec![
        format!("hyper-parameters chosen by hold-out validation ({} split), refit: {:?}", config.split_fraction, config.refit),
        "fit times cover design-matrix assembly and solve of the reported model".into(),
    ];
    Ok((optimum, notes))
}

/// Clamps every coordinate to the range seen in training, which keeps
/// held-out rows inside the ball.
fn clamp_to_training_range(x: &Points, scale: f64) -> Result<Points> {
    let half = BALL_RADIUS * scale;
    Points::new(x.dim(), x.as_slice().iter().map(|v| v.clamp(-half, half)).collect())
}

fn real_trials(config: &BenchConfig, grid: &GridSpec, out: &mut Outputs) -> Result<(Vec<OptimumRow>, Vec<String>)> {
    let real = config.real.as_ref().expect("validated");
    let transform = if real.log_target {
        TargetTransform::Log1p
    } else {
        TargetTransform::None
    };
    let base = ingest_csv(&real.train, &real.target_column, transform)?;
    let mut notes: Vec<String> = base.preprocessing.warnings.clone();
    let fixed_test = match &real.test {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let (x, y) = apply_record(file, &base.preprocessing)?;
            let y = y.ok_or_else(|| Error::Validation(format!("test CSV lacks column `{}`", real.target_column)))?;
            let clamped = clamp_to_training_range(&x, base.preprocessing.ball_scale)?;
            let moved = x.as_slice().iter().zip(clamped.as_slice()).filter(|(a, b)| a != b).count();
            if moved > 0 {
                notes.push(format!("{moved} test coordinates clamped to the training range"));
            }
            Some(Dataset::new(clamped, y, base.preprocessing.clone())?)
        }
        None => None,
    };

    let modes = config.active_modes();
    let mut w = out.csv("trials", &SELECTED_HEADER)?;
    let mut rows = Vec::new();
    for t in 0..config.trials {
        let (train, test) = match &fixed_test {
            Some(test) => (base.clone(), test.clone()),
            None => {
                let s = split_indices(base.len(), config.split_fraction, t, derive(config.seed, &[14, t as u64]))?;
                (base.subset(&s.train), base.subset(&s.validation))
            }
        };
        for (mi, &mode) in modes.iter().enumerate() {
            let opts = search_options(config, mode, derive(config.seed, &[15, t as u64, mi as u64]));
            let st = select_and_test(&train, &test, grid, &opts)?;
            rows.push(record_selected(&mut w, None, mode, t, &st)?);
        }
    }
    drop(w);
    let optimum = summarize_selected(&rows, &[None], &modes, out)?;
    notes.push(format!(
        "targets {} the log1p transform; RMSE is on that scale",
        if real.log_target { "use" } else { "do not use" }
    ));
    Ok((optimum, notes))
}

/// Sup errors of the components measured on a dense grid.
pub mod components_check {
    use super::*;
    use crate::components::{prod_j, square_unit, trapezoid, ComponentParams, TrapezoidSpec};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct CheckRow {
        pub component: String,
        /// `m` for square and product rows, `tau` for trapezoid rows.
        pub parameter: f64,
        pub sup_error: f64,
        /// Theoretical value or bound.
        pub reference: f64,
        /// Error at the previous parameter divided by this one.
        pub decay_ratio: f64,
        pub ok: bool,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct CheckConfig {
        pub m_min: u32,
        pub m_max: u32,
        /// Grid points per unit length.
        pub density: usize,
        pub taus: Vec<f64>,
    }

    impl Default for CheckConfig {
        fn default() -> Self {
            Self {
                m_min: 1,
                m_max: 10,
                density: 100_000,
                taus: vec![0.5, 0.1, 0.01, 0.001],
            }
        }
    }

    fn grid(lo: f64, hi: f64, density: usize) -> impl Iterator<Item = f64> {
        let steps = ((hi - lo) * density as f64).ceil() as usize;
        (0..=steps).map(move |i| lo + (hi - lo) * i as f64 / steps as f64)
    }

    pub fn run(cfg: &CheckConfig) -> Result<Vec<CheckRow>> {
        if cfg.m_min == 0 || cfg.m_min > cfg.m_max || cfg.density == 0 {
            return Err(Error::InvalidParameter("need 1 <= m_min <= m_max and a positive density".into()));
        }
        let mut rows = Vec::new();

        // square: sup |SG_m(t) - t^2| on [0, 1] is 2^(-2m-2), attained at
        // the midpoints of the dyadic cells; a grid of spacing h misses it
        // by at most (h/2)^2
        let slack = (0.5 / cfg.density as f64).powi(2) + 1e-14;
        let mut prev = f64::NAN;
        for m in cfg.m_min..=cfg.m_max {
            let err = grid(0.0, 1.0, cfg.density)
                .map(|t| (square_unit(t, m) - t * t).abs())
                .fold(0.0, f64::max);
            let reference = 0.25f64.powi(m as i32 + 1);
            let ratio = prev / err;
            let ok = (err - reference).abs() <= slack && (m == cfg.m_min || err < prev);
            rows.push(CheckRow {
                component: "square".into(),
                parameter: m as f64,
                sup_error: err,
                reference,
                decay_ratio: ratio,
                ok,
            });
            prev = err;
        }

        // product of J operands on [0, 1]^J, sampled on a fixed lattice
        for j in [2usize, 3] {
            let mut prev = f64::NAN;
            let per_axis = if j == 2 { 201 } else { 41 };
            for m in cfg.m_min..=cfg.m_max {
                let params = ComponentParams::new(m, 0.0, 1.0)?;
                let mut err = 0.0f64;
                let mut idx = vec![0usize; j];
                loop {
                    let ts: Vec<f64> = idx.iter().map(|&i| i as f64 / (per_axis - 1) as f64).collect();
                    let v = prod_j(&ts, &params)?;
                    err = err.max((v - ts.iter().product::<f64>()).abs());
                    let mut k = 0;
                    while k < j {
                        idx[k] += 1;
                        if idx[k] < per_axis {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == j {
                        break;
                    }
                }
                let reference = params.prod_error_bound(j);
                let ratio = prev / err;
                rows.push(CheckRow {
                    component: format!("product_j{j}"),
                    parameter: m as f64,
                    sup_error: err,
                    reference,
                    decay_ratio: ratio,
                    ok: err <= reference && (m == cfg.m_min || ratio >= 1.9),
                });
                prev = err;
            }
        }

        // trapezoid against its exact piecewise-linear form
        let mut prev = f64::NAN;
        for &tau in &cfg.taus {
            let spec = TrapezoidSpec::new(-0.25, 0.25, tau)?;
            let exact = |t: f64| {
                if t < spec.lo - tau || t > spec.hi + tau {
                    0.0
                } else if t < spec.lo {
                    (t - spec.lo + tau) / tau
                } else if t <= spec.hi {
                    1.0
                } else {
                    (spec.hi + tau - t) / tau
                }
            };
            let indicator = |t: f64| if (spec.lo..=spec.hi).contains(&t) { 1.0 } else { 0.0 };
            let (mut err, mut l1) = (0.0f64, 0.0f64);
            let mut count = 0usize;
            for t in grid(-1.0, 1.0, cfg.density) {
                let v = trapezoid(t, &spec);
                err = err.max((v - exact(t)).abs());
                l1 += (v - indicator(t)).abs();
                count += 1;
            }
            let l1 = 2.0 * l1 / count as f64;
            let ratio = prev / l1;
            rows.push(CheckRow {
                component: "trapezoid".into(),
                parameter: tau,
                sup_error: err,
                reference: 0.0,
                decay_ratio: ratio,
                ok: err <= 1e-12,
            });
            // L1 distance to the indicator is exactly tau
            rows.push(CheckRow {
                component: "trapezoid_l1".into(),
                parameter: tau,
                sup_error: l1,
                reference: tau,
                decay_ratio: ratio,
                ok: (l1 - tau).abs() <= 4.0 / cfg.density as f64,
            });
            prev = l1;
        }
        Ok(rows)
    }

    pub fn write_csv<W: Write>(rows: &[CheckRow], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "parameter", "sup_error", "reference", "decay_ratio", "ok"])?;
        for r in rows {
            w.write_record([
                r.component.clone(),
                fmt_f64(r.parameter),
                fmt_f64(r.sup_error),
                fmt_f64(r.reference),
                fmt_f64(r.decay_ratio),
                r.ok.to_string(),
            ])?;
        }
        flush(&mut w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in [Experiment::Sim2, Experiment::Sim3, Experiment::Sim4, Experiment::Real] {
            assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
        }
        assert!("sim9".parse::<Experiment>().is_err());
    }

    #[test]
    fn grids() {
        let full = default_grid(Experiment::Sim3, Target::F1, true);
        assert_eq!(full.freqs, vec![1, 2, 3, 4, 5]);
        assert_eq!(full.intervals.len(), 10);
        assert_eq!(full.directions, DirectionGrid::Free((1..=40).map(|i| 10 * i).collect()));
        assert_eq!(default_grid(Experiment::Sim2, Target::F1, true).freqs, vec![1]);
        for e in [Experiment::Sim2, Experiment::Sim3, Experiment::Sim4] {
            for t in [Target::F1, Target::F2] {
                let g = default_grid(e, t, false);
                match &g.directions {
                    DirectionGrid::Free(v) => assert!(v.iter().all(|&n| n <= 200)),
                    DirectionGrid::Tied => panic!("desk grids use a free N axis"),
                }
                assert!(g.taus.iter().all(|&t| t > 0.0 && t <= 0.5));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = BenchConfig::new(Experiment::Real);
        assert!(c.validate().is_err());
        c.experiment = Experiment::Sim2;
        assert!(c.validate().is_ok());
        c.trials = 0;
        assert!(c.validate().is_err());
        c.trials = 1;
        c.deltas = vec![-0.1];
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&BenchConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<BenchConfig>(&json).unwrap(), BenchConfig::default());
        let sparse: BenchConfig = serde_json::from_str(r#"{"experiment":"sim4","trials":2}"#).unwrap();
        assert_eq!(sparse.experiment, Experiment::Sim4);
        assert_eq!(sparse.deltas, NOISE_LEVELS.to_vec());
    }
}
