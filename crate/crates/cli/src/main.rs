//! `sketchnet` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or parameter error, 2 data validation
//! (malformed or mismatched inputs), 3 numerical failure or a failed
//! component check.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sketchnet::basis::{make_spec, SketchParams};
use sketchnet::bench::{self, components_check, BenchConfig, Experiment, RealData};
use sketchnet::data::{
    apply_record, ingest_csv, make_dataset, read_points_csv, DataSource, Dataset, PreprocessRecord, Target,
    TargetTransform,
};
use sketchnet::report::fmt_f64;
use sketchnet::selection::{grid_search, holdout_select, DirectionGrid, GridSpec, Refit, SearchOptions};
use sketchnet::solver::{fit_model_with, predict, rmse, FitOptions, FittedModel, RoutePolicy};
use sketchnet::sphere::{eq_points, random_points, riesz_energy, EnergyConfig, SketchMode};
use sketchnet::Error;

const OUT_DIR_ENV: &str = "SKETCHNET_OUT_DIR";

#[derive(Parser)]
#[command(name = "sketchnet", version, about = "Regression with component-based sketching bases")]
struct Cli {
    /// Directory for outputs that are not given an explicit path.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "sketchnet-out")]
    out_dir: PathBuf,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure component errors against their closed forms and decay laws.
    ComponentsCheck(CheckArgs),
    /// Write a direction set on the unit sphere.
    SphereGen(SphereArgs),
    /// Write a synthetic sample.
    Generate(GenerateArgs),
    /// Fit a model and save it as JSON.
    Fit(FitArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Hold-out selection or grid search, saving the chosen model.
    Select(SelectArgs),
    /// Run a benchmark experiment.
    Bench(BenchArgs),
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 1)]
    m_min: u32,
    #[arg(long, default_value_t = 10)]
    m_max: u32,
    /// Grid points per unit length.
    #[arg(long, default_value_t = 100_000)]
    density: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.1, 0.01, 0.001])]
    taus: Vec<f64>,
}

#[derive(Args)]
struct SphereArgs {
    /// Ambient dimension d; points lie on the sphere in R^d.
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value = "equal-area")]
    mode: SketchMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Riesz exponent for the reported energy; defaults to d.
    #[arg(long)]
    mu: Option<f64>,
    /// Defaults to `<out-dir>/directions.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "f1")]
    target: Target,
    #[arg(long, default_value_t = 2000)]
    size: usize,
    /// Standard deviation of the Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<out-dir>/<target>.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// How a data CSV is read.
#[derive(Args, Clone)]
struct DataArgs {
    /// CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the target column of a raw CSV. Without it the file must
    /// already be normalized with columns `x1..xd,y`.
    #[arg(long)]
    target_column: Option<String>,
    /// Fit `log(1 + y)` instead of `y`.
    #[arg(long)]
    log_target: bool,
}

/// Sketch and solver settings, as read from a JSON config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FitConfig {
    freq: usize,
    intervals: usize,
    directions: usize,
    tau: f64,
    m: Option<u32>,
    mode: SketchMode,
    seed: u64,
    lambda: f64,
    rank_tol: f64,
    route: RoutePolicy,
}

impl Default for FitConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            freq: 1,
            intervals: 4,
            directions: 20,
            tau: 0.1,
            m: None,
            mode: SketchMode::EqualArea,
            seed: 0,
            lambda: fit.lambda,
            rank_tol: fit.rank_tol,
            route: fit.route,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to save the model; defaults to `<out-dir>/model.json`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    freq: Option<usize>,
    #[arg(long)]
    intervals: Option<usize>,
    #[arg(long)]
    directions: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    mode: Option<SketchMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw CSV for models fitted on raw data, normalized `x1..xd[,y]`
    /// otherwise.
    #[arg(long)]
    data: PathBuf,
    /// Clamp raw features to the training range instead of rejecting rows
    /// that leave the ball.
    #[arg(long)]
    clamp: bool,
    /// Defaults to `<out-dir>/predictions.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SelectConfig {
    /// Hold-out rule over `n` with `N = n^(d-1)`; otherwise grid search.
    holdout: bool,
    freq: usize,
    tau: f64,
    lambda: f64,
    grid: Option<GridSpec>,
    split_fraction: f64,
    repeats: usize,
    seed: u64,
    mode: SketchMode,
    m: Option<u32>,
    refit: Refit,
}

impl Default for SelectConfig {
    fn default() -> Self {
        let s = SearchOptions::default();
        Self {
            holdout: false,
            freq: 1,
            tau: 0.1,
            lambda: 0.0,
            grid: None,
            split_fraction: s.split_fraction,
            repeats: s.repeats,
            seed: s.seed,
            mode: s.mode,
            m: s.m,
            refit: s.refit,
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the hold-out rule.
    #[arg(long)]
    holdout: bool,
    #[arg(long, value_delimiter = ',')]
    freqs: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    intervals: Option<Vec<usize>>,
    /// Direction counts; omit with `--tied` to use `N = n^(d-1)`.
    #[arg(long, value_delimiter = ',')]
    directions: Option<Vec<usize>>,
    #[arg(long)]
    tied: bool,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<SketchMode>,
    /// Refit the chosen model on all rows instead of the fitting side.
    #[arg(long)]
    refit_full: bool,
    /// Defaults to `<out-dir>/model.json`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Defaults to `<out-dir>/validation.csv`.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    experiment: Experiment,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the complete published grid.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target: Option<Target>,
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Training CSV of the `real` experiment.
    #[arg(long)]
    train_csv: Option<PathBuf>,
    #[arg(long)]
    test_csv: Option<PathBuf>,
    #[arg(long)]
    target_column: Option<String>,
    #[arg(long)]
    log_target: bool,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) => 1,
            Error::DimensionMismatch(_) | Error::Validation(_) | Error::Io { .. } | Error::Csv(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::CoincidentPoints(..) => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let out_dir = cli.out_dir.clone();
    let result = match cli.command {
        Command::ComponentsCheck(a) => components_check_cmd(&out_dir, a),
        Command::SphereGen(a) => sphere_gen(&out_dir, a),
        Command::Generate(a) => generate(&out_dir, a),
        Command::Fit(a) => fit(&out_dir, a),
        Command::Predict(a) => predict_cmd(&out_dir, a),
        Command::Select(a) => select(&out_dir, a),
        Command::Bench(a) => bench_cmd(&out_dir, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn out_path(out_dir: &Path, explicit: Option<PathBuf>, default_name: &str) -> CliResult<PathBuf> {
    match explicit {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::Io {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            Ok(p)
        }
        None => {
            fs::create_dir_all(out_dir).map_err(|e| Error::Io {
                path: out_dir.to_path_buf(),
                source: e,
            })?;
            Ok(out_dir.join(default_name))
        }
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => serde_json::from_str(&read_to_string(p)?)
            .map_err(|e| Failure::usage(format!("config {}: {e}", p.display()))),
        None => Ok(T::default()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn components_check_cmd(out_dir: &Path, a: CheckArgs) -> CliResult {
    let cfg = components_check::CheckConfig {
        m_min: a.m_min,
        m_max: a.m_max,
        density: a.density,
        taus: a.taus,
    };
    let rows = components_check::run(&cfg)?;
    let path = out_path(out_dir, None, "components_check.csv")?;
    components_check::write_csv(&rows, create(&path)?)?;
    println!("{:<14} {:>10} {:>12} {:>12} {:>8}  ok", "component", "param", "sup_error", "reference", "ratio");
    for r in &rows {
        println!(
            "{:<14} {:>10} {:>12.4e} {:>12.4e} {:>8.3}  {}",
            r.component, r.parameter, r.sup_error, r.reference, r.decay_ratio, r.ok
        );
    }
    println!("wrote {}", path.display());
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.ok)
        .map(|r| format!("{} at {}", r.component, r.parameter))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numerical(format!("component check failed: {}", failed.join(", "))))
    }
}

fn sphere_gen(out_dir: &Path, a: SphereArgs) -> CliResult {
    let set = match a.mode {
        SketchMode::EqualArea => eq_points(a.dim, a.count)?,
        SketchMode::Random => random_points(a.dim, a.count, a.seed)?,
    };
    let path = out_path(out_dir, a.output, "directions.csv")?;
    set.write_csv(create(&path)?)?;
    println!("wrote {} points to {}", set.len(), path.display());
    if set.len() >= 2 {
        let cfg = match a.mu {
            Some(mu) => EnergyConfig::new(mu)?,
            None => EnergyConfig::for_dim(a.dim),
        };
        println!("min separation {:.6e}", set.min_separation());
        match riesz_energy(&set, cfg) {
            Ok(e) => println!("Riesz energy (mu = {}) {:.6e}", cfg.mu, e),
            Err(e) => println!("Riesz energy undefined: {e}"),
        }
    }
    Ok(())
}

fn generate(out_dir: &Path, a: GenerateArgs) -> CliResult {
    let data = make_dataset(a.target, a.size, a.noise, a.seed)?;
    let path = out_path(out_dir, a.output, &format!("{}.csv", a.target.as_str()))?;
    data.write_csv(create(&path)?)?;
    println!("wrote {} rows to {}", data.len(), path.display());
    Ok(())
}

fn load_dataset(a: &DataArgs) -> CliResult<Dataset> {
    match &a.target_column {
        Some(col) => {
            let transform = if a.log_target {
                TargetTransform::Log1p
            } else {
                TargetTransform::None
            };
            Ok(ingest_csv(&a.data, col, transform)?)
        }
        None => {
            if a.log_target {
                return Err(Failure::usage("--log-target needs --target-column"));
            }
            let file = File::open(&a.data).map_err(|e| Error::Io {
                path: a.data.clone(),
                source: e,
            })?;
            let (x, y) = read_points_csv(file)?;
            let y = y.ok_or_else(|| Error::Validation("normalized CSV needs a `y` column".into()))?;
            // already normalized: features pass through unchanged
            let mut record = PreprocessRecord::synthetic(DataSource::Csv);
            record.warnings.push("inputs read as already normalized".into());
            Ok(Dataset::new(x, y, record)?)
        }
    }
}

fn fit(out_dir: &Path, a: FitArgs) -> CliResult {
    let mut cfg: FitConfig = load_config(a.config.as_deref())?;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    set!(freq, intervals, directions, tau, mode, seed, lambda);
    if a.m.is_some() {
        cfg.m = a.m;
    }
    let data = load_dataset(&a.data)?;
    let params = SketchParams {
        freq: cfg.freq,
        intervals: cfg.intervals,
        directions: cfg.directions,
        tau: cfg.tau,
        m: cfg.m,
        mode: cfg.mode,
        seed: cfg.seed,
    };
    let spec = make_spec(data.dim(), &params)?;
    let opts = FitOptions {
        lambda: cfg.lambda,
        rank_tol: cfg.rank_tol,
        route: cfg.route,
    };
    let model = fit_model_with(&data, &spec, &opts)?;
    let path = out_path(out_dir, a.model, "model.json")?;
    write_text(&path, &model.to_json()?)?;
    let d = &model.diagnostics;
    println!(
        "fitted {} features on {} rows: train RMSE {:.6e}, rank {}, {:?} route, {:.3}s",
        spec.dimension(),
        data.len(),
        d.train_rmse,
        d.effective_rank,
        d.route,
        d.fit_seconds
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn predict_cmd(out_dir: &Path, a: PredictArgs) -> CliResult {
    let model = FittedModel::from_json(&read_to_string(&a.model)?)?;
    let file = File::open(&a.data).map_err(|e| Error::Io {
        path: a.data.clone(),
        source: e,
    })?;
    let (mut x, y) = if model.preprocessing.source == DataSource::Csv && !model.preprocessing.features.is_empty() {
        apply_record(file, &model.preprocessing)?
    } else {
        read_points_csv(file)?
    };
    if a.clamp {
        let half = 0.5 * model.preprocessing.ball_scale;
        x = sketchnet::data::Points::new(x.dim(), x.as_slice().iter().map(|v| v.clamp(-half, half)).collect())?;
    }
    let pred = predict(&model, &x)?;
    let path = out_path(out_dir, a.output, "predictions.csv")?;
    let mut w = create(&path)?;
    let transform = model.preprocessing.target_transform;
    let io = |e: std::io::Error| Failure::from(Error::Io { path: path.clone(), source: e });
    writeln!(w, "prediction").map_err(io)?;
    for p in &pred {
        writeln!(w, "{}", fmt_f64(transform.inverse(*p))).map_err(io)?;
    }
    w.flush().map_err(io)?;
    if let Some(y) = y {
        println!("RMSE {:.6e} over {} rows", rmse(&pred, &y)?, y.len());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn select(out_dir: &Path, a: SelectArgs) -> CliResult {
    let mut cfg: SelectConfig = load_config(a.config.as_deref())?;
    cfg.holdout |= a.holdout;
    if let Some(v) = a.split_fraction {
        cfg.split_fraction = v;
    }
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if a.refit_full {
        cfg.refit = Refit::Full;
    }
    let data = load_dataset(&a.data)?;
    let opts = SearchOptions {
        split_fraction: cfg.split_fraction,
        repeats: cfg.repeats,
        seed: cfg.seed,
        mode: cfg.mode,
        m: cfg.m,
        refit: cfg.refit,
        fit: FitOptions::default(),
    };
    let result = if cfg.holdout {
        if let Some(f) = a.freqs.as_ref().and_then(|v| v.first()) {
            cfg.freq = *f;
        }
        if let Some(t) = a.taus.as_ref().and_then(|v| v.first()) {
            cfg.tau = *t;
        }
        if let Some(l) = a.lambdas.as_ref().and_then(|v| v.first()) {
            cfg.lambda = *l;
        }
        holdout_select(&data, cfg.split_fraction, cfg.freq, cfg.tau, cfg.lambda, &opts)?
    } else {
        let mut grid = cfg.grid.clone().unwrap_or(GridSpec {
            freqs: vec![1, 2],
            intervals: vec![2, 4],
            directions: DirectionGrid::Free(vec![10, 20]),
            taus: vec![0.1],
            lambdas: vec![0.0],
        });
        if let Some(v) = a.freqs {
            grid.freqs = v;
        }
        if let Some(v) = a.intervals {
            grid.intervals = v;
        }
        if a.tied {
            grid.directions = DirectionGrid::Tied;
        } else if let Some(v) = a.directions {
            grid.directions = DirectionGrid::Free(v);
        }
        if let Some(v) = a.taus {
            grid.taus = v;
        }
        if let Some(v) = a.lambdas {
            grid.lambdas = v;
        }
        grid_search(&data, &grid, &opts)?
    };
    let table = out_path(out_dir, a.table, "validation.csv")?;
    result.write_table_csv(create(&table)?)?;
    let model_path = out_path(out_dir, a.model, "model.json")?;
    write_text(&model_path, &result.model.to_json()?)?;
    let c = result.chosen;
    let best = result
        .scores
        .iter()
        .find(|s| s.candidate == c)
        .map(|s| s.mean_mse.sqrt())
        .unwrap_or(f64::NAN);
    println!(
        "chosen J = {}, n = {}, N = {}, tau = {}, lambda = {}: validation RMSE {:.6e}",
        c.freq, c.intervals, c.directions, c.tau, c.lambda, best
    );
    println!("wrote {} and {}", table.display(), model_path.display());
    Ok(())
}

fn bench_cmd(out_dir: &Path, a: BenchArgs) -> CliResult {
    let mut cfg: BenchConfig = load_config(a.config.as_deref())?;
    cfg.experiment = a.experiment;
    cfg.full |= a.full;
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.target {
        cfg.target = v;
    }
    if let Some(v) = a.deltas {
        cfg.deltas = v;
    }
    if let Some(v) = a.train_size {
        cfg.train_size = v;
    }
    if let Some(v) = a.test_size {
        cfg.test_size = v;
    }
    if let Some(train) = a.train_csv {
        let target_column = a
            .target_column
            .or_else(|| cfg.real.as_ref().map(|r| r.target_column.clone()))
            .ok_or_else(|| Failure::usage("--train-csv needs --target-column"))?;
        cfg.real = Some(RealData {
            train,
            test: a.test_csv,
            target_column,
            log_target: a.log_target,
        });
    }
    let report = bench::run(&cfg, out_dir)?;
    for o in &report.optimum {
        let delta = o.delta.map(|d| format!("delta = {d:<5}")).unwrap_or_default();
        let cell = o
            .candidate
            .map(|c| format!("J={} n={} N={} tau={} lambda={}", c.freq, c.intervals, c.directions, c.tau, c.lambda))
            .unwrap_or_else(|| "per-trial selection".into());
        println!(
            "{delta} {:<10} RMSE {:.4e} (std {:.2e}, {} trials)  {cell}",
            o.mode.as_str(),
            o.mean_rmse,
            o.std_rmse,
            o.trials
        );
    }
    println!("wrote {} files to {}", report.files.len(), out_dir.display());
    Ok(())
}
