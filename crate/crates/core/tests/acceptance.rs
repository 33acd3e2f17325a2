//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any of them fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use faer::Mat;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sketchnet::bench::{self, default_grid, select_and_test, BenchConfig, Experiment};
use sketchnet::components::{prod_j, square_unit, trapezoid, ComponentParams, TrapezoidSpec};
use sketchnet::data::{make_dataset, make_test_dataset, Dataset, Target};
use sketchnet::selection::{holdout_select, DirectionGrid, GridSpec, Refit, SearchOptions};
use sketchnet::solver::{fit, fit_model, predict, rmse};
use sketchnet::sphere::{eq_points, random_points, riesz_energy, EnergyConfig, EqPartition, SketchMode};
use sketchnet::{basis::make_spec, seed::derive};

const SEED: u64 = 20240601;

// tolerances
const TRAPEZOID_TOL: f64 = 1e-12;
const SQUARE_GRID_STEP: f64 = 1e-5;
const PRODUCT_RATIO: f64 = 1.9;
const AREA_TOL: f64 = 1e-9;
const ENERGY_WINS: usize = 19;
const ORACLE_TOL: f64 = 1e-9;
const F1_CLEAN_RMSE: f64 = 3e-3;
const F1_NOISY_RMSE: f64 = 2.5e-2;
const F2_CLEAN_RMSE: f64 = 5e-2;
const FREQ_GAIN: f64 = 0.75;
const SKETCH_WINS: usize = 2;
const HOLDOUT_FACTOR: f64 = 1.5;

// wall-clock budgets in seconds
const BUDGETS: [f64; 12] = [10.0, 30.0, 60.0, 60.0, 10.0, 900.0, 900.0, 1200.0, 900.0, 1800.0, 600.0, 300.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn trapezoid_oracle(t: f64, s: &TrapezoidSpec) -> f64 {
    if t <= s.lo - s.tau || t >= s.hi + s.tau {
        0.0
    } else if t < s.lo {
        (t - (s.lo - s.tau)) / s.tau
    } else if t <= s.hi {
        1.0
    } else {
        ((s.hi + s.tau) - t) / s.tau
    }
}

fn component_exactness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut hits = [0usize; 5];
    for _ in 0..10_000 {
        let lo = rng.random_range(-1.0..0.9);
        let hi = lo + rng.random_range(0.01..1.0);
        let tau = rng.random_range(1e-3..=1.0);
        let spec = TrapezoidSpec::new(lo, hi, tau).unwrap();
        for branch in 0..5 {
            let u: f64 = rng.random();
            let t = match branch {
                0 => lo - tau - u,
                1 => lo - tau + tau * u,
                2 => lo + (hi - lo) * u,
                3 => hi + tau * u,
                _ => hi + tau + u,
            };
            worst = worst.max((trapezoid(t, &spec) - trapezoid_oracle(t, &spec)).abs());
            hits[branch] += 1;
        }
    }
    let mut dyadic_exact = true;
    for m in 1..=10u32 {
        let n = 1u32 << m;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            dyadic_exact &= square_unit(t, m) == t * t;
        }
    }
    outcome(
        worst <= TRAPEZOID_TOL && dyadic_exact,
        format!("trapezoid max deviation {worst:.2e} over {} evaluations, dyadic points exact: {dyadic_exact}", hits.iter().sum::<usize>()),
    )
}

fn square_error_law() -> Outcome {
    let steps = (1.0 / SQUARE_GRID_STEP).round() as usize;
    let mut prev = f64::INFINITY;
    let mut pass = true;
    let mut worst = 0.0f64;
    for m in 1..=10u32 {
        let sup = (0..=steps)
            .map(|i| {
                let t = i as f64 / steps as f64;
                (square_unit(t, m) - t * t).abs()
            })
            .fold(0.0, f64::max);
        let law = 0.25f64.powi(m as i32 + 1);
        // the grid misses the cell midpoint by at most half a step
        let slack = (SQUARE_GRID_STEP / 2.0).powi(2) + 1e-15;
        worst = worst.max((sup - law).abs());
        pass &= (sup - law).abs() <= slack && sup < prev;
        prev = sup;
    }
    outcome(pass, format!("max |sup error - 2^(-2m-2)| = {worst:.2e} for m = 1..10, strictly decreasing: {pass}"))
}

fn product_decay() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(SEED + 3);
    let mut pass = true;
    let mut parts = Vec::new();
    for j in [2usize, 3, 5] {
        let tuples: Vec<Vec<f64>> = (0..10_000).map(|_| (0..j).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let mut errs = Vec::new();
        for m in 1..=10u32 {
            let p = ComponentParams::new(m, -1.0, 1.0).unwrap();
            let e = tuples
                .iter()
                .map(|t| (prod_j(t, &p).unwrap() - t.iter().product::<f64>()).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        let min_ratio = errs.windows(2).map(|w| w[0] / w[1]).fold(f64::INFINITY, f64::min);
        pass &= min_ratio >= PRODUCT_RATIO;
        parts.push(format!("J={j} min ratio {min_ratio:.2}"));
    }
    outcome(pass, format!("{} over m = 1..10", parts.join(", ")))
}

fn equal_area_partition() -> Outcome {
    let mut pass = true;
    let mut worst = 0.0f64;
    let mut wins = Vec::new();
    let cfg = EnergyConfig::new(3.0).unwrap();
    for n in [5usize, 33, 100] {
        for a in EqPartition::new(2, n).unwrap().region_areas() {
            worst = worst.max((a - 4.0 * std::f64::consts::PI / n as f64).abs());
        }
        let eq = riesz_energy(&eq_points(3, n).unwrap(), cfg).unwrap();
        let w = (0..20u64)
            .filter(|&s| eq < riesz_energy(&random_points(3, n, derive(SEED, &[4, n as u64, s])).unwrap(), cfg).unwrap())
            .count();
        pass &= w >= ENERGY_WINS;
        wins.push(format!("N={n}: {w}/20"));
    }
    pass &= worst <= AREA_TOL;
    outcome(pass, format!("area deviation {worst:.2e}, energy wins {}", wins.join(", ")))
}

fn solver_oracle() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(SEED + 5);
    let mut worst = 0.0f64;
    let mut deficient = 0;
    for case in 0..100 {
        let rank = [5, 4, 3, 2, 5][case % 5];
        deficient += usize::from(rank < 5);
        let a: Vec<f64> = (0..5 * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..rank * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let entry = |i: usize, j: usize| (0..rank).map(|k| a[i * rank + k] * b[k * 7 + j]).sum::<f64>();
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();

        let phi = Mat::from_fn(5, 7, entry);
        let got = fit(phi.as_ref(), &y, 0.0).unwrap().coefficients;

        let m = DMatrix::from_fn(5, 7, entry);
        let smax = m.clone().svd(false, false).singular_values.max();
        let want = m.pseudo_inverse(1e-10 * smax).unwrap() * DVector::from_column_slice(&y);
        for (g, w) in got.iter().zip(want.iter()) {
            worst = worst.max((g - w).abs());
        }
    }
    outcome(worst <= ORACLE_TOL, format!("max deviation {worst:.2e} on 100 systems ({deficient} rank-deficient)"))
}

fn sim4_data(target: Target, delta: f64) -> (Dataset, Dataset) {
    let config = BenchConfig {
        experiment: Experiment::Sim4,
        target,
        deltas: vec![delta],
        trials: 1,
        seed: SEED,
        ..BenchConfig::default()
    };
    bench::trial_data(&config, 0, 0).unwrap()
}

fn search_opts(seed: u64) -> SearchOptions {
    SearchOptions {
        seed,
        refit: Refit::Full,
        ..SearchOptions::default()
    }
}

struct Regression {
    test_rmse: f64,
    scores: Vec<(usize, f64)>,
    chosen: String,
}

fn regression(target: Target, delta: f64) -> Regression {
    let (train, test) = sim4_data(target, delta);
    let grid = default_grid(Experiment::Sim4, target, false);
    let res = select_and_test(&train, &test, &grid, &search_opts(derive(SEED, &[6]))).unwrap();
    let c = res.selection.chosen;
    Regression {
        test_rmse: res.test_rmse,
        scores: res.selection.scores.iter().map(|s| (s.candidate.freq, s.mean_mse.sqrt())).collect(),
        chosen: format!("J={} n={} N={} tau={} lambda={}", c.freq, c.intervals, c.directions, c.tau, c.lambda),
    }
}

fn regression_outcome(r: &Regression, tol: f64) -> Outcome {
    outcome(r.test_rmse <= tol, format!("test RMSE {:.3e} (limit {tol:.1e}) with {}", r.test_rmse, r.chosen))
}

fn frequency_effect(r: &Regression) -> Outcome {
    let best = |keep: &dyn Fn(usize) -> bool| {
        r.scores.iter().filter(|(j, _)| keep(*j)).map(|(_, v)| *v).fold(f64::INFINITY, f64::min)
    };
    let one = best(&|j| j == 1);
    let more = best(&|j| j >= 2);
    let drop = 1.0 - more / one;
    outcome(
        more <= FREQ_GAIN * one,
        format!("best validation RMSE J=1 {one:.3e}, J>=2 {more:.3e} ({:.0}% lower, need 25%)", drop * 100.0),
    )
}

fn sketch_comparison(dir: &Path) -> Outcome {
    let config = BenchConfig {
        experiment: Experiment::Sim2,
        deltas: vec![0.0, 0.01, 0.1],
        trials: 5,
        seed: SEED,
        ..BenchConfig::default()
    };
    let report = bench::run(&config, dir).unwrap();
    let mut wins = 0;
    let mut parts = Vec::new();
    for &delta in &config.deltas {
        let best = |mode| report.optimum_for(delta, mode).map(|o| o.mean_rmse).fold(f64::INFINITY, f64::min);
        let (eq, rnd) = (best(SketchMode::EqualArea), best(SketchMode::Random));
        wins += usize::from(eq <= rnd);
        parts.push(format!("delta {delta}: {eq:.3e} vs {rnd:.3e}"));
    }
    outcome(
        wins >= SKETCH_WINS,
        format!("equal-area ahead at {wins} of 3 noise levels ({})", parts.join("; ")),
    )
}

fn holdout_optimality() -> Outcome {
    let train = make_dataset(Target::F1, 2000, 0.0, derive(SEED, &[11, 0])).unwrap();
    let test = make_test_dataset(Target::F1, 1000, derive(SEED, &[11, 1])).unwrap();
    let (freq, tau) = (2, 0.1);
    let opts = SearchOptions {
        seed: derive(SEED, &[11, 2]),
        ..SearchOptions::default()
    };
    let res = holdout_select(&train, 0.5, freq, tau, 0.0, &opts).unwrap();
    let chosen = rmse(&predict(&res.model, &test.x).unwrap(), &test.y).unwrap();
    let fit_side = train.subset(&res.splits[0].train);
    let mut best = f64::INFINITY;
    for s in &res.scores {
        let spec = make_spec(3, &opts.params(&s.candidate)).unwrap();
        let model = fit_model(&fit_side, &spec, 0.0).unwrap();
        best = best.min(rmse(&predict(&model, &test.x).unwrap(), &test.y).unwrap());
    }
    outcome(
        chosen <= HOLDOUT_FACTOR * best,
        format!(
            "selected n={} test RMSE {chosen:.3e}, best over {} candidates {best:.3e} (ratio {:.2})",
            res.chosen.intervals,
            res.scores.len(),
            chosen / best
        ),
    )
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(root: &Path) -> Outcome {
    let small = |experiment| BenchConfig {
        experiment,
        deltas: vec![0.0, 0.1],
        trials: 2,
        seed: SEED,
        train_size: 200,
        test_size: 100,
        grid: Some(GridSpec {
            freqs: vec![1, 2],
            intervals: vec![2, 4],
            directions: DirectionGrid::Free(vec![10, 20]),
            taus: vec![0.1],
            lambdas: vec![0.0, 1e-3],
        }),
        ..BenchConfig::default()
    };
    let mut pass = true;
    let mut count = 0;
    for exp in [Experiment::Sim2, Experiment::Sim3, Experiment::Sim4] {
        let (a, b) = (root.join(format!("{}_a", exp.as_str())), root.join(format!("{}_b", exp.as_str())));
        bench::run(&small(exp), &a).unwrap();
        bench::run(&small(exp), &b).unwrap();
        let (fa, fb) = (csv_bytes(&a), csv_bytes(&b));
        count += fa.len();
        pass &= !fa.is_empty() && fa == fb;
    }
    outcome(pass, format!("{count} CSV files byte-identical across reruns: {pass}"))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().unwrap();
    let mut failures = 0;
    let mut report = |id: usize, name: &str, (o, secs): (Outcome, f64)| {
        let pass = o.pass && secs <= BUDGETS[id - 1];
        failures += usize::from(!pass);
        println!(
            "criterion {id:>2} {} {name}: {} [{secs:.1} s of {:.0} s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            BUDGETS[id - 1]
        );
    };

    report(1, "component exactness", timed(component_exactness));
    report(2, "square error law", timed(square_error_law));
    report(3, "product error decay", timed(product_decay));
    report(4, "equal-area partition", timed(equal_area_partition));
    report(5, "solver oracle", timed(solver_oracle));

    let (f1_clean, sweep) = timed(|| regression(Target::F1, 0.0));
    report(6, "f1 noiseless regression", (regression_outcome(&f1_clean, F1_CLEAN_RMSE), sweep));
    report(7, "f1 noisy regression", timed(|| regression_outcome(&regression(Target::F1, 0.1), F1_NOISY_RMSE)));
    report(8, "f2 noiseless regression", timed(|| regression_outcome(&regression(Target::F2, 0.0), F2_CLEAN_RMSE)));
    // reuses the sweep of criterion 6
    report(9, "frequency effect", (frequency_effect(&f1_clean), sweep));
    report(10, "sketch comparison", timed(|| sketch_comparison(&scratch.path().join("sim2"))));
    report(11, "hold-out optimality", timed(holdout_optimality));
    report(12, "determinism", timed(|| determinism(scratch.path())));

    if failures == 0 {
        println!("all 12 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} of 12 criteria failed");
        ExitCode::FAILURE
    }
}
