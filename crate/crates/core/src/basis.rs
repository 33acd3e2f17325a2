//! The sketching basis and its design matrix.
//!
//! A feature is indexed by a power `j`, an interval `k` and a direction `l`.
//! With `t = xi_l . x` its value is the product component applied to the
//! tuple `(T_k(t), t, ..., t, 1, ..., 1)` holding `j` copies of `t` and
//! `J - 1 - j` ones, where `T_k` is the trapezoid over the `k`-th grid
//! interval `[t_(k-1), t_k]`.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{prod_j, trapezoid, ComponentParams, TrapezoidSpec};
use crate::data::{Points, BALL_RADIUS, BALL_TOL};
use crate::error::{Error, Result};
use crate::seed;
use crate::sphere::{eq_points, random_points, DirectionSet, SketchMode};

/// Operand range of the square and product components inside the basis.
pub const DEFAULT_OPERAND_RANGE: (f64, f64) = (-2.0, 2.0);

/// `ceil(log2 n) + 4`.
pub fn default_depth(n: usize) -> u32 {
    let mut bits = 0;
    while (1usize << bits) < n {
        bits += 1;
    }
    bits + 4
}

/// The overlap `n^(-4J-1)` from the approximation theory. It underflows
/// quickly and is only offered for completeness.
pub fn theory_tau(n: usize, freq: usize) -> f64 {
    (n as f64).powf(-(4.0 * freq as f64) - 1.0)
}

/// User-facing knobs of a sketch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchParams {
    /// Frequency parameter `J`.
    pub freq: usize,
    /// Number of grid intervals `n`.
    pub intervals: usize,
    /// Number of directions `N`.
    pub directions: usize,
    pub tau: f64,
    /// Component depth; `None` picks [`default_depth`].
    #[serde(default)]
    pub m: Option<u32>,
    pub mode: SketchMode,
    #[serde(default)]
    pub seed: u64,
}

impl SketchParams {
    pub fn equal_area(freq: usize, intervals: usize, directions: usize, tau: f64) -> Self {
        Self {
            freq,
            intervals,
            directions,
            tau,
            m: None,
            mode: SketchMode::EqualArea,
            seed: 0,
        }
    }

    pub fn with_mode(mut self, mode: SketchMode, seed: u64) -> Self {
        self.mode = mode;
        self.seed = seed;
        self
    }

    pub fn with_depth(mut self, m: u32) -> Self {
        self.m = Some(m);
        self
    }

    pub fn dimension(&self) -> usize {
        self.freq * self.intervals * self.directions
    }
}

/// A fully materialized basis description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub dim: usize,
    pub freq: usize,
    pub intervals: usize,
    pub tau: f64,
    pub m: u32,
    pub operand_range: (f64, f64),
    pub mode: SketchMode,
    pub seed: u64,
    /// `t_0 < t_1 < ... < t_n`.
    pub grid: Vec<f64>,
    pub directions: DirectionSet,
}

/// Builds the grid and direction set for inputs in `R^dim`.
///
/// Equal-area mode uses `t_k = -1/2 + k/n` and the equal-area centers.
/// Random mode keeps `t_0 = -1/2`, sorts `n` uniform draws from
/// `(-1/2, 1/2)` into `t_1 < ... < t_n` and takes uniform random
/// directions.
pub fn make_spec(dim: usize, params: &SketchParams) -> Result<SketchSpec> {
    let SketchParams {
        freq,
        intervals: n,
        directions,
        tau,
        m,
        mode,
        seed,
    } = *params;
    if freq < 1 {
        return Err(Error::InvalidParameter("frequency parameter J must be >= 1".into()));
    }
    if n < 1 {
        return Err(Error::InvalidParameter("grid parameter n must be >= 1".into()));
    }
    if directions < 1 {
        return Err(Error::InvalidParameter("number of directions N must be >= 1".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidParameter(format!("overlap tau = {tau} must lie in (0, 1]")));
    }
    let m = m.unwrap_or_else(|| default_depth(n));
    let operand_range = DEFAULT_OPERAND_RANGE;
    ComponentParams::new(m, operand_range.0, operand_range.1)?;

    let (grid, directions) = match mode {
        SketchMode::EqualArea => {
            let grid = (0..=n).map(|k| -0.5 + k as f64 / n as f64).collect();
            (grid, eq_points(dim, directions)?)
        }
        SketchMode::Random => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed::derive(seed, &[0]));
            let grid = random_grid(&mut rng, n);
            (grid, random_points(dim, directions, seed::derive(seed, &[1]))?)
        }
    };
    Ok(SketchSpec {
        dim,
        freq,
        intervals: n,
        tau,
        m,
        operand_range,
        mode,
        seed,
        grid,
        directions,
    })
}

fn random_grid<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let mut draws: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        draws.sort_by(f64::total_cmp);
        let mut grid = Vec::with_capacity(n + 1);
        grid.push(-0.5);
        grid.extend(draws);
        if grid.windows(2).all(|w| w[0] < w[1]) {
            return grid;
        }
    }
}

impl SketchSpec {
    pub fn num_directions(&self) -> usize {
        self.directions.len()
    }

    /// `J * n * N`.
    pub fn dimension(&self) -> usize {
        self.freq * self.intervals * self.num_directions()
    }

    pub fn params(&self) -> SketchParams {
        SketchParams {
            freq: self.freq,
            intervals: self.intervals,
            directions: self.num_directions(),
            tau: self.tau,
            m: Some(self.m),
            mode: self.mode,
            seed: self.seed,
        }
    }

    pub fn component_params(&self) -> ComponentParams {
        ComponentParams {
            m: self.m,
            lo: self.operand_range.0,
            hi: self.operand_range.1,
        }
    }

    /// Trapezoid over interval `k` (1-based).
    pub fn trapezoid_spec(&self, k: usize) -> TrapezoidSpec {
        TrapezoidSpec {
            lo: self.grid[k - 1],
            hi: self.grid[k],
            tau: self.tau,
        }
    }

    pub fn flat_index(&self, idx: FeatureIndex) -> usize {
        idx.flat(self.intervals, self.num_directions())
    }

    pub fn feature_index(&self, flat: usize) -> FeatureIndex {
        FeatureIndex::unflat(flat, self.intervals, self.num_directions())
    }

    /// Checks the structural invariants of a spec, e.g. one read from disk.
    pub fn validate(&self) -> Result<()> {
        if self.freq < 1 || self.intervals < 1 || self.directions.is_empty() {
            return Err(Error::Validation("J, n and N must all be >= 1".into()));
        }
        if self.grid.len() != self.intervals + 1 || !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Validation("grid must hold n + 1 strictly increasing points".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Validation(format!("overlap tau = {} outside (0, 1]", self.tau)));
        }
        if self.directions.dim != self.dim || self.directions.points.iter().any(|p| p.len() != self.dim) {
            return Err(Error::Validation("direction dimension does not match the spec".into()));
        }
        ComponentParams::new(self.m, self.operand_range.0, self.operand_range.1)?;
        Ok(())
    }
}

/// Triple `(j, k, l)` with `j` in `0..J`, `k` in `1..=n`, `l` in `1..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureIndex {
    pub j: usize,
    pub k: usize,
    pub l: usize,
}

impl FeatureIndex {
    pub fn new(j: usize, k: usize, l: usize) -> Self {
        Self { j, k, l }
    }

    pub fn flat(&self, n: usize, big_n: usize) -> usize {
        (self.j * n + (self.k - 1)) * big_n + (self.l - 1)
    }

    pub fn unflat(flat: usize, n: usize, big_n: usize) -> Self {
        let l = flat % big_n + 1;
        let rest = flat / big_n;
        Self {
            j: rest / n,
            k: rest % n + 1,
            l,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fills `buf` with `(lead, t x j, 1 x (J-1-j))`.
fn fill_tuple(buf: &mut Vec<f64>, lead: f64, t: f64, j: usize, freq: usize) {
    buf.clear();
    buf.push(lead);
    buf.extend(std::iter::repeat_n(t, j));
    buf.extend(std::iter::repeat_n(1.0, freq - 1 - j));
}

/// One basis function at one point.
pub fn feature_value(x: &[f64], idx: FeatureIndex, spec: &SketchSpec) -> f64 {
    let t = dot(&spec.directions.points[idx.l - 1], x);
    let lead = trapezoid(t, &spec.trapezoid_spec(idx.k));
    let mut buf = Vec::with_capacity(spec.freq);
    fill_tuple(&mut buf, lead, t, idx.j, spec.freq);
    prod_j(&buf, &spec.component_params()).expect("tuple is never empty")
}

/// Writes the `J n N` features of one input into `out` in flat-index order.
///
/// Product values with a vanishing trapezoid depend only on `(t, j)`, so
/// they are computed once per direction and reused across intervals; the
/// reused value is the same computation on the same inputs.
pub(crate) fn fill_row(x: &[f64], spec: &SketchSpec, out: &mut [f64]) {
    let n = spec.intervals;
    let big_n = spec.num_directions();
    let freq = spec.freq;
    let params = spec.component_params();
    let traps: Vec<TrapezoidSpec> = (1..=n).map(|k| spec.trapezoid_spec(k)).collect();
    let mut buf = Vec::with_capacity(freq);
    let mut at_zero = vec![0.0; freq];
    for (l, xi) in spec.directions.iter().enumerate() {
        let t = dot(xi, x);
        for (j, slot) in at_zero.iter_mut().enumerate() {
            fill_tuple(&mut buf, 0.0, t, j, freq);
            *slot = prod_j(&buf, &params).expect("tuple is never empty");
        }
        for (k, trap) in traps.iter().enumerate() {
            let lead = trapezoid(t, trap);
            for (j, &zero_value) in at_zero.iter().enumerate() {
                let col = (j * n + k) * big_n + l;
                out[col] = if lead.to_bits() == 0 {
                    zero_value
                } else {
                    fill_tuple(&mut buf, lead, t, j, freq);
                    prod_j(&buf, &params).expect("tuple is never empty")
                };
            }
        }
    }
}

/// Checks that every row lies in the ball of radius `1/2 + tol` and has the
/// spec's dimension.
pub fn check_inputs(x: &Points, spec: &SketchSpec, tol: f64) -> Result<()> {
    if x.dim() != spec.dim {
        return Err(Error::DimensionMismatch(format!(
            "inputs have dimension {}, the sketch expects {}",
            x.dim(),
            spec.dim
        )));
    }
    if let Some((i, r)) = x.first_outside_ball(BALL_RADIUS, tol) {
        return Err(Error::Validation(format!("row {i} has norm {r}, outside the ball of radius 1/2")));
    }
    Ok(())
}

/// `p x (J n N)` matrix of feature values, assembled in parallel over rows.
pub fn design_matrix(x: &Points, spec: &SketchSpec) -> Result<Mat<f64>> {
    check_inputs(x, spec, BALL_TOL)?;
    Ok(assemble(x, spec))
}

pub(crate) fn assemble(x: &Points, spec: &SketchSpec) -> Mat<f64> {
    let p = x.len();
    let q = spec.dimension();
    let mut rows = vec![0.0; p * q];
    if q > 0 {
        rows.par_chunks_mut(q)
            .zip(x.as_slice().par_chunks(x.dim()))
            .for_each(|(out, xi)| fill_row(xi, spec, out));
    }
    Mat::from_fn(p, q, |i, c| rows[i * q + c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(freq: usize, n: usize, big_n: usize, tau: f64) -> SketchSpec {
        make_spec(3, &SketchParams::equal_area(freq, n, big_n, tau)).unwrap()
    }

    #[test]
    fn small_equal_area_spec() {
        let s = spec(1, 2, 2, 0.1);
        assert_eq!(s.grid, vec![-0.5, 0.0, 0.5]);
        assert_eq!(s.directions.points, vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, -1.0]]);
        assert_eq!(s.dimension(), 4);
        assert_eq!(spec(3, 5, 10, 0.1).dimension(), 150);
        assert_eq!(s.m, 5);
        s.validate().unwrap();
    }

    #[test]
    fn depth_default() {
        assert_eq!(default_depth(1), 4);
        assert_eq!(default_depth(2), 5);
        assert_eq!(default_depth(8), 7);
        assert_eq!(default_depth(10), 8);
    }

    #[test]
    fn parameter_errors() {
        let ok = SketchParams::equal_area(1, 2, 3, 0.1);
        assert!(make_spec(3, &SketchParams { freq: 0, ..ok }).is_err());
        assert!(make_spec(3, &SketchParams { intervals: 0, ..ok }).is_err());
        assert!(make_spec(3, &SketchParams { directions: 0, ..ok }).is_err());
        assert!(make_spec(3, &SketchParams { tau: 0.0, ..ok }).is_err());
        assert!(make_spec(3, &SketchParams { tau: 1.5, ..ok }).is_err());
    }

    #[test]
    fn random_specs_are_reproducible() {
        let params = SketchParams::equal_area(2, 6, 7, 0.1).with_mode(SketchMode::Random, 99);
        let a = make_spec(3, &params).unwrap();
        assert_eq!(a, make_spec(3, &params).unwrap());
        assert_eq!(a.grid[0], -0.5);
        assert!(a.grid.windows(2).all(|w| w[0] < w[1]));
        assert!(a.grid.iter().all(|&t| t < 0.5));
        let other = make_spec(3, &params.with_mode(SketchMode::Random, 100)).unwrap();
        assert_ne!(a.grid, other.grid);
    }

    #[test]
    fn j1_feature_is_the_trapezoid() {
        let s = spec(1, 4, 5, 0.05);
        let xi = s.directions.points[2].clone();
        // projection at the midpoint of interval 2, [-0.25, 0]
        let x: Vec<f64> = xi.iter().map(|v| v * -0.125).collect();
        assert!((feature_value(&x, FeatureIndex::new(0, 2, 3), &s) - 1.0).abs() < 1e-12);
        // projection far outside interval 4, [0.25, 0.5]
        assert_eq!(feature_value(&x, FeatureIndex::new(0, 4, 3), &s), 0.0);
    }

    #[test]
    fn j2_linear_feature_tracks_t() {
        let s = make_spec(3, &SketchParams::equal_area(2, 4, 5, 0.05).with_depth(10)).unwrap();
        let xi = s.directions.points[0].clone();
        let t = -0.125;
        let x: Vec<f64> = xi.iter().map(|v| v * t).collect();
        let v = feature_value(&x, FeatureIndex::new(1, 2, 1), &s);
        let bound = 2.0 * s.component_params().prod_error_bound(2);
        assert!((v - t).abs() <= bound, "{v} vs {t}");
    }

    #[test]
    fn flat_index_layout() {
        let idx = FeatureIndex::new(1, 3, 2);
        assert_eq!(idx.flat(4, 5), (4 + 2) * 5 + 1);
        assert_eq!(FeatureIndex::unflat(31, 4, 5), idx);
    }

    #[test]
    fn empty_and_out_of_ball_inputs() {
        let s = spec(2, 3, 4, 0.1);
        let m = design_matrix(&Points::empty(3), &s).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (0, 24));
        let outside = Points::new(3, vec![0.5, 0.01, 0.0]).unwrap();
        assert!(matches!(design_matrix(&outside, &s), Err(Error::Validation(_))));
        let wrong_dim = Points::new(2, vec![0.1, 0.1]).unwrap();
        assert!(matches!(design_matrix(&wrong_dim, &s), Err(Error::DimensionMismatch(_))));
    }
}
