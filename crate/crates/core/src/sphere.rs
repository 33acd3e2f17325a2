//! Direction sets on the unit sphere `S^(d-1)`.
//!
//! The equal-area construction follows the recursive zonal partition: two
//! polar caps, a stack of collars whose region counts come from the ideal
//! collar areas, and each collar split by recursively partitioning the
//! sphere one dimension down. Region centers stand in for minimal Riesz
//! energy points; no energy minimization is run.

use std::f64::consts::PI;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::fmt_f64;

/// How the grid points and directions of a sketch are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchMode {
    EqualArea,
    Random,
}

impl SketchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SketchMode::EqualArea => "equal-area",
            SketchMode::Random => "random",
        }
    }
}

impl std::str::FromStr for SketchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-area" | "eq" | "component" => Ok(SketchMode::EqualArea),
            "random" => Ok(SketchMode::Random),
            other => Err(Error::InvalidParameter(format!("unknown sketch mode `{other}`"))),
        }
    }
}

/// An ordered set of unit vectors in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub dim: usize,
    pub mode: SketchMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub points: Vec<Vec<f64>>,
}

impl DirectionSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.iter().map(Vec::as_slice)
    }

    /// Smallest Euclidean distance between two distinct points.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.min(distance(a, b));
            }
        }
        best
    }

    /// One row per point, `d` columns, floats at 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record((1..=self.dim).map(|i| format!("x{i}")))?;
        for p in &self.points {
            writer.write_record(p.iter().map(|&v| fmt_f64(v)))?;
        }
        writer.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Exponent of the Riesz energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub mu: f64,
}

impl EnergyConfig {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("Riesz exponent mu = {mu} must be >= 0")));
        }
        Ok(Self { mu })
    }

    /// The diagnostic default `mu = d`.
    pub fn for_dim(d: usize) -> Self {
        Self { mu: d as f64 }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Riesz energy summed over ordered pairs `i != j`; `mu = 0` is the
/// logarithmic energy.
pub fn riesz_energy(points: &DirectionSet, cfg: EnergyConfig) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter("Riesz energy needs at least two points".into()));
    }
    let mut half = 0.0;
    for (i, a) in points.points.iter().enumerate() {
        for (j, b) in points.points.iter().enumerate().skip(i + 1) {
            let r = distance(a, b);
            if r == 0.0 {
                return Err(Error::CoincidentPoints(i, j));
            }
            half += if cfg.mu == 0.0 { -r.ln() } else { r.powf(-cfg.mu) };
        }
    }
    Ok(2.0 * half)
}

/// `n` i.i.d. uniform directions: normalized standard-normal vectors drawn
/// from a ChaCha20 stream.
pub fn random_points(d: usize, n: usize, seed: u64) -> Result<DirectionSet> {
    check_dims(d, n)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            points.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(DirectionSet {
        dim: d,
        mode: SketchMode::Random,
        seed: Some(seed),
        points,
    })
}

/// Centers of the `n` regions of the recursive zonal equal-area partition
/// of `S^(d-1)`.
pub fn eq_points(d: usize, n: usize) -> Result<DirectionSet> {
    check_dims(d, n)?;
    let points = eq_point_set_polar(d - 1, n).iter().map(|s| polar_to_cartesian(s)).collect();
    Ok(DirectionSet {
        dim: d,
        mode: SketchMode::EqualArea,
        seed: None,
        points,
    })
}

fn check_dims(d: usize, n: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!("sphere dimension d = {d} must be >= 2")));
    }
    if n < 1 {
        return Err(Error::InvalidParameter("number of points must be >= 1".into()));
    }
    Ok(())
}

/// Area of the unit sphere `S^k` embedded in `R^(k+1)`.
pub fn sphere_area(k: usize) -> f64 {
    match k {
        0 => 2.0,
        1 => 2.0 * PI,
        _ => 2.0 * PI / (k as f64 - 1.0) * sphere_area(k - 2),
    }
}

/// `int_0^theta sin^k(phi) dphi` by the reduction formula.
fn sin_power_integral(k: usize, theta: f64) -> f64 {
    match k {
        0 => theta,
        1 => 1.0 - theta.cos(),
        _ => {
            let kf = k as f64;
            -theta.sin().powi(k as i32 - 1) * theta.cos() / kf + (kf - 1.0) / kf * sin_power_integral(k - 2, theta)
        }
    }
}

/// Area of the spherical cap of `S^dim` with polar angle `theta`.
pub fn cap_area(dim: usize, theta: f64) -> f64 {
    if theta >= PI {
        return sphere_area(dim);
    }
    sphere_area(dim - 1) * sin_power_integral(dim - 1, theta)
}

/// Inverse of [`cap_area`] by bisection on `[0, pi]`.
pub fn cap_colatitude(dim: usize, area: f64) -> f64 {
    let total = sphere_area(dim);
    if area <= 0.0 {
        return 0.0;
    }
    if area >= total {
        return PI;
    }
    let (mut lo, mut hi) = (0.0, PI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo < 1e-15 {
            break;
        }
        if cap_area(dim, mid) < area {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Zone structure of an equal-area partition of `S^dim` into `n` regions:
/// zone `i` spans colatitudes `[boundaries[i-1], boundaries[i]]` (with an
/// implicit 0 before the first) and holds `regions[i]` regions.
///
/// For `dim = 1` the zones are the `n` arcs of the circle and the
/// boundaries are longitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct EqPartition {
    pub dim: usize,
    pub n: usize,
    pub boundaries: Vec<f64>,
    pub regions: Vec<usize>,
}

impl EqPartition {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim < 1 || n < 1 {
            return Err(Error::InvalidParameter(format!(
                "equal-area partition needs dim >= 1 and n >= 1 (got {dim}, {n})"
            )));
        }
        let (boundaries, regions) = eq_caps(dim, n);
        Ok(Self {
            dim,
            n,
            boundaries,
            regions,
        })
    }

    /// Area of every region, zone by zone.
    pub fn region_areas(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n);
        let mut prev = 0.0;
        for (&b, &count) in self.boundaries.iter().zip(&self.regions) {
            let zone = if self.dim == 1 {
                b - prev
            } else {
                cap_area(self.dim, b) - cap_area(self.dim, prev)
            };
            out.extend(std::iter::repeat_n(zone / count as f64, count));
            prev = b;
        }
        out
    }
}

fn ideal_region_area(dim: usize, n: usize) -> f64 {
    sphere_area(dim) / n as f64
}

/// Colatitudes of the zone boundaries and the number of regions per zone.
fn eq_caps(dim: usize, n: usize) -> (Vec<f64>, Vec<usize>) {
    if dim == 1 {
        let boundaries = (1..=n).map(|k| k as f64 * 2.0 * PI / n as f64).collect();
        return (boundaries, vec![1; n]);
    }
    if n == 1 {
        return (vec![PI], vec![1]);
    }
    let region_area = ideal_region_area(dim, n);
    let polar = cap_colatitude(dim, region_area);
    let collars = if n > 2 {
        let ideal_angle = region_area.powf(1.0 / dim as f64);
        (((PI - 2.0 * polar) / ideal_angle).round() as usize).max(1)
    } else {
        0
    };

    let mut ideal = vec![1.0; collars + 2];
    if collars > 0 {
        let fitting = (PI - 2.0 * polar) / collars as f64;
        for k in 1..=collars {
            let top = polar + (k as f64 - 1.0) * fitting;
            let bot = polar + k as f64 * fitting;
            ideal[k] = (cap_area(dim, bot) - cap_area(dim, top)) / region_area;
        }
    }

    let mut regions = Vec::with_capacity(ideal.len());
    let mut discrepancy = 0.0;
    for &r in &ideal {
        let rounded = (r + discrepancy).round();
        discrepancy += r - rounded;
        regions.push(rounded as usize);
    }

    let mut boundaries = Vec::with_capacity(regions.len());
    boundaries.push(polar);
    let mut subtotal = 1usize;
    for &count in &regions[1..regions.len() - 1] {
        subtotal += count;
        boundaries.push(cap_colatitude(dim, subtotal as f64 * region_area));
    }
    boundaries.push(PI);
    (boundaries, regions)
}

/// Region centers in spherical polar coordinates: `dim` angles with the
/// colatitude last.
fn eq_point_set_polar(dim: usize, n: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        let (boundaries, _) = eq_caps(1, n);
        return boundaries.into_iter().map(|b| vec![b - PI / n as f64]).collect();
    }
    if n == 1 {
        return vec![vec![0.0; dim]];
    }
    let (boundaries, regions) = eq_caps(dim, n);
    let mut points = Vec::with_capacity(n);
    points.push(vec![0.0; dim]);
    for zone in 1..regions.len() - 1 {
        let mid = 0.5 * (boundaries[zone - 1] + boundaries[zone]);
        for mut sub in eq_point_set_polar(dim - 1, regions[zone]) {
            sub.push(mid);
            points.push(sub);
        }
    }
    let mut south = vec![0.0; dim];
    south[dim - 1] = PI;
    points.push(south);
    points
}

fn sin_cos(angle: f64) -> (f64, f64) {
    if angle == PI {
        (0.0, -1.0)
    } else {
        angle.sin_cos()
    }
}

fn polar_to_cartesian(s: &[f64]) -> Vec<f64> {
    let dim = s.len();
    let mut x = vec![0.0; dim + 1];
    let mut sin_prod = 1.0;
    for k in (1..dim).rev() {
        let (sin, cos) = sin_cos(s[k]);
        x[k + 1] = sin_prod * cos;
        sin_prod *= sin;
    }
    let (sin, cos) = sin_cos(s[0]);
    x[1] = sin_prod * sin;
    x[0] = sin_prod * cos;
    x
}
