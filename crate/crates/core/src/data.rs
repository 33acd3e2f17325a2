//! Datasets: synthetic generators, CSV ingestion and the preprocessing that
//! maps raw features into the ball of radius 1/2.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::fmt_f64;

/// Radius of the ball every model input must live in.
pub const BALL_RADIUS: f64 = 0.5;

/// Slack on the ball invariant for constructed datasets.
pub const BALL_TOL: f64 = 1e-12;

/// Generator behind every random draw in this crate, recorded in reports.
pub const RNG_ALGORITHM: &str = "ChaCha20Rng(seed_from_u64) + rand_distr 0.5 StandardNormal (ziggurat)";

/// Row-major matrix of input points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("point dimension must be >= 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of length {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch(format!("row {i} has {} values, expected {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }

    /// Index and norm of the first row farther than `radius + tol` from the
    /// origin.
    pub fn first_outside_ball(&self, radius: f64, tol: f64) -> Option<(usize, f64)> {
        self.rows()
            .map(norm)
            .enumerate()
            .find(|&(_, r)| !(r <= radius + tol))
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticF1,
    SyntheticF2,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetTransform {
    #[default]
    None,
    Log1p,
}

impl TargetTransform {
    pub fn forward(&self, y: f64) -> Result<f64> {
        match self {
            TargetTransform::None => Ok(y),
            TargetTransform::Log1p if y > -1.0 => Ok(y.ln_1p()),
            TargetTransform::Log1p => Err(Error::Validation(format!("log(1 + y) undefined for y = {y}"))),
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match self {
            TargetTransform::None => y,
            TargetTransform::Log1p => y.exp_m1(),
        }
    }
}

/// Constants needed to replay the preprocessing on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub source: DataSource,
    /// Names of the retained feature columns, in model order. Empty for
    /// synthetic data.
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub feature_min: Vec<f64>,
    #[serde(default)]
    pub feature_max: Vec<f64>,
    /// Multiplier applied after centering the unit cube, `1 / sqrt(d)`.
    pub ball_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_column: Option<String>,
    #[serde(default)]
    pub target_transform: TargetTransform,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PreprocessRecord {
    pub fn synthetic(source: DataSource) -> Self {
        Self {
            source,
            features: Vec::new(),
            feature_min: Vec::new(),
            feature_max: Vec::new(),
            ball_scale: 1.0,
            target_column: None,
            target_transform: TargetTransform::None,
            warnings: Vec::new(),
        }
    }

    /// Maps one raw feature vector (retained columns only) into the ball.
    /// Identity for synthetic data.
    pub fn transform_row(&self, raw: &[f64]) -> Vec<f64> {
        if self.source != DataSource::Csv {
            return raw.to_vec();
        }
        raw.iter()
            .zip(self.feature_min.iter().zip(&self.feature_max))
            .map(|(&v, (&lo, &hi))| ((v - lo) / (hi - lo) - 0.5) * self.ball_scale)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Points,
    pub y: Vec<f64>,
    pub preprocessing: PreprocessRecord,
}

impl Dataset {
    pub fn new(x: Points, y: Vec<f64>, preprocessing: PreprocessRecord) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        if let Some((i, r)) = x.first_outside_ball(BALL_RADIUS, BALL_TOL) {
            return Err(Error::Validation(format!("row {i} has norm {r} outside the ball of radius 1/2")));
        }
        Ok(Self { x, y, preprocessing })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            preprocessing: self.preprocessing.clone(),
        }
    }

    /// CSV with columns `x1..xd,y`, floats at 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        header.push("y".into());
        writer.write_record(&header)?;
        for (row, y) in self.x.rows().zip(&self.y) {
            writer.write_record(row.iter().chain(std::iter::once(y)).map(|&v| fmt_f64(v)))?;
        }
        writer.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// `p` points uniform on the ball of radius 1/2: a normalized Gaussian
/// direction times radius `0.5 U^(1/d)`.
pub fn sample_ball(d: usize, p: usize, seed: u64) -> Points {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    sample_ball_with(&mut rng, d, p)
}

fn sample_ball_with<R: Rng>(rng: &mut R, d: usize, p: usize) -> Points {
    assert!(d >= 1, "ball dimension must be >= 1");
    let mut data = Vec::with_capacity(p * d);
    let mut row = vec![0.0; d];
    let mut filled = 0;
    while filled < p {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = norm(&row);
        if n == 0.0 {
            continue;
        }
        let u: f64 = rng.random();
        let radius = BALL_RADIUS * u.powf(1.0 / d as f64);
        data.extend(row.iter().map(|v| v / n * radius));
        filled += 1;
    }
    Points { dim: d, data }
}

/// `g1(r) = (r - 0.1)(r - 0.5)(r - 0.9)` at `r = 2 |x|`, for `x` in `R^3`.
pub fn synth_f1(x: &[f64]) -> Result<f64> {
    if x.len() != 3 {
        return Err(Error::DimensionMismatch(format!("f1 is defined on R^3, got dimension {}", x.len())));
    }
    let r = 2.0 * norm(x);
    Ok((r - 0.1) * (r - 0.5) * (r - 0.9))
}

/// Wendland-type `(1 - r)^6 (35 r^2 + 18 r + 3)` at `r = 2.2 |x|`, zero for
/// `r > 1`, for `x` in `R^4`.
pub fn synth_f2(x: &[f64]) -> Result<f64> {
    if x.len() != 4 {
        return Err(Error::DimensionMismatch(format!("f2 is defined on R^4, got dimension {}", x.len())));
    }
    let r = 2.2 * norm(x);
    if r > 1.0 {
        return Ok(0.0);
    }
    Ok((1.0 - r).powi(6) * (35.0 * r * r + 18.0 * r + 3.0))
}

/// Synthetic regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    F1,
    F2,
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::F1 => 3,
            Target::F2 => 4,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            Target::F1 => synth_f1(x),
            Target::F2 => synth_f2(x),
        }
    }

    pub fn source(&self) -> DataSource {
        match self {
            Target::F1 => DataSource::SyntheticF1,
            Target::F2 => DataSource::SyntheticF2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Target::F1 => "f1",
            Target::F2 => "f2",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Target::F1),
            "f2" => Ok(Target::F2),
            other => Err(Error::InvalidParameter(format!("unknown synthetic target `{other}`"))),
        }
    }
}

/// `p` samples `y = f(x) + N(0, delta^2)` with `x` uniform on the ball.
/// Inputs are drawn first, then the noise, from one seeded stream.
pub fn make_dataset(target: Target, p: usize, delta: f64, seed: u64) -> Result<Dataset> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise level delta = {delta} must be >= 0")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = sample_ball_with(&mut rng, target.dim(), p);
    let mut y = Vec::with_capacity(p);
    for row in x.rows() {
        y.push(target.eval(row)?);
    }
    if delta > 0.0 {
        for v in y.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += delta * z;
        }
    }
    Dataset::new(x, y, PreprocessRecord::synthetic(target.source()))
}

/// Noise-free test set.
pub fn make_test_dataset(target: Target, p: usize, seed: u64) -> Result<Dataset> {
    make_dataset(target, p, 0.0, seed)
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table<R: Read>(input: R) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Validation(format!(
                    "non-numeric cell `{cell}` in column `{}` of data row {}",
                    header.get(col).map(String::as_str).unwrap_or("?"),
                    line + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite value in data row {}", line + 1)));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(RawTable { header, rows })
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Validation(format!("missing column `{name}`")))
}

/// Reads a numeric CSV with a header row, min-max normalizes every feature
/// to `[0, 1]`, centers it and scales by `1 / sqrt(d)` so the rows land in
/// the ball of radius 1/2. Constant features are dropped and noted in the
/// record.
pub fn ingest_csv(path: &Path, target_column: &str, transform: TargetTransform) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, target_column, transform)
}

pub fn ingest_reader<R: Read>(input: R, target_column: &str, transform: TargetTransform) -> Result<Dataset> {
    let table = read_table(input)?;
    let target = column_index(&table.header, target_column)?;
    if table.rows.is_empty() {
        return Err(Error::Validation("CSV has no data rows".into()));
    }

    let mut features = Vec::new();
    let mut columns = Vec::new();
    let mut feature_min = Vec::new();
    let mut feature_max = Vec::new();
    let mut warnings = Vec::new();
    for (col, name) in table.header.iter().enumerate() {
        if col == target {
            continue;
        }
        let (lo, hi) = table
            .rows
            .iter()
            .map(|r| r[col])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(lo < hi) {
            let msg = format!("dropped constant feature `{name}`");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        features.push(name.clone());
        columns.push(col);
        feature_min.push(lo);
        feature_max.push(hi);
    }
    if features.is_empty() {
        return Err(Error::Validation("no non-constant feature columns".into()));
    }

    let record = PreprocessRecord {
        source: DataSource::Csv,
        ball_scale: 1.0 / (features.len() as f64).sqrt(),
        features,
        feature_min,
        feature_max,
        target_column: Some(target_column.to_string()),
        target_transform: transform,
        warnings,
    };
    rows_to_dataset(&table, &columns, target, record)
}

/// Applies an existing record to new rows. Nothing is re-estimated, so
/// held-out rows may fall outside the ball; callers that need the ball
/// invariant check it themselves.
pub fn apply_record<R: Read>(input: R, record: &PreprocessRecord) -> Result<(Points, Option<Vec<f64>>)> {
    let table = read_table(input)?;
    let columns = record
        .features
        .iter()
        .map(|f| column_index(&table.header, f))
        .collect::<Result<Vec<_>>>()?;
    let target = match &record.target_column {
        Some(name) => table.header.iter().position(|h| h == name),
        None => None,
    };
    let mut data = Vec::with_capacity(table.rows.len() * columns.len());
    let mut raw = vec![0.0; columns.len()];
    for row in &table.rows {
        for (slot, &c) in raw.iter_mut().zip(&columns) {
            *slot = row[c];
        }
        data.extend(record.transform_row(&raw));
    }
    let y = match target {
        Some(t) => Some(
            table
                .rows
                .iter()
                .map(|r| record.target_transform.forward(r[t]))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok((Points::new(columns.len(), data)?, y))
}

fn rows_to_dataset(table: &RawTable, columns: &[usize], target: usize, record: PreprocessRecord) -> Result<Dataset> {
    let mut data = Vec::with_capacity(table.rows.len() * columns.len());
    let mut y = Vec::with_capacity(table.rows.len());
    let mut raw = vec![0.0; columns.len()];
    for row in &table.rows {
        for (slot, &c) in raw.iter_mut().zip(columns) {
            *slot = row[c];
        }
        data.extend(record.transform_row(&raw));
        y.push(record.target_transform.forward(row[target])?);
    }
    Dataset::new(Points::new(columns.len(), data)?, y, record)
}

/// Reads a CSV of already-normalized inputs (`x1..xd[,y]`), as written by
/// [`Dataset::write_csv`].
pub fn read_points_csv<R: Read>(input: R) -> Result<(Points, Option<Vec<f64>>)> {
    let table = read_table(input)?;
    let target = table.header.iter().position(|h| h == "y");
    let dim = table.header.len() - usize::from(target.is_some());
    if dim == 0 {
        return Err(Error::Validation("CSV has no input columns".into()));
    }
    let mut data = Vec::with_capacity(table.rows.len() * dim);
    let mut y = Vec::new();
    for row in &table.rows {
        for (c, &v) in row.iter().enumerate() {
            if Some(c) == target {
                y.push(v);
            } else {
                data.push(v);
            }
        }
    }
    Ok((Points::new(dim, data)?, target.map(|_| y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_spot_values() {
        assert!((synth_f1(&[0.0, 0.0, 0.0]).unwrap() + 0.045).abs() < 1e-15);
        assert_eq!(synth_f1(&[0.25, 0.0, 0.0]).unwrap(), 0.0);
        assert!(synth_f1(&[0.0, 0.05, 0.0]).unwrap().abs() < 1e-17);
        assert!(synth_f1(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn f2_spot_values() {
        assert_eq!(synth_f2(&[0.0; 4]).unwrap(), 3.0);
        assert_eq!(synth_f2(&[0.5, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(synth_f2(&[1.0 / 2.2, 0.0, 0.0, 0.0]).unwrap().abs() < 1e-12);
        assert!(synth_f2(&[0.0; 3]).is_err());
    }

    #[test]
    fn ball_samples_inside_and_reproducible() {
        let a = sample_ball(3, 500, 9);
        assert!(a.first_outside_ball(BALL_RADIUS, 0.0).is_none());
        assert_eq!(a, sample_ball(3, 500, 9));
        assert_ne!(a, sample_ball(3, 500, 10));
        assert_eq!(sample_ball(5, 0, 1).len(), 0);
    }

    #[test]
    fn noiseless_targets_are_clean() {
        let ds = make_dataset(Target::F1, 50, 0.0, 3).unwrap();
        for (row, y) in ds.x.rows().zip(&ds.y) {
            assert_eq!(*y, synth_f1(row).unwrap());
        }
        assert_eq!(ds, make_dataset(Target::F1, 50, 0.0, 3).unwrap());
        assert!(make_dataset(Target::F1, 5, -0.1, 3).is_err());
    }

    #[test]
    fn ingest_single_feature() {
        let csv = "a,y\n0,1\n5,2\n10,3\n";
        let ds = ingest_reader(csv.as_bytes(), "y", TargetTransform::None).unwrap();
        assert_eq!(ds.x.as_slice(), &[-0.5, 0.0, 0.5]);
        assert_eq!(ds.y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn ingest_corner_lands_on_sphere() {
        let csv = "a,b,c,d,y\n0,0,0,0,0\n1,2,3,4,0\n";
        let ds = ingest_reader(csv.as_bytes(), "y", TargetTransform::Log1p).unwrap();
        assert!((norm(ds.x.row(1)) - 0.5).abs() < 1e-15);
        assert_eq!(ds.y, vec![0.0, 0.0]);
    }

    #[test]
    fn ingest_errors_and_constant_columns() {
        assert!(matches!(
            ingest_reader("a,b\n1,2\n".as_bytes(), "y", TargetTransform::None),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            ingest_reader("a,y\n1,2\nx,3\n".as_bytes(), "y", TargetTransform::None),
            Err(Error::Validation(_))
        ));
        let ds = ingest_reader("a,c,y\n1,7,0\n2,7,1\n".as_bytes(), "y", TargetTransform::None).unwrap();
        assert_eq!(ds.dim(), 1);
        assert_eq!(ds.preprocessing.features, vec!["a".to_string()]);
        assert_eq!(ds.preprocessing.warnings.len(), 1);
        assert!(ingest_reader("a,y\n1,-2\n2,0\n".as_bytes(), "y", TargetTransform::Log1p).is_err());
    }

    #[test]
    fn held_out_rows_use_training_statistics() {
        let train = "a,b,y\n0,10,1\n4,20,2\n";
        let ds = ingest_reader(train.as_bytes(), "y", TargetTransform::None).unwrap();
        let before = ds.preprocessing.clone();
        let (x, y) = apply_record("b,a,y\n15,2,9\n".as_bytes(), &ds.preprocessing).unwrap();
        assert_eq!(x.row(0), &[0.0, 0.0]);
        assert_eq!(y, Some(vec![9.0]));
        assert_eq!(ds.preprocessing, before);

        // replaying the record on the training rows reproduces them exactly
        let (again, _) = apply_record(train.as_bytes(), &ds.preprocessing).unwrap();
        assert_eq!(again, ds.x);
    }
}
