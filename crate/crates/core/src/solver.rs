//! Least-squares fitting over the sketching basis and truncated prediction.

use std::time::Instant;

use faer::linalg::solvers::{SelfAdjointEigen, Svd};
use faer::{Mat, MatRef, Side};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{assemble, check_inputs, SketchSpec};
use crate::data::{Dataset, Points, PreprocessRecord};
use crate::error::{Error, Result};

/// Relative singular-value cutoff of the minimum-norm solve.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Use the `p x p` Gram system once `q > GRAM_RATIO * p`.
pub const GRAM_RATIO: f64 = 1.5;

/// Slack on the ball invariant for prediction inputs.
pub const PREDICT_BALL_TOL: f64 = 1e-9;

/// `sign(t) min(|t|, bound)`.
#[inline]
pub fn truncate(t: f64, bound: f64) -> f64 {
    t.clamp(-bound, bound)
}

/// Root mean squared error.
pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidParameter("RMSE of an empty sample".into()));
    }
    let sse: f64 = predicted.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / truth.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    /// Thin SVD of the `p x q` design matrix.
    Primal,
    /// Eigendecomposition of the `p x p` Gram matrix `Phi Phi^T`.
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutePolicy {
    #[default]
    Auto,
    Primal,
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Ridge weight on `|a|^2`; zero selects the minimum-norm solution.
    pub lambda: f64,
    pub rank_tol: f64,
    pub route: RoutePolicy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            rank_tol: DEFAULT_RANK_TOL,
            route: RoutePolicy::Auto,
        }
    }
}

impl FitOptions {
    pub fn ridge(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub coefficients: Vec<f64>,
    pub rank: usize,
    pub residual_norm: f64,
    pub route: Route,
}

/// Minimizes `|Phi a - y|^2 + lambda |a|^2`, returning the minimum-norm
/// minimizer when `lambda = 0`.
pub fn fit(phi: MatRef<'_, f64>, y: &[f64], lambda: f64) -> Result<Solution> {
    fit_with(phi, y, &FitOptions::ridge(lambda))
}

pub fn fit_with(phi: MatRef<'_, f64>, y: &[f64], opts: &FitOptions) -> Result<Solution> {
    check_target(phi, y)?;
    Factored::new(phi, opts)?.solve(y, opts.lambda)
}

fn check_target(phi: MatRef<'_, f64>, y: &[f64]) -> Result<()> {
    if y.len() != phi.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "design matrix has {} rows, target has {}",
            phi.nrows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("target contains non-finite values".into()));
    }
    Ok(())
}

enum Spectral {
    /// `Phi = U diag(s) V^T`.
    Svd { u: Mat<f64>, s: Vec<f64>, v: Mat<f64> },
    /// `Phi Phi^T = Q diag(l) Q^T`.
    Gram { q: Mat<f64>, l: Vec<f64> },
}

/// A design matrix together with its spectral factorization, reusable
/// across targets and ridge weights.
pub struct Factored<'a> {
    phi: MatRef<'a, f64>,
    spectral: Spectral,
    rank_tol: f64,
}

impl<'a> Factored<'a> {
    pub fn new(phi: MatRef<'a, f64>, opts: &FitOptions) -> Result<Self> {
        let (p, q) = (phi.nrows(), phi.ncols());
        if p == 0 || q == 0 {
            return Err(Error::InvalidParameter(format!("cannot fit a {p} x {q} system")));
        }
        for c in 0..q {
            if phi.col(c).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("design matrix column {c} has non-finite entries")));
            }
        }
        let route = match opts.route {
            RoutePolicy::Primal => Route::Primal,
            RoutePolicy::Gram => Route::Gram,
            RoutePolicy::Auto if q as f64 > GRAM_RATIO * p as f64 => Route::Gram,
            RoutePolicy::Auto => Route::Primal,
        };
        let spectral = match route {
            Route::Primal => {
                let svd: Svd<f64> = phi
                    .thin_svd()
                    .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
                let s = svd.S().column_vector();
                Spectral::Svd {
                    s: (0..s.nrows()).map(|i| s[i]).collect(),
                    u: svd.U().to_owned(),
                    v: svd.V().to_owned(),
                }
            }
            Route::Gram => {
                let gram = phi * phi.transpose();
                let eig: SelfAdjointEigen<f64> = gram
                    .self_adjoint_eigen(Side::Lower)
                    .map_err(|e| Error::Numerical(format!("eigendecomposition did not converge: {e:?}")))?;
                let l = eig.S().column_vector();
                Spectral::Gram {
                    l: (0..l.nrows()).map(|i| l[i].max(0.0)).collect(),
                    q: eig.U().to_owned(),
                }
            }
        };
        Ok(Self {
            phi,
            spectral,
            rank_tol: opts.rank_tol,
        })
    }

    pub fn route(&self) -> Route {
        match self.spectral {
            Spectral::Svd { .. } => Route::Primal,
            Spectral::Gram { .. } => Route::Gram,
        }
    }

    /// Minimizer of `|Phi a - y|^2 + lambda |a|^2` (minimum-norm for
    /// `lambda = 0`).
    pub fn solve(&self, y: &[f64], lambda: f64) -> Result<Solution> {
        check_target(self.phi, y)?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("ridge weight {lambda} must be >= 0")));
        }
        let p = self.phi.nrows();
        let target = Mat::from_fn(p, 1, |i, _| y[i]);
        let (coef, rank) = match &self.spectral {
            Spectral::Svd { u, s, v } => {
                // 1 / s above the cutoff, or s / (s^2 + lambda) for ridge
                let cutoff = self.rank_tol * s.iter().copied().fold(0.0, f64::max);
                let uty = u.transpose() * &target;
                let mut rank = 0;
                let scaled = Mat::from_fn(s.len(), 1, |i, _| {
                    let si = s[i];
                    if lambda > 0.0 {
                        rank += usize::from(si > 0.0);
                        uty[(i, 0)] * si / (si * si + lambda)
                    } else if si > cutoff && si > 0.0 {
                        rank += 1;
                        uty[(i, 0)] / si
                    } else {
                        0.0
                    }
                });
                (v * scaled, rank)
            }
            Spectral::Gram { q, l } => {
                // eigenvalues of the Gram matrix are squared singular values,
                // and rounding in forming it sits near p * eps * max
                let l_max = l.iter().copied().fold(0.0, f64::max);
                let cutoff = (self.rank_tol * self.rank_tol).max(p as f64 * f64::EPSILON) * l_max;
                let qty = q.transpose() * &target;
                let mut rank = 0;
                let scaled = Mat::from_fn(l.len(), 1, |i, _| {
                    let li = l[i];
                    if lambda > 0.0 {
                        rank += usize::from(li > 0.0);
                        qty[(i, 0)] / (li + lambda)
                    } else if li > cutoff && li > 0.0 {
                        rank += 1;
                        qty[(i, 0)] / li
                    } else {
                        0.0
                    }
                });
                let dual = q * scaled;
                (self.phi.transpose() * dual, rank)
            }
        };
        let coefficients: Vec<f64> = (0..coef.nrows()).map(|c| coef[(c, 0)]).collect();
        let fitted = matvec(self.phi, &coefficients);
        let residual_norm = fitted.iter().zip(y).map(|(f, t)| (f - t).powi(2)).sum::<f64>().sqrt();
        Ok(Solution {
            coefficients,
            rank,
            residual_norm,
            route: self.route(),
        })
    }
}

/// `Phi a` with every row summed in column order.
pub fn matvec(phi: MatRef<'_, f64>, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; phi.nrows()];
    for (c, &ac) in a.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(phi.col(c).iter()) {
            *o += v * ac;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub residual_norm: f64,
    pub train_rmse: f64,
    pub effective_rank: usize,
    pub route: Route,
    /// Design-matrix assembly plus solve.
    pub fit_seconds: f64,
}

/// A fitted estimator: the basis, its coefficients and the truncation bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: SketchSpec,
    pub coefficients: Vec<f64>,
    /// Truncation level `M = max |y_i|` over the training targets.
    pub bound: f64,
    pub lambda: f64,
    pub preprocessing: PreprocessRecord,
    pub diagnostics: Diagnostics,
}

pub fn fit_model(train: &Dataset, spec: &SketchSpec, lambda: f64) -> Result<FittedModel> {
    fit_model_with(train, spec, &FitOptions::ridge(lambda))
}

pub fn fit_model_with(train: &Dataset, spec: &SketchSpec, opts: &FitOptions) -> Result<FittedModel> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    let start = Instant::now();
    check_inputs(&train.x, spec, crate::data::BALL_TOL)?;
    let phi = assemble(&train.x, spec);
    let solution = fit_with(phi.as_ref(), &train.y, opts)?;
    let fit_seconds = start.elapsed().as_secs_f64();
    drop(phi);

    let bound = train.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut model = FittedModel {
        spec: spec.clone(),
        coefficients: solution.coefficients,
        bound,
        lambda: opts.lambda,
        preprocessing: train.preprocessing.clone(),
        diagnostics: Diagnostics {
            residual_norm: solution.residual_norm,
            train_rmse: f64::NAN,
            effective_rank: solution.rank,
            route: solution.route,
            fit_seconds,
        },
    };
    let fitted = predict(&model, &train.x)?;
    model.diagnostics.train_rmse = rmse(&fitted, &train.y)?;
    Ok(model)
}

const PREDICT_CHUNK: usize = 256;

/// Truncated predictions `pi_M(Phi(x) a)`. Each row is evaluated and summed
/// in a fixed order, so results do not depend on batching.
pub fn predict(model: &FittedModel, x: &Points) -> Result<Vec<f64>> {
    check_inputs(x, &model.spec, PREDICT_BALL_TOL)?;
    if model.coefficients.len() != model.spec.dimension() {
        return Err(Error::Validation(format!(
            "model has {} coefficients, its basis has {}",
            model.coefficients.len(),
            model.spec.dimension()
        )));
    }
    let q = model.spec.dimension();
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(PREDICT_CHUNK)
        .zip(x.as_slice().par_chunks(PREDICT_CHUNK * x.dim()))
        .for_each(|(dst, rows)| {
            let mut feats = vec![0.0; q];
            for (o, xi) in dst.iter_mut().zip(rows.chunks_exact(x.dim())) {
                crate::basis::fill_row(xi, &model.spec, &mut feats);
                let raw: f64 = feats.iter().zip(&model.coefficients).map(|(f, a)| f * a).sum();
                *o = truncate(raw, model.bound);
            }
        });
    Ok(out)
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: FittedModel = serde_json::from_str(text)?;
        model.spec.validate()?;
        if model.coefficients.len() != model.spec.dimension() {
            return Err(Error::Validation("coefficient count does not match the basis".into()));
        }
        Ok(model)
    }
}
