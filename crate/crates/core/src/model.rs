//! L2-regularized multinomial logistic regression.
//!
//! Parameters are stored as a `C × (d+1)` matrix whose last column is the
//! bias. The flat vector used by the Newton solver is that matrix in row-major
//! order, so class `c` owns entries `c(d+1) .. (c+1)(d+1)`.
//!
//! Loss, gradient and Hessian are means over samples plus `λ/2 ‖θ‖²`, with the
//! bias regularized like every other parameter.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Largest parameter count for which a dense Hessian is formed.
pub const MAX_HESSIAN_PARAMS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    theta: DMatrix<f64>,
}

impl ModelParams {
    pub fn zeros(class_count: usize, dim: usize) -> Self {
        Self {
            theta: DMatrix::zeros(class_count, dim + 1),
        }
    }

    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.nrows(),
                actual: bias.len(),
                context: "bias length vs weight rows",
            });
        }
        let (c, d) = weights.shape();
        let mut theta = DMatrix::zeros(c, d + 1);
        theta.columns_mut(0, d).copy_from(&weights);
        theta.set_column(d, &bias);
        Self::from_augmented(theta)
    }

    /// Builds from a `C × (d+1)` matrix with the bias in the last column.
    pub fn from_augmented(theta: DMatrix<f64>) -> Result<Self> {
        if theta.nrows() == 0 || theta.ncols() < 2 {
            return Err(Error::invalid("model needs at least one class and one feature"));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("model parameters contain non-finite values".into()));
        }
        Ok(Self { theta })
    }

    pub fn from_flat(class_count: usize, dim: usize, flat: &DVector<f64>) -> Result<Self> {
        let p = class_count * (dim + 1);
        if flat.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: flat.len(),
                context: "flat parameter length",
            });
        }
        Self::from_augmented(DMatrix::from_row_slice(class_count, dim + 1, flat.as_slice()))
    }

    pub fn flatten(&self) -> DVector<f64> {
        let (c, w) = self.theta.shape();
        DVector::from_iterator(c * w, (0..c).flat_map(|r| (0..w).map(move |j| (r, j))).map(|ij| self.theta[ij]))
    }

    pub fn class_count(&self) -> usize {
        self.theta.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols() - 1
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn augmented(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn weights(&self) -> DMatrix<f64> {
        self.theta.columns(0, self.dim()).into_owned()
    }

    pub fn bias(&self) -> DVector<f64> {
        self.theta.column(self.dim()).into_owned()
    }

    /// `self + v` for a flat displacement `v`.
    pub fn offset(&self, v: &DVector<f64>) -> Result<Self> {
        Self::from_flat(self.class_count(), self.dim(), &(self.flatten() + v))
    }

    pub fn distance(&self, other: &ModelParams) -> f64 {
        (&self.theta - &other.theta).norm()
    }

    /// Logits `W x + b` for one input.
    pub fn logits(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input_dim(x.len())?;
        let d = self.dim();
        Ok(self.theta.columns(0, d) * x + self.theta.column(d))
    }

    fn check_input_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: d,
                context: "input dimension vs model",
            });
        }
        Ok(())
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        self.check_input_dim(ds.dim())?;
        if ds.class_count() > self.class_count() {
            return Err(Error::DimensionMismatch {
                expected: self.class_count(),
                actual: ds.class_count(),
                context: "dataset classes vs model classes",
            });
        }
        Ok(())
    }
}

/// Regularity constants of the per-sample loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct LossConstants {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
}

impl Default for LossConstants {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            alpha: 1.01,
            beta: 1.0,
            gamma: 1.0,
            lipschitz: 1.0,
        }
    }
}

impl LossConstants {
    /// Checks signs only; `α > β` is allowed because the default tuning uses it.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.alpha > 0.0
            && self.beta > 0.0
            && self.gamma >= 0.0
            && self.lipschitz > 0.0
            && [self.lambda, self.alpha, self.beta, self.gamma, self.lipschitz]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss constants need lambda >= 0, alpha > 0, beta > 0, gamma >= 0, L > 0 (got {self:?})"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct TrainConfig {
    pub grad_tol: f64,
    pub max_newton_iters: usize,
    pub ridge_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_newton_iters: 100,
            ridge_jitter: 0.0,
        }
    }
}

/// Features with a trailing column of ones.
fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut a = DMatrix::from_element(n, d + 1, 1.0);
    a.columns_mut(0, d).copy_from(x);
    a
}

/// Row-wise softmax in place, max-shifted. Returns per-row log-sum-exp.
fn softmax_rows(z: &mut DMatrix<f64>) -> Vec<f64> {
    let mut lse = Vec::with_capacity(z.nrows());
    for i in 0..z.nrows() {
        let mut row = z.row_mut(i);
        let m = row.max();
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row /= s;
        lse.push(m + s.ln());
    }
    lse
}

/// Design matrix plus labels, reused across Newton iterations.
struct Problem<'a> {
    xa: DMatrix<f64>,
    labels: &'a [usize],
    lambda: f64,
}

impl<'a> Problem<'a> {
    fn new(ds: &'a Dataset, lambda: f64) -> Self {
        Self {
            xa: augment(ds.features()),
            labels: ds.labels(),
            lambda,
        }
    }

    fn n(&self) -> f64 {
        self.labels.len() as f64
    }

    /// `(probabilities n×C, per-row log-sum-exp, raw logits at labels)`.
    fn forward(&self, theta: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let mut z = &self.xa * theta.transpose();
        let picked = self.labels.iter().enumerate().map(|(i, &y)| z[(i, y)]).collect();
        let lse = softmax_rows(&mut z);
        (z, lse, picked)
    }

    fn loss(&self, theta: &DMatrix<f64>) -> f64 {
        let (_, lse, picked) = self.forward(theta);
        let data: f64 = lse.iter().zip(&picked).map(|(l, z)| l - z).sum::<f64>() / self.n();
        data + 0.5 * self.lambda * theta.norm_squared()
    }

    fn gradient_from_probs(&self, theta: &DMatrix<f64>, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            r[(i, y)] -= 1.0;
        }
        let g = r.tr_mul(&self.xa) / self.n();
        g + theta * self.lambda
    }

    fn gradient(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let (probs, _, _) = self.forward(theta);
        self.gradient_from_probs(theta, &probs)
    }

    fn hessian_from_probs(&self, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let c = probs.ncols();
        let w = self.xa.ncols();
        let p = c * w;
        let mut h = DMatrix::zeros(p, p);
        let mut scaled = self.xa.clone();
        for a in 0..c {
            for b in a..c {
                for i in 0..self.xa.nrows() {
                    let pa = probs[(i, a)];
                    let coef = if a == b { pa * (1.0 - pa) } else { -pa * probs[(i, b)] };
                    let mut row = scaled.row_mut(i);
                    row.copy_from(&self.xa.row(i));
                    row *= coef;
                }
                let block = self.xa.tr_mul(&scaled) / self.n();
                h.view_mut((a * w, b * w), (w, w)).copy_from(&block);
                if a != b {
                    h.view_mut((b * w, a * w), (w, w)).copy_from(&block.transpose());
                }
            }
        }
        // The per-block gemm can leave rounding-level asymmetry.
        let sym = (&h + h.transpose()) * 0.5;
        sym + DMatrix::identity(p, p) * self.lambda
    }
}

fn flatten_matrix(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

fn check_capacity(p: usize) -> Result<()> {
    if p > MAX_HESSIAN_PARAMS {
        return Err(Error::Capacity {
            params: p,
            limit: MAX_HESSIAN_PARAMS,
        });
    }
    Ok(())
}

/// Mean cross-entropy plus `λ/2 ‖θ‖²`.
pub fn loss(ds: &Dataset, theta: &ModelParams, k: &LossConstants) -> Result<f64> {
    theta.check_dataset(ds)?;
    Ok(Problem::new(ds, k.lambda).loss(&theta.theta))
}

/// Flat gradient of [`loss`].
pub fn gradient(ds: &Dataset, theta: &ModelParams, k: &LossConstants) -> Result<DVector<f64>> {
    theta.check_dataset(ds)?;
    Ok(flatten_matrix(&Problem::new(ds, k.lambda).gradient(&theta.theta)))
}

/// Dense `p × p` Hessian of [`loss`] in the flat parameter order.
pub fn hessian(ds: &Dataset, theta: &ModelParams, k: &LossConstants) -> Result<DMatrix<f64>> {
    theta.check_dataset(ds)?;
    check_capacity(theta.param_count())?;
    let prob = Problem::new(ds, k.lambda);
    let (probs, _, _) = prob.forward(&theta.theta);
    Ok(prob.hessian_from_probs(&probs))
}

/// Per-sample un-regularized cross-entropy.
pub fn per_sample_loss(ds: &Dataset, theta: &ModelParams) -> Result<Vec<f64>> {
    theta.check_dataset(ds)?;
    let (_, lse, picked) = Problem::new(ds, 0.0).forward(&theta.theta);
    Ok(lse.iter().zip(&picked).map(|(l, z)| l - z).collect())
}

/// Probability of the true label for each sample.
pub fn label_probabilities(ds: &Dataset, theta: &ModelParams) -> Result<Vec<f64>> {
    theta.check_dataset(ds)?;
    let (probs, _, _) = Problem::new(ds, 0.0).forward(&theta.theta);
    Ok(ds.labels().iter().enumerate().map(|(i, &y)| probs[(i, y)]).collect())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub fn train(ds: &Dataset, k: &LossConstants, cfg: &TrainConfig) -> Result<ModelParams> {
    train_from(ds, k, cfg, &ModelParams::zeros(ds.class_count(), ds.dim())).map(|r| r.params)
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
/// Below this Newton decrement the loss change is under rounding, so the
/// line search is skipped and the full step taken.
const DECREMENT_FLOOR: f64 = 1e-12;

/// Damped Newton with Armijo backtracking, starting from `init`.
pub fn train_from(ds: &Dataset, k: &LossConstants, cfg: &TrainConfig, init: &ModelParams) -> Result<TrainReport> {
    k.validate()?;
    if !(k.lambda > 0.0) {
        return Err(Error::invalid("training requires lambda > 0"));
    }
    if !(cfg.grad_tol > 0.0) || cfg.ridge_jitter < 0.0 {
        return Err(Error::invalid("grad_tol must be positive and ridge_jitter nonnegative"));
    }
    init.check_dataset(ds)?;
    check_capacity(init.param_count())?;

    let prob = Problem::new(ds, k.lambda);
    let (c, w) = init.theta.shape();
    let mut theta = init.theta.clone();
    let mut iterations = 0;
    loop {
        let (probs, lse, picked) = prob.forward(&theta);
        let f = lse.iter().zip(&picked).map(|(l, z)| l - z).sum::<f64>() / prob.n()
            + 0.5 * k.lambda * theta.norm_squared();
        let g = flatten_matrix(&prob.gradient_from_probs(&theta, &probs));
        let grad_norm = g.norm();
        if grad_norm <= cfg.grad_tol {
            return Ok(TrainReport {
                params: ModelParams::from_augmented(theta)?,
                iterations,
                grad_norm,
            });
        }
        if iterations == cfg.max_newton_iters {
            return Err(Error::NotConverged { iterations, grad_norm });
        }
        let mut h = prob.hessian_from_probs(&probs);
        for i in 0..h.nrows() {
            h[(i, i)] += cfg.ridge_jitter;
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::Numerical("training Hessian lost positive definiteness".into()))?;
        let step = -chol.solve(&g);
        let slope = g.dot(&step);
        let step_m = DMatrix::from_row_slice(c, w, step.as_slice());

        let mut t = 1.0;
        if -slope > DECREMENT_FLOOR {
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let trial = &theta + &step_m * t;
                if prob.loss(&trial) <= f + ARMIJO_C * t * slope {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::NotConverged { iterations, grad_norm });
            }
        }
        theta += &step_m * t;
        iterations += 1;
    }
}

/// Softmax probabilities for one input.
pub fn predict_proba(theta: &ModelParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    let z = theta.logits(x)?;
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    Ok(e / s)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, x) in v.into_iter().enumerate() {
        if x > best_v {
            best = i;
            best_v = x;
        }
    }
    best
}

pub fn predict(theta: &ModelParams, ds: &Dataset) -> Result<Vec<usize>> {
    theta.check_input_dim(ds.dim())?;
    let z = augment(ds.features()) * theta.theta.transpose();
    Ok((0..z.nrows()).map(|i| argmax(z.row(i).iter().copied())).collect())
}

pub fn accuracy(theta: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let pred = predict(theta, ds)?;
    let hits = pred.iter().zip(ds.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn spectral_range(h: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    (eig.min(), eig.max())
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = spectral_range(m);
    lo.abs().max(hi.abs())
}

/// Regularity constants measured on a concrete dataset and parameter point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MeasuredConstants {
    /// Smallest eigenvalue of the mean Hessian.
    pub alpha: f64,
    /// Largest eigenvalue of the mean Hessian.
    pub hessian_max: f64,
    /// Largest per-sample Hessian spectral norm.
    pub beta: f64,
    /// Largest per-sample gradient norm.
    pub lipschitz: f64,
}

pub fn measure_constants(ds: &Dataset, theta: &ModelParams, k: &LossConstants) -> Result<MeasuredConstants> {
    let h = hessian(ds, theta, k)?;
    let (alpha, hessian_max) = spectral_range(&h);
    let prob = Problem::new(ds, k.lambda);
    let (probs, _, _) = prob.forward(&theta.theta);
    let c = theta.class_count();
    let flat_theta = theta.flatten();
    let mut beta: f64 = 0.0;
    let mut lipschitz: f64 = 0.0;
    for i in 0..ds.len() {
        let pi = probs.row(i).transpose();
        let cov = DMatrix::from_diagonal(&pi) - &pi * pi.transpose();
        let x2 = prob.xa.row(i).norm_squared();
        beta = beta.max(spectral_norm(&cov) * x2 + k.lambda);
        let mut r = pi.clone();
        r[ds.labels()[i]] -= 1.0;
        let xi = prob.xa.row(i);
        let g = DVector::from_iterator(c * xi.len(), (0..c).flat_map(|a| xi.iter().map(|x| r[a] * x).collect::<Vec<_>>()))
            + &flat_theta * k.lambda;
        lipschitz = lipschitz.max(g.norm());
    }
    Ok(MeasuredConstants {
        alpha,
        hessian_max,
        beta,
        lipschitz,
    })
}

/// `‖H(a) − H(b)‖₂ / ‖a − b‖` on `ds`; a secant estimate of the Hessian-Lipschitz constant.
pub fn hessian_lipschitz_estimate(ds: &Dataset, a: &ModelParams, b: &ModelParams, k: &LossConstants) -> Result<f64> {
    let dist = a.distance(b);
    if dist == 0.0 {
        return Ok(0.0);
    }
    let diff = hessian(ds, a, k)? - hessian(ds, b, k)?;
    Ok(spectral_norm(&diff) / dist)
}

/// On-disk model layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(rename = "C")]
    pub class_count: usize,
    pub d: usize,
    /// Row-major `C × d`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub lambda: f64,
}

impl ModelFile {
    pub fn from_params(theta: &ModelParams, lambda: f64) -> Self {
        let w = theta.weights();
        Self {
            class_count: theta.class_count(),
            d: theta.dim(),
            weights: w.transpose().iter().copied().collect(),
            bias: theta.bias().iter().copied().collect(),
            lambda,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        if self.weights.len() != self.class_count * self.d {
            return Err(Error::DimensionMismatch {
                expected: self.class_count * self.d,
                actual: self.weights.len(),
                context: "model file weight count",
            });
        }
        let w = DMatrix::from_row_slice(self.class_count, self.d, &self.weights);
        ModelParams::new(w, DVector::from_vec(self.bias.clone()))
    }
}

pub fn save_model(theta: &ModelParams, lambda: f64, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&ModelFile::from_params(theta, lambda))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(ModelParams, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text)?;
    Ok((file.to_params()?, file.lambda))
}
