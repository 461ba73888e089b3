//! Unlearning mechanisms and their certificates.
//!
//! Three ways to forget `D_u`: retraining on `D_r`, a Newton step with the
//! exact retain Hessian, and a Newton step whose retain Hessian is estimated
//! from a surrogate sample. The last two release `θ̂ + N(0, σ² I)` with `σ`
//! calibrated from a bound on `‖θ*_r − θ̂‖₂`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distance::{bh_tv_bound, KlEstimate};
use crate::error::{Error, Result};
use crate::model::{self, LossConstants, ModelParams, TrainConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CertBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for CertBudget {
    fn default() -> Self {
        Self {
            epsilon: 5e3,
            delta: 1.0,
        }
    }
}

/// At or above this `δ` the guarantee carries little meaning.
pub const VACUOUS_DELTA: f64 = 0.05;

impl CertBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        Ok(())
    }

    pub fn is_vacuous(&self) -> bool {
        self.delta >= VACUOUS_DELTA
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    ExactData,
    SurrogateTv,
    SurrogateKl,
}

/// How far the surrogate distribution is from the source one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Tv(f64),
    Kl(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UnlearnCertificate {
    pub bound_kind: BoundKind,
    pub delta_bound: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub tv_used: f64,
    pub kl_used: Option<f64>,
    pub n1: usize,
    pub n2: usize,
    pub m: usize,
    #[serde(rename = "grad_norm_Du")]
    pub grad_norm_du: f64,
    pub constants: LossConstants,
    pub noise_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_estimate: Option<KlEstimate>,
}

impl UnlearnCertificate {
    pub fn budget(&self) -> CertBudget {
        CertBudget {
            epsilon: self.epsilon,
            delta: self.delta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnlearnOutput {
    pub theta_pre_noise: ModelParams,
    pub theta_released: ModelParams,
    /// The Gaussian draw added to the flat parameters.
    pub noise: DVector<f64>,
    pub certificate: UnlearnCertificate,
}

/// Mechanism settings shared by both Newton variants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct MechanismConfig {
    pub constants: LossConstants,
    pub budget: CertBudget,
    #[serde(default)]
    pub hessian_jitter: f64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            constants: LossConstants::default(),
            budget: CertBudget::default(),
            hessian_jitter: 0.0,
        }
    }
}

fn check_sizes(n: usize, m: usize) -> Result<()> {
    if m == 0 || m >= n {
        return Err(Error::invalid(format!("need 0 < m < n, got m = {m}, n = {n}")));
    }
    Ok(())
}

/// `(n H_Ds − m H_Du) / (n − m)`.
pub fn estimate_retain_hessian(h_ds: &DMatrix<f64>, h_du: &DMatrix<f64>, n: usize, m: usize) -> Result<DMatrix<f64>> {
    check_sizes(n, m)?;
    if h_ds.shape() != h_du.shape() || h_ds.nrows() != h_ds.ncols() {
        return Err(Error::DimensionMismatch {
            expected: h_ds.nrows(),
            actual: h_du.nrows(),
            context: "surrogate vs forget Hessian shape",
        });
    }
    let (n, m) = (n as f64, m as f64);
    Ok((h_ds * n - h_du * m) / (n - m))
}

/// Gradient of the retain loss at a stationary point of the full loss: `−m/(n−m) · g_Du`.
pub fn retain_gradient(g_du: &DVector<f64>, n: usize, m: usize) -> Result<DVector<f64>> {
    check_sizes(n, m)?;
    Ok(g_du * (-(m as f64) / (n - m) as f64))
}

/// `θ* + m/(n−m) · Ĥ⁻¹ g_Du` via Cholesky of `Ĥ + jitter·I`.
pub fn newton_unlearn(
    theta_star: &ModelParams,
    h_hat: &DMatrix<f64>,
    g_du: &DVector<f64>,
    n: usize,
    m: usize,
    jitter: f64,
) -> Result<ModelParams> {
    check_sizes(n, m)?;
    let p = theta_star.param_count();
    if h_hat.shape() != (p, p) || g_du.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: g_du.len().min(h_hat.nrows()),
            context: "Newton system vs parameter count",
        });
    }
    let mut h = h_hat.clone();
    for i in 0..p {
        h[(i, i)] += jitter;
    }
    let chol = h.cholesky().ok_or_else(|| {
        Error::Certification(format!(
            "estimated retain Hessian is not positive definite (jitter {jitter:e}); \
             use a larger surrogate sample or a positive hessian_jitter"
        ))
    })?;
    let step = chol.solve(g_du) * (m as f64 / (n - m) as f64);
    theta_star.offset(&step)
}

/// `2γL m² / (α³ n²)`.
pub fn bound_exact(k: &LossConstants, n: usize, m: usize) -> Result<f64> {
    k.validate()?;
    if n == 0 || m >= n {
        return Err(Error::invalid(format!("need n > 0 and m < n, got m = {m}, n = {n}")));
    }
    let (n, m) = (n as f64, m as f64);
    Ok(2.0 * k.gamma * k.lipschitz * m * m / (k.alpha.powi(3) * n * n))
}

/// Exact-data term at `n1` plus the surrogate correction
/// `‖g‖ (m|n1 − n2|β + 2m n2 β tv) / ((n1α − mβ)(n2α − mβ))`.
pub fn bound_surrogate(k: &LossConstants, n1: usize, n2: usize, m: usize, tv: f64, grad_norm_du: f64) -> Result<f64> {
    k.validate()?;
    if !(0.0..=1.0).contains(&tv) {
        return Err(Error::invalid(format!("tv must lie in [0, 1], got {tv}")));
    }
    if !(grad_norm_du >= 0.0 && grad_norm_du.is_finite()) {
        return Err(Error::invalid(format!("gradient norm must be finite and nonnegative, got {grad_norm_du}")));
    }
    let mb = m as f64 * k.beta;
    for (name, ni) in [("n1", n1), ("n2", n2)] {
        if ni as f64 * k.alpha - mb <= 0.0 {
            return Err(Error::Certification(format!(
                "{name} = {ni} violates {name}·alpha > m·beta (m = {m}, alpha = {}, beta = {}); \
                 need {name} > {:.3}",
                k.alpha,
                k.beta,
                mb / k.alpha
            )));
        }
    }
    let exact = bound_exact(k, n1, m)?;
    let (f1, f2, fm) = (n1 as f64, n2 as f64, m as f64);
    let num = fm * (f1 - f2).abs() * k.beta + 2.0 * fm * f2 * k.beta * tv;
    let den = (f1 * k.alpha - mb) * (f2 * k.alpha - mb);
    Ok(exact + grad_norm_du * num / den)
}

/// [`bound_surrogate`] with `tv = sqrt(1 − e^{−kl})`.
pub fn bound_surrogate_kl(k: &LossConstants, n1: usize, n2: usize, m: usize, kl: f64, grad_norm_du: f64) -> Result<f64> {
    bound_surrogate(k, n1, n2, m, bh_tv_bound(kl)?, grad_norm_du)
}

/// `(Δ/ε) sqrt(2 ln(1.25/δ))`.
pub fn calibrate_sigma(delta_bound: f64, budget: &CertBudget) -> Result<f64> {
    budget.validate()?;
    if !(delta_bound >= 0.0 && delta_bound.is_finite()) {
        return Err(Error::invalid(format!("bound must be finite and nonnegative, got {delta_bound}")));
    }
    Ok(delta_bound / budget.epsilon * (2.0 * (1.25 / budget.delta).ln()).sqrt())
}

/// Adds iid `N(0, σ²)` to every parameter. Returns the noised model and the draw.
pub fn gaussian_mechanism(theta: &ModelParams, sigma: f64, noise_seed: u64) -> Result<(ModelParams, DVector<f64>)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    let noise = gaussian_draw(theta.param_count(), sigma, noise_seed);
    Ok((theta.offset(&noise)?, noise))
}

pub fn gaussian_draw(len: usize, sigma: f64, noise_seed: u64) -> DVector<f64> {
    let mut rng = seed::rng(noise_seed);
    DVector::from_fn(len, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Pre-noise surrogate update and `‖∇L(D_u, θ*)‖`.
pub fn surrogate_update(
    theta_star: &ModelParams,
    surrogate: &Dataset,
    forget: &Dataset,
    n: usize,
    k: &LossConstants,
    jitter: f64,
) -> Result<(ModelParams, f64)> {
    let m = forget.len();
    let h_ds = model::hessian(surrogate, theta_star, k)?;
    let h_du = model::hessian(forget, theta_star, k)?;
    let g_du = model::gradient(forget, theta_star, k)?;
    let h_hat = estimate_retain_hessian(&h_ds, &h_du, n, m)?;
    let theta = newton_unlearn(theta_star, &h_hat, &g_du, n, m, jitter)?;
    Ok((theta, g_du.norm()))
}

/// Pre-noise exact-data update and `‖∇L(D_u, θ*)‖`.
pub fn exact_update(
    theta_star: &ModelParams,
    retain: &Dataset,
    forget: &Dataset,
    k: &LossConstants,
    jitter: f64,
) -> Result<(ModelParams, f64)> {
    let m = forget.len();
    let n = retain.len() + m;
    let h_dr = model::hessian(retain, theta_star, k)?;
    let g_du = model::gradient(forget, theta_star, k)?;
    let theta = newton_unlearn(theta_star, &h_dr, &g_du, n, m, jitter)?;
    Ok((theta, g_du.norm()))
}

/// Surrogate-data mechanism: estimated Hessian, Newton step, bound, noise.
pub fn unlearn_surrogate(
    theta_star: &ModelParams,
    surrogate: &Dataset,
    forget: &Dataset,
    n: usize,
    cfg: &MechanismConfig,
    gap: Divergence,
    noise_seed: u64,
) -> Result<UnlearnOutput> {
    let k = &cfg.constants;
    k.validate()?;
    cfg.budget.validate()?;
    let m = forget.len();
    let n2 = surrogate.len();
    let (theta_pre, grad_norm_du) = surrogate_update(theta_star, surrogate, forget, n, k, cfg.hessian_jitter)?;
    let (bound_kind, tv, kl) = match gap {
        Divergence::Tv(tv) => (BoundKind::SurrogateTv, tv, None),
        Divergence::Kl(kl) => (BoundKind::SurrogateKl, bh_tv_bound(kl)?, Some(kl)),
    };
    let delta_bound = bound_surrogate(k, n, n2, m, tv, grad_norm_du)?;
    release(
        theta_pre,
        delta_bound,
        cfg,
        noise_seed,
        UnlearnCertificate {
            bound_kind,
            delta_bound,
            sigma: 0.0,
            epsilon: cfg.budget.epsilon,
            delta: cfg.budget.delta,
            tv_used: tv,
            kl_used: kl,
            n1: n,
            n2,
            m,
            grad_norm_du,
            constants: *k,
            noise_seed,
            kl_estimate: None,
        },
    )
}

/// Exact-data baseline: true retain Hessian, exact-data bound, noise.
pub fn unlearn_exact(
    theta_star: &ModelParams,
    retain: &Dataset,
    forget: &Dataset,
    cfg: &MechanismConfig,
    noise_seed: u64,
) -> Result<UnlearnOutput> {
    let k = &cfg.constants;
    k.validate()?;
    cfg.budget.validate()?;
    let m = forget.len();
    let n = retain.len() + m;
    let (theta_pre, grad_norm_du) = exact_update(theta_star, retain, forget, k, cfg.hessian_jitter)?;
    let delta_bound = bound_exact(k, n, m)?;
    release(
        theta_pre,
        delta_bound,
        cfg,
        noise_seed,
        UnlearnCertificate {
            bound_kind: BoundKind::ExactData,
            delta_bound,
            sigma: 0.0,
            epsilon: cfg.budget.epsilon,
            delta: cfg.budget.delta,
            tv_used: 0.0,
            kl_used: None,
            n1: n,
            n2: n,
            m,
            grad_norm_du,
            constants: *k,
            noise_seed,
            kl_estimate: None,
        },
    )
}

fn release(
    theta_pre: ModelParams,
    delta_bound: f64,
    cfg: &MechanismConfig,
    noise_seed: u64,
    mut certificate: UnlearnCertificate,
) -> Result<UnlearnOutput> {
    let sigma = calibrate_sigma(delta_bound, &cfg.budget)?;
    certificate.sigma = sigma;
    let (theta_released, noise) = gaussian_mechanism(&theta_pre, sigma, noise_seed)?;
    Ok(UnlearnOutput {
        theta_pre_noise: theta_pre,
        theta_released,
        noise,
        certificate,
    })
}

/// Exact unlearning by training from scratch on the retain set.
pub fn retrain(retain: &Dataset, k: &LossConstants, cfg: &TrainConfig) -> Result<ModelParams> {
    model::train(retain, k, cfg)
}
