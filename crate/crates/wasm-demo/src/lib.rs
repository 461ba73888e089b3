//! Browser bindings for three small operations: the noise-calibration curve,
//! a 2-d Langevin sample cloud, and an end-to-end unlearning run on 2-d data.
//! Every binding returns a JSON string.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use unlearn_core::data::{gen_synthetic, select_forget, surrogate_covariance, ForgetMode, ForgetSpec, SyntheticConfig};
use unlearn_core::distance::{bh_tv_bound, gaussian_kl};
use unlearn_core::error::{Error, Result};
use unlearn_core::model::{self, LossConstants, ModelParams, TrainConfig};
use unlearn_core::sampler::{sgld_sample, EnergyModel, SgldConfig};
use unlearn_core::seed::derive_seed;
use unlearn_core::unlearn::{
    bound_exact, bound_surrogate, calibrate_sigma, unlearn_exact, unlearn_surrogate, CertBudget, Divergence,
    MechanismConfig,
};

fn to_js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

/// σ for the exact-data mechanism and for the surrogate mechanism over a KL grid.
pub fn sigma_curve(n: usize, n2: usize, m: usize, grad_norm: f64, epsilon: f64, delta: f64, kl_max: f64) -> Result<Value> {
    let k = LossConstants::default();
    let budget = CertBudget { epsilon, delta };
    let exact = calibrate_sigma(bound_exact(&k, n, m)?, &budget)?;
    let steps = 100;
    let mut kl = Vec::with_capacity(steps + 1);
    let mut tv = Vec::with_capacity(steps + 1);
    let mut sigma = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let v = kl_max * i as f64 / steps as f64;
        let t = bh_tv_bound(v)?;
        kl.push(v);
        tv.push(t);
        sigma.push(calibrate_sigma(bound_surrogate(&k, n, n2, m, t, grad_norm)?, &budget)?);
    }
    Ok(json!({"kl": kl, "tv": tv, "sigma_surrogate": sigma, "sigma_exact": exact}))
}

#[wasm_bindgen(js_name = sigmaCurve)]
pub fn sigma_curve_js(
    n: usize,
    n2: usize,
    m: usize,
    grad_norm: f64,
    epsilon: f64,
    delta: f64,
    kl_max: f64,
) -> std::result::Result<String, JsError> {
    to_js(sigma_curve(n, n2, m, grad_norm, epsilon, delta, kl_max))
}

/// Two-class model in the plane, classes separated along the first axis.
fn plane_classifier(separation: f64, tilt: f64) -> Result<ModelParams> {
    let w = DMatrix::from_row_slice(2, 2, &[separation, tilt, -separation, -tilt]);
    ModelParams::new(w, DVector::zeros(2))
}

/// SGLD samples from the energy of a planar two-class model.
pub fn sgld_cloud(separation: f64, tilt: f64, step_size: f64, steps: usize, count: usize, seed: u64) -> Result<Value> {
    let em = EnergyModel::new(plane_classifier(separation, tilt)?);
    let cfg = SgldConfig {
        step_size,
        steps_per_sample: steps,
        sample_count: count,
        seed,
        ..SgldConfig::default()
    };
    let s = sgld_sample(&em, &cfg, &[-1.0, -1.0], &[1.0, 1.0])?;
    let energies = em.energies(&s)?;
    let points: Vec<[f64; 2]> = s.row_iter().map(|r| [r[0], r[1]]).collect();
    Ok(json!({"points": points, "energy": energies}))
}

#[wasm_bindgen(js_name = sgldCloud)]
pub fn sgld_cloud_js(
    separation: f64,
    tilt: f64,
    step_size: f64,
    steps: usize,
    count: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(sgld_cloud(separation, tilt, step_size, steps, count, seed.into()))
}

fn boundary(theta: &ModelParams) -> [f64; 3] {
    let w = theta.weights();
    let b = theta.bias();
    [w[(1, 0)] - w[(0, 0)], w[(1, 1)] - w[(0, 1)], b[1] - b[0]]
}

fn points(ds: &unlearn_core::data::Dataset) -> Vec<[f64; 3]> {
    (0..ds.len())
        .map(|i| {
            let x = ds.features();
            [x[(i, 0)], x[(i, 1)], ds.labels()[i] as f64]
        })
        .collect()
}

/// Trains on 2-d source data, forgets a random fraction with both mechanisms
/// (surrogate side uses the closed-form KL) and compares them with retraining.
pub fn unlearn_run(n: usize, zeta: f64, forget_ratio: f64, epsilon: f64, delta: f64, seed: u64) -> Result<Value> {
    if n < 20 {
        return Err(Error::InvalidArgument("use at least 20 source points".into()));
    }
    let (source, surrogate) = gen_synthetic(&SyntheticConfig {
        dim: 2,
        n_source: n,
        n_surrogate: n,
        zeta,
        teacher_seed: derive_seed(seed, "teacher", 0),
        data_seed: derive_seed(seed, "data", 0),
        label_flip_prob: 0.1,
    })?;
    let k = LossConstants::default();
    let train = TrainConfig::default();
    let theta_star = model::train(&source, &k, &train)?;
    let split = select_forget(
        &source,
        &ForgetSpec {
            mode: ForgetMode::RandomFraction { ratio: forget_ratio },
            seed: derive_seed(seed, "forget", 0),
        },
    )?;
    let retrained = model::train(&split.retain, &k, &train)?;
    let kl = gaussian_kl(&surrogate_covariance(2, zeta), &DMatrix::identity(2, 2))?;
    let mech = MechanismConfig {
        constants: k,
        budget: CertBudget { epsilon, delta },
        hessian_jitter: 0.0,
    };
    let plus = unlearn_exact(&theta_star, &split.retain, &split.forget, &mech, derive_seed(seed, "noise-plus", 0))?;
    let minus = unlearn_surrogate(
        &theta_star,
        &surrogate,
        &split.forget,
        source.len(),
        &mech,
        Divergence::Kl(kl),
        derive_seed(seed, "noise-minus", 0),
    )?;
    let row = |name: &str, th: &ModelParams, sigma: Option<f64>| -> Result<Value> {
        Ok(json!({
            "name": name,
            "boundary": boundary(th),
            "acc_retain": model::accuracy(th, &split.retain)?,
            "acc_forget": model::accuracy(th, &split.forget)?,
            "distance_to_retrain": th.distance(&retrained),
            "sigma": sigma,
        }))
    };
    Ok(json!({
        "kl": kl,
        "retain": points(&split.retain),
        "forget": points(&split.forget),
        "surrogate": points(&surrogate),
        "models": [
            row("original", &theta_star, None)?,
            row("retrain", &retrained, None)?,
            row("unlearn_plus", &plus.theta_released, Some(plus.certificate.sigma))?,
            row("unlearn_minus", &minus.theta_released, Some(minus.certificate.sigma))?,
        ],
    }))
}

#[wasm_bindgen(js_name = unlearnRun)]
pub fn unlearn_run_js(
    n: usize,
    zeta: f64,
    forget_ratio: f64,
    epsilon: f64,
    delta: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(unlearn_run(n, zeta, forget_ratio, epsilon, delta, seed.into()))
}
