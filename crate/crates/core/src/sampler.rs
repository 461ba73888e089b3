//! Langevin sampling from the energy model implied by a classifier.
//!
//! The classifier's logits define `E(x) = −logsumexp_y (W x + b)_y`. Each
//! chain starts uniform in a box and takes
//! `x ← x − (μ/2) ∇E(x) + N(0, μ I)` for a fixed number of steps.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::seed;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SgldConfig {
    pub step_size: f64,
    pub steps_per_sample: usize,
    pub sample_count: usize,
    /// Per-feature lower init bound; defaults to the surrogate minimum.
    pub init_low: Option<Vec<f64>>,
    pub init_high: Option<Vec<f64>>,
    pub seed: u64,
    /// Diagnostic switch; `false` turns the chains into plain gradient descent.
    pub inject_noise: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            step_size: 0.02,
            steps_per_sample: 4000,
            sample_count: 1000,
            init_low: None,
            init_high: None,
            seed: 0,
            inject_noise: true,
        }
    }
}

impl SgldConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("SGLD step size must be positive"));
        }
        if self.steps_per_sample == 0 || self.sample_count == 0 {
            return Err(Error::invalid("SGLD needs at least one step and one sample"));
        }
        Ok(())
    }

    /// Init box from the config, falling back to the given bounds.
    pub fn resolve_bounds(&self, fallback: Option<(&[f64], &[f64])>) -> Result<(Vec<f64>, Vec<f64>)> {
        let (low, high) = match (&self.init_low, &self.init_high, fallback) {
            (Some(l), Some(h), _) => (l.clone(), h.clone()),
            (None, None, Some((l, h))) => (l.to_vec(), h.to_vec()),
            _ => return Err(Error::invalid("SGLD init bounds need both init_low and init_high, or a surrogate")),
        };
        if low.len() != high.len() {
            return Err(Error::DimensionMismatch {
                expected: low.len(),
                actual: high.len(),
                context: "SGLD init bound lengths",
            });
        }
        if let Some(j) = (0..low.len()).find(|&j| !(low[j] <= high[j]) || !low[j].is_finite() || !high[j].is_finite()) {
            return Err(Error::invalid(format!(
                "SGLD init bounds for feature {j} are not ordered finite values ({} > {})",
                low[j], high[j]
            )));
        }
        Ok((low, high))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    classifier: ModelParams,
}

impl EnergyModel {
    pub fn new(classifier: ModelParams) -> Self {
        Self { classifier }
    }

    pub fn classifier(&self) -> &ModelParams {
        &self.classifier
    }

    pub fn dim(&self) -> usize {
        self.classifier.dim()
    }

    /// `(E(x), ∇E(x))` written into `grad`; `logits` is scratch of length `C`.
    fn eval_into(&self, x: &[f64], logits: &mut [f64], grad: &mut [f64]) -> f64 {
        let t = self.classifier.augmented();
        let d = x.len();
        for (c, z) in logits.iter_mut().enumerate() {
            let mut s = t[(c, d)];
            for j in 0..d {
                s += t[(c, j)] * x[j];
            }
            *z = s;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for z in logits.iter_mut() {
            *z = (*z - m).exp();
            total += *z;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (c, w) in logits.iter().enumerate() {
            let pc = w / total;
            for j in 0..d {
                grad[j] -= pc * t[(c, j)];
            }
        }
        -(m + total.ln())
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
                context: "energy input dimension",
            });
        }
        Ok(())
    }

    pub fn energy(&self, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        let mut logits = vec![0.0; self.classifier.class_count()];
        let mut grad = vec![0.0; self.dim()];
        Ok(self.eval_into(x.as_slice(), &mut logits, &mut grad))
    }

    /// `−Wᵀ softmax(W x + b)`.
    pub fn energy_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        let mut logits = vec![0.0; self.classifier.class_count()];
        let mut grad = vec![0.0; self.dim()];
        self.eval_into(x.as_slice(), &mut logits, &mut grad);
        Ok(DVector::from_vec(grad))
    }

    /// Energy of every row.
    pub fn energies(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..x.nrows()).map(|i| self.energy(&x.row(i).transpose())).collect()
    }
}

/// Per-feature `(min, max)` of the surrogate features.
pub fn default_init_bounds(surrogate: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let x = surrogate.features();
    let low = x.column_iter().map(|c| c.min()).collect();
    let high = x.column_iter().map(|c| c.max()).collect();
    (low, high)
}

struct Chain<'a> {
    em: &'a EnergyModel,
    cfg: &'a SgldConfig,
    x: Vec<f64>,
    logits: Vec<f64>,
    grad: Vec<f64>,
    rng: seed::Rng,
}

impl<'a> Chain<'a> {
    fn start(em: &'a EnergyModel, cfg: &'a SgldConfig, low: &[f64], high: &[f64], index: u64) -> Self {
        let mut rng = seed::rng_stream(cfg.seed, index);
        let x = low
            .iter()
            .zip(high)
            .map(|(&l, &h)| if l < h { rng.random_range(l..h) } else { l })
            .collect();
        Self {
            em,
            cfg,
            x,
            logits: vec![0.0; em.classifier.class_count()],
            grad: vec![0.0; em.dim()],
            rng,
        }
    }

    fn energy(&mut self) -> f64 {
        self.em.eval_into(&self.x, &mut self.logits, &mut self.grad)
    }

    fn step(&mut self) {
        let mu = self.cfg.step_size;
        let sd = mu.sqrt();
        self.em.eval_into(&self.x, &mut self.logits, &mut self.grad);
        for (xj, gj) in self.x.iter_mut().zip(&self.grad) {
            *xj -= 0.5 * mu * gj;
            if self.cfg.inject_noise {
                *xj += sd * self.rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Runs `sample_count` independent chains and returns their final states, one per row.
pub fn sgld_sample(em: &EnergyModel, cfg: &SgldConfig, low: &[f64], high: &[f64]) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let (low, high) = cfg.resolve_bounds(Some((low, high)))?;
    if low.len() != em.dim() {
        return Err(Error::DimensionMismatch {
            expected: em.dim(),
            actual: low.len(),
            context: "SGLD init bounds vs model dimension",
        });
    }
    let d = em.dim();
    let mut out = DMatrix::zeros(cfg.sample_count, d);
    for i in 0..cfg.sample_count {
        let mut chain = Chain::start(em, cfg, &low, &high, i as u64);
        for step in 0..cfg.steps_per_sample {
            chain.step();
            if chain.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("SGLD chain {i} became non-finite at step {step}")));
            }
        }
        for j in 0..d {
            out[(i, j)] = chain.x[j];
        }
    }
    Ok(out)
}

/// Energies along one chain: the initial value followed by one per step.
pub fn sgld_energy_trace(em: &EnergyModel, cfg: &SgldConfig, low: &[f64], high: &[f64], chain_index: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (low, high) = cfg.resolve_bounds(Some((low, high)))?;
    let mut chain = Chain::start(em, cfg, &low, &high, chain_index);
    let mut trace = Vec::with_capacity(cfg.steps_per_sample + 1);
    trace.push(chain.energy());
    for _ in 0..cfg.steps_per_sample {
        chain.step();
        trace.push(chain.energy());
    }
    Ok(trace)
}

/// Initial chain states, in the same order and streams as [`sgld_sample`].
pub fn sgld_initial_states(em: &EnergyModel, cfg: &SgldConfig, low: &[f64], high: &[f64]) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let (low, high) = cfg.resolve_bounds(Some((low, high)))?;
    let mut out = DMatrix::zeros(cfg.sample_count, em.dim());
    for i in 0..cfg.sample_count {
        let chain = Chain::start(em, cfg, &low, &high, i as u64);
        for j in 0..em.dim() {
            out[(i, j)] = chain.x[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_params;
    use crate::seed;

    fn model(rows: &[f64], c: usize, d: usize) -> EnergyModel {
        EnergyModel::new(ModelParams::from_augmented(DMatrix::from_row_slice(c, d + 1, rows)).unwrap())
    }

    fn toy() -> EnergyModel {
        model(&[1.5, -0.5, 0.2, -1.0, 0.8, -0.1], 2, 2)
    }

    fn small_cfg(k: usize, steps: usize, s: u64) -> SgldConfig {
        SgldConfig {
            step_size: 0.02,
            steps_per_sample: steps,
            sample_count: k,
            seed: s,
            ..SgldConfig::default()
        }
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn energy_cases() {
        let em = model(&[0.0, 0.0, 0.0, 0.0], 2, 1);
        let x = DVector::from_vec(vec![3.0]);
        assert!((em.energy(&x).unwrap() + 2f64.ln()).abs() < 1e-15);

        let em = toy();
        let x = DVector::from_vec(vec![0.4, -1.2]);
        let e = em.energy(&x).unwrap();
        let mut shifted = em.classifier().augmented().clone();
        shifted.column_mut(2).add_scalar_mut(2.5);
        let em2 = EnergyModel::new(ModelParams::from_augmented(shifted).unwrap());
        assert!((em2.energy(&x).unwrap() - (e - 2.5)).abs() < 1e-12);

        let z = em.classifier().logits(&x).unwrap();
        let direct = -(z.iter().map(|v| v.exp()).sum::<f64>()).ln();
        assert!((e - direct).abs() < 1e-12);
        assert!(em.energy(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn energy_grad_cases() {
        for s in 0..5 {
            let em = EnergyModel::new(random_params(3, 4, 1.0, s));
            let x = DVector::from_fn(4, |i, _| 0.3 * i as f64 - 0.4);
            let g = em.energy_grad(&x).unwrap();
            let h = 1e-6;
            for j in 0..4 {
                let mut up = x.clone();
                up[j] += h;
                let mut dn = x.clone();
                dn[j] -= h;
                let fd = (em.energy(&up).unwrap() - em.energy(&dn).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6 * fd.abs().max(g[j].abs()).max(1e-3), "{fd} {}", g[j]);
            }
        }
        let em = model(&[0.0, 0.0, 1.0, 0.0, 0.0, -2.0], 2, 2);
        assert_eq!(em.energy_grad(&DVector::from_vec(vec![1.0, 1.0])).unwrap(), DVector::zeros(2));
        let em = model(&[0.7, -1.3, 0.5], 1, 2);
        let g = em.energy_grad(&DVector::from_vec(vec![2.0, 5.0])).unwrap();
        assert!((g - DVector::from_vec(vec![-0.7, 1.3])).amax() < 1e-15);
    }

    #[test]
    fn bounds_from_surrogate() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -2.0, 0.5, 0.3, 0.5]);
        let ds = Dataset::new(x.clone(), vec![0, 1, 0], 2).unwrap();
        let (low, high) = default_init_bounds(&ds);
        assert_eq!(low, vec![-2.0, 0.5]);
        assert_eq!(high, vec![1.0, 0.5]);
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for i in 0..3 {
            for j in 0..2 {
                lo[j] = lo[j].min(x[(i, j)]);
                hi[j] = hi[j].max(x[(i, j)]);
            }
        }
        assert_eq!(low, lo.to_vec());
        assert_eq!(high, hi.to_vec());

        let em = toy();
        let cfg = small_cfg(20, 1, 3);
        let init = sgld_initial_states(&em, &cfg, &low, &high).unwrap();
        assert!(init.column(1).iter().all(|&v| v == 0.5));
        assert!(init.column(0).iter().all(|&v| (-2.0..=1.0).contains(&v)));
    }

    #[test]
    fn sampling_lowers_mean_energy() {
        let em = toy();
        let (low, high) = (vec![-1.0, -1.0], vec![1.0, 1.0]);
        let cfg = small_cfg(100, 500, 5);
        let init = sgld_initial_states(&em, &cfg, &low, &high).unwrap();
        let out = sgld_sample(&em, &cfg, &low, &high).unwrap();
        assert_eq!(out.shape(), (100, 2));
        assert!(mean(&em.energies(&out).unwrap()) <= mean(&em.energies(&init).unwrap()));
    }

    #[test]
    fn noiseless_mode_descends_every_step() {
        let em = toy();
        let cfg = SgldConfig {
            inject_noise: false,
            ..small_cfg(1, 2000, 0)
        };
        for chain in 0..5 {
            let trace = sgld_energy_trace(&em, &cfg, &[-1.0, -1.0], &[1.0, 1.0], chain).unwrap();
            assert!(trace.windows(2).all(|w| w[1] <= w[0]), "chain {chain}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let em = toy();
        let cfg = small_cfg(30, 50, 9);
        let a = sgld_sample(&em, &cfg, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let b = sgld_sample(&em, &cfg, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(a, b);
        let c = sgld_sample(&em, &small_cfg(30, 50, 10), &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_config() {
        let em = toy();
        assert!(sgld_sample(&em, &small_cfg(0, 10, 0), &[0.0; 2], &[1.0; 2]).is_err());
        assert!(sgld_sample(&em, &small_cfg(5, 10, 0), &[1.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(sgld_sample(&em, &small_cfg(5, 10, 0), &[0.0; 3], &[1.0; 3]).is_err());
    }

    #[test]
    fn symmetric_energy_centres_samples() {
        // Opposite class weights make exp(−E) = 2 cosh(3 x₁), symmetric about the origin.
        let em = model(&[3.0, 0.0, 0.0, -3.0, 0.0, 0.0], 2, 2);
        let cfg = small_cfg(1000, 200, 11);
        let out = sgld_sample(&em, &cfg, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = out.column(j).iter().copied().collect();
            let m = mean(&col);
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
            let se = sd / (col.len() as f64).sqrt();
            assert!(m.abs() <= 3.0 * se, "coordinate {j}: mean {m}, se {se}");
        }
    }

    #[test]
    fn longer_chains_do_not_raise_energy() {
        let em = toy();
        let (low, high) = (vec![-1.0, -1.0], vec![1.0, 1.0]);
        let avg = |steps: usize| {
            (0..5)
                .map(|s| {
                    let out = sgld_sample(&em, &small_cfg(200, steps, seed::derive_seed(1, "burn", s)), &low, &high).unwrap();
                    mean(&em.energies(&out).unwrap())
                })
                .sum::<f64>()
                / 5.0
        };
        let short = avg(250);
        let long = avg(500);
        assert!(long <= short + 0.05, "{short} -> {long}");
    }
}
