//! Donsker–Varadhan KL estimation with a small ReLU critic.
//!
//! The critic `T` maximizes `mean_Q T − ln mean_P e^T` by full-batch Adam.
//! Gradients are derived by hand; there is no autodiff dependency.
//!
//! With `holdout_fraction > 0` each side is split once; the critic trains on
//! one part and the reported estimate is the objective on the other.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct DvNetConfig {
    pub hidden_widths: [usize; 2],
    pub epochs: usize,
    pub learning_rate: f64,
    /// Share of each sample set held out for the read-out; 0 reads out the training objective.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DvNetConfig {
    fn default() -> Self {
        Self {
            hidden_widths: [128, 64],
            epochs: 500,
            learning_rate: 1e-4,
            holdout_fraction: 0.5,
            seed: 0,
        }
    }
}

impl DvNetConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden_widths.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("DV training needs at least one epoch"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const READOUT_FRACTION: f64 = 0.1;

/// Critic `d → h1 → h2 → 1` with ReLU, plus the input standardization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct DvNet {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    w3: DVector<f64>,
    b3: f64,
    mean: DVector<f64>,
    scale: DVector<f64>,
}

struct Activations {
    x: DMatrix<f64>,
    a1: DMatrix<f64>,
    h1: DMatrix<f64>,
    a2: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DVector<f64>,
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += b.transpose();
    }
}

/// `ln mean exp(v)` with a max shift. Also returns the softmax weights.
fn log_mean_exp(v: &DVector<f64>) -> (f64, DVector<f64>) {
    let m = v.max();
    let e = v.map(|x| (x - m).exp());
    let s = e.sum();
    (m + (s / v.len() as f64).ln(), e / s)
}

impl DvNet {
    /// PyTorch-style init: every weight and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(dim: usize, widths: [usize; 2], init_seed: u64) -> Self {
        let mut rng = seed::rng(init_seed);
        let mut uni = |rows: usize, cols: usize, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-b..b))
        };
        let [h1, h2] = widths;
        let w1 = uni(h1, dim, dim);
        let b1 = uni(h1, 1, dim).column(0).into_owned();
        let w2 = uni(h2, h1, h1);
        let b2 = uni(h2, 1, h1).column(0).into_owned();
        let w3 = uni(h2, 1, h2).column(0).into_owned();
        let b3 = uni(1, 1, h2)[(0, 0)];
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            mean: DVector::zeros(dim),
            scale: DVector::from_element(dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    /// Sets per-feature standardization from the pooled rows of `a` and `b`.
    fn fit_standardizer(&mut self, a: &DMatrix<f64>, b: &DMatrix<f64>) {
        let n = (a.nrows() + b.nrows()) as f64;
        let d = a.ncols();
        let mut mean = DVector::zeros(d);
        for m in [a, b] {
            for row in m.row_iter() {
                mean += row.transpose();
            }
        }
        mean /= n;
        let mut var = DVector::zeros(d);
        for m in [a, b] {
            for row in m.row_iter() {
                let c = row.transpose() - &mean;
                var += c.component_mul(&c);
            }
        }
        var /= n;
        self.scale = var.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        self.mean = mean;
    }

    fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for mut row in z.row_iter_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.scale[j];
            }
        }
        z
    }

    fn forward(&self, raw: &DMatrix<f64>) -> Activations {
        let x = self.standardize(raw);
        let mut a1 = &x * self.w1.transpose();
        add_row_bias(&mut a1, &self.b1);
        let h1 = relu(&a1);
        let mut a2 = &h1 * self.w2.transpose();
        add_row_bias(&mut a2, &self.b2);
        let h2 = relu(&a2);
        let out = (&h2 * &self.w3).add_scalar(self.b3);
        Activations { x, a1, h1, a2, h2, out }
    }

    /// Critic values `T(x)` for each row.
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(self.forward(x).out)
    }

    fn check_dim(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.ncols(),
                context: "DV critic input width",
            });
        }
        Ok(())
    }

    /// `mean_Q T − ln mean_P e^T`.
    pub fn objective(&self, q: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
        let tq = self.scores(q)?;
        let tp = self.scores(p)?;
        Ok(tq.mean() - log_mean_exp(&tp).0)
    }

    /// Objective and its gradient in [`DvNet::params`] order.
    pub fn objective_and_grad(&self, q: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_dim(q)?;
        self.check_dim(p)?;
        let (nq, np) = (q.nrows(), p.nrows());
        let mut stacked = DMatrix::zeros(nq + np, q.ncols());
        stacked.rows_mut(0, nq).copy_from(q);
        stacked.rows_mut(nq, np).copy_from(p);
        let act = self.forward(&stacked);

        let tq = act.out.rows(0, nq);
        let tp = act.out.rows(nq, np).into_owned();
        let (lme, weights) = log_mean_exp(&tp);
        let value = tq.mean() - lme;

        // dJ/dT per stacked row.
        let mut u = DVector::from_element(nq + np, 1.0 / nq as f64);
        u.rows_mut(nq, np).copy_from(&(-weights));

        let g_w3 = act.h2.tr_mul(&u);
        let g_b3 = u.sum();
        let mut d2 = &u * self.w3.transpose();
        d2.zip_apply(&act.a2, |g, a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let g_w2 = d2.tr_mul(&act.h1);
        let g_b2 = d2.row_sum().transpose();
        let mut d1 = &d2 * &self.w2;
        d1.zip_apply(&act.a1, |g, a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let g_w1 = d1.tr_mul(&act.x);
        let g_b1 = d1.row_sum().transpose();

        let grad = Self::pack(&g_w1, &g_b1, &g_w2, &g_b2, &g_w3, g_b3);
        Ok((value, grad))
    }

    fn pack(
        w1: &DMatrix<f64>,
        b1: &DVector<f64>,
        w2: &DMatrix<f64>,
        b2: &DVector<f64>,
        w3: &DVector<f64>,
        b3: f64,
    ) -> DVector<f64> {
        let mut v = Vec::with_capacity(w1.len() + b1.len() + w2.len() + b2.len() + w3.len() + 1);
        v.extend_from_slice(w1.as_slice());
        v.extend_from_slice(b1.as_slice());
        v.extend_from_slice(w2.as_slice());
        v.extend_from_slice(b2.as_slice());
        v.extend_from_slice(w3.as_slice());
        v.push(b3);
        DVector::from_vec(v)
    }

    /// Trainable parameters, flattened.
    pub fn params(&self) -> DVector<f64> {
        Self::pack(&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, self.b3)
    }

    pub fn set_params(&mut self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: v.len(),
                context: "DV critic parameter count",
            });
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&v.as_slice()[off..off + dst.len()]);
            off += dst.len();
        };
        take(self.w1.as_mut_slice());
        take(self.b1.as_mut_slice());
        take(self.w2.as_mut_slice());
        take(self.b2.as_mut_slice());
        take(self.w3.as_mut_slice());
        self.b3 = v[v.len() - 1];
        Ok(())
    }
}

/// Seeded split of rows into `(train, held_out)`; both nonempty when `fraction > 0`.
fn split_rows(x: &DMatrix<f64>, fraction: f64, seed_value: u64) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    if fraction == 0.0 {
        return Ok((x.clone(), None));
    }
    let n = x.nrows();
    let held = ((n as f64) * fraction).round() as usize;
    if held == 0 || held >= n {
        return Err(Error::invalid(format!(
            "{n} samples are too few to hold out a fraction of {fraction}"
        )));
    }
    let mut rng = seed::rng(seed_value);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let (eval, train) = perm.split_at(held);
    let mut train = train.to_vec();
    let mut eval = eval.to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok((x.select_rows(&train), Some(x.select_rows(&eval))))
}

/// Trains a critic on `q` versus `p` and returns it with the marginal KL
/// read-out: the objective averaged over the last tenth of epochs, on the
/// held-out rows when a holdout is configured, floored at zero.
pub fn dv_train(samples_q: &DMatrix<f64>, samples_p: &DMatrix<f64>, cfg: &DvNetConfig) -> Result<(DvNet, f64)> {
    cfg.validate()?;
    if samples_q.nrows() == 0 || samples_p.nrows() == 0 {
        return Err(Error::invalid("DV training needs nonempty sample sets"));
    }
    if samples_q.ncols() != samples_p.ncols() {
        return Err(Error::DimensionMismatch {
            expected: samples_q.ncols(),
            actual: samples_p.ncols(),
            context: "DV sample widths",
        });
    }
    let (train_q, eval_q) = split_rows(samples_q, cfg.holdout_fraction, seed::derive_seed(cfg.seed, "dv-holdout", 0))?;
    let (train_p, eval_p) = split_rows(samples_p, cfg.holdout_fraction, seed::derive_seed(cfg.seed, "dv-holdout", 1))?;

    let mut net = DvNet::new(samples_q.ncols(), cfg.hidden_widths, cfg.seed);
    net.fit_standardizer(&train_q, &train_p);

    let readout = ((cfg.epochs as f64 * READOUT_FRACTION).ceil() as usize).max(1);
    let mut params = net.params();
    let mut m = DVector::zeros(params.len());
    let mut v = DVector::zeros(params.len());
    let mut tail_sum = 0.0;
    for epoch in 0..cfg.epochs {
        let (value, grad) = net.objective_and_grad(&train_q, &train_p)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "DV objective became non-finite at epoch {epoch} (value {value})"
            )));
        }
        if epoch >= cfg.epochs - readout {
            tail_sum += match (&eval_q, &eval_p) {
                (Some(q), Some(p)) => net.objective(q, p)?,
                _ => value,
            };
        }
        let t = (epoch + 1) as i32;
        m = m * ADAM_B1 + &grad * (1.0 - ADAM_B1);
        v = v * ADAM_B2 + grad.component_mul(&grad) * (1.0 - ADAM_B2);
        let c1 = 1.0 - ADAM_B1.powi(t);
        let c2 = 1.0 - ADAM_B2.powi(t);
        params.zip_zip_apply(&m, &v, |w, mi, vi| {
            *w += cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        });
        net.set_params(&params)?;
    }
    let estimate = tail_sum / readout as f64;
    if !estimate.is_finite() {
        return Err(Error::Numerical(format!("DV read-out is non-finite ({estimate})")));
    }
    Ok((net, estimate.max(0.0)))
}
