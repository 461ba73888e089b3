//! Unlearning quality metrics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, LossConstants, ModelParams};
use crate::seed;
use crate::unlearn::gaussian_draw;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct MiaConfig {
    pub folds: usize,
    pub balance_seed: u64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            balance_seed: 0,
        }
    }
}

/// Membership inference on per-sample loss: cross-validated balanced accuracy
/// of a one-feature logistic attacker separating forget from test samples.
pub fn mia_score(theta: &ModelParams, forget: &Dataset, test: &Dataset, cfg: &MiaConfig) -> Result<f64> {
    let lf = model::per_sample_loss(forget, theta)?;
    let lt = model::per_sample_loss(test, theta)?;
    mia_from_losses(&lf, &lt, cfg)
}

/// [`mia_score`] on precomputed losses.
pub fn mia_from_losses(forget_losses: &[f64], test_losses: &[f64], cfg: &MiaConfig) -> Result<f64> {
    if cfg.folds < 2 {
        return Err(Error::invalid("MIA needs at least 2 folds"));
    }
    let n = forget_losses.len().min(test_losses.len());
    if n < cfg.folds {
        return Err(Error::invalid(format!(
            "MIA with {} folds needs at least that many samples per side, got {n}",
            cfg.folds
        )));
    }
    let mut rng = seed::rng(cfg.balance_seed);
    let mut pick = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.iter().map(|&i| v[i]).collect::<Vec<f64>>()
    };
    let pos = pick(forget_losses);
    let neg = pick(test_losses);

    // Stratified folds: after the shuffle above, sample i of each side goes to fold i mod k.
    let mut total = 0.0;
    for fold in 0..cfg.folds {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in (0..n).filter(|i| i % cfg.folds != fold) {
            xs.push(pos[i]);
            ys.push(1.0);
            xs.push(neg[i]);
            ys.push(0.0);
        }
        let attacker = LogisticAttacker::fit(&xs, &ys);
        let held: Vec<usize> = (0..n).filter(|i| i % cfg.folds == fold).collect();
        let tpr = held.iter().filter(|&&i| attacker.predict(pos[i])).count() as f64 / held.len() as f64;
        let tnr = held.iter().filter(|&&i| !attacker.predict(neg[i])).count() as f64 / held.len() as f64;
        total += 0.5 * (tpr + tnr);
    }
    Ok(total / cfg.folds as f64)
}

/// `P(member | loss) = sigmoid(w·z + b)` on the standardized loss `z`.
struct LogisticAttacker {
    mean: f64,
    scale: f64,
    w: f64,
    b: f64,
}

const ATTACKER_RIDGE: f64 = 1e-4;

impl LogisticAttacker {
    fn fit(x: &[f64], y: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let z: Vec<f64> = x.iter().map(|v| (v - mean) / scale).collect();
        let (mut w, mut b) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (ATTACKER_RIDGE * w, 0.0, ATTACKER_RIDGE, 0.0, 0.0);
            for (zi, yi) in z.iter().zip(y) {
                let p = 1.0 / (1.0 + (-(w * zi + b)).exp());
                let r = (p - yi) / n;
                gw += r * zi;
                gb += r;
                let s = p * (1.0 - p) / n;
                hww += s * zi * zi;
                hwb += s * zi;
                hbb += s;
            }
            hbb += 1e-12;
            let det = hww * hbb - hwb * hwb;
            if !(det > 0.0) {
                break;
            }
            let dw = (hbb * gw - hwb * gb) / det;
            let db = (hww * gb - hwb * gw) / det;
            w -= dw;
            b -= db;
            if dw.abs().max(db.abs()) < 1e-10 {
                break;
            }
        }
        Self { mean, scale, w, b }
    }

    fn predict(&self, x: f64) -> bool {
        self.w * (x - self.mean) / self.scale + self.b > 0.0
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct RelearnConfig {
    pub learning_rate: f64,
    pub cap: usize,
    /// Slack below the target accuracy that still counts as recovered.
    pub tolerance: f64,
}

impl Default for RelearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            cap: 500,
            tolerance: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct RelearnTime {
    pub iterations: usize,
    pub reached: bool,
}

impl std::fmt::Display for RelearnTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.reached {
            write!(f, "{}", self.iterations)
        } else {
            write!(f, "{}+", self.iterations)
        }
    }
}

/// Full-batch gradient descent on `full` from `theta` until the forget-set
/// accuracy reaches `target_acc − tolerance`.
pub fn relearn_time(
    theta: &ModelParams,
    full: &Dataset,
    forget: &Dataset,
    target_acc: f64,
    cfg: &RelearnConfig,
    k: &LossConstants,
) -> Result<RelearnTime> {
    if !(target_acc > 0.0 && target_acc <= 1.0) {
        return Err(Error::invalid(format!("target accuracy must lie in (0, 1], got {target_acc}")));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("relearn learning rate must be positive"));
    }
    let goal = target_acc - cfg.tolerance;
    let mut th = theta.clone();
    for it in 0..=cfg.cap {
        if model::accuracy(&th, forget)? >= goal {
            return Ok(RelearnTime {
                iterations: it,
                reached: true,
            });
        }
        if it == cfg.cap {
            break;
        }
        let g = model::gradient(full, &th, k)?;
        th = th.offset(&(g * -cfg.learning_rate))?;
    }
    Ok(RelearnTime {
        iterations: cfg.cap,
        reached: false,
    })
}

/// How observed false-positive and false-negative rates are regularized
/// before entering the log-ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Smoothing {
    /// `(x + 1) / (K + 2)`.
    AddOne,
    /// One-sided Clopper–Pearson upper confidence bound at the given level.
    ClopperPearson { confidence: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ForgetScoreConfig {
    pub draws_per_side: usize,
    pub threshold_grid_size: usize,
    pub smoothing: Smoothing,
}

impl Default for ForgetScoreConfig {
    fn default() -> Self {
        Self {
            draws_per_side: 64,
            threshold_grid_size: 101,
            smoothing: Smoothing::ClopperPearson { confidence: 0.95 },
        }
    }
}

impl ForgetScoreConfig {
    fn validate(&self) -> Result<()> {
        if self.draws_per_side < 2 {
            return Err(Error::invalid("forget score needs at least 2 draws per side"));
        }
        if self.threshold_grid_size < 2 {
            return Err(Error::invalid("threshold grid needs at least 2 points"));
        }
        if let Smoothing::ClopperPearson { confidence } = self.smoothing {
            if !(confidence > 0.0 && confidence < 1.0) {
                return Err(Error::invalid("Clopper-Pearson confidence must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Smoothed rate for each error count `0..=K`.
    fn rate_table(&self) -> Vec<f64> {
        let k = self.draws_per_side;
        (0..=k)
            .map(|x| match self.smoothing {
                Smoothing::AddOne => (x as f64 + 1.0) / (k as f64 + 2.0),
                Smoothing::ClopperPearson { confidence } => clopper_pearson_upper(x, k, confidence),
            })
            .collect()
    }

    /// Largest per-sample epsilon the estimator can report, attained by
    /// perfectly separated statistics.
    pub fn max_epsilon(&self) -> f64 {
        let r = self.rate_table();
        ((1.0 - r[0]) / r[0]).ln().max(0.0)
    }
}

/// `ln P(Bin(n, p) ≤ x)`.
fn ln_binom_cdf(x: usize, n: usize, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return if x >= n { 0.0 } else { f64::NEG_INFINITY };
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut terms = Vec::with_capacity(x + 1);
    let mut ln_choose = 0.0;
    for i in 0..=x {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        terms.push(ln_choose + i as f64 * lp + (n - i) as f64 * lq);
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Smallest `p` with `P(Bin(n, p) ≤ x) ≤ 1 − confidence`.
pub fn clopper_pearson_upper(x: usize, n: usize, confidence: f64) -> f64 {
    if x >= n {
        return 1.0;
    }
    let target = (1.0 - confidence).ln();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ln_binom_cdf(x, n, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Per-sample empirical epsilon from two `K × m` statistic matrices.
pub fn per_sample_epsilon(stats_u: &DMatrix<f64>, stats_r: &DMatrix<f64>, cfg: &ForgetScoreConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let k = cfg.draws_per_side;
    if stats_u.shape() != stats_r.shape() || stats_u.nrows() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: stats_u.nrows().min(stats_r.nrows()),
            context: "forget-score statistic rows vs draws per side",
        });
    }
    let rates = cfg.rate_table();
    let grid = cfg.threshold_grid_size;
    let mut out = Vec::with_capacity(stats_u.ncols());
    for i in 0..stats_u.ncols() {
        let u = stats_u.column(i);
        let r = stats_r.column(i);
        let lo = u.min().min(r.min());
        let hi = u.max().max(r.max());
        let range = hi - lo;
        if !(range > 0.0) {
            out.push(0.0);
            continue;
        }
        let step = range / (grid - 1) as f64;
        let mut best: f64 = 0.0;
        for j in 0..grid {
            let t = j as f64 * step;
            let u_below = u.iter().filter(|&&v| v - lo <= t).count();
            let r_below = r.iter().filter(|&&v| v - lo <= t).count();
            // Direction A flags "unlearned" when the statistic is at or below t,
            // direction B when it is above.
            for (fp, fn_) in [(r_below, k - u_below), (k - r_below, u_below)] {
                let fpr = rates[fp];
                let fnr = rates[fn_];
                best = best.max(((1.0 - fnr) / fpr).ln()).max(((1.0 - fpr) / fnr).ln());
            }
        }
        out.push(best.max(0.0));
    }
    Ok(out)
}

/// `mean_i exp(−ε̂_i)` from statistic matrices.
pub fn forget_score_from_stats(stats_u: &DMatrix<f64>, stats_r: &DMatrix<f64>, cfg: &ForgetScoreConfig) -> Result<f64> {
    let eps = per_sample_epsilon(stats_u, stats_r, cfg)?;
    if eps.is_empty() {
        return Err(Error::invalid("forget score needs a nonempty forget set"));
    }
    Ok(eps.iter().map(|e| (-e).exp()).sum::<f64>() / eps.len() as f64)
}

/// Indistinguishability of `θ_u + ν` and `θ_r + ν'` on the forget set, with
/// `K` independent `N(0, σ² I)` draws per side and per-sample loss as statistic.
pub fn forget_score(
    theta_u_pre: &ModelParams,
    theta_r: &ModelParams,
    sigma: f64,
    forget: &Dataset,
    cfg: &ForgetScoreConfig,
    noise_seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    if forget.is_empty() {
        return Err(Error::invalid("forget score needs a nonempty forget set"));
    }
    let p = theta_u_pre.param_count();
    let stats = |base: &ModelParams, side: &str| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(cfg.draws_per_side, forget.len());
        for draw in 0..cfg.draws_per_side {
            let nu = gaussian_draw(p, sigma, seed::derive_seed(noise_seed, side, draw as u64));
            let losses = model::per_sample_loss(forget, &base.offset(&nu)?)?;
            for (j, l) in losses.into_iter().enumerate() {
                m[(draw, j)] = l;
            }
        }
        Ok(m)
    };
    let su = stats(theta_u_pre, "fs-unlearned")?;
    let sr = stats(theta_r, "fs-retrained")?;
    forget_score_from_stats(&su, &sr, cfg)
}

/// Splits every model is scored against.
#[derive(Debug, Clone)]
pub struct EvalSplits<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub retain: &'a Dataset,
    pub forget: &'a Dataset,
}

/// A model to score. `forget_score_input` is the pre-noise parameters and the
/// noise scale to compare against the retrained reference.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub name: String,
    pub released: ModelParams,
    pub forget_score_input: Option<(ModelParams, f64)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct EvalConfig {
    pub mia: MiaConfig,
    pub relearn: RelearnConfig,
    pub forget_score: ForgetScoreConfig,
    pub fs_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub acc_train: f64,
    pub acc_test: f64,
    pub acc_retain: f64,
    pub acc_forget: f64,
    pub mia: f64,
    pub relearn_time: RelearnTime,
    pub forget_score: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
}

/// Scores every model. Relearn targets the forget accuracy of `original`.
pub fn evaluate_all(
    original: &ModelParams,
    retrained_reference: &ModelParams,
    models: &[EvalModel],
    splits: &EvalSplits<'_>,
    cfg: &EvalConfig,
    k: &LossConstants,
) -> Result<Vec<MetricsReport>> {
    if splits.forget.is_empty() {
        return Err(Error::invalid("evaluation needs a nonempty forget set"));
    }
    let target = model::accuracy(original, splits.forget)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("mia_balance".to_owned(), cfg.mia.balance_seed);
    seeds.insert("forget_score".to_owned(), cfg.fs_seed);
    models
        .iter()
        .map(|m| {
            let th = &m.released;
            let forget_score = match &m.forget_score_input {
                Some((pre, sigma)) => Some(forget_score(
                    pre,
                    retrained_reference,
                    *sigma,
                    splits.forget,
                    &cfg.forget_score,
                    cfg.fs_seed,
                )?),
                None => None,
            };
            Ok(MetricsReport {
                model: m.name.clone(),
                acc_train: model::accuracy(th, splits.train)?,
                acc_test: model::accuracy(th, splits.test)?,
                acc_retain: model::accuracy(th, splits.retain)?,
                acc_forget: model::accuracy(th, splits.forget)?,
                mia: mia_score(th, splits.forget, splits.test, &cfg.mia)?,
                relearn_time: relearn_time(th, splits.train, splits.forget, target, &cfg.relearn, k)?,
                forget_score,
                seeds: seeds.clone(),
            })
        })
        .collect()
}

/// `%.6g`-style formatting.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        let (mant, e) = s.split_once('e').expect("scientific format has an exponent");
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        let e: i32 = e.parse().expect("exponent is an integer");
        format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    }
}

pub const METRICS_HEADER: [&str; 8] = ["model", "acc_train", "acc_test", "acc_retain", "acc_forget", "mia", "rt", "fs"];

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Numerical(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Numerical(format!("{}: {e}", path.display()));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            fmt_sig6(r.acc_train),
            fmt_sig6(r.acc_test),
            fmt_sig6(r.acc_retain),
            fmt_sig6(r.acc_forget),
            fmt_sig6(r.mia),
            r.relearn_time.to_string(),
            r.forget_score.map(fmt_sig6).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, select_forget, ForgetMode, ForgetSpec, SyntheticConfig};
    use crate::model::tests::random_params;
    use crate::model::TrainConfig;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn normal_vec(n: usize, shift: f64, s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s);
        (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal).abs()).collect()
    }

    #[test]
    fn mia_null_and_shift() {
        let a = normal_vec(1000, 0.0, 1);
        let b = normal_vec(1000, 0.0, 2);
        let s = mia_from_losses(&a, &b, &MiaConfig::default()).unwrap();
        assert!((s - 0.5).abs() <= 0.04, "{s}");
        let shifted: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        assert!(mia_from_losses(&shifted, &b, &MiaConfig::default()).unwrap() > 0.95);
    }

    #[test]
    fn mia_null_calibration_over_trials() {
        let trials: Vec<f64> = (0..50)
            .map(|t| {
                let pool = normal_vec(600, 0.0, 100 + t);
                let cfg = MiaConfig {
                    folds: 5,
                    balance_seed: t,
                };
                mia_from_losses(&pool[..300], &pool[300..], &cfg).unwrap()
            })
            .collect();
        let mean = trials.iter().sum::<f64>() / 50.0;
        assert!((0.48..=0.52).contains(&mean), "{mean}");
    }

    #[test]
    fn mia_exchangeable_model_split() {
        let cfg = SyntheticConfig {
            dim: 5,
            n_source: 2000,
            n_surrogate: 1,
            ..SyntheticConfig::default()
        };
        let (pool, _) = gen_synthetic(&cfg).unwrap();
        let th = random_params(2, 5, 1.0, 3);
        let f = pool.subset(&(0..1000).collect::<Vec<_>>()).unwrap();
        let t = pool.subset(&(1000..2000).collect::<Vec<_>>()).unwrap();
        let s = mia_score(&th, &f, &t, &MiaConfig::default()).unwrap();
        assert!((s - 0.5).abs() <= 0.04, "{s}");
    }

    #[test]
    fn mia_rejects_tiny_sets() {
        assert!(mia_from_losses(&[1.0, 2.0], &[1.0, 2.0, 3.0], &MiaConfig::default()).is_err());
        let cfg = MiaConfig {
            folds: 1,
            balance_seed: 0,
        };
        assert!(mia_from_losses(&[1.0; 10], &[1.0; 10], &cfg).is_err());
    }

    fn instance() -> (Dataset, Dataset, ModelParams) {
        let cfg = SyntheticConfig {
            dim: 5,
            n_source: 1000,
            n_surrogate: 1,
            ..SyntheticConfig::default()
        };
        let (src, _) = gen_synthetic(&cfg).unwrap();
        let split = select_forget(
            &src,
            &ForgetSpec {
                mode: ForgetMode::RandomFraction { ratio: 0.1 },
                seed: 1,
            },
        )
        .unwrap();
        let th = model::train(&src, &LossConstants::default(), &TrainConfig::default()).unwrap();
        (src, split.forget, th)
    }

    #[test]
    fn relearn_is_zero_for_original() {
        let (src, forget, th) = instance();
        let target = model::accuracy(&th, &forget).unwrap();
        let rt = relearn_time(&th, &src, &forget, target, &RelearnConfig::default(), &LossConstants::default()).unwrap();
        assert_eq!(rt, RelearnTime { iterations: 0, reached: true });
        assert!(relearn_time(&th, &src, &forget, 0.0, &RelearnConfig::default(), &LossConstants::default()).is_err());
    }

    #[test]
    fn relearn_from_far_start_takes_longer() {
        let (src, forget, th) = instance();
        let k = LossConstants::default();
        let target = model::accuracy(&th, &forget).unwrap();
        let far = ModelParams::from_augmented(-th.augmented() * 3.0).unwrap();
        let near = th.offset(&(th.flatten() * -0.05)).unwrap();
        let cfg = RelearnConfig::default();
        let rt_far = relearn_time(&far, &src, &forget, target, &cfg, &k).unwrap();
        let rt_near = relearn_time(&near, &src, &forget, target, &cfg, &k).unwrap();
        assert!(rt_far.iterations > rt_near.iterations, "{rt_far:?} {rt_near:?}");
    }

    #[test]
    fn relearn_cap_marker() {
        let (src, forget, th) = instance();
        let far = ModelParams::from_augmented(-th.augmented() * 3.0).unwrap();
        let cfg = RelearnConfig {
            cap: 2,
            ..RelearnConfig::default()
        };
        let rt = relearn_time(&far, &src, &forget, 1.0, &cfg, &LossConstants::default()).unwrap();
        assert_eq!(rt.to_string(), "2+");
    }

    #[test]
    fn relearn_coarse_monotone_in_learning_rate() {
        let (src, forget, th) = instance();
        let k = LossConstants::default();
        let target = model::accuracy(&th, &forget).unwrap();
        let start = ModelParams::from_augmented(-th.augmented() * 0.5).unwrap();
        let rts: Vec<usize> = [0.05, 0.1, 0.2]
            .iter()
            .map(|&lr| {
                let cfg = RelearnConfig {
                    learning_rate: lr,
                    ..RelearnConfig::default()
                };
                relearn_time(&start, &src, &forget, target, &cfg, &k).unwrap().iterations
            })
            .collect();
        assert!(rts.windows(2).all(|w| w[1] <= w[0]), "{rts:?}");
    }

    #[test]
    fn clopper_pearson_values() {
        // Zero successes has the closed form 1 − α^{1/n}.
        let u = clopper_pearson_upper(0, 64, 0.95);
        assert!((u - (1.0 - 0.05f64.powf(1.0 / 64.0))).abs() < 1e-12);
        assert_eq!(clopper_pearson_upper(64, 64, 0.95), 1.0);
        // n − 1 successes: P(Bin ≤ n−1) = 1 − p^n.
        let u = clopper_pearson_upper(9, 10, 0.9);
        assert!((u - 0.9f64.powf(0.1)).abs() < 1e-12);
        let table: Vec<f64> = (0..=64).map(|x| clopper_pearson_upper(x, 64, 0.95)).collect();
        assert!(table.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn max_epsilon_values() {
        let cp = ForgetScoreConfig::default();
        let r0 = 1.0 - 0.05f64.powf(1.0 / 64.0);
        assert!((cp.max_epsilon() - ((1.0 - r0) / r0).ln()).abs() < 1e-12);
        let add_one = ForgetScoreConfig {
            smoothing: Smoothing::AddOne,
            ..ForgetScoreConfig::default()
        };
        assert!((add_one.max_epsilon() - 65f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_models_score_high() {
        let (_, forget, th) = instance();
        let fs = forget_score(&th, &th, 0.05, &forget, &ForgetScoreConfig::default(), 3).unwrap();
        assert!(fs >= 0.8, "{fs}");
    }

    #[test]
    fn point_masses_give_minimal_score() {
        let (_, forget, th) = instance();
        let other = th.offset(&(th.flatten() * 0.5)).unwrap();
        let cfg = ForgetScoreConfig::default();
        let fs = forget_score(&th, &other, 0.0, &forget, &cfg, 3).unwrap();
        let floor = (-cfg.max_epsilon()).exp();
        assert!((fs - floor).abs() < 1e-12, "{fs} vs {floor}");
    }

    #[test]
    fn forget_score_rejects_bad_input() {
        let (_, forget, th) = instance();
        let cfg = ForgetScoreConfig {
            draws_per_side: 1,
            ..ForgetScoreConfig::default()
        };
        assert!(forget_score(&th, &th, 0.1, &forget, &cfg, 0).is_err());
        assert!(forget_score(&th, &th, -0.1, &forget, &ForgetScoreConfig::default(), 0).is_err());
    }

    #[test]
    fn forget_score_shift_invariant() {
        let cfg = ForgetScoreConfig::default();
        let mut rng = seed::rng(5);
        let dyadic = |rng: &mut seed::Rng| (rng.random_range(0..4096) as f64) / 1024.0;
        let u = DMatrix::from_fn(64, 30, |_, _| dyadic(&mut rng));
        let r = DMatrix::from_fn(64, 30, |_, j| dyadic(&mut rng) + (j % 3) as f64 * 0.25);
        let a = forget_score_from_stats(&u, &r, &cfg).unwrap();
        let b = forget_score_from_stats(&u.add_scalar(8.0), &r.add_scalar(8.0), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forget_score_monotone_along_a_line() {
        let (_, forget, th) = instance();
        let cfg = ForgetScoreConfig::default();
        let dir = random_params(2, 5, 1.0, 8).flatten();
        let dir = &dir / dir.norm();
        let quantum = (-cfg.max_epsilon()).exp();
        let scores: Vec<f64> = [0.0, 0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&t| {
                let u = th.offset(&(&dir * t)).unwrap();
                forget_score(&u, &th, 0.05, &forget, &cfg, 21).unwrap()
            })
            .collect();
        for w in scores.windows(2) {
            assert!(w[1] <= w[0] + quantum, "{scores:?}");
        }
    }

    #[test]
    fn evaluate_all_rows_and_csv() {
        let (src, forget, th) = instance();
        let (retain_idx, _): (Vec<usize>, Vec<usize>) = (0..src.len()).partition(|&i| i % 10 != 0);
        let retain = src.subset(&retain_idx).unwrap();
        let test = src.subset(&(0..100).collect::<Vec<_>>()).unwrap();
        let splits = EvalSplits {
            train: &src,
            test: &test,
            retain: &retain,
            forget: &forget,
        };
        let models = vec![
            EvalModel {
                name: "original".into(),
                released: th.clone(),
                forget_score_input: None,
            },
            EvalModel {
                name: "unlearn_minus".into(),
                released: th.clone(),
                forget_score_input: Some((th.clone(), 0.01)),
            },
        ];
        let reports = evaluate_all(&th, &th, &models, &splits, &EvalConfig::default(), &LossConstants::default()).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].relearn_time.iterations, 0);
        for r in &reports {
            for v in [r.acc_train, r.acc_test, r.acc_retain, r.acc_forget, r.mia] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics_csv(&p, &reports).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("model,acc_train,acc_test,acc_retain,acc_forget,mia,rt,fs\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.772345678), "0.772346");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(2.6722e-6), "2.6722e-06");
        assert_eq!(fmt_sig6(123456789.0), "1.23457e+08");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(-0.5), "-0.5");
    }
}
