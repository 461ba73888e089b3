//! Statistical distances between the surrogate and source distributions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::seed;

pub mod dv;

pub use dv::{dv_train, DvNet, DvNetConfig};

const SIMPLEX_TOL: f64 = 1e-9;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KlMethod {
    OracleGaussian,
    DvSampled,
    Fixed,
}

/// `KL(Q‖P)` split into a label-conditional part and a feature-marginal part.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct KlEstimate {
    pub conditional_term: f64,
    pub marginal_term: f64,
    pub total: f64,
    pub method: KlMethod,
}

impl KlEstimate {
    pub fn new(conditional_term: f64, marginal_term: f64, method: KlMethod) -> Self {
        Self {
            conditional_term,
            marginal_term,
            total: (conditional_term + marginal_term).max(0.0),
            method,
        }
    }

    pub fn fixed(value: f64) -> Result<Self> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::invalid(format!("fixed KL must be finite and nonnegative, got {value}")));
        }
        Ok(Self::new(0.0, value, KlMethod::Fixed))
    }
}

fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{name} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `½ Σ |p_i − q_i|`.
pub fn tv_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
            context: "TV operand lengths",
        });
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.min(1.0))
}

/// Bretagnolle–Huber: `TV ≤ sqrt(1 − e^{−KL})`.
pub fn bh_tv_bound(kl: f64) -> Result<f64> {
    if !(kl >= 0.0) {
        return Err(Error::invalid(format!("KL must be nonnegative, got {kl}")));
    }
    Ok((-(-kl).exp_m1()).sqrt())
}

/// KL between zero-mean Gaussians: `½ (tr(P⁻¹Q) − d + ln det P − ln det Q)`.
pub fn gaussian_kl(cov_q: &DMatrix<f64>, cov_p: &DMatrix<f64>) -> Result<f64> {
    let d = cov_q.nrows();
    if cov_q.shape() != (d, d) || cov_p.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: cov_p.nrows(),
            context: "covariance shapes",
        });
    }
    let not_spd = |name: &str| Error::invalid(format!("{name} covariance is not symmetric positive definite"));
    let cq = cov_q.clone().cholesky().ok_or_else(|| not_spd("Q"))?;
    let cp = cov_p.clone().cholesky().ok_or_else(|| not_spd("P"))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = cp.solve(cov_q).trace();
    let kl = 0.5 * (trace - d as f64 + logdet(&cp.l()) - logdet(&cq.l()));
    Ok(kl.max(0.0))
}

/// Mean over `ds` of `ln(f_a(x)_y / f_b(x)_y)`, probabilities floored at `1e-12`.
pub fn conditional_kl_term(theta_a: &ModelParams, theta_b: &ModelParams, ds: &Dataset) -> Result<f64> {
    if theta_a.dim() != theta_b.dim() || theta_a.class_count() != theta_b.class_count() {
        return Err(Error::DimensionMismatch {
            expected: theta_a.param_count(),
            actual: theta_b.param_count(),
            context: "conditional term model shapes",
        });
    }
    let pa = model::label_probabilities(ds, theta_a)?;
    let pb = model::label_probabilities(ds, theta_b)?;
    let sum: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(a, b)| a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln())
        .sum();
    Ok(sum / ds.len() as f64)
}

/// Conditional term on the surrogate plus a DV estimate between surrogate
/// features and samples drawn from the source model.
///
/// When the surrogate has more rows than `sampled_source`, the DV critic sees
/// a seeded subsample of equal size so both sides carry the same weight.
pub fn kl_total(
    theta_star: &ModelParams,
    theta_surrogate: &ModelParams,
    surrogate: &Dataset,
    sampled_source: &DMatrix<f64>,
    cfg: &DvNetConfig,
) -> Result<KlEstimate> {
    let conditional = conditional_kl_term(theta_surrogate, theta_star, surrogate)?;
    let k = sampled_source.nrows();
    let q = if surrogate.len() > k && k > 0 {
        let mut rng = seed::rng(seed::derive_seed(cfg.seed, "dv-subsample", 0));
        let mut idx = rand::seq::index::sample(&mut rng, surrogate.len(), k).into_vec();
        idx.sort_unstable();
        surrogate.features().select_rows(&idx)
    } else {
        surrogate.features().clone()
    };
    let (_, marginal) = dv_train(&q, sampled_source, cfg)?;
    Ok(KlEstimate::new(conditional, marginal, KlMethod::DvSampled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::surrogate_covariance;
    use crate::model::tests::{random_dataset, random_params};

    #[test]
    fn tv_cases() {
        assert_eq!(tv_discrete(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((tv_discrete(&[0.5, 0.5], &[0.75, 0.25]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(tv_discrete(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(tv_discrete(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(tv_discrete(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bh_cases() {
        assert_eq!(bh_tv_bound(0.0).unwrap(), 0.0);
        assert!((bh_tv_bound(2f64.ln()).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(bh_tv_bound(-0.1).is_err());
        assert_eq!(bh_tv_bound(f64::INFINITY).unwrap(), 1.0);
        let grid: Vec<f64> = (0..200).map(|i| bh_tv_bound(i as f64 * 0.05).unwrap()).collect();
        assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn gaussian_kl_cases() {
        let s = surrogate_covariance(3, 0.3);
        assert!(gaussian_kl(&s, &s).unwrap().abs() < 1e-14);
        assert_eq!(bh_tv_bound(gaussian_kl(&s, &s).unwrap()).unwrap(), 0.0);
        let q = surrogate_covariance(2, 0.1);
        let i = DMatrix::identity(2, 2);
        let kl = gaussian_kl(&q, &i).unwrap();
        assert!((kl - 0.5 * -(0.99f64.ln())).abs() < 1e-15);
        assert!((kl - 0.0050252).abs() < 5e-8);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 3.0]);
        let a = gaussian_kl(&q, &p).unwrap();
        let b = gaussian_kl(&(&q * 7.0), &(&p * 7.0)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(gaussian_kl(&(-&i), &i).is_err());
    }

    #[test]
    fn gaussian_kl_matches_eigen_formula() {
        // Independent route through eigenvalues of P^{-1/2} Q P^{-1/2} with P = I.
        let q = surrogate_covariance(4, 0.25);
        let eig = q.clone().symmetric_eigen().eigenvalues;
        let oracle = 0.5 * eig.iter().map(|l| l - 1.0 - l.ln()).sum::<f64>();
        assert!((gaussian_kl(&q, &DMatrix::identity(4, 4)).unwrap() - oracle).abs() < 1e-13);
    }

    #[test]
    fn conditional_term_cases() {
        let ds = random_dataset(30, 3, 2, 1);
        let th = random_params(2, 3, 1.0, 2);
        assert_eq!(conditional_kl_term(&th, &th, &ds).unwrap(), 0.0);

        // One sample at x = 0: only biases matter.
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let one = Dataset::new(x, vec![1], 2).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let a = ModelParams::from_augmented(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, logit(0.9)])).unwrap();
        let b = ModelParams::from_augmented(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, logit(0.45)])).unwrap();
        assert!((conditional_kl_term(&a, &b, &one).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conditional_term_duplicate_matches_loop() {
        let ds = random_dataset(25, 2, 3, 4);
        let a = random_params(3, 2, 1.0, 5);
        let b = random_params(3, 2, 1.0, 6);
        let dup = ds.concat(&ds.subset(&[3]).unwrap()).unwrap();
        let mut s = 0.0;
        for i in 0..dup.len() {
            let x = dup.row(i);
            let y = dup.labels()[i];
            let pa = model::predict_proba(&a, &x).unwrap()[y];
            let pb = model::predict_proba(&b, &x).unwrap()[y];
            s += pa.max(1e-12).ln() - pb.max(1e-12).ln();
        }
        let got = conditional_kl_term(&a, &b, &dup).unwrap();
        assert!((got - s / dup.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn estimate_clamps_total() {
        let e = KlEstimate::new(-0.3, 0.1, KlMethod::DvSampled);
        assert_eq!(e.total, 0.0);
        let e = KlEstimate::new(0.3, 0.1, KlMethod::DvSampled);
        assert!((e.total - 0.4).abs() < 1e-15);
        assert!(KlEstimate::fixed(-1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn conditional_term_antisymmetric(s in any::<u64>()) {
                let ds = random_dataset(20, 3, 3, s);
                let a = random_params(3, 3, 1.5, s ^ 1);
                let b = random_params(3, 3, 1.5, s ^ 2);
                let ab = conditional_kl_term(&a, &b, &ds).unwrap();
                let ba = conditional_kl_term(&b, &a, &ds).unwrap();
                prop_assert_eq!(ab, -ba);
            }

            #[test]
            fn total_is_nonnegative(c in -10.0f64..10.0, m in -10.0f64..10.0) {
                prop_assert!(KlEstimate::new(c, m, KlMethod::DvSampled).total >= 0.0);
            }

            #[test]
            fn gaussian_kl_nonnegative_and_monotone_in_zeta(d in 2usize..8, z1 in 0.0f64..0.9, dz in 0.001f64..0.09) {
                let i = DMatrix::identity(d, d);
                let a = gaussian_kl(&surrogate_covariance(d, z1), &i).unwrap();
                let b = gaussian_kl(&surrogate_covariance(d, z1 + dz), &i).unwrap();
                prop_assert!(a >= 0.0 && b > a);
            }
        }
    }
}
