//! Sweep harness: one cell trains the original, surrogate and retrained models,
//! runs both mechanisms, estimates the distribution gap and scores everything.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{
    dirichlet_split, gen_synthetic, load_dataset_with_classes, save_matrix, select_forget, split_holdout,
    surrogate_covariance, Dataset, DirichletSplitConfig, ForgetMode, ForgetSpec, SyntheticConfig,
};
use crate::distance::{gaussian_kl, kl_total, DvNetConfig, KlEstimate, KlMethod};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_all, fmt_sig6, forget_score, write_metrics_csv, EvalConfig, EvalModel, EvalSplits, MetricsReport,
};
use crate::model::{self, save_model, LossConstants, ModelParams, TrainConfig};
use crate::sampler::{default_init_bounds, sgld_sample, EnergyModel, SgldConfig};
use crate::seed::derive_seed;
use crate::unlearn::{unlearn_exact, unlearn_surrogate, CertBudget, Divergence, MechanismConfig, UnlearnOutput};

/// Source of the divergence fed to the surrogate bound.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum KlChoice {
    /// Closed-form Gaussian KL; synthetic data only.
    OracleGaussian,
    /// Conditional term plus a DV estimate against SGLD samples of the source model.
    #[default]
    DvPipeline,
    Fixed(f64),
}

impl FromStr for KlChoice {
    type Err = Error;

    /// `oracle`, `dv` or `fixed:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" | "oracle_gaussian" => Ok(Self::OracleGaussian),
            "dv" | "dv_pipeline" => Ok(Self::DvPipeline),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| Error::invalid(format!("unknown KL method {s:?}; use oracle, dv or fixed:<value>")))?;
                let v: f64 = v
                    .parse()
                    .map_err(|_| Error::invalid(format!("fixed KL value {v:?} is not a number")))?;
                KlEstimate::fixed(v)?;
                Ok(Self::Fixed(v))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum ExperimentKind {
    SyntheticZetaSweep,
    DirichletSweep,
    SingleRun,
}

/// Synthetic population sizes; seeds come from the master seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SyntheticDataConfig {
    pub dim: usize,
    pub n_source: usize,
    pub n_surrogate: usize,
    /// Rows generated alongside the source and held out for test accuracy and MIA.
    pub n_test: usize,
    pub label_flip_prob: f64,
    /// Surrogate correlation for `single_run`.
    pub zeta: f64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            n_source: 15000,
            n_surrogate: 15000,
            n_test: 3000,
            label_flip_prob: 0.15,
            zeta: 0.02,
        }
    }
}

/// Precomputed embeddings for the Dirichlet sweep.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct EmbeddingSource {
    pub path: PathBuf,
    #[serde(default)]
    pub class_count: Option<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

pub const DEFAULT_ZETAS: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.1];
pub const DEFAULT_XIS: [f64; 3] = [13.0, 36.0, 100.0];

/// Full experiment description. Seed fields inside `sgld`, `dv` and `eval`
/// are replaced by values derived from `master_seed`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub data: SyntheticDataConfig,
    pub zetas: Vec<f64>,
    pub embeddings: Option<EmbeddingSource>,
    pub xis: Vec<f64>,
    pub forget: ForgetMode,
    pub constants: LossConstants,
    pub budget: CertBudget,
    pub hessian_jitter: f64,
    pub train: TrainConfig,
    pub kl_method: KlChoice,
    pub sgld: SgldConfig,
    pub dv: DvNetConfig,
    pub eval: EvalConfig,
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::SyntheticZetaSweep,
            data: SyntheticDataConfig::default(),
            zetas: DEFAULT_ZETAS.to_vec(),
            embeddings: None,
            xis: DEFAULT_XIS.to_vec(),
            forget: ForgetMode::RandomFraction { ratio: 0.1 },
            constants: LossConstants::default(),
            budget: CertBudget::default(),
            hessian_jitter: 0.0,
            train: TrainConfig::default(),
            kl_method: KlChoice::default(),
            sgld: SgldConfig::default(),
            dv: DvNetConfig::default(),
            eval: EvalConfig::default(),
            master_seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        self.budget.validate()?;
        if !(self.hessian_jitter >= 0.0) {
            return Err(Error::invalid("hessian_jitter must be nonnegative"));
        }
        match self.kind {
            ExperimentKind::SyntheticZetaSweep if self.zetas.is_empty() => {
                return Err(Error::invalid("zeta sweep needs at least one zeta"));
            }
            ExperimentKind::DirichletSweep => {
                let src = self
                    .embeddings
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dirichlet_sweep needs an embeddings source"))?;
                if !src.path.exists() {
                    return Err(Error::io(
                        &src.path,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "embedding file does not exist"),
                    ));
                }
                if !(src.test_fraction > 0.0 && src.test_fraction < 1.0) {
                    return Err(Error::invalid("embeddings.test_fraction must lie in (0, 1)"));
                }
                if self.xis.is_empty() {
                    return Err(Error::invalid("dirichlet sweep needs at least one xi"));
                }
                if self.kl_method == KlChoice::OracleGaussian {
                    return Err(Error::invalid("oracle Gaussian KL is only defined for synthetic data"));
                }
            }
            _ => {}
        }
        if self.data.n_test == 0 && self.kind != ExperimentKind::DirichletSweep {
            return Err(Error::invalid("data.n_test must be positive"));
        }
        Ok(())
    }

    /// Name of the swept parameter.
    pub fn sweep_parameter(&self) -> &'static str {
        match self.kind {
            ExperimentKind::DirichletSweep => "xi",
            _ => "zeta",
        }
    }
}

/// Inputs of one sweep cell.
#[derive(Debug, Clone)]
pub struct CellData {
    pub label: String,
    pub param: f64,
    pub source: Dataset,
    pub test: Dataset,
    pub surrogate: Dataset,
    /// Closed-form `KL(Q‖P)` when the populations are known Gaussians.
    pub oracle_kl: Option<f64>,
}

fn synthetic_config(cfg: &ExperimentConfig, zeta: f64) -> SyntheticConfig {
    SyntheticConfig {
        dim: cfg.data.dim,
        n_source: cfg.data.n_source + cfg.data.n_test,
        n_surrogate: cfg.data.n_surrogate,
        zeta,
        teacher_seed: derive_seed(cfg.master_seed, "teacher", 0),
        data_seed: derive_seed(cfg.master_seed, "data", 0),
        label_flip_prob: cfg.data.label_flip_prob,
    }
}

fn synthetic_cell(cfg: &ExperimentConfig, zeta: f64) -> Result<CellData> {
    let (pool, surrogate) = gen_synthetic(&synthetic_config(cfg, zeta))?;
    let (source, test) = split_holdout(&pool, cfg.data.n_test, derive_seed(cfg.master_seed, "test-split", 0))?;
    let oracle = gaussian_kl(&surrogate_covariance(cfg.data.dim, zeta), &DMatrix::identity(cfg.data.dim, cfg.data.dim))?;
    Ok(CellData {
        label: format!("zeta={zeta}"),
        param: zeta,
        source,
        test,
        surrogate,
        oracle_kl: Some(oracle),
    })
}

/// Builds every cell of the configured experiment. Data draws are shared by
/// all cells so the sweep compares paired samples.
pub fn prepare_cells(cfg: &ExperimentConfig) -> Result<Vec<CellData>> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::SingleRun => Ok(vec![synthetic_cell(cfg, cfg.data.zeta)?]),
        ExperimentKind::SyntheticZetaSweep => cfg.zetas.iter().map(|&z| synthetic_cell(cfg, z)).collect(),
        ExperimentKind::DirichletSweep => {
            let src = cfg.embeddings.as_ref().expect("validated");
            let ds = load_dataset_with_classes(&src.path, src.class_count)?;
            let n_test = ((src.test_fraction * ds.len() as f64).round() as usize).max(1);
            let (pool, test) = split_holdout(&ds, n_test, derive_seed(cfg.master_seed, "test-split", 0))?;
            cfg.xis
                .iter()
                .map(|&xi| {
                    let split = dirichlet_split(
                        &pool,
                        &DirichletSplitConfig {
                            xi,
                            seed: derive_seed(cfg.master_seed, "dirichlet", 0),
                        },
                    )?;
                    Ok(CellData {
                        label: format!("xi={xi}"),
                        param: xi,
                        source: split.source,
                        test: test.clone(),
                        surrogate: split.surrogate,
                        oracle_kl: None,
                    })
                })
                .collect()
        }
    }
}

/// Divergence estimate and, for the DV pipeline, the SGLD samples it used.
pub fn estimate_kl(
    choice: KlChoice,
    theta_star: &ModelParams,
    theta_surrogate: &ModelParams,
    surrogate: &Dataset,
    oracle_kl: Option<f64>,
    sgld: &SgldConfig,
    dv: &DvNetConfig,
) -> Result<(KlEstimate, Option<DMatrix<f64>>)> {
    match choice {
        KlChoice::Fixed(v) => Ok((KlEstimate::fixed(v)?, None)),
        KlChoice::OracleGaussian => {
            let v = oracle_kl.ok_or_else(|| Error::invalid("oracle Gaussian KL is only defined for synthetic data"))?;
            Ok((KlEstimate::new(0.0, v, KlMethod::OracleGaussian), None))
        }
        KlChoice::DvPipeline => {
            let em = EnergyModel::new(theta_star.clone());
            let fallback = default_init_bounds(surrogate);
            let (low, high) = sgld.resolve_bounds(Some((&fallback.0, &fallback.1)))?;
            let samples = sgld_sample(&em, sgld, &low, &high)?;
            let est = kl_total(theta_star, theta_surrogate, surrogate, &samples, dv)?;
            Ok((est, Some(samples)))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ForgetScores {
    /// Exact-data update with its own noise.
    pub fs1_plus: f64,
    /// Surrogate update with its own noise.
    pub fs1_minus: f64,
    /// Surrogate update with the exact-data noise.
    pub fs2_minus: f64,
}

/// Everything one cell produces.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub label: String,
    pub param: f64,
    pub theta_star: ModelParams,
    pub theta_retrain: ModelParams,
    pub unlearn_plus: UnlearnOutput,
    pub unlearn_minus: UnlearnOutput,
    pub kl: KlEstimate,
    pub oracle_kl: Option<f64>,
    pub sgld_samples: Option<DMatrix<f64>>,
    pub metrics: Vec<MetricsReport>,
    pub forget_scores: ForgetScores,
    pub seeds: BTreeMap<String, u64>,
    pub timings: BTreeMap<String, f64>,
}

impl CellResult {
    pub fn sigma_plus(&self) -> f64 {
        self.unlearn_plus.certificate.sigma
    }

    pub fn sigma_minus(&self) -> f64 {
        self.unlearn_minus.certificate.sigma
    }

    pub fn metrics_for(&self, name: &str) -> Option<&MetricsReport> {
        self.metrics.iter().find(|r| r.model == name)
    }
}

/// Seeds for every random stage of cell `cell_index`.
pub fn cell_seeds(master: u64, cell_index: u64) -> BTreeMap<String, u64> {
    let mut s = BTreeMap::new();
    for stage in ["forget", "sgld", "dv", "mia", "forget-score"] {
        s.insert(stage.to_owned(), derive_seed(master, stage, 0));
    }
    for stage in ["noise-plus", "noise-minus"] {
        s.insert(stage.to_owned(), derive_seed(master, stage, cell_index));
    }
    s
}

/// Runs one cell end to end.
pub fn run_cell(cfg: &ExperimentConfig, cell: &CellData, cell_index: u64) -> Result<CellResult> {
    let seeds = cell_seeds(cfg.master_seed, cell_index);
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
        timings.insert(name.to_owned(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let k = &cfg.constants;

    let theta_star = model::train(&cell.source, k, &cfg.train)?;
    let theta_surrogate = model::train(&cell.surrogate, k, &cfg.train)?;
    let split = select_forget(
        &cell.source,
        &ForgetSpec {
            mode: cfg.forget,
            seed: seeds["forget"],
        },
    )?;
    let theta_retrain = model::train(&split.retain, k, &cfg.train)?;
    lap("train", &mut timings);

    let sgld = SgldConfig {
        seed: seeds["sgld"],
        ..cfg.sgld.clone()
    };
    let dv = DvNetConfig {
        seed: seeds["dv"],
        ..cfg.dv.clone()
    };
    let (kl, sgld_samples) = estimate_kl(
        cfg.kl_method,
        &theta_star,
        &theta_surrogate,
        &cell.surrogate,
        cell.oracle_kl,
        &sgld,
        &dv,
    )?;
    lap("kl", &mut timings);

    let mech = MechanismConfig {
        constants: *k,
        budget: cfg.budget,
        hessian_jitter: cfg.hessian_jitter,
    };
    let unlearn_plus = unlearn_exact(&theta_star, &split.retain, &split.forget, &mech, seeds["noise-plus"])?;
    let mut unlearn_minus = unlearn_surrogate(
        &theta_star,
        &cell.surrogate,
        &split.forget,
        cell.source.len(),
        &mech,
        Divergence::Kl(kl.total),
        seeds["noise-minus"],
    )?;
    unlearn_minus.certificate.kl_estimate = Some(kl);
    lap("unlearn", &mut timings);

    let eval_cfg = EvalConfig {
        mia: crate::eval::MiaConfig {
            balance_seed: seeds["mia"],
            ..cfg.eval.mia
        },
        fs_seed: seeds["forget-score"],
        ..cfg.eval.clone()
    };
    let named = |name: &str, th: &ModelParams| EvalModel {
        name: name.to_owned(),
        released: th.clone(),
        forget_score_input: None,
    };
    let models = vec![
        named("original", &theta_star),
        named("retrain", &theta_retrain),
        named("unlearn_plus", &unlearn_plus.theta_released),
        named("unlearn_minus", &unlearn_minus.theta_released),
        named("unlearn_plus_pre_noise", &unlearn_plus.theta_pre_noise),
        named("unlearn_minus_pre_noise", &unlearn_minus.theta_pre_noise),
    ];
    let splits = EvalSplits {
        train: &cell.source,
        test: &cell.test,
        retain: &split.retain,
        forget: &split.forget,
    };
    let mut metrics = evaluate_all(&theta_star, &theta_retrain, &models, &splits, &eval_cfg, k)?;
    let fs = |pre: &ModelParams, sigma: f64| {
        forget_score(pre, &theta_retrain, sigma, &split.forget, &eval_cfg.forget_score, eval_cfg.fs_seed)
    };
    let forget_scores = ForgetScores {
        fs1_plus: fs(&unlearn_plus.theta_pre_noise, unlearn_plus.certificate.sigma)?,
        fs1_minus: fs(&unlearn_minus.theta_pre_noise, unlearn_minus.certificate.sigma)?,
        fs2_minus: fs(&unlearn_minus.theta_pre_noise, unlearn_plus.certificate.sigma)?,
    };
    for r in &mut metrics {
        r.forget_score = match r.model.as_str() {
            "unlearn_plus" => Some(forget_scores.fs1_plus),
            "unlearn_minus" => Some(forget_scores.fs1_minus),
            _ => None,
        };
    }
    lap("eval", &mut timings);

    Ok(CellResult {
        label: cell.label.clone(),
        param: cell.param,
        theta_star,
        theta_retrain,
        unlearn_plus,
        unlearn_minus,
        kl,
        oracle_kl: cell.oracle_kl,
        sgld_samples,
        metrics,
        forget_scores,
        seeds,
        timings,
    })
}

/// Certificate file that accompanies a released model file.
pub fn certificate_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("cert.json")
}

/// Writes a released model together with its certificate; the certificate is
/// written first so a model file never appears alone.
pub fn save_released(out: &UnlearnOutput, lambda: f64, model_path: &Path) -> Result<PathBuf> {
    let cert = certificate_path(model_path);
    let text = serde_json::to_string_pretty(&out.certificate)?;
    fs::write(&cert, text + "\n").map_err(|e| Error::io(&cert, e))?;
    save_model(&out.theta_released, lambda, model_path)?;
    Ok(cert)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellFailure {
    pub cell: String,
    pub category: String,
    pub message: String,
}

/// Reproducibility record written at the end of every run. Wall-clock
/// timings go to a separate `timings.json` so this file is byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub failures: Vec<CellFailure>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            failures: Vec::new(),
        }
    }

    /// Records `path` (inside `run_dir`) as an artifact.
    pub fn record(&mut self, run_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(run_dir).unwrap_or(path);
        self.artifacts.push(rel.to_string_lossy().replace('\\', "/"));
    }

    /// Writes `timings.json` and then the manifest, after checking that every
    /// listed artifact exists.
    pub fn finish(mut self, run_dir: &Path, timings: &BTreeMap<String, f64>) -> Result<PathBuf> {
        let tp = run_dir.join(TIMINGS_FILE);
        write_json(&tp, timings)?;
        self.record(run_dir, &tp);
        self.artifacts.sort();
        self.artifacts.dedup();
        if let Some(missing) = self.artifacts.iter().find(|a| !run_dir.join(a).exists()) {
            return Err(Error::io(
                run_dir.join(missing),
                std::io::Error::new(std::io::ErrorKind::NotFound, "artifact listed in the manifest was not written"),
            ));
        }
        let mp = run_dir.join(MANIFEST_FILE);
        write_json(&mp, &self)?;
        Ok(mp)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Outcome of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub manifest_path: PathBuf,
}

impl ExperimentOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn cell_dir_name(index: usize, cell: &CellData) -> String {
    format!("cell-{index:02}-{}", cell.label.replace('=', "-"))
}

/// Runs every cell, writes per-cell artifacts and the sweep tables, then the
/// manifest. A failing cell is recorded and the sweep continues.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path) -> Result<ExperimentOutcome> {
    let cells = prepare_cells(cfg)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut manifest = RunManifest::new(
        "experiment",
        serde_json::to_value(cfg)?,
    );
    let mut timings = BTreeMap::new();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let dir = run_dir.join(cell_dir_name(i, cell));
        let outcome = run_cell(cfg, cell, i as u64).and_then(|r| {
            write_cell(cfg, &r, &dir, run_dir, &mut manifest)?;
            Ok(r)
        });
        match outcome {
            Ok(r) => {
                for (stage, s) in &r.seeds {
                    manifest.seeds.insert(format!("{}/{stage}", r.label), *s);
                }
                for (stage, t) in &r.timings {
                    timings.insert(format!("{}/{stage}", r.label), *t);
                }
                results.push(r);
            }
            Err(e) => failures.push(CellFailure {
                cell: cell.label.clone(),
                category: e.category().as_str().to_owned(),
                message: e.to_string(),
            }),
        }
    }
    for stage in ["teacher", "data", "test-split", "dirichlet"] {
        manifest.seeds.insert(stage.to_owned(), derive_seed(cfg.master_seed, stage, 0));
    }
    let p = cfg.sweep_parameter();
    for (name, text) in [
        (format!("sigma_vs_{p}.csv"), sigma_table(p, &results)),
        (format!("kl_vs_{p}.csv"), kl_table(p, &results)),
        ("forget_scores.csv".to_owned(), forget_score_table(p, &results)),
    ] {
        let path = run_dir.join(name);
        write_text(&path, &text)?;
        manifest.record(run_dir, &path);
    }
    let all_metrics: Vec<MetricsReport> = results
        .iter()
        .flat_map(|r| {
            r.metrics.iter().map(move |m| MetricsReport {
                model: format!("{}/{}", r.label, m.model),
                ..m.clone()
            })
        })
        .collect();
    let mp = run_dir.join("metrics.csv");
    write_metrics_csv(&mp, &all_metrics)?;
    manifest.record(run_dir, &mp);
    manifest.failures = failures.clone();
    let manifest_path = manifest.finish(run_dir, &timings)?;
    Ok(ExperimentOutcome {
        cells: results,
        failures,
        manifest_path,
    })
}

fn write_cell(cfg: &ExperimentConfig, r: &CellResult, dir: &Path, run_dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lambda = cfg.constants.lambda;
    for (name, th) in [("theta_star.json", &r.theta_star), ("retrain.json", &r.theta_retrain)] {
        let p = dir.join(name);
        save_model(th, lambda, &p)?;
        manifest.record(run_dir, &p);
    }
    for (name, out) in [("unlearn_plus.json", &r.unlearn_plus), ("unlearn_minus.json", &r.unlearn_minus)] {
        let p = dir.join(name);
        let c = save_released(out, lambda, &p)?;
        manifest.record(run_dir, &p);
        manifest.record(run_dir, &c);
    }
    if let Some(s) = &r.sgld_samples {
        let p = dir.join("sgld_samples.csv");
        save_matrix(s, &p)?;
        manifest.record(run_dir, &p);
    }
    let p = dir.join("metrics.csv");
    write_metrics_csv(&p, &r.metrics)?;
    manifest.record(run_dir, &p);
    Ok(())
}

fn sigma_table(param: &str, rows: &[CellResult]) -> String {
    let mut s = format!("{param},sigma_plus,sigma_minus,delta_plus,delta_minus\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_sig6(r.param),
            fmt_sig6(r.sigma_plus()),
            fmt_sig6(r.sigma_minus()),
            fmt_sig6(r.unlearn_plus.certificate.delta_bound),
            fmt_sig6(r.unlearn_minus.certificate.delta_bound)
        );
    }
    s
}

fn kl_table(param: &str, rows: &[CellResult]) -> String {
    let mut s = format!("{param},method,conditional,marginal,total,tv,oracle_kl\n");
    for r in rows {
        let method = serde_json::to_value(r.kl.method)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{method},{},{},{},{},{}",
            fmt_sig6(r.param),
            fmt_sig6(r.kl.conditional_term),
            fmt_sig6(r.kl.marginal_term),
            fmt_sig6(r.kl.total),
            fmt_sig6(r.unlearn_minus.certificate.tv_used),
            r.oracle_kl.map(fmt_sig6).unwrap_or_default()
        );
    }
    s
}

fn forget_score_table(param: &str, rows: &[CellResult]) -> String {
    let mut s = format!("{param},fs1_plus,fs1_minus,fs2_minus\n");
    for r in rows {
        let f = r.forget_scores;
        let _ = writeln!(
            s,
            "{},{},{},{}",
            fmt_sig6(r.param),
            fmt_sig6(f.fs1_plus),
            fmt_sig6(f.fs1_minus),
            fmt_sig6(f.fs2_minus)
        );
    }
    s
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of the ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("Spearman correlation needs two equal-length series of at least 2 values"));
    }
    let ra = DVector::from_vec(ranks(a));
    let rb = DVector::from_vec(ranks(b));
    let ca = ra.add_scalar(-ra.mean());
    let cb = rb.add_scalar(-rb.mean());
    let denom = ca.norm() * cb.norm();
    if denom == 0.0 {
        return Err(Error::invalid("Spearman correlation is undefined for a constant series"));
    }
    Ok(ca.dot(&cb) / denom)
}

/// Number of adjacent pairs with `v[i] <= v[i + 1]`.
pub fn nondecreasing_pairs(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[0] <= w[1]).count()
}
