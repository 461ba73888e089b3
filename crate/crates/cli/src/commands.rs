use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use unlearn_core::data::{
    dirichlet_split, gen_synthetic, load_dataset, load_dataset_with_classes, load_matrix, meta_path, save_dataset,
    save_matrix, select_forget, split_holdout, surrogate_covariance, Dataset, DatasetMeta, DirichletSplitConfig,
    ForgetSpec, SyntheticConfig,
};
use unlearn_core::distance::{bh_tv_bound, gaussian_kl, kl_total, KlEstimate};
use unlearn_core::distance::dv::DvNetConfig;
use unlearn_core::error::{Error, Result};
use unlearn_core::eval::{evaluate_all, write_metrics_csv, EvalConfig, EvalModel, EvalSplits, MiaConfig};
use unlearn_core::experiment::{
    certificate_path, estimate_kl, run_experiment, save_released, write_json, CellFailure, ExperimentConfig, KlChoice,
    RunManifest,
};
use unlearn_core::model::{self, load_model, measure_constants, save_model, LossConstants, ModelParams};
use unlearn_core::sampler::{default_init_bounds, sgld_sample, EnergyModel, SgldConfig};
use unlearn_core::seed::derive_seed;
use unlearn_core::unlearn::{unlearn_exact, unlearn_surrogate, Divergence, MechanismConfig, UnlearnCertificate};

use crate::config::{
    EvalVerbConfig, GenConfig, KlVerbConfig, Mechanism, SampleConfig, SplitConfig, SplitMethod, TrainVerbConfig,
    UnlearnVerbConfig,
};

/// Output directory, manifest and stage clock of one invocation.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    timings: BTreeMap<String, f64>,
    clock: Instant,
}

impl Run {
    pub fn new<C: Serialize>(command: &str, dir: &Path, config: &C, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut manifest = RunManifest::new(command, serde_json::to_value(config)?);
        if let Some(s) = seed {
            manifest.seeds.insert("master".to_owned(), s);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            timings: BTreeMap::new(),
            clock: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn seed(&mut self, stage: &str, value: u64) -> u64 {
        self.manifest.seeds.insert(stage.to_owned(), value);
        value
    }

    /// Marks `name` as written; a dataset also brings its sidecar.
    fn wrote(&mut self, name: &str) {
        let p = self.path(name);
        self.manifest.record(&self.dir, &p);
        let meta = meta_path(&p);
        if meta.exists() {
            self.manifest.record(&self.dir, &meta);
        }
    }

    fn lap(&mut self, stage: &str) {
        self.timings.insert(stage.to_owned(), self.clock.elapsed().as_secs_f64());
        self.clock = Instant::now();
    }

    pub fn finish(self) -> Result<PathBuf> {
        self.manifest.finish(&self.dir, &self.timings)
    }
}

fn required<'a, T>(v: &'a Option<T>, field: &str, context: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{context} needs `{field}` in the config")))
}

fn check_lambda(path: &Path, lambda: f64, k: &LossConstants) -> Result<()> {
    if lambda != k.lambda {
        return Err(Error::InvalidArgument(format!(
            "{} was trained with lambda = {lambda} but the config sets lambda = {}",
            path.display(),
            k.lambda
        )));
    }
    Ok(())
}

fn generator_meta(role: &str, cfg: &GenConfig) -> serde_json::Value {
    json!({"kind": "synthetic_gaussian", "role": role, "dim": cfg.dim, "zeta": cfg.zeta})
}

/// Closed-form KL for a surrogate file written by `gen`.
fn oracle_from_meta(surrogate: &Path) -> Result<Option<f64>> {
    let mp = meta_path(surrogate);
    if !mp.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::Io { path: mp.clone(), source: e })?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    let Some(g) = meta.generator else { return Ok(None) };
    if g.get("kind").and_then(|v| v.as_str()) != Some("synthetic_gaussian")
        || g.get("role").and_then(|v| v.as_str()) != Some("surrogate")
    {
        return Ok(None);
    }
    let zeta = g.get("zeta").and_then(|v| v.as_f64());
    match zeta {
        Some(z) => {
            let d = meta.d;
            Ok(Some(gaussian_kl(&surrogate_covariance(d, z), &nalgebra::DMatrix::identity(d, d))?))
        }
        None => Ok(None),
    }
}

pub fn gen(cfg: &GenConfig, seed: u64, run: &mut Run) -> Result<()> {
    let syn = SyntheticConfig {
        dim: cfg.dim,
        n_source: cfg.n_source + cfg.n_test,
        n_surrogate: cfg.n_surrogate,
        zeta: cfg.zeta,
        teacher_seed: run.seed("teacher", derive_seed(seed, "teacher", 0)),
        data_seed: run.seed("data", derive_seed(seed, "data", 0)),
        label_flip_prob: cfg.label_flip_prob,
    };
    let (pool, surrogate) = gen_synthetic(&syn)?;
    let source = if cfg.n_test > 0 {
        let (source, test) = split_holdout(&pool, cfg.n_test, run.seed("test-split", derive_seed(seed, "test-split", 0)))?;
        save_dataset(&test, &run.path("test.csv"), Some(generator_meta("test", cfg)))?;
        run.wrote("test.csv");
        source
    } else {
        pool
    };
    save_dataset(&source, &run.path("source.csv"), Some(generator_meta("source", cfg)))?;
    save_dataset(&surrogate, &run.path("surrogate.csv"), Some(generator_meta("surrogate", cfg)))?;
    run.wrote("source.csv");
    run.wrote("surrogate.csv");
    run.lap("gen");
    Ok(())
}

pub fn split(cfg: &SplitConfig, seed: u64, run: &mut Run) -> Result<()> {
    let ds = match cfg.class_count {
        Some(c) => load_dataset_with_classes(&cfg.input, Some(c))?,
        None => load_dataset(&cfg.input)?,
    };
    let files: Vec<(&str, Dataset)> = match cfg.method {
        SplitMethod::Forget(mode) => {
            let s = select_forget(
                &ds,
                &ForgetSpec {
                    mode,
                    seed: run.seed("forget", derive_seed(seed, "forget", 0)),
                },
            )?;
            write_json(&run.path("forget_indices.json"), &s.forget_indices)?;
            run.wrote("forget_indices.json");
            vec![("retain.csv", s.retain), ("forget.csv", s.forget)]
        }
        SplitMethod::Dirichlet { xi } => {
            let s = dirichlet_split(
                &ds,
                &DirichletSplitConfig {
                    xi,
                    seed: run.seed("dirichlet", derive_seed(seed, "dirichlet", 0)),
                },
            )?;
            write_json(
                &run.path("dirichlet.json"),
                &json!({"source_fractions": s.source_fractions, "source_indices": s.source_indices}),
            )?;
            run.wrote("dirichlet.json");
            vec![("source.csv", s.source), ("surrogate.csv", s.surrogate)]
        }
        SplitMethod::Holdout { count } => {
            let (train, test) = split_holdout(&ds, count, run.seed("test-split", derive_seed(seed, "test-split", 0)))?;
            vec![("train.csv", train), ("test.csv", test)]
        }
    };
    for (name, d) in &files {
        save_dataset(d, &run.path(name), None)?;
        run.wrote(name);
    }
    run.lap("split");
    Ok(())
}

/// Shared by `train` and `retrain`; writes `<name>.json` and a training report.
pub fn train(cfg: &TrainVerbConfig, name: &str, run: &mut Run) -> Result<()> {
    let ds = load_dataset(&cfg.data)?;
    let init = ModelParams::zeros(ds.class_count(), ds.dim());
    let report = model::train_from(&ds, &cfg.constants, &cfg.train, &init)?;
    run.lap("train");
    let measured = measure_constants(&ds, &report.params, &cfg.constants)?;
    run.lap("measure");
    let model_file = format!("{name}.json");
    save_model(&report.params, cfg.constants.lambda, &run.path(&model_file))?;
    run.wrote(&model_file);
    let report_file = format!("{name}_report.json");
    write_json(
        &run.path(&report_file),
        &json!({
            "newton_iterations": report.iterations,
            "grad_norm": report.grad_norm,
            "train_accuracy": model::accuracy(&report.params, &ds)?,
            "configured": cfg.constants,
            "measured": measured,
        }),
    )?;
    run.wrote(&report_file);
    Ok(())
}

fn surrogate_model(
    path: Option<&PathBuf>,
    surrogate: &Dataset,
    k: &LossConstants,
    train: &unlearn_core::model::TrainConfig,
) -> Result<ModelParams> {
    match path {
        Some(p) => {
            let (th, lambda) = load_model(p)?;
            check_lambda(p, lambda, k)?;
            Ok(th)
        }
        None => model::train(surrogate, k, train),
    }
}

#[allow(clippy::too_many_arguments)]
fn kl_with_samples(
    choice: KlChoice,
    theta_star: &ModelParams,
    surrogate_path: &Path,
    surrogate: &Dataset,
    theta_s: impl FnOnce() -> Result<ModelParams>,
    samples: Option<&Path>,
    sgld: &SgldConfig,
    dv: &DvNetConfig,
) -> Result<(KlEstimate, Option<nalgebra::DMatrix<f64>>)> {
    match choice {
        KlChoice::DvPipeline => {
            let th_s = theta_s()?;
            match samples {
                Some(p) => Ok((kl_total(theta_star, &th_s, surrogate, &load_matrix(p)?, dv)?, None)),
                None => estimate_kl(choice, theta_star, &th_s, surrogate, None, sgld, dv),
            }
        }
        KlChoice::OracleGaussian => {
            let oracle = oracle_from_meta(surrogate_path)?.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "oracle KL needs a surrogate written by `gen`; {} has no Gaussian generator metadata",
                    surrogate_path.display()
                ))
            })?;
            estimate_kl(choice, theta_star, theta_star, surrogate, Some(oracle), sgld, dv)
        }
        KlChoice::Fixed(_) => estimate_kl(choice, theta_star, theta_star, surrogate, None, sgld, dv),
    }
}

fn write_kl(run: &mut Run, kl: &KlEstimate, samples: Option<&nalgebra::DMatrix<f64>>) -> Result<()> {
    write_json(&run.path("kl.json"), &json!({"estimate": kl, "tv_bound": bh_tv_bound(kl.total)?}))?;
    run.wrote("kl.json");
    if let Some(s) = samples {
        save_matrix(s, &run.path("sgld_samples.csv"))?;
        run.wrote("sgld_samples.csv");
    }
    Ok(())
}

pub fn unlearn(cfg: &UnlearnVerbConfig, seed: u64, run: &mut Run) -> Result<UnlearnCertificate> {
    let k = &cfg.constants;
    let (theta_star, lambda) = load_model(&cfg.model)?;
    check_lambda(&cfg.model, lambda, k)?;
    let forget = load_dataset(&cfg.forget)?;
    let mech = MechanismConfig {
        constants: *k,
        budget: cfg.budget,
        hessian_jitter: cfg.hessian_jitter,
    };
    let out = match cfg.mechanism {
        Mechanism::Exact => {
            let retain = load_dataset(required(&cfg.retain, "retain", "the exact mechanism")?)?;
            let noise = run.seed("noise-plus", derive_seed(seed, "noise-plus", 0));
            unlearn_exact(&theta_star, &retain, &forget, &mech, noise)?
        }
        Mechanism::Surrogate => {
            let sp = required(&cfg.surrogate, "surrogate", "the surrogate mechanism")?;
            let n = *required(&cfg.n_source, "n_source", "the surrogate mechanism")?;
            let surrogate = load_dataset(sp)?;
            let sgld = SgldConfig {
                seed: run.seed("sgld", derive_seed(seed, "sgld", 0)),
                ..cfg.sgld.clone()
            };
            let dv = DvNetConfig {
                seed: run.seed("dv", derive_seed(seed, "dv", 0)),
                ..cfg.dv.clone()
            };
            let (kl, samples) = kl_with_samples(
                cfg.kl_method,
                &theta_star,
                sp,
                &surrogate,
                || surrogate_model(cfg.surrogate_model.as_ref(), &surrogate, k, &cfg.train),
                None,
                &sgld,
                &dv,
            )?;
            run.lap("kl");
            write_kl(run, &kl, samples.as_ref())?;
            let noise = run.seed("noise-minus", derive_seed(seed, "noise-minus", 0));
            let mut out = unlearn_surrogate(&theta_star, &surrogate, &forget, n, &mech, Divergence::Kl(kl.total), noise)?;
            out.certificate.kl_estimate = Some(kl);
            out
        }
    };
    run.lap("unlearn");
    let cert = save_released(&out, lambda, &run.path("unlearned.json"))?;
    run.wrote("unlearned.json");
    run.manifest.record(&run.dir, &cert);
    if cfg.write_pre_noise {
        save_model(&out.theta_pre_noise, lambda, &run.path("unlearned_pre_noise.json"))?;
        run.wrote("unlearned_pre_noise.json");
    }
    Ok(out.certificate)
}

pub fn sample(cfg: &SampleConfig, seed: u64, run: &mut Run) -> Result<()> {
    let (theta, _) = load_model(&cfg.model)?;
    let fallback = cfg.reference.as_ref().map(|p| load_dataset(p)).transpose()?.map(|d| default_init_bounds(&d));
    let (low, high) = cfg
        .sgld
        .resolve_bounds(fallback.as_ref().map(|(l, h)| (l.as_slice(), h.as_slice())))?;
    let sgld = SgldConfig {
        seed: run.seed("sgld", derive_seed(seed, "sgld", 0)),
        ..cfg.sgld.clone()
    };
    let samples = sgld_sample(&EnergyModel::new(theta), &sgld, &low, &high)?;
    run.lap("sample");
    save_matrix(&samples, &run.path("samples.csv"))?;
    run.wrote("samples.csv");
    Ok(())
}

pub fn kl(cfg: &KlVerbConfig, seed: u64, run: &mut Run) -> Result<KlEstimate> {
    let k = &cfg.constants;
    let (theta_star, lambda) = load_model(&cfg.model)?;
    check_lambda(&cfg.model, lambda, k)?;
    let surrogate = load_dataset(&cfg.surrogate)?;
    let sgld = SgldConfig {
        seed: run.seed("sgld", derive_seed(seed, "sgld", 0)),
        ..cfg.sgld.clone()
    };
    let dv = DvNetConfig {
        seed: run.seed("dv", derive_seed(seed, "dv", 0)),
        ..cfg.dv.clone()
    };
    let (est, samples) = kl_with_samples(
        cfg.kl_method,
        &theta_star,
        &cfg.surrogate,
        &surrogate,
        || surrogate_model(cfg.surrogate_model.as_ref(), &surrogate, k, &cfg.train),
        cfg.samples.as_deref(),
        &sgld,
        &dv,
    )?;
    run.lap("kl");
    write_kl(run, &est, samples.as_ref())?;
    Ok(est)
}

fn load_checked(path: &Path, k: &LossConstants) -> Result<ModelParams> {
    let (th, lambda) = load_model(path)?;
    check_lambda(path, lambda, k)?;
    Ok(th)
}

pub fn eval(cfg: &EvalVerbConfig, seed: u64, run: &mut Run) -> Result<()> {
    let k = &cfg.constants;
    let original = load_checked(&cfg.original, k)?;
    let retrained = load_checked(&cfg.retrain, k)?;
    let mut models = vec![
        EvalModel {
            name: "original".into(),
            released: original.clone(),
            forget_score_input: None,
        },
        EvalModel {
            name: "retrain".into(),
            released: retrained.clone(),
            forget_score_input: None,
        },
    ];
    for e in &cfg.models {
        let forget_score_input = match &e.pre_noise {
            Some(pre) => {
                let cp = certificate_path(&e.path);
                let text = fs::read_to_string(&cp).map_err(|err| Error::Io { path: cp.clone(), source: err })?;
                let cert: UnlearnCertificate = serde_json::from_str(&text)?;
                Some((load_checked(pre, k)?, cert.sigma))
            }
            None => None,
        };
        models.push(EvalModel {
            name: e.name.clone(),
            released: load_checked(&e.path, k)?,
            forget_score_input,
        });
    }
    let (train, test, retain, forget) = (
        load_dataset(&cfg.train)?,
        load_dataset(&cfg.test)?,
        load_dataset(&cfg.retain)?,
        load_dataset(&cfg.forget)?,
    );
    let eval_cfg = EvalConfig {
        mia: MiaConfig {
            balance_seed: run.seed("mia", derive_seed(seed, "mia", 0)),
            ..cfg.eval.mia
        },
        fs_seed: run.seed("forget-score", derive_seed(seed, "forget-score", 0)),
        ..cfg.eval.clone()
    };
    let splits = EvalSplits {
        train: &train,
        test: &test,
        retain: &retain,
        forget: &forget,
    };
    let reports = evaluate_all(&original, &retrained, &models, &splits, &eval_cfg, k)?;
    run.lap("eval");
    write_metrics_csv(&run.path("metrics.csv"), &reports)?;
    run.wrote("metrics.csv");
    Ok(())
}

/// Runs the sweep; the manifest is written by the harness itself.
pub fn experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<(PathBuf, Vec<CellFailure>)> {
    let out = run_experiment(cfg, dir)?;
    Ok((out.manifest_path, out.failures))
}
