//! Reproducible experiment runs: configuration, data sources, method
//! dispatch, report files and plot data.
//!
//! Every run derives its seed from the experiment seed with the tag `run`;
//! data generation, validation splits and the trainers derive their own
//! streams from that. A run directory contains `per_env.csv`, `summary.csv`
//! and `manifest.txt`; the manifest is itself a config that reproduces the run.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::baselines::{
    grid_search, train_erm, train_irm, train_lasso, train_ridge, train_wdrl, GdConfig,
    GridSearchSpec, SelectionMetric, IRM_GRID, SHRINKAGE_GRID, WDRL_LAMBDA_GRID,
};
use crate::config::Config;
use crate::cost::{empirical_radius, CovariateWeights};
use crate::datagen::{
    gen_anticausal, gen_selection_bias, toy_data, AntiCausalConfig, GeneratedData, NoiseParam,
    SelectionBiasConfig,
};
use crate::dataio::{
    load_csv, read_env_csv, split_environments, write_atomic, EnvSplit, NormalizationStats, TableSchema,
};
use crate::dataset::{pool, EnvDataset};
use crate::error::{Result, SalError, StageContext};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{LinearModel, LossKind, Task};
use crate::rng::derive_seed;
use crate::sal::{train_sal, SalHyperParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Sal,
    Erm,
    Lasso,
    Ridge,
    Wdrl,
    Irm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Erm,
        Method::Lasso,
        Method::Ridge,
        Method::Irm,
        Method::Wdrl,
        Method::Sal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sal => "SAL",
            Method::Erm => "ERM",
            Method::Lasso => "LASSO",
            Method::Ridge => "Ridge",
            Method::Wdrl => "WDRL",
            Method::Irm => "IRM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sal" => Ok(Method::Sal),
            "erm" => Ok(Method::Erm),
            "lasso" => Ok(Method::Lasso),
            "ridge" => Ok(Method::Ridge),
            "wdrl" => Ok(Method::Wdrl),
            "irm" => Ok(Method::Irm),
            other => Err(SalError::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the environments of one run come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Toy { test_n: usize },
    SelectionBias(SelectionBiasConfig),
    AntiCausal(AntiCausalConfig),
    /// Raw table split into environments; the first `train_count` are training.
    Csv {
        path: PathBuf,
        schema: PathBuf,
        env_column: String,
        split: EnvSplit,
        train_count: usize,
        normalize: bool,
    },
    /// Pre-split interchange files.
    EnvCsv { train: PathBuf, test: PathBuf },
}

/// A penalty strength that is either fixed or chosen on a validation split.
#[derive(Debug, Clone, PartialEq)]
pub enum Tuned {
    Fixed(f64),
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub data: DataSource,
    /// Training loss of the gradient baselines.
    pub loss: LossKind,
    /// Training loss of SAL and WDRL.
    pub robust_loss: LossKind,
    pub sal: SalHyperParams,
    pub gd: GdConfig,
    pub lasso: Tuned,
    pub ridge: Tuned,
    pub irm: Tuned,
    pub wdrl: Tuned,
    pub validation_fraction: f64,
    pub runs: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub const CONFIG_KEYS: &[&str] = &[
    "method", "data", "loss", "robust_loss", "runs", "seed", "out", "noise",
    "validation_fraction",
    "sal.outer_iters", "sal.theta_iters", "sal.w_iters", "sal.ascent_steps", "sal.step_x",
    "sal.step_theta", "sal.step_w", "sal.lambda", "sal.alpha", "sal.early_stop_tol",
    "sal.fit_intercept",
    "gd.step", "gd.max_iters", "gd.tol", "gd.fit_intercept",
    "lasso.lambda", "lasso.grid", "ridge.lambda", "ridge.grid", "irm.lambda", "irm.grid",
    "wdrl.lambda", "wdrl.grid",
    "toy.test_n",
    "selection.n", "selection.n_s", "selection.n_v", "selection.n_b", "selection.r",
    "selection.kappa", "selection.beta", "selection.classification", "selection.noise_sd",
    "selection.test_n", "selection.test_rs",
    "anticausal.n", "anticausal.n_s", "anticausal.n_v", "anticausal.beta",
    "anticausal.noise_sd", "anticausal.theta_v_scale", "anticausal.train_envs",
    "csv.path", "csv.schema", "csv.env_column", "csv.bins", "csv.categories",
    "csv.train_count", "csv.normalize",
    "envcsv.train", "envcsv.test",
    "sweep.lambdas", "grad_check.iters", "grad_check.directions", "grad_check.step_norm",
    "certify.lambda",
];

/// Hyperparameters that work on the bundled simulation regimes.
pub fn default_sal_hyper() -> SalHyperParams {
    SalHyperParams {
        outer_iters: 80,
        theta_iters: 10,
        w_iters: 1,
        ascent_steps: 100,
        step_x: 0.1,
        step_theta: 0.2,
        step_w: 2.0,
        lambda: 0.05,
        alpha: 1.0,
        ..SalHyperParams::default()
    }
}

fn tuned(cfg: &Config, prefix: &str, grid: &[f64]) -> Result<Tuned> {
    if let Some(v) = cfg.get::<f64>(&format!("{prefix}.lambda"))? {
        return Ok(Tuned::Fixed(v));
    }
    Ok(Tuned::Grid(
        cfg.get_list::<f64>(&format!("{prefix}.grid"))?
            .unwrap_or_else(|| grid.to_vec()),
    ))
}

fn need<'a>(cfg: &'a Config, key: &str) -> Result<&'a str> {
    cfg.get_str(key)
        .ok_or_else(|| SalError::Config(format!("missing `{key}`")))
}

impl ExperimentConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.check_known(CONFIG_KEYS, &["run."])?;
        let methods = match cfg.get_list::<String>("method")? {
            Some(list) => list.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?,
            None => vec![Method::Sal],
        };
        let noise = match cfg.get_str("noise").unwrap_or("sd") {
            "sd" => NoiseParam::StdDev,
            "variance" => NoiseParam::Variance,
            other => return Err(SalError::Config(format!("noise must be sd or variance, got `{other}`"))),
        };
        let data = match cfg.get_str("data").unwrap_or("toy") {
            "toy" => DataSource::Toy {
                test_n: cfg.get_or("toy.test_n", 1000)?,
            },
            "selection" => {
                let d = SelectionBiasConfig::default();
                DataSource::SelectionBias(SelectionBiasConfig {
                    n: cfg.get_or("selection.n", d.n)?,
                    n_s: cfg.get_or("selection.n_s", d.n_s)?,
                    n_v: cfg.get_or("selection.n_v", d.n_v)?,
                    n_b: cfg.get_or("selection.n_b", d.n_b)?,
                    r: cfg.get_or("selection.r", d.r)?,
                    kappa: cfg.get_or("selection.kappa", d.kappa)?,
                    beta: cfg.get_or("selection.beta", d.beta)?,
                    classification: cfg.get_or("selection.classification", d.classification)?,
                    noise_sd: cfg.get_or("selection.noise_sd", d.noise_sd)?,
                    test_n: cfg.get_or("selection.test_n", d.test_n)?,
                    test_rs: cfg.get_list("selection.test_rs")?.unwrap_or(d.test_rs),
                    noise,
                    ..d
                })
            }
            "anticausal" => {
                let n_s = cfg.get_or("anticausal.n_s", 5)?;
                let n_v = cfg.get_or("anticausal.n_v", 5)?;
                let d = AntiCausalConfig::new(n_s, n_v);
                DataSource::AntiCausal(AntiCausalConfig {
                    n_per_env: cfg.get_or("anticausal.n", d.n_per_env)?,
                    beta: cfg.get_or("anticausal.beta", d.beta)?,
                    noise_sd: cfg.get_or("anticausal.noise_sd", d.noise_sd)?,
                    theta_v_scale: cfg.get_or("anticausal.theta_v_scale", d.theta_v_scale)?,
                    n_train_envs: cfg.get_or("anticausal.train_envs", d.n_train_envs)?,
                    noise,
                    ..d
                })
            }
            "csv" => {
                let split = match (cfg.get_list::<f64>("csv.bins")?, cfg.get_list::<String>("csv.categories")?) {
                    (Some(b), None) => EnvSplit::Bins(b),
                    (None, Some(c)) => EnvSplit::Categories(c),
                    _ => {
                        return Err(SalError::Config(
                            "csv data needs exactly one of csv.bins and csv.categories".into(),
                        ))
                    }
                };
                DataSource::Csv {
                    path: need(cfg, "csv.path")?.into(),
                    schema: need(cfg, "csv.schema")?.into(),
                    env_column: need(cfg, "csv.env_column")?.to_string(),
                    split,
                    train_count: cfg.get("csv.train_count")?.ok_or_else(|| {
                        SalError::Config("missing `csv.train_count`".into())
                    })?,
                    normalize: cfg.get_or("csv.normalize", true)?,
                }
            }
            "envcsv" => DataSource::EnvCsv {
                train: need(cfg, "envcsv.train")?.into(),
                test: need(cfg, "envcsv.test")?.into(),
            },
            other => return Err(SalError::Config(format!("unknown data source `{other}`"))),
        };
        let classification = matches!(&data, DataSource::SelectionBias(c) if c.classification);
        let default_loss = if classification { LossKind::LogLoss } else { LossKind::Squared };
        let loss = match cfg.get_str("loss") {
            Some(s) => LossKind::parse(s)?,
            None => default_loss,
        };
        let robust_loss = match cfg.get_str("robust_loss") {
            Some(s) => LossKind::parse(s)?,
            None if classification => LossKind::LogLoss,
            None => LossKind::Absolute,
        };
        let h = default_sal_hyper();
        let sal = SalHyperParams {
            outer_iters: cfg.get_or("sal.outer_iters", h.outer_iters)?,
            theta_iters: cfg.get_or("sal.theta_iters", h.theta_iters)?,
            w_iters: cfg.get_or("sal.w_iters", h.w_iters)?,
            ascent_steps: cfg.get_or("sal.ascent_steps", h.ascent_steps)?,
            step_x: cfg.get_or("sal.step_x", h.step_x)?,
            step_theta: cfg.get_or("sal.step_theta", h.step_theta)?,
            step_w: cfg.get_or("sal.step_w", h.step_w)?,
            lambda: cfg.get_or("sal.lambda", h.lambda)?,
            alpha: cfg.get_or("sal.alpha", h.alpha)?,
            early_stop_tol: cfg.get_or("sal.early_stop_tol", h.early_stop_tol)?,
            fit_intercept: cfg.get_or("sal.fit_intercept", h.fit_intercept)?,
            seed: 0,
        };
        let g = GdConfig::default();
        let gd = GdConfig {
            step: cfg.get_or("gd.step", g.step)?,
            max_iters: cfg.get_or("gd.max_iters", g.max_iters)?,
            tol: cfg.get_or("gd.tol", g.tol)?,
            fit_intercept: cfg.get_or("gd.fit_intercept", g.fit_intercept)?,
            ..g
        };
        let out = ExperimentConfig {
            methods,
            data,
            loss,
            robust_loss,
            sal,
            gd,
            lasso: tuned(cfg, "lasso", &SHRINKAGE_GRID)?,
            ridge: tuned(cfg, "ridge", &SHRINKAGE_GRID)?,
            irm: tuned(cfg, "irm", &IRM_GRID)?,
            wdrl: tuned(cfg, "wdrl", &WDRL_LAMBDA_GRID)?,
            validation_fraction: cfg.get_or("validation_fraction", 0.2)?,
            runs: cfg.get_or("runs", 1)?,
            seed: cfg.get_or("seed", 0)?,
            out: cfg.get_str("out").unwrap_or("out").into(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(SalError::Config("runs must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(SalError::Config("no methods".into()));
        }
        self.sal.validate()
    }

    /// The fully resolved configuration, in the same key-value format.
    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        c.set("method", methods.join(","));
        c.set("loss", self.loss.name());
        c.set("robust_loss", self.robust_loss.name());
        c.set("runs", self.runs);
        c.set("seed", self.seed);
        c.set("out", self.out.display());
        c.set("validation_fraction", format!("{:?}", self.validation_fraction));
        let s = &self.sal;
        c.set("sal.outer_iters", s.outer_iters);
        c.set("sal.theta_iters", s.theta_iters);
        c.set("sal.w_iters", s.w_iters);
        c.set("sal.ascent_steps", s.ascent_steps);
        c.set("sal.step_x", format!("{:?}", s.step_x));
        c.set("sal.step_theta", format!("{:?}", s.step_theta));
        c.set("sal.step_w", format!("{:?}", s.step_w));
        c.set("sal.lambda", format!("{:?}", s.lambda));
        c.set("sal.alpha", format!("{:?}", s.alpha));
        c.set("sal.early_stop_tol", format!("{:?}", s.early_stop_tol));
        c.set("sal.fit_intercept", s.fit_intercept);
        c.set("gd.step", format!("{:?}", self.gd.step));
        c.set("gd.max_iters", self.gd.max_iters);
        c.set("gd.tol", format!("{:?}", self.gd.tol));
        c.set("gd.fit_intercept", self.gd.fit_intercept);
        for (name, t) in [
            ("lasso", &self.lasso),
            ("ridge", &self.ridge),
            ("irm", &self.irm),
            ("wdrl", &self.wdrl),
        ] {
            match t {
                Tuned::Fixed(v) => c.set(&format!("{name}.lambda"), format!("{v:?}")),
                Tuned::Grid(g) => c.set(&format!("{name}.grid"), list(g)),
            }
        }
        let noise_name = |n: NoiseParam| match n {
            NoiseParam::StdDev => "sd",
            NoiseParam::Variance => "variance",
        };
        match &self.data {
            DataSource::Toy { test_n } => {
                c.set("data", "toy");
                c.set("toy.test_n", test_n);
            }
            DataSource::SelectionBias(d) => {
                c.set("data", "selection");
                c.set("noise", noise_name(d.noise));
                c.set("selection.n", d.n);
                c.set("selection.n_s", d.n_s);
                c.set("selection.n_v", d.n_v);
                c.set("selection.n_b", d.n_b);
                c.set("selection.r", format!("{:?}", d.r));
                c.set("selection.kappa", format!("{:?}", d.kappa));
                c.set("selection.beta", format!("{:?}", d.beta));
                c.set("selection.classification", d.classification);
                c.set("selection.noise_sd", format!("{:?}", d.noise_sd));
                c.set("selection.test_n", d.test_n);
                c.set("selection.test_rs", list(&d.test_rs));
            }
            DataSource::AntiCausal(d) => {
                c.set("data", "anticausal");
                c.set("noise", noise_name(d.noise));
                c.set("anticausal.n", d.n_per_env);
                c.set("anticausal.n_s", d.n_s);
                c.set("anticausal.n_v", d.n_v);
                c.set("anticausal.beta", format!("{:?}", d.beta));
                c.set("anticausal.noise_sd", format!("{:?}", d.noise_sd));
                c.set("anticausal.theta_v_scale", format!("{:?}", d.theta_v_scale));
                c.set("anticausal.train_envs", d.n_train_envs);
            }
            DataSource::Csv {
                path,
                schema,
                env_column,
                split,
                train_count,
                normalize,
            } => {
                c.set("data", "csv");
                c.set("csv.path", path.display());
                c.set("csv.schema", schema.display());
                c.set("csv.env_column", env_column);
                match split {
                    EnvSplit::Bins(b) => c.set("csv.bins", list(b)),
                    EnvSplit::Categories(k) => c.set("csv.categories", k.join(",")),
                }
                c.set("csv.train_count", train_count);
                c.set("csv.normalize", normalize);
            }
            DataSource::EnvCsv { train, test } => {
                c.set("data", "envcsv");
                c.set("envcsv.train", train.display());
                c.set("envcsv.test", test.display());
            }
        }
        c
    }

    pub fn task(&self) -> Task {
        match self.loss {
            LossKind::LogLoss => Task::BinaryClassification,
            _ => Task::Regression,
        }
    }
}

pub fn run_seed(seed: u64, run: usize) -> u64 {
    derive_seed(seed, "run", run as u64)
}

/// Builds the training and test environments of one run.
pub fn load_data(source: &DataSource, seed: u64) -> Result<GeneratedData> {
    let data_seed = derive_seed(seed, "data", 0);
    match source {
        DataSource::Toy { test_n } => toy_data(*test_n, data_seed),
        DataSource::SelectionBias(c) => gen_selection_bias(&SelectionBiasConfig {
            seed: data_seed,
            ..c.clone()
        }),
        DataSource::AntiCausal(c) => gen_anticausal(&AntiCausalConfig {
            seed: data_seed,
            ..c.clone()
        }),
        DataSource::Csv {
            path,
            schema,
            env_column,
            split,
            train_count,
            normalize: norm,
        } => {
            let schema = TableSchema::load(schema)?;
            let table = load_csv(path, &schema)?;
            let mut outcome = split_environments(&table, env_column, split)?;
            if *train_count == 0 || *train_count >= outcome.envs.len() {
                return Err(SalError::Config(format!(
                    "csv.train_count must be in 1..{}, got {train_count}",
                    outcome.envs.len()
                )));
            }
            let mut test = outcome.envs.split_off(*train_count);
            let mut train = outcome.envs;
            if *norm {
                // statistics come from the training environments only
                let stats = NormalizationStats::fit(&pool(&train)?.x);
                for e in train.iter_mut().chain(test.iter_mut()) {
                    e.x = stats.apply(&e.x)?;
                }
            }
            Ok(GeneratedData { train, test })
        }
        DataSource::EnvCsv { train, test } => Ok(GeneratedData {
            train: read_env_csv(train)?,
            test: read_env_csv(test)?,
        }),
    }
}

/// A fitted model with what was learned alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: LinearModel,
    /// Learned transport-cost weights (SAL) or the fixed ones (WDRL).
    pub weights: Option<CovariateWeights>,
    /// Penalty strength picked by validation, when a grid was searched.
    pub chosen: Option<f64>,
}

fn selection_metric(cfg: &ExperimentConfig) -> SelectionMetric {
    match cfg.task() {
        Task::BinaryClassification => SelectionMetric::Accuracy,
        Task::Regression => SelectionMetric::MeanLoss(LossKind::Squared),
    }
}

fn fit_tuned<F>(cfg: &ExperimentConfig, name: &str, t: &Tuned, train: &[EnvDataset], seed: u64, f: F) -> Result<Trained>
where
    F: Fn(&[EnvDataset], f64) -> Result<LinearModel> + Sync,
{
    match t {
        Tuned::Fixed(v) => Ok(Trained {
            model: f(train, *v)?,
            weights: None,
            chosen: None,
        }),
        Tuned::Grid(grid) => {
            let mut spec = GridSearchSpec::new(name, grid.clone(), selection_metric(cfg));
            spec.validation_fraction = cfg.validation_fraction;
            let (v, model) = grid_search(f, train, &spec, derive_seed(seed, "validation", 0))?;
            Ok(Trained {
                model,
                weights: None,
                chosen: Some(v),
            })
        }
    }
}

/// Trains one method on the training environments of one run.
pub fn train_method(method: Method, cfg: &ExperimentConfig, train: &[EnvDataset], seed: u64) -> Result<Trained> {
    let (loss, gd) = (cfg.loss, &cfg.gd);
    let sal = SalHyperParams {
        seed,
        ..cfg.sal.clone()
    };
    match method {
        Method::Erm => Ok(Trained {
            model: train_erm(train, loss, gd)?,
            weights: None,
            chosen: None,
        }),
        Method::Lasso => fit_tuned(cfg, "lasso", &cfg.lasso, train, seed, |e, l| train_lasso(e, loss, l, gd)),
        Method::Ridge => fit_tuned(cfg, "ridge", &cfg.ridge, train, seed, |e, l| train_ridge(e, loss, l, gd)),
        Method::Irm => fit_tuned(cfg, "irm", &cfg.irm, train, seed, |e, l| train_irm(e, loss, l, gd)),
        Method::Wdrl => {
            let mut t = fit_tuned(cfg, "wdrl", &cfg.wdrl, train, seed, |e, l| {
                train_wdrl(e, cfg.robust_loss, &SalHyperParams { lambda: l, ..sal.clone() })
            })?;
            t.weights = Some(CovariateWeights::ones(t.model.dim()));
            Ok(t)
        }
        Method::Sal => {
            let m = train_sal(train, &sal, cfg.robust_loss)?;
            Ok(Trained {
                model: m.model,
                weights: Some(m.weights),
                chosen: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub trained: Trained,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    /// Averages over runs of each run's Mean_Error and Std_Error.
    pub mean_error: f64,
    pub std_error: f64,
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub summaries: Vec<MethodSummary>,
    pub run_seeds: Vec<u64>,
    pub files: Vec<PathBuf>,
}

fn average(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Trains and evaluates every method for every run, without writing files.
pub fn evaluate_experiment(cfg: &ExperimentConfig) -> Result<(Vec<MethodSummary>, Vec<u64>)> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.runs).map(|r| run_seed(cfg.seed, r)).collect();
    let per_run: Vec<Vec<RunResult>> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| {
            let data = load_data(&cfg.data, seed).stage(|| format!("run {r}: data"))?;
            cfg.methods
                .iter()
                .map(|&m| {
                    let trained = train_method(m, cfg, &data.train, seed)
                        .stage(|| format!("run {r}: training {m}"))?;
                    let metrics = evaluate(&trained.model, &data.test)
                        .stage(|| format!("run {r}: evaluating {m}"))?;
                    Ok(RunResult {
                        run: r,
                        seed,
                        trained,
                        metrics,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let summaries = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let runs: Vec<RunResult> = per_run.iter().map(|r| r[k].clone()).collect();
            let opt_avg = |f: fn(&MetricsReport) -> Option<f64>| {
                let v: Option<Vec<f64>> = runs.iter().map(|r| f(&r.metrics)).collect();
                v.map(|v| average(v.into_iter()))
            };
            MethodSummary {
                method,
                mean_error: average(runs.iter().map(|r| r.metrics.mean_error)),
                std_error: average(runs.iter().map(|r| r.metrics.std_error)),
                accuracy: opt_avg(|m| m.accuracy),
                confidence: opt_avg(|m| m.confidence),
                runs,
            }
        })
        .collect();
    Ok((summaries, seeds))
}

pub fn per_env_csv(summaries: &[MethodSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "seed", "method", "env_id", "loss"])?;
    let mut rows = Vec::new();
    for s in summaries {
        for r in &s.runs {
            for (env, loss) in &r.metrics.per_env_loss {
                rows.push((r.run, r.seed, s.method, env.clone(), *loss));
            }
        }
    }
    rows.sort_by_key(|r| r.0);
    for (run, seed, m, env, loss) in rows {
        w.write_record([run.to_string(), seed.to_string(), m.name().to_string(), env, format!("{loss:?}")])?;
    }
    finish_csv(w)
}

pub fn summary_csv(summaries: &[MethodSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "runs", "mean_error", "std_error", "accuracy", "confidence"])?;
    for s in summaries {
        w.write_record([
            s.method.name().to_string(),
            s.runs.len().to_string(),
            format!("{:?}", s.mean_error),
            format!("{:?}", s.std_error),
            fmt_opt(s.accuracy),
            fmt_opt(s.confidence),
        ])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| SalError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| SalError::Csv(e.to_string()))
}

/// The resolved config plus per-run seeds and validated penalty choices.
pub fn manifest(cfg: &ExperimentConfig, summaries: &[MethodSummary], seeds: &[u64]) -> Config {
    let mut c = cfg.to_config();
    for (r, s) in seeds.iter().enumerate() {
        c.set(&format!("run.{r}.seed"), s);
    }
    for s in summaries {
        for r in &s.runs {
            if let Some(v) = r.trained.chosen {
                c.set(&format!("run.{}.{}.chosen", r.run, s.method.name()), format!("{v:?}"));
            }
        }
    }
    c
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    write_atomic(&p, contents.as_bytes()).stage(|| format!("writing {}", p.display()))?;
    Ok(p)
}

/// Runs every configured method and writes `per_env.csv`, `summary.csv` and
/// `manifest.txt` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let (summaries, run_seeds) = evaluate_experiment(cfg)?;
    std::fs::create_dir_all(&cfg.out)
        .map_err(SalError::from)
        .stage(|| format!("creating {}", cfg.out.display()))?;
    let files = vec![
        write_file(&cfg.out, "per_env.csv", &per_env_csv(&summaries)?)?,
        write_file(&cfg.out, "summary.csv", &summary_csv(&summaries)?)?,
        write_file(&cfg.out, "manifest.txt", &manifest(cfg, &summaries, &run_seeds).to_string())?,
    ];
    Ok(ExperimentReport {
        summaries,
        run_seeds,
        files,
    })
}

// ---------------------------------------------------------------------------
// robustness sweep and plot data

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub run: usize,
    pub method: Method,
    /// `None` for methods without a robustness knob.
    pub lambda: Option<f64>,
    pub radius: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub theta: Vec<f64>,
}

fn coefficient_names(cfg: &ExperimentConfig, d: usize) -> Vec<String> {
    match cfg.data {
        DataSource::Toy { .. } => vec!["theta_S".into(), "theta_V".into()],
        _ => (0..d).map(|j| format!("theta_{j}")).collect(),
    }
}

/// Trains ERM once and WDRL/SAL once per `λ` for every run. The radius of a
/// robust model is its empirical certificate on the training data.
pub fn sweep_rows(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(SalError::Config("sweep.lambdas must be a non-empty list of positive values".into()));
    }
    let rows: Vec<Vec<SweepRow>> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| {
            let seed = run_seed(cfg.seed, r);
            let data = load_data(&cfg.data, seed).stage(|| format!("run {r}: data"))?;
            let mut out = Vec::new();
            for &m in &cfg.methods {
                let knobs: Vec<Option<f64>> = match m {
                    Method::Sal | Method::Wdrl => lambdas.iter().map(|&l| Some(l)).collect(),
                    _ => vec![None],
                };
                for lambda in knobs {
                    let mut c = cfg.clone();
                    if let Some(l) = lambda {
                        c.sal.lambda = l;
                        c.wdrl = Tuned::Fixed(l);
                    }
                    let t = train_method(m, &c, &data.train, seed)
                        .stage(|| format!("run {r}: training {m} at lambda {lambda:?}"))?;
                    let radius = match (&t.weights, lambda) {
                        (Some(w), Some(l)) => {
                            let adv = SalHyperParams { lambda: l, ..c.sal.clone() }.adversary();
                            empirical_radius(&t.model, c.robust_loss, w, &data.train, &adv)?
                        }
                        _ => 0.0,
                    };
                    let metrics = evaluate(&t.model, &data.test)?;
                    out.push(SweepRow {
                        run: r,
                        method: m,
                        lambda,
                        radius,
                        mean_error: metrics.mean_error,
                        std_error: metrics.std_error,
                        theta: t.model.theta.to_vec(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn sweep_csv(cfg: &ExperimentConfig, rows: &[SweepRow]) -> Result<String> {
    let d = rows.first().map(|r| r.theta.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["run", "method", "lambda", "radius", "mean_error", "std_error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(coefficient_names(cfg, d));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.run.to_string(),
            r.method.name().to_string(),
            fmt_opt(r.lambda),
            format!("{:?}", r.radius),
            format!("{:?}", r.mean_error),
            format!("{:?}", r.std_error),
        ];
        rec.extend(r.theta.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    finish_csv(w)
}

/// Runs the sweep and writes `sweep.csv` plus a manifest into `cfg.out`.
pub fn run_sweep(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<PathBuf> {
    let rows = sweep_rows(cfg, lambdas)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut man = cfg.to_config();
    man.set("sweep.lambdas", lambdas.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(","));
    write_file(&cfg.out, "manifest.txt", &man.to_string())?;
    write_file(&cfg.out, SWEEP_FILE, &sweep_csv(cfg, &rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Test Mean_Error against radius.
    Error,
    /// Learned coefficients against radius.
    Coefficients,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(PlotKind::Error),
            "coefficients" | "coef" => Ok(PlotKind::Coefficients),
            other => Err(SalError::Config(format!("unknown plot kind `{other}`"))),
        }
    }

    fn file_name(self) -> &'static str {
        match self {
            PlotKind::Error => "plot_error.csv",
            PlotKind::Coefficients => "plot_coefficients.csv",
        }
    }
}

/// Long-format `series,x,y` rows from a sweep directory, averaging over runs
/// at each `(method, λ)`.
pub fn plot_data(dir: &Path, kind: PlotKind) -> Result<String> {
    let path = dir.join(SWEEP_FILE);
    if !path.is_file() {
        return Err(SalError::Empty(format!("no {SWEEP_FILE} in {}", dir.display())));
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SalError::Csv(format!("{SWEEP_FILE}: missing column {name}")))
    };
    let (mi, li, ri, ei) = (col("method")?, col("lambda")?, col("radius")?, col("mean_error")?);
    let coef: Vec<(usize, &String)> = header.iter().enumerate().filter(|(_, h)| h.starts_with("theta_")).collect();

    // (method, lambda) in first-appearance order -> (sum radius, sums, count)
    let mut groups: Vec<((String, String), (f64, Vec<f64>, usize))> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let key = (rec[mi].to_string(), rec[li].to_string());
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| SalError::Csv(format!("{SWEEP_FILE}: bad number `{}`", &rec[i])))
        };
        let values: Vec<f64> = match kind {
            PlotKind::Error => vec![num(ei)?],
            PlotKind::Coefficients => coef.iter().map(|(i, _)| num(*i)).collect::<Result<_>>()?,
        };
        let radius = num(ri)?;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, (r, v, n))) => {
                *r += radius;
                v.iter_mut().zip(&values).for_each(|(a, b)| *a += b);
                *n += 1;
            }
            None => groups.push((key, (radius, values, 1))),
        }
    }
    if groups.is_empty() {
        return Err(SalError::Empty(format!("{} has no rows", path.display())));
    }
    let names: Vec<String> = match kind {
        PlotKind::Error => vec!["mean_error".into()],
        PlotKind::Coefficients => coef.iter().map(|(_, h)| h.to_string()).collect(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "x", "y"])?;
    for name in &names {
        for ((method, _), (r, v, n)) in &groups {
            let k = names.iter().position(|x| x == name).unwrap_or(0);
            let nf = *n as f64;
            w.write_record([format!("{method}:{name}"), format!("{:?}", r / nf), format!("{:?}", v[k] / nf)])?;
        }
    }
    finish_csv(w)
}

/// Writes `plot_error.csv` or `plot_coefficients.csv` next to the sweep.
pub fn emit_plot_data(dir: &Path, kind: PlotKind) -> Result<PathBuf> {
    let text = plot_data(dir, kind)?;
    write_file(dir, kind.file_name(), &text)
}

// ---------------------------------------------------------------------------
// model files

/// Saves a model in the key-value format.
pub fn save_model(path: &Path, method: Method, model: &LinearModel, weights: Option<&CovariateWeights>) -> Result<()> {
    let mut c = Config::new();
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    c.set("method", method.name());
    c.set("task", model.task.name());
    c.set("theta", list(model.theta.as_slice().unwrap_or(&model.theta.to_vec())));
    if let Some(b) = model.intercept {
        c.set("intercept", format!("{b:?}"));
    }
    if let Some(w) = weights {
        c.set("weights", list(&w.as_array().to_vec()));
    }
    write_atomic(path, c.to_string().as_bytes())
}

pub fn load_model(path: &Path) -> Result<(LinearModel, Option<CovariateWeights>)> {
    let c = Config::load(path)?;
    let task = match c.get_str("task") {
        Some("regression") | None => Task::Regression,
        Some("classification") => Task::BinaryClassification,
        Some(other) => return Err(SalError::Config(format!("unknown task `{other}`"))),
    };
    let theta = c
        .get_list::<f64>("theta")?
        .ok_or_else(|| SalError::Config(format!("{}: missing theta", path.display())))?;
    let mut model = LinearModel::new(theta.into(), task)?;
    model.intercept = c.get("intercept")?;
    let weights = match c.get_list::<f64>("weights")? {
        Some(w) => Some(CovariateWeights::new(w.into())?),
        None => None,
    };
    Ok((model, weights))
}
