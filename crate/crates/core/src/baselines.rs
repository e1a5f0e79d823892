//! Comparison methods: ERM, LASSO, Ridge, WDRL and IRM, plus
//! validation-based hyperparameter selection.
//!
//! All penalties act on the mean loss, so a regularization strength means
//! the same thing regardless of sample size.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::{common_dim, pool, EnvDataset, Pooled};
use crate::error::{Result, SalError};
use crate::eval::{env_loss, EvalMetric};
use crate::model::{LinearModel, LossKind};
use crate::rng::rng_for;
use crate::sal::{task_for, train_sal, SalHyperParams};

pub const IRM_GRID: [f64; 7] = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0];
pub const SHRINKAGE_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];
/// Lagrangian strengths searched for WDRL; small λ means a large radius.
pub const WDRL_LAMBDA_GRID: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// Full-batch (proximal) gradient descent settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GdConfig {
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the gradient-mapping ∞-norm falls below this.
    pub tol: f64,
    /// Halve the step whenever an iterate would increase the objective.
    pub monotone: bool,
    pub fit_intercept: bool,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            step: 0.05,
            max_iters: 20_000,
            tol: 1e-9,
            monotone: true,
            fit_intercept: false,
        }
    }
}

impl GdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(SalError::InvalidParam("step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    None,
    L1(f64),
    L2(f64),
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: LinearModel,
    /// Objective value before every iteration, plus the final value.
    pub objective: Vec<f64>,
    pub iters: usize,
}

/// Smooth part of an objective: value, θ-gradient, intercept gradient.
trait Smooth: Sync {
    fn eval(&self, m: &LinearModel) -> (f64, Array1<f64>, f64);
}

struct PooledRisk<'a> {
    data: &'a Pooled,
    loss: LossKind,
    ridge: f64,
}

impl Smooth for PooledRisk<'_> {
    fn eval(&self, m: &LinearModel) -> (f64, Array1<f64>, f64) {
        let n = self.data.n() as f64;
        let mut v = 0.0;
        let mut g = Array1::<f64>::zeros(m.dim());
        let mut gb = 0.0;
        for (x, &y) in self.data.x.outer_iter().zip(self.data.y.iter()) {
            let (l, d1, _) = self.loss.score_derivs(m.score_unchecked(x), y);
            v += l;
            g.scaled_add(d1, &x);
            gb += d1;
        }
        v /= n;
        g /= n;
        gb /= n;
        if self.ridge != 0.0 {
            v += self.ridge * m.theta.dot(&m.theta);
            g.scaled_add(2.0 * self.ridge, &m.theta);
        }
        (v, g, gb)
    }
}

/// `(1/|E|) Σ_e [L^e(θ) + λ (d/ds L^e(s·θ)|_{s=1})²]`.
struct IrmObjective<'a> {
    envs: &'a [EnvDataset],
    loss: LossKind,
    lambda: f64,
}

/// Dummy-multiplier penalty term `P_e = mean ℓ'(score)·θᵀx` and its gradients.
pub(crate) fn irm_penalty_parts(
    m: &LinearModel,
    env: &EnvDataset,
    loss: LossKind,
) -> (f64, f64, Array1<f64>, f64, Array1<f64>, f64) {
    let n = env.len() as f64;
    let b = m.intercept.unwrap_or(0.0);
    let mut risk = 0.0;
    let mut p = 0.0;
    let mut g_risk = Array1::<f64>::zeros(m.dim());
    let mut g_p = Array1::<f64>::zeros(m.dim());
    let mut gb_risk = 0.0;
    let mut gb_p = 0.0;
    for (x, &y) in env.x.outer_iter().zip(env.y.iter()) {
        let t = m.theta.dot(&x);
        let (l, d1, d2) = loss.score_derivs(t + b, y);
        risk += l;
        p += d1 * t;
        g_risk.scaled_add(d1, &x);
        gb_risk += d1;
        g_p.scaled_add(d2 * t + d1, &x);
        gb_p += d2 * t;
    }
    (
        risk / n,
        p / n,
        g_risk / n,
        gb_risk / n,
        g_p / n,
        gb_p / n,
    )
}

impl Smooth for IrmObjective<'_> {
    fn eval(&self, m: &LinearModel) -> (f64, Array1<f64>, f64) {
        let k = self.envs.len() as f64;
        let mut v = 0.0;
        let mut g = Array1::<f64>::zeros(m.dim());
        let mut gb = 0.0;
        for env in self.envs {
            let (risk, p, g_risk, gb_risk, g_p, gb_p) = irm_penalty_parts(m, env, self.loss);
            v += risk + self.lambda * p * p;
            g += &g_risk;
            g.scaled_add(2.0 * self.lambda * p, &g_p);
            gb += gb_risk + 2.0 * self.lambda * p * gb_p;
        }
        (v / k, g / k, gb / k)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn descend(
    objective: &dyn Smooth,
    l1: f64,
    init: LinearModel,
    cfg: &GdConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    let total = |m: &LinearModel, smooth: f64| smooth + l1 * m.theta.iter().map(|t| t.abs()).sum::<f64>();
    let mut m = init;
    let mut step = cfg.step;
    let (mut f, mut g, mut gb) = objective.eval(&m);
    let mut trace = vec![total(&m, f)];
    let mut iters = 0;
    for it in 0..cfg.max_iters {
        let current = total(&m, f);
        let mut halvings = 0;
        let (next, nf, ng, ngb) = loop {
            let mut cand = m.clone();
            cand.theta = m
                .theta
                .iter()
                .zip(g.iter())
                .map(|(t, gi)| soft_threshold(t - step * gi, step * l1))
                .collect();
            if cfg.fit_intercept {
                cand.intercept = Some(m.intercept.unwrap_or(0.0) - step * gb);
            }
            let (cf, cg, cgb) = objective.eval(&cand);
            let ok = cf.is_finite() && cand.is_finite();
            if ok && (!cfg.monotone || total(&cand, cf) <= current) {
                break (cand, cf, cg, cgb);
            }
            if !cfg.monotone || halvings >= 60 {
                if !ok {
                    return Err(SalError::Diverged {
                        stage: "gradient descent",
                        iter: it,
                    });
                }
                // no decrease possible at this precision
                return Ok(FitReport {
                    model: m,
                    objective: trace,
                    iters,
                });
            }
            step *= 0.5;
            halvings += 1;
        };
        let mapping = next
            .theta
            .iter()
            .zip(m.theta.iter())
            .map(|(a, b)| ((a - b) / step).abs())
            .fold(0.0_f64, f64::max)
            .max(((next.intercept.unwrap_or(0.0) - m.intercept.unwrap_or(0.0)) / step).abs());
        m = next;
        f = nf;
        g = ng;
        gb = ngb;
        iters += 1;
        trace.push(total(&m, f));
        if mapping < cfg.tol {
            break;
        }
    }
    Ok(FitReport {
        model: m,
        objective: trace,
        iters,
    })
}

fn init_model(d: usize, loss: LossKind, cfg: &GdConfig) -> LinearModel {
    let mut m = LinearModel::zeros(d, task_for(loss));
    if cfg.fit_intercept {
        m.intercept = Some(0.0);
    }
    m
}

fn check_labels(pooled: &Pooled, loss: LossKind) -> Result<()> {
    if pooled.n() == 0 {
        return Err(SalError::Empty("training data".into()));
    }
    pooled.y.iter().try_for_each(|&y| loss.check_label(y))
}

/// Pooled empirical risk with an optional L1 or squared-L2 penalty.
pub fn train_penalized(
    envs: &[EnvDataset],
    loss: LossKind,
    penalty: Penalty,
    cfg: &GdConfig,
) -> Result<FitReport> {
    let pooled = pool(envs)?;
    check_labels(&pooled, loss)?;
    let (ridge, l1) = match penalty {
        Penalty::None => (0.0, 0.0),
        Penalty::L1(l) => (0.0, l),
        Penalty::L2(l) => (l, 0.0),
    };
    if ridge < 0.0 || l1 < 0.0 {
        return Err(SalError::InvalidParam("penalty must be >= 0".into()));
    }
    let obj = PooledRisk {
        data: &pooled,
        loss,
        ridge,
    };
    descend(&obj, l1, init_model(pooled.dim(), loss, cfg), cfg)
}

pub fn train_erm(envs: &[EnvDataset], loss: LossKind, cfg: &GdConfig) -> Result<LinearModel> {
    Ok(train_penalized(envs, loss, Penalty::None, cfg)?.model)
}

pub fn train_lasso(
    envs: &[EnvDataset],
    loss: LossKind,
    lambda_reg: f64,
    cfg: &GdConfig,
) -> Result<LinearModel> {
    Ok(train_penalized(envs, loss, Penalty::L1(lambda_reg), cfg)?.model)
}

pub fn train_ridge(
    envs: &[EnvDataset],
    loss: LossKind,
    lambda_reg: f64,
    cfg: &GdConfig,
) -> Result<LinearModel> {
    Ok(train_penalized(envs, loss, Penalty::L2(lambda_reg), cfg)?.model)
}

/// Isotropic Wasserstein DRO: the alternating trainer with weights frozen at one.
pub fn train_wdrl(envs: &[EnvDataset], loss: LossKind, hyper: &SalHyperParams) -> Result<LinearModel> {
    let mut h = hyper.clone();
    h.w_iters = 0;
    Ok(train_sal(envs, &h, loss)?.model)
}

pub fn train_irm_report(
    envs: &[EnvDataset],
    loss: LossKind,
    lambda_irm: f64,
    cfg: &GdConfig,
) -> Result<FitReport> {
    let d = common_dim(envs)?;
    if lambda_irm < 0.0 {
        return Err(SalError::InvalidParam("lambda_irm must be >= 0".into()));
    }
    for e in envs {
        e.y.iter().try_for_each(|&y| loss.check_label(y))?;
    }
    let obj = IrmObjective {
        envs,
        loss,
        lambda: lambda_irm,
    };
    descend(&obj, 0.0, init_model(d, loss, cfg), cfg)
}

pub fn train_irm(
    envs: &[EnvDataset],
    loss: LossKind,
    lambda_irm: f64,
    cfg: &GdConfig,
) -> Result<LinearModel> {
    Ok(train_irm_report(envs, loss, lambda_irm, cfg)?.model)
}

/// The IRM penalty `(d/ds L^e(s·θ)|_{s=1})²` for one environment.
pub fn irm_penalty(model: &LinearModel, env: &EnvDataset, loss: LossKind) -> Result<f64> {
    model.check_dim(env.dim())?;
    if env.is_empty() {
        return Err(SalError::Empty(format!("environment {}", env.env_id)));
    }
    let p = irm_penalty_parts(model, env, loss).1;
    Ok(p * p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMetric {
    /// Pooled mean of this loss on the validation rows.
    MeanLoss(LossKind),
    /// Pooled misclassification rate (lower is better).
    Accuracy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchSpec {
    pub parameter: String,
    pub candidates: Vec<f64>,
    pub validation_fraction: f64,
    pub metric: SelectionMetric,
}

impl GridSearchSpec {
    pub fn new(parameter: impl Into<String>, candidates: Vec<f64>, metric: SelectionMetric) -> Self {
        GridSearchSpec {
            parameter: parameter.into(),
            candidates,
            validation_fraction: 0.2,
            metric,
        }
    }
}

/// Splits every environment i.i.d. into training and validation rows.
pub fn validation_split(
    envs: &[EnvDataset],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<EnvDataset>, Vec<EnvDataset>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SalError::InvalidParam("validation fraction must be in (0,1)".into()));
    }
    let mut train = Vec::with_capacity(envs.len());
    let mut valid = Vec::with_capacity(envs.len());
    for (i, e) in envs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..e.len()).collect();
        idx.shuffle(&mut rng_for(seed, "validation-split", i as u64));
        let k = (fraction * e.len() as f64).round() as usize;
        let (v, t) = idx.split_at(k.min(e.len()));
        if t.is_empty() {
            return Err(SalError::InvalidParam(format!(
                "validation split leaves environment {} without training rows",
                e.env_id
            )));
        }
        train.push(e.select(t));
        if !v.is_empty() {
            valid.push(e.select(v));
        }
    }
    if valid.is_empty() {
        return Err(SalError::InvalidParam("validation split is empty".into()));
    }
    Ok((train, valid))
}

fn validation_score(model: &LinearModel, valid: &[EnvDataset], metric: SelectionMetric) -> Result<f64> {
    let pooled = pool(valid)?;
    let env = EnvDataset::new(pooled.x, pooled.y, "validation")?;
    match metric {
        SelectionMetric::MeanLoss(loss) => {
            let mut total = 0.0;
            for (x, &y) in env.x.outer_iter().zip(env.y.iter()) {
                total += loss.score_derivs(model.score(x)?, y).0;
            }
            Ok(total / env.len() as f64)
        }
        SelectionMetric::Accuracy => env_loss(model, &env, EvalMetric::ErrorRate),
    }
}

/// Trains one model per candidate on a training split, keeps the candidate
/// with the best validation score (smallest value on ties) and refits it on
/// all the data.
pub fn grid_search<F>(
    train_fn: F,
    envs: &[EnvDataset],
    spec: &GridSearchSpec,
    seed: u64,
) -> Result<(f64, LinearModel)>
where
    F: Fn(&[EnvDataset], f64) -> Result<LinearModel> + Sync,
{
    if spec.candidates.is_empty() {
        return Err(SalError::InvalidParam(format!(
            "no candidates for {}",
            spec.parameter
        )));
    }
    if spec.candidates.iter().any(|c| !c.is_finite()) {
        return Err(SalError::NonFinite(format!("{} candidates", spec.parameter)));
    }
    let mut candidates = spec.candidates.clone();
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();
    if candidates.len() == 1 {
        return Ok((candidates[0], train_fn(envs, candidates[0])?));
    }
    let (train, valid) = validation_split(envs, spec.validation_fraction, seed)?;
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&c| validation_score(&train_fn(&train, c)?, &valid, spec.metric))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    let value = candidates[best];
    Ok((value, train_fn(envs, value)?))
}
