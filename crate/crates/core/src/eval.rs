//! Test-time metrics and the random-direction check of the weight gradient.

use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cost::project_weights;
use crate::dataset::{pool, EnvDataset};
use crate::error::{Result, SalError};
use crate::model::{LinearModel, Task};
use crate::rng::rng_for;
use crate::sal::{compute_r, theta_loop_pooled, SalTrainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMetric {
    /// Root mean squared error of the prediction.
    Rmse,
    /// Misclassification rate at threshold 0.5.
    ErrorRate,
}

impl EvalMetric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => EvalMetric::Rmse,
            Task::BinaryClassification => EvalMetric::ErrorRate,
        }
    }
}

pub fn env_loss(model: &LinearModel, env: &EnvDataset, metric: EvalMetric) -> Result<f64> {
    if env.is_empty() {
        return Err(SalError::Empty(format!("environment {}", env.env_id)));
    }
    model.check_dim(env.dim())?;
    let n = env.len() as f64;
    match metric {
        EvalMetric::Rmse => {
            let sse: f64 = env
                .x
                .outer_iter()
                .zip(env.y.iter())
                .map(|(x, &y)| {
                    let r = model.link(model.score_unchecked(x)) - y;
                    r * r
                })
                .sum();
            Ok((sse / n).sqrt())
        }
        EvalMetric::ErrorRate => {
            let wrong = env
                .x
                .outer_iter()
                .zip(env.y.iter())
                .filter(|(x, &y)| {
                    let p = model.link(model.score_unchecked(*x));
                    let label = if p >= 0.5 { 1.0 } else { 0.0 };
                    label != y
                })
                .count();
            Ok(wrong as f64 / n)
        }
    }
}

pub fn accuracy(model: &LinearModel, env: &EnvDataset) -> Result<f64> {
    Ok(1.0 - env_loss(model, env, EvalMetric::ErrorRate)?)
}

/// Mean over samples of `max(p, 1 − p)`.
pub fn confidence(model: &LinearModel, env: &EnvDataset) -> Result<f64> {
    if model.task != Task::BinaryClassification {
        return Err(SalError::InvalidParam("confidence needs a classifier".into()));
    }
    if env.is_empty() {
        return Err(SalError::Empty(format!("environment {}", env.env_id)));
    }
    model.check_dim(env.dim())?;
    let total: f64 = env
        .x
        .outer_iter()
        .map(|x| {
            let p = model.link(model.score_unchecked(x));
            p.max(1.0 - p)
        })
        .sum();
    Ok(total / env.len() as f64)
}

/// Mean and (n − 1)-denominator standard deviation across environments.
pub fn mean_std_error(per_env: &[f64]) -> Result<(f64, f64)> {
    if per_env.len() < 2 {
        return Err(SalError::InvalidParam(format!(
            "standard deviation needs at least 2 environments, got {}",
            per_env.len()
        )));
    }
    let n = per_env.len() as f64;
    let mean = per_env.iter().sum::<f64>() / n;
    let var = per_env.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_env_loss: Vec<(String, f64)>,
    pub mean_error: f64,
    pub std_error: f64,
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
}

/// Per-environment error, Mean_Error/Std_Error, and for classifiers the
/// environment-averaged accuracy and confidence.
pub fn evaluate(model: &LinearModel, envs: &[EnvDataset]) -> Result<MetricsReport> {
    if envs.is_empty() {
        return Err(SalError::Empty("no test environments".into()));
    }
    let metric = EvalMetric::for_task(model.task);
    let per_env_loss = envs
        .iter()
        .map(|e| Ok((e.env_id.clone(), env_loss(model, e, metric)?)))
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = per_env_loss.iter().map(|(_, l)| *l).collect();
    let (mean_error, std_error) = if losses.len() >= 2 {
        mean_std_error(&losses)?
    } else {
        (losses[0], 0.0)
    };
    let (accuracy, confidence) = if model.task == Task::BinaryClassification {
        let k = envs.len() as f64;
        let acc = losses.iter().map(|l| 1.0 - l).sum::<f64>() / k;
        let conf = envs
            .iter()
            .map(|e| confidence(model, e))
            .sum::<Result<f64>>()?
            / k;
        (Some(acc), Some(conf))
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        per_env_loss,
        mean_error,
        std_error,
        accuracy,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionTestReport {
    /// Share of random directions whose decrease of R is strictly smaller.
    pub fraction: f64,
    /// Change of R after the step along the negative approximate gradient.
    pub reference_delta: f64,
    pub random_deltas: Vec<f64>,
    pub gradient: Array1<f64>,
}

/// Compares one weight step along the approximate negative gradient with
/// `n_directions` random steps of the same Euclidean norm. Each candidate
/// weight vector is projected and θ is refit from the same starting point.
pub fn gradient_direction_test(
    trainer: &SalTrainer<'_>,
    n_directions: usize,
    step_norm: f64,
    seed: u64,
) -> Result<DirectionTestReport> {
    direction_test_with(trainer, None, n_directions, step_norm, seed)
}

/// As [`gradient_direction_test`], optionally replacing the reference gradient.
pub fn direction_test_with(
    trainer: &SalTrainer<'_>,
    reference: Option<Array1<f64>>,
    n_directions: usize,
    step_norm: f64,
    seed: u64,
) -> Result<DirectionTestReport> {
    if n_directions < 1 {
        return Err(SalError::InvalidParam("n_directions must be >= 1".into()));
    }
    if !(step_norm > 0.0 && step_norm.is_finite()) {
        return Err(SalError::InvalidParam("step_norm must be positive".into()));
    }
    let mut hyper = trainer.hyper().clone();
    if hyper.w_iters == 0 {
        hyper.w_iters = 1;
    }
    let envs = trainer.envs();
    let loss = trainer.loss();
    let pooled = pool(envs)?;
    let theta_start = trainer.model().clone();
    let w = trainer.weights().as_array().clone();

    let r_after = |raw: &Array1<f64>| -> Result<f64> {
        let wp = project_weights(raw.view())?;
        let (m, _) = theta_loop_pooled(&theta_start, &wp, &pooled, &hyper, loss)?;
        compute_r(&m, envs, loss, hyper.alpha)
    };

    let (base_model, traces) =
        theta_loop_pooled(&theta_start, trainer.weights(), &pooled, &hyper, loss)?;
    let r0 = compute_r(&base_model, envs, loss, hyper.alpha)?;
    let gradient = match reference {
        Some(g) => g,
        None => crate::sal::grad_r_wrt_w(&traces, envs, &base_model, loss, hyper.alpha)?,
    };
    let gnorm = gradient.dot(&gradient).sqrt();
    let reference_delta = if gnorm > 0.0 {
        let raw = &w - &(&gradient * (step_norm / gnorm));
        r_after(&raw)? - r0
    } else {
        r_after(&w)? - r0
    };

    let d = w.len();
    let random_deltas: Vec<f64> = (0..n_directions)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(seed, "direction-test", k as u64);
            let mut u: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.dot(&u).sqrt();
            u *= step_norm / norm;
            Ok(r_after(&(&w + &u))? - r0)
        })
        .collect::<Result<_>>()?;
    let wins = random_deltas.iter().filter(|&&dr| dr > reference_delta).count();
    Ok(DirectionTestReport {
        fraction: wins as f64 / n_directions as f64,
        reference_delta,
        random_deltas,
        gradient,
    })
}
