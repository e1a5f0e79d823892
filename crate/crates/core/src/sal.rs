//! Alternating optimization of the model parameters (adversarial empirical
//! risk under the weighted cost) and of the covariate weights (mean training
//! loss plus `α` times the largest gap between environment losses).
//!
//! The weight gradient is the chain
//! `∂R/∂w ≈ (∂R/∂θ)·(∂θ/∂X̃)·(∂X̃/∂w)` where both Jacobians are accumulated
//! while training: `∂θ/∂X̃ ≈ −ε_θ Σ_t ∂(∇_θ L̂)/∂X̃` over the θ steps and
//! `∂X̃/∂w ≈ −2 ε_x λ Σ_t (X̃ᵗ − X)` over the ascent steps.

use ndarray::{Array1, Array2, Array3, Axis, Zip};

use crate::adversary::{perturb_batch, AdversaryConfig};
use crate::cost::{project_weights, CovariateWeights};
use crate::dataset::{common_dim, pool, EnvDataset, Pooled};
use crate::error::{Result, SalError};
use crate::model::{LinearModel, LossKind, Task};

#[derive(Debug, Clone, PartialEq)]
pub struct SalHyperParams {
    pub outer_iters: usize,
    pub theta_iters: usize,
    pub w_iters: usize,
    pub ascent_steps: usize,
    pub step_x: f64,
    pub step_theta: f64,
    pub step_w: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub early_stop_tol: f64,
    pub fit_intercept: bool,
}

impl Default for SalHyperParams {
    fn default() -> Self {
        SalHyperParams {
            outer_iters: 50,
            theta_iters: 20,
            w_iters: 1,
            ascent_steps: 20,
            step_x: 0.05,
            step_theta: 0.05,
            step_w: 1.0,
            lambda: 5.0,
            alpha: 1.0,
            seed: 0,
            early_stop_tol: 1e-7,
            fit_intercept: false,
        }
    }
}

impl SalHyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SalError::InvalidParam(m.to_string()));
        if self.outer_iters == 0 {
            return bad("outer_iters must be >= 1");
        }
        if self.theta_iters == 0 {
            return bad("theta_iters must be >= 1");
        }
        if self.ascent_steps == 0 {
            return bad("ascent_steps must be >= 1");
        }
        for (name, v) in [
            ("step_x", self.step_x),
            ("step_theta", self.step_theta),
            ("step_w", self.step_w),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive and finite"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        Ok(())
    }

    pub fn adversary(&self) -> AdversaryConfig {
        AdversaryConfig {
            ascent_steps: self.ascent_steps,
            step_size_x: self.step_x,
            lambda: self.lambda,
            early_stop_tol: self.early_stop_tol,
            backtracking: true,
        }
    }
}

/// Jacobian approximations accumulated over one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianTraces {
    /// `n × d × d`; entry `[i, j, k]` approximates `∂θ_j / ∂x̃_{i,k}`.
    pub dtheta_dxtilde: Array3<f64>,
    /// `n × d`; diagonal of `∂x̃_i / ∂w`, averaged over the θ steps.
    pub dxtilde_dw: Array2<f64>,
    pub theta_steps: usize,
    /// Mean transport cost of the last perturbation of the loop.
    pub last_mean_cost: f64,
}

impl JacobianTraces {
    pub fn zeros(n: usize, d: usize) -> Self {
        JacobianTraces {
            dtheta_dxtilde: Array3::zeros((n, d, d)),
            dxtilde_dw: Array2::zeros((n, d)),
            theta_steps: 0,
            last_mean_cost: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.dxtilde_dw.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalRecord {
    pub iter: usize,
    /// Weight objective at the θ reached in this iteration.
    pub r_value: f64,
    pub env_losses: Vec<f64>,
    pub theta: Array1<f64>,
    /// Weights after this iteration's projected update.
    pub weights: Array1<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalModel {
    pub model: LinearModel,
    pub weights: CovariateWeights,
    pub history: Vec<SalRecord>,
}

pub(crate) fn task_for(loss: LossKind) -> Task {
    match loss {
        LossKind::LogLoss => Task::BinaryClassification,
        _ => Task::Regression,
    }
}

/// `T_θ` adversarial gradient steps on θ from `model`, recording traces.
pub fn theta_inner_loop(
    model: &LinearModel,
    w: &CovariateWeights,
    envs: &[EnvDataset],
    hyper: &SalHyperParams,
    loss: LossKind,
) -> Result<(LinearModel, JacobianTraces)> {
    let pooled = pool(envs)?;
    theta_loop_pooled(model, w, &pooled, hyper, loss)
}

pub(crate) fn theta_loop_pooled(
    model: &LinearModel,
    w: &CovariateWeights,
    pooled: &Pooled,
    hyper: &SalHyperParams,
    loss: LossKind,
) -> Result<(LinearModel, JacobianTraces)> {
    let (n, d) = pooled.x.dim();
    model.check_dim(d)?;
    if w.dim() != d {
        return Err(SalError::DimensionMismatch {
            expected: d,
            got: w.dim(),
        });
    }
    let adv = hyper.adversary();
    let mut m = model.clone();
    let mut traces = JacobianTraces::zeros(n, d);
    let eps = hyper.step_theta;
    let scale = -eps / n as f64;

    for j in 0..hyper.theta_iters {
        let trace = perturb_batch(&m, loss, pooled.x.view(), pooled.y.view(), w, &adv)?;
        traces.last_mean_cost = trace.mean_cost(pooled.x.view(), w);

        let derivs: Array1<(f64, f64)> = trace
            .x_tilde
            .outer_iter()
            .zip(pooled.y.iter())
            .map(|(xt, &yi)| {
                let (_, d1, d2) = loss.score_derivs(m.score_unchecked(xt), yi);
                (d1, d2)
            })
            .collect::<Vec<_>>()
            .into();

        let mut grad = Array1::<f64>::zeros(d);
        let mut grad_b = 0.0;
        for (xt, &(d1, _)) in trace.x_tilde.outer_iter().zip(&derivs) {
            grad.scaled_add(d1, &xt);
            grad_b += d1;
        }
        grad /= n as f64;
        grad_b /= n as f64;

        // ∂(∇_θ ℓ_i)/∂x̃_i = ℓ'(s) I + ℓ''(s) x̃_i θᵀ
        let theta = &m.theta;
        Zip::from(traces.dtheta_dxtilde.axis_iter_mut(Axis(0)))
            .and(trace.x_tilde.axis_iter(Axis(0)))
            .and(&derivs)
            .par_for_each(|mut block, xt, &(d1, d2)| {
                for a in 0..d {
                    let xa = d2 * xt[a];
                    for b in 0..d {
                        block[[a, b]] += scale * xa * theta[b];
                    }
                    block[[a, a]] += scale * d1;
                }
            });
        traces.dxtilde_dw += &trace.dxtilde_dw;
        traces.theta_steps += 1;

        m.theta.scaled_add(-eps, &grad);
        if hyper.fit_intercept {
            let b = m.intercept.unwrap_or(0.0);
            m.intercept = Some(b - eps * grad_b);
        }
        if !m.is_finite() {
            return Err(SalError::Diverged {
                stage: "theta update",
                iter: j,
            });
        }
    }
    if traces.theta_steps > 0 {
        traces.dxtilde_dw /= traces.theta_steps as f64;
    }
    Ok((m, traces))
}

/// Mean clean loss of each environment.
pub fn env_losses(model: &LinearModel, envs: &[EnvDataset], loss: LossKind) -> Result<Vec<f64>> {
    loss.check(model.task)?;
    envs.iter()
        .map(|e| {
            if e.is_empty() {
                return Err(SalError::Empty(format!("environment {}", e.env_id)));
            }
            model.check_dim(e.dim())?;
            let mut total = 0.0;
            for (x, &y) in e.x.outer_iter().zip(e.y.iter()) {
                loss.check_label(y)?;
                total += loss.score_derivs(model.score_unchecked(x), y).0;
            }
            Ok(total / e.len() as f64)
        })
        .collect()
}

fn extreme_envs(losses: &[f64]) -> (usize, usize) {
    let mut hi = 0;
    let mut lo = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l > losses[hi] {
            hi = i;
        }
        if l < losses[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

fn r_from_losses(losses: &[f64], alpha: f64) -> f64 {
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let (hi, lo) = extreme_envs(losses);
    mean + alpha * (losses[hi] - losses[lo])
}

/// `R = mean_e L^e + α (max_e L^e − min_e L^e)` on clean data.
pub fn compute_r(model: &LinearModel, envs: &[EnvDataset], loss: LossKind, alpha: f64) -> Result<f64> {
    if envs.is_empty() {
        return Err(SalError::Empty("no environments".into()));
    }
    Ok(r_from_losses(&env_losses(model, envs, loss)?, alpha))
}

fn env_loss_grad(model: &LinearModel, env: &EnvDataset, loss: LossKind) -> Array1<f64> {
    let mut g = Array1::<f64>::zeros(env.dim());
    for (x, &y) in env.x.outer_iter().zip(env.y.iter()) {
        let d1 = loss.score_derivs(model.score_unchecked(x), y).1;
        g.scaled_add(d1, &x);
    }
    g / env.len() as f64
}

/// Gradient of R with respect to θ; the margin term differentiates through
/// the currently worst and best environments (lowest index on ties).
pub fn dr_dtheta(
    model: &LinearModel,
    envs: &[EnvDataset],
    loss: LossKind,
    alpha: f64,
) -> Result<Array1<f64>> {
    let losses = env_losses(model, envs, loss)?;
    let grads: Vec<Array1<f64>> = envs.iter().map(|e| env_loss_grad(model, e, loss)).collect();
    let mut g = Array1::<f64>::zeros(model.dim());
    for gi in &grads {
        g += gi;
    }
    g /= envs.len() as f64;
    let (hi, lo) = extreme_envs(&losses);
    if hi != lo && alpha != 0.0 {
        g.scaled_add(alpha, &grads[hi]);
        g.scaled_add(-alpha, &grads[lo]);
    }
    Ok(g)
}

/// Approximate `∂R/∂w` from the traces of the current outer iteration.
pub fn grad_r_wrt_w(
    traces: &JacobianTraces,
    envs: &[EnvDataset],
    model: &LinearModel,
    loss: LossKind,
    alpha: f64,
) -> Result<Array1<f64>> {
    let d = common_dim(envs)?;
    let n: usize = envs.iter().map(EnvDataset::len).sum();
    if traces.n() != n || traces.dxtilde_dw.ncols() != d {
        return Err(SalError::InvalidParam(format!(
            "stale traces: built for {} samples, data has {n}",
            traces.n()
        )));
    }
    let g = dr_dtheta(model, envs, loss, alpha)?;
    let mut out = Array1::<f64>::zeros(d);
    for (block, dw) in traces
        .dtheta_dxtilde
        .outer_iter()
        .zip(traces.dxtilde_dw.outer_iter())
    {
        // (gᵀ B_i)_k · (∂x̃_{ik}/∂w_k)
        let v = g.dot(&block);
        Zip::from(&mut out).and(&v).and(&dw).for_each(|o, &a, &b| *o += a * b);
    }
    Ok(out)
}

/// One completed outer iteration, kept for inspection and gradient checks.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub theta_start: LinearModel,
    pub weights_used: CovariateWeights,
    pub model: LinearModel,
    pub traces: JacobianTraces,
    pub grad_w: Array1<f64>,
    pub r_value: f64,
}

/// Step-wise driver for the alternating optimization.
pub struct SalTrainer<'a> {
    envs: &'a [EnvDataset],
    pooled: Pooled,
    hyper: SalHyperParams,
    loss: LossKind,
    model: LinearModel,
    weights: CovariateWeights,
    history: Vec<SalRecord>,
}

impl<'a> SalTrainer<'a> {
    pub fn new(envs: &'a [EnvDataset], hyper: SalHyperParams, loss: LossKind) -> Result<Self> {
        hyper.validate()?;
        let pooled = pool(envs)?;
        let d = pooled.dim();
        let task = task_for(loss);
        let mut model = LinearModel::zeros(d, task);
        if hyper.fit_intercept {
            model.intercept = Some(0.0);
        }
        Ok(SalTrainer {
            envs,
            pooled,
            hyper,
            loss,
            model,
            weights: CovariateWeights::ones(d),
            history: Vec::new(),
        })
    }

    /// Starts the θ loop from `model` instead of zeros.
    pub fn with_model(mut self, model: LinearModel) -> Result<Self> {
        model.check_dim(self.pooled.dim())?;
        if model.task != task_for(self.loss) {
            return Err(SalError::InvalidParam(format!(
                "initial model task {:?} does not match the loss",
                model.task
            )));
        }
        self.model = model;
        Ok(self)
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn weights(&self) -> &CovariateWeights {
        &self.weights
    }

    pub fn hyper(&self) -> &SalHyperParams {
        &self.hyper
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn envs(&self) -> &'a [EnvDataset] {
        self.envs
    }

    pub fn history(&self) -> &[SalRecord] {
        &self.history
    }

    /// Runs the θ loop and computes the weight gradient without updating `w`.
    pub fn probe(&self) -> Result<OuterStep> {
        let (model, traces) =
            theta_loop_pooled(&self.model, &self.weights, &self.pooled, &self.hyper, self.loss)?;
        let r_value = compute_r(&model, self.envs, self.loss, self.hyper.alpha)?;
        let grad_w = if self.hyper.w_iters > 0 {
            grad_r_wrt_w(&traces, self.envs, &model, self.loss, self.hyper.alpha)?
        } else {
            Array1::zeros(self.weights.dim())
        };
        Ok(OuterStep {
            theta_start: self.model.clone(),
            weights_used: self.weights.clone(),
            model,
            traces,
            grad_w,
            r_value,
        })
    }

    /// One outer iteration: θ loop, then `T_w` weight steps and a projection.
    pub fn step(&mut self) -> Result<OuterStep> {
        let out = self.probe()?;
        if self.hyper.w_iters > 0 {
            let mut raw = self.weights.as_array().clone();
            for _ in 0..self.hyper.w_iters {
                raw.scaled_add(-self.hyper.step_w, &out.grad_w);
            }
            self.weights = project_weights(raw.view())?;
        }
        self.model = out.model.clone();
        let env_losses = env_losses(&self.model, self.envs, self.loss)?;
        if !out.r_value.is_finite() {
            return Err(SalError::Diverged {
                stage: "weight objective",
                iter: self.history.len(),
            });
        }
        self.history.push(SalRecord {
            iter: self.history.len(),
            r_value: out.r_value,
            env_losses,
            theta: self.model.theta.clone(),
            weights: self.weights.as_array().clone(),
            radius: out.traces.last_mean_cost,
        });
        Ok(out)
    }

    pub fn finish(self) -> SalModel {
        SalModel {
            model: self.model,
            weights: self.weights,
            history: self.history,
        }
    }
}

/// Full alternating optimization with `w` starting at all ones.
pub fn train_sal(envs: &[EnvDataset], hyper: &SalHyperParams, loss: LossKind) -> Result<SalModel> {
    let mut trainer = SalTrainer::new(envs, hyper.clone(), loss)?;
    for _ in 0..hyper.outer_iters {
        trainer.step()?;
    }
    Ok(trainer.finish())
}
