//! Inner maximization of the Lagrangian surrogate
//! `ℓ(θ; x̃, y) − λ·c_w(x̃, x)` by gradient ascent on the inputs.
//!
//! Labels are never moved: the cost of changing `y` is infinite, so the
//! adversary only ever perturbs `X`. Rows are independent and are processed
//! in parallel; the trace is assembled in input order.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::cost::{cost_unchecked, CovariateWeights};
use crate::error::{Result, SalError};
use crate::model::{LinearModel, LossKind};

/// Backtracking gives up after this many halvings of the step for one sample.
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryConfig {
    pub ascent_steps: usize,
    pub step_size_x: f64,
    pub lambda: f64,
    pub early_stop_tol: f64,
    /// Halve the step for a sample whenever it would decrease its objective.
    pub backtracking: bool,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            ascent_steps: 20,
            step_size_x: 0.1,
            lambda: 1.0,
            early_stop_tol: 1e-7,
            backtracking: true,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ascent_steps == 0 {
            return Err(SalError::InvalidParam("ascent_steps must be >= 1".into()));
        }
        if !(self.step_size_x > 0.0 && self.step_size_x.is_finite()) {
            return Err(SalError::InvalidParam("step_size_x must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SalError::InvalidParam("lambda must be >= 0".into()));
        }
        if !(self.early_stop_tol >= 0.0) {
            return Err(SalError::InvalidParam("early_stop_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Final adversarial inputs and the accumulated diagonal of `∂X̃/∂w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTrace {
    pub x_tilde: Array2<f64>,
    pub dxtilde_dw: Array2<f64>,
    /// Ascent steps actually taken per sample.
    pub steps_taken: Vec<usize>,
}

impl PerturbationTrace {
    /// Mean of `c_w(x̃_i, x_i)` over the batch.
    pub fn mean_cost(&self, x: ArrayView2<f64>, w: &CovariateWeights) -> f64 {
        let n = x.nrows();
        if n == 0 {
            return 0.0;
        }
        let total: f64 = self
            .x_tilde
            .outer_iter()
            .zip(x.outer_iter())
            .map(|(xt, x0)| cost_unchecked(xt, x0, w.view()))
            .sum();
        total / n as f64
    }
}

struct RowResult {
    x_tilde: Vec<f64>,
    dxtilde_dw: Vec<f64>,
    steps: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn weighted_cost(xt: &[f64], x0: &[f64], w: &[f64]) -> f64 {
    xt.iter()
        .zip(x0)
        .zip(w)
        .map(|((a, b), wi)| {
            let t = wi * (a - b);
            t * t
        })
        .sum()
}

// Rows are short (d is the covariate count), so the ascent works on slices.
struct Row<'a> {
    theta: &'a [f64],
    bias: f64,
    loss: LossKind,
    x0: &'a [f64],
    y: f64,
    w: &'a [f64],
    lambda: f64,
}

impl Row<'_> {
    #[inline]
    fn objective(&self, xt: &[f64]) -> f64 {
        let l = self.loss.score_derivs(dot(self.theta, xt) + self.bias, self.y).0;
        if self.lambda == 0.0 {
            l
        } else {
            l - self.lambda * weighted_cost(xt, self.x0, self.w)
        }
    }
}

fn perturb_row(row: &Row<'_>, cfg: &AdversaryConfig, sample: usize) -> Result<RowResult> {
    let d = row.x0.len();
    let lambda = row.lambda;
    let w2: Vec<f64> = row.w.iter().map(|v| v * v).collect();
    let mut xt = row.x0.to_vec();
    let mut acc = vec![0.0; d];
    let mut eps = cfg.step_size_x;
    let mut obj = row.objective(&xt);
    let mut grad = vec![0.0; d];
    let mut cand = vec![0.0; d];
    let mut steps = 0;

    'ascent: for _ in 0..cfg.ascent_steps {
        let s = dot(row.theta, &xt) + row.bias;
        let d1 = row.loss.score_derivs(s, row.y).1;
        for k in 0..d {
            grad[k] = d1 * row.theta[k] - 2.0 * lambda * w2[k] * (xt[k] - row.x0[k]);
        }

        let mut halvings = 0;
        let cand_obj = loop {
            for k in 0..d {
                cand[k] = xt[k] + eps * grad[k];
            }
            let o = row.objective(&cand);
            if !o.is_finite() || cand.iter().any(|v| !v.is_finite()) {
                if cfg.backtracking && halvings < MAX_HALVINGS {
                    eps *= 0.5;
                    halvings += 1;
                    continue;
                }
                return Err(SalError::AdversaryDiverged { sample });
            }
            if !cfg.backtracking || o >= obj {
                break o;
            }
            if halvings >= MAX_HALVINGS {
                // no ascent direction left at machine precision
                break 'ascent;
            }
            eps *= 0.5;
            halvings += 1;
        };

        // d/dw_k of the step −2ελw_k²Δ_k, so the 2w_k factor stays in
        if lambda != 0.0 {
            for k in 0..d {
                acc[k] += -4.0 * eps * lambda * row.w[k] * (xt[k] - row.x0[k]);
            }
        }
        let step_norm = grad.iter().fold(0.0_f64, |m, g| m.max((eps * g).abs()));
        std::mem::swap(&mut xt, &mut cand);
        obj = cand_obj;
        steps += 1;
        if step_norm < cfg.early_stop_tol {
            break;
        }
    }

    Ok(RowResult {
        x_tilde: xt,
        dxtilde_dw: acc,
        steps,
    })
}

/// Runs the input-space ascent on every row of `x`, starting from `x` itself.
pub fn perturb_batch(
    model: &LinearModel,
    loss: LossKind,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: &CovariateWeights,
    config: &AdversaryConfig,
) -> Result<PerturbationTrace> {
    config.validate()?;
    loss.check(model.task)?;
    model.check_dim(x.ncols())?;
    if w.dim() != x.ncols() {
        return Err(SalError::DimensionMismatch {
            expected: x.ncols(),
            got: w.dim(),
        });
    }
    if y.len() != x.nrows() {
        return Err(SalError::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    for &v in y.iter() {
        loss.check_label(v)?;
    }

    let x = x.as_standard_layout();
    let theta = model.theta.to_vec();
    let wv = w.as_array().to_vec();
    let d = x.ncols();
    let flat = x.as_slice().expect("standard layout");
    let rows: Vec<RowResult> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row = Row {
                theta: &theta,
                bias: model.intercept.unwrap_or(0.0),
                loss,
                x0: &flat[i * d..(i + 1) * d],
                y: y[i],
                w: &wv,
                lambda: config.lambda,
            };
            perturb_row(&row, config, i)
        })
        .collect::<Result<_>>()?;

    let (n, d) = x.dim();
    let mut x_tilde = Array2::zeros((n, d));
    let mut dxtilde_dw = Array2::zeros((n, d));
    let mut steps_taken = Vec::with_capacity(n);
    for (i, r) in rows.into_iter().enumerate() {
        x_tilde.row_mut(i).assign(&ArrayView1::from(&r.x_tilde));
        dxtilde_dw.row_mut(i).assign(&ArrayView1::from(&r.dxtilde_dw));
        steps_taken.push(r.steps);
    }
    Ok(PerturbationTrace {
        x_tilde,
        dxtilde_dw,
        steps_taken,
    })
}

/// Empirical mean of the surrogate `ℓ(θ; x̃_i, y_i) − λ c_w(x̃_i, x_i)`.
pub fn surrogate_loss(
    model: &LinearModel,
    loss: LossKind,
    trace: &PerturbationTrace,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: &CovariateWeights,
    lambda: f64,
) -> Result<f64> {
    if trace.x_tilde.dim() != x.dim() {
        return Err(SalError::DimensionMismatch {
            expected: x.nrows(),
            got: trace.x_tilde.nrows(),
        });
    }
    if y.len() != x.nrows() {
        return Err(SalError::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(SalError::Empty("batch".into()));
    }
    model.check_dim(x.ncols())?;
    if w.dim() != x.ncols() {
        return Err(SalError::DimensionMismatch {
            expected: x.ncols(),
            got: w.dim(),
        });
    }
    let total: f64 = trace
        .x_tilde
        .outer_iter()
        .zip(x.outer_iter())
        .zip(y.iter())
        .map(|((xt, x0), &yi)| {
            let l = loss.score_derivs(model.score_unchecked(xt), yi).0;
            l - lambda * cost_unchecked(xt, x0, w.view())
        })
        .sum();
    Ok(total / x.nrows() as f64)
}
