//! Linear predictors and their losses.
//!
//! Every loss here is a function of the linear score `s = θᵀx (+ b)` and the
//! label, so gradients with respect to θ and x share one scalar derivative:
//! `∇_θ ℓ = ℓ'(s)·x` and `∇_x ℓ = ℓ'(s)·θ`. The second derivative `ℓ''(s)` is
//! exposed for the mixed Jacobian used by the weight learner.

use ndarray::{Array1, ArrayView1};

use crate::error::{Result, SalError};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Regression,
    BinaryClassification,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::BinaryClassification => "classification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Absolute,
    Squared,
    LogLoss,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Absolute => "absolute",
            LossKind::Squared => "squared",
            LossKind::LogLoss => "logloss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "absolute" | "abs" | "l1" => Ok(LossKind::Absolute),
            "squared" | "square" | "l2" | "mse" => Ok(LossKind::Squared),
            "logloss" | "log" | "logistic" => Ok(LossKind::LogLoss),
            other => Err(SalError::InvalidParam(format!("unknown loss '{other}'"))),
        }
    }

    /// Value, first and second derivative of the loss with respect to the score.
    ///
    /// Labels are assumed validated. The absolute loss uses the zero
    /// subgradient at the kink.
    #[inline]
    pub fn score_derivs(self, score: f64, y: f64) -> (f64, f64, f64) {
        match self {
            LossKind::Absolute => {
                let r = score - y;
                let d1 = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (r.abs(), d1, 0.0)
            }
            LossKind::Squared => {
                let r = score - y;
                (r * r, 2.0 * r, 2.0)
            }
            LossKind::LogLoss => {
                let p = sigmoid(score);
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let value = -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln();
                (value, p - y, p * (1.0 - p))
            }
        }
    }

    pub(crate) fn check(self, task: Task) -> Result<()> {
        match (self, task) {
            (LossKind::LogLoss, Task::Regression) => Err(SalError::LossTaskMismatch {
                loss: self.name(),
                task: task.name(),
            }),
            _ => Ok(()),
        }
    }

    pub(crate) fn check_label(self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(SalError::NonFinite("label".into()));
        }
        if self == LossKind::LogLoss && y != 0.0 && y != 1.0 {
            return Err(SalError::InvalidLabel(y));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// A linear predictor `θᵀx (+ b)`, optionally squashed through a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub theta: Array1<f64>,
    pub task: Task,
    pub intercept: Option<f64>,
}

impl LinearModel {
    pub fn zeros(dim: usize, task: Task) -> Self {
        LinearModel {
            theta: Array1::zeros(dim),
            task,
            intercept: None,
        }
    }

    pub fn with_intercept(mut self, b: f64) -> Self {
        self.intercept = Some(b);
        self
    }

    pub fn new(theta: Array1<f64>, task: Task) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(SalError::NonFinite("theta".into()));
        }
        Ok(LinearModel {
            theta,
            task,
            intercept: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite()) && self.intercept.map_or(true, f64::is_finite)
    }

    pub(crate) fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.theta.len() {
            return Err(SalError::DimensionMismatch {
                expected: self.theta.len(),
                got,
            });
        }
        Ok(())
    }

    /// Raw linear score without the dimension check.
    #[inline]
    pub(crate) fn score_unchecked(&self, x: ArrayView1<f64>) -> f64 {
        self.theta.dot(&x) + self.intercept.unwrap_or(0.0)
    }

    pub fn score(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.score_unchecked(x))
    }

    /// Regression value, or the clamped class-1 probability.
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<f64> {
        let s = self.score(x)?;
        Ok(self.link(s))
    }

    #[inline]
    pub(crate) fn link(&self, s: f64) -> f64 {
        match self.task {
            Task::Regression => s,
            Task::BinaryClassification => sigmoid(s).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
        }
    }
}

fn validate(model: &LinearModel, kind: LossKind, x: ArrayView1<f64>, y: f64) -> Result<f64> {
    kind.check(model.task)?;
    kind.check_label(y)?;
    model.score(x)
}

pub fn loss(model: &LinearModel, kind: LossKind, x: ArrayView1<f64>, y: f64) -> Result<f64> {
    let s = validate(model, kind, x, y)?;
    Ok(kind.score_derivs(s, y).0)
}

pub fn grad_theta(
    model: &LinearModel,
    kind: LossKind,
    x: ArrayView1<f64>,
    y: f64,
) -> Result<Array1<f64>> {
    let s = validate(model, kind, x, y)?;
    let d1 = kind.score_derivs(s, y).1;
    Ok(x.mapv(|v| d1 * v))
}

pub fn grad_x(
    model: &LinearModel,
    kind: LossKind,
    x: ArrayView1<f64>,
    y: f64,
) -> Result<Array1<f64>> {
    let s = validate(model, kind, x, y)?;
    let d1 = kind.score_derivs(s, y).1;
    Ok(model.theta.mapv(|t| d1 * t))
}

/// Gradient of the loss with respect to the intercept term.
pub fn grad_intercept(model: &LinearModel, kind: LossKind, x: ArrayView1<f64>, y: f64) -> Result<f64> {
    let s = validate(model, kind, x, y)?;
    Ok(kind.score_derivs(s, y).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn reg(theta: Array1<f64>) -> LinearModel {
        LinearModel::new(theta, Task::Regression).unwrap()
    }

    #[test]
    fn predict_examples() {
        assert_eq!(reg(array![0.0, 0.0]).predict(array![3.0, 4.0].view()).unwrap(), 0.0);
        assert_eq!(reg(array![5.0]).predict(array![1.0].view()).unwrap(), 5.0);
        let clf = LinearModel::new(array![0.0], Task::BinaryClassification).unwrap();
        assert_eq!(clf.predict(array![7.0].view()).unwrap(), 0.5);
    }

    #[test]
    fn predict_dimension_mismatch() {
        let err = reg(array![1.0, 2.0]).predict(array![1.0].view()).unwrap_err();
        assert!(matches!(err, SalError::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn classification_probability_is_clamped() {
        let clf = LinearModel::new(array![1.0], Task::BinaryClassification).unwrap();
        let hi = clf.predict(array![1e4].view()).unwrap();
        let lo = clf.predict(array![-1e4].view()).unwrap();
        assert!(hi < 1.0 && lo > 0.0);
    }

    #[test]
    fn loss_examples() {
        let m = reg(array![1.0]);
        assert_eq!(loss(&m, LossKind::Absolute, array![2.0].view(), 2.0).unwrap(), 0.0);
        let m = reg(array![1.0, 1.0]);
        assert_eq!(loss(&m, LossKind::Squared, array![1.0, 2.0].view(), 0.0).unwrap(), 9.0);
        let clf = LinearModel::new(array![0.0], Task::BinaryClassification).unwrap();
        let l = loss(&clf, LossKind::LogLoss, array![1.0].view(), 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logloss_rejects_bad_labels_and_regression() {
        let clf = LinearModel::new(array![0.0], Task::BinaryClassification).unwrap();
        assert!(matches!(
            loss(&clf, LossKind::LogLoss, array![1.0].view(), 0.5),
            Err(SalError::InvalidLabel(_))
        ));
        let m = reg(array![0.0]);
        assert!(matches!(
            loss(&m, LossKind::LogLoss, array![1.0].view(), 1.0),
            Err(SalError::LossTaskMismatch { .. })
        ));
    }

    #[test]
    fn logloss_is_finite_when_saturated() {
        let clf = LinearModel::new(array![1.0], Task::BinaryClassification).unwrap();
        let l = loss(&clf, LossKind::LogLoss, array![1e5].view(), 0.0).unwrap();
        assert!(l.is_finite() && l > 20.0);
    }

    #[test]
    fn gradient_examples() {
        let m = reg(array![1.0]);
        let g = grad_theta(&m, LossKind::Absolute, array![2.0].view(), 2.0).unwrap();
        assert_eq!(g, array![0.0]);

        let m = reg(array![1.0, 1.0]);
        let g = grad_theta(&m, LossKind::Squared, array![1.0, 2.0].view(), 0.0).unwrap();
        assert_eq!(g, array![6.0, 12.0]);
        let gx = grad_x(&m, LossKind::Squared, array![1.0, 2.0].view(), 0.0).unwrap();
        assert_eq!(gx, array![6.0, 6.0]);

        let z = reg(array![0.0, 0.0]);
        let gx = grad_x(&z, LossKind::Squared, array![3.0, -1.0].view(), 2.0).unwrap();
        assert_eq!(gx, array![0.0, 0.0]);
    }

    #[test]
    fn squared_loss_zero_iff_exact() {
        let m = reg(array![2.0]);
        assert_eq!(loss(&m, LossKind::Squared, array![1.5].view(), 3.0).unwrap(), 0.0);
        assert!(loss(&m, LossKind::Squared, array![1.5].view(), 3.0001).unwrap() > 0.0);
    }
}
