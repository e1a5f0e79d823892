//! The weighted transport cost `c_w(x, x') = Σ (w_i (x_i - x'_i))²`, the
//! weight set `{w ≥ 1, min w = 1}` and the certificate radius.

use ndarray::{Array1, ArrayView1};

use crate::adversary::{perturb_batch, AdversaryConfig};
use crate::dataset::{pool, EnvDataset};
use crate::error::{Result, SalError};
use crate::model::{LinearModel, LossKind};

/// Per-covariate transport weights. Every entry is ≥ 1 and the smallest is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateWeights(Array1<f64>);

impl CovariateWeights {
    pub fn ones(dim: usize) -> Self {
        CovariateWeights(Array1::ones(dim))
    }

    /// Validates an already-feasible vector. Use [`project_weights`] for arbitrary input.
    pub fn new(w: Array1<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(SalError::Empty("weights".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(SalError::NonFinite("weights".into()));
        }
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        if (min - 1.0).abs() > 1e-12 {
            return Err(SalError::InvalidParam(format!(
                "weights must have minimum 1, got {min}"
            )));
        }
        Ok(CovariateWeights(w))
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

pub fn cost_w(x1: ArrayView1<f64>, x2: ArrayView1<f64>, w: &CovariateWeights) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(SalError::DimensionMismatch {
            expected: x1.len(),
            got: x2.len(),
        });
    }
    if w.dim() != x1.len() {
        return Err(SalError::DimensionMismatch {
            expected: x1.len(),
            got: w.dim(),
        });
    }
    Ok(cost_unchecked(x1, x2, w.view()))
}

#[inline]
pub(crate) fn cost_unchecked(x1: ArrayView1<f64>, x2: ArrayView1<f64>, w: ArrayView1<f64>) -> f64 {
    x1.iter()
        .zip(x2.iter())
        .zip(w.iter())
        .map(|((a, b), wi)| {
            let t = wi * (a - b);
            t * t
        })
        .sum()
}

/// Euclidean projection onto `{w ≥ 1, min w = 1}`.
///
/// Clamping to 1 already lands in the set unless every entry exceeds 1, in
/// which case the smallest entry (lowest index on ties) is pinned to 1.
pub fn project_weights(raw: ArrayView1<f64>) -> Result<CovariateWeights> {
    if raw.is_empty() {
        return Err(SalError::Empty("weights".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(SalError::NonFinite("weights".into()));
    }
    let mut w = raw.mapv(|v| v.max(1.0));
    if raw.iter().all(|&v| v > 1.0) {
        let mut arg = 0;
        for (i, &v) in raw.iter().enumerate() {
            if v < raw[arg] {
                arg = i;
            }
        }
        w[arg] = 1.0;
    }
    Ok(CovariateWeights(w))
}

/// Mean transport cost of the adversary's perturbations on the pooled data:
/// the radius at which the trained Lagrangian surrogate certifies worst-case risk.
pub fn empirical_radius(
    model: &LinearModel,
    loss: LossKind,
    w: &CovariateWeights,
    envs: &[EnvDataset],
    config: &AdversaryConfig,
) -> Result<f64> {
    if config.lambda <= 0.0 {
        return Err(SalError::InvalidParam("certificate needs lambda > 0".into()));
    }
    let pooled = pool(envs)?;
    if pooled.n() == 0 {
        return Err(SalError::Empty("training data".into()));
    }
    let trace = perturb_batch(model, loss, pooled.x.view(), pooled.y.view(), w, config)?;
    Ok(trace.mean_cost(pooled.x.view(), w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cost_examples() {
        let w = CovariateWeights::ones(2);
        let x = array![0.3, -1.2];
        assert_eq!(cost_w(x.view(), x.view(), &w).unwrap(), 0.0);
        assert_eq!(cost_w(array![1.0, 0.0].view(), array![0.0, 0.0].view(), &w).unwrap(), 1.0);
        let w = CovariateWeights::new(array![1.0, 3.0]).unwrap();
        assert_eq!(cost_w(array![1.0, 1.0].view(), array![0.0, 0.0].view(), &w).unwrap(), 10.0);
    }

    #[test]
    fn cost_is_symmetric_and_rejects_mismatch() {
        let w = CovariateWeights::new(array![1.0, 2.5]).unwrap();
        let a = array![0.1, 2.0];
        let b = array![-1.0, 0.5];
        assert_eq!(
            cost_w(a.view(), b.view(), &w).unwrap(),
            cost_w(b.view(), a.view(), &w).unwrap()
        );
        assert!(cost_w(a.view(), array![1.0].view(), &w).is_err());
    }

    #[test]
    fn doubling_weights_quadruples_cost() {
        let w = CovariateWeights::new(array![1.0, 2.0]).unwrap();
        let w2 = array![2.0, 4.0];
        let a = array![0.4, -0.7];
        let b = array![1.0, 0.2];
        let c1 = cost_w(a.view(), b.view(), &w).unwrap();
        let c2 = cost_unchecked(a.view(), b.view(), w2.view());
        assert!((c2 - 4.0 * c1).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let p = |v: Array1<f64>| project_weights(v.view()).unwrap().into_inner();
        assert_eq!(p(array![1.0, 2.0, 3.0]), array![1.0, 2.0, 3.0]);
        assert_eq!(p(array![0.5, 2.0]), array![1.0, 2.0]);
        assert_eq!(p(array![2.0, 3.0]), array![1.0, 3.0]);
        // ties pin the lowest index
        assert_eq!(p(array![2.0, 2.0]), array![1.0, 2.0]);
    }

    #[test]
    fn projection_rejects_non_finite() {
        assert!(project_weights(array![1.0, f64::NAN].view()).is_err());
        assert!(project_weights(Array1::<f64>::zeros(0).view()).is_err());
    }

    #[test]
    fn weights_constructor_enforces_min_one() {
        assert!(CovariateWeights::new(array![2.0, 3.0]).is_err());
        assert!(CovariateWeights::new(array![1.0, 3.0]).is_ok());
    }
}
