use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{concatenate, Array1, Array2, Axis};

use crate::error::{Result, SalError};

/// Generator parameters and per-sample audit values attached to a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnvMeta {
    pub params: BTreeMap<String, f64>,
    /// Per-sample acceptance probability logged by the selection-bias generator.
    pub acceptance: Vec<f64>,
}

/// One environment: a design matrix, its targets and an identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub env_id: String,
    pub meta: EnvMeta,
}

impl EnvDataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, env_id: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(SalError::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let env_id = env_id.into();
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(SalError::NonFinite(format!("environment {env_id}")));
        }
        Ok(EnvDataset {
            x,
            y,
            env_id,
            meta: EnvMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: EnvMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Subset of rows, keeping id and generator params.
    pub fn select(&self, rows: &[usize]) -> EnvDataset {
        let acceptance = if self.meta.acceptance.len() == self.len() {
            rows.iter().map(|&r| self.meta.acceptance[r]).collect()
        } else {
            Vec::new()
        };
        EnvDataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            env_id: self.env_id.clone(),
            meta: EnvMeta {
                params: self.meta.params.clone(),
                acceptance,
            },
        }
    }
}

/// All environments stacked row-wise, remembering which rows came from where.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub ranges: Vec<Range<usize>>,
}

impl Pooled {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Checks that every environment is non-empty and shares one covariate dimension.
pub fn common_dim(envs: &[EnvDataset]) -> Result<usize> {
    let first = envs
        .first()
        .ok_or_else(|| SalError::Empty("no environments".into()))?;
    let d = first.dim();
    for e in envs {
        if e.is_empty() {
            return Err(SalError::Empty(format!("environment {} has no rows", e.env_id)));
        }
        if e.dim() != d {
            return Err(SalError::DimensionMismatch {
                expected: d,
                got: e.dim(),
            });
        }
    }
    Ok(d)
}

pub fn pool(envs: &[EnvDataset]) -> Result<Pooled> {
    common_dim(envs)?;
    let xs: Vec<_> = envs.iter().map(|e| e.x.view()).collect();
    let ys: Vec<_> = envs.iter().map(|e| e.y.view()).collect();
    let x = concatenate(Axis(0), &xs).expect("dimensions checked");
    let y = concatenate(Axis(0), &ys).expect("dimensions checked");
    let mut ranges = Vec::with_capacity(envs.len());
    let mut start = 0;
    for e in envs {
        ranges.push(start..start + e.len());
        start += e.len();
    }
    Ok(Pooled { x, y, ranges })
}
