//! Seeded simulation regimes: the two-covariate toy problem, selection bias
//! via rejection sampling, and anti-causal unstable covariates.
//!
//! Every environment draws from its own stream `(seed, regime, env index)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{EnvDataset, EnvMeta};
use crate::error::{Result, SalError};
use crate::rng::rng_for;

/// How the second argument of `N(μ, ·)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseParam {
    #[default]
    StdDev,
    Variance,
}

impl NoiseParam {
    pub fn sd(self, p: f64) -> f64 {
        match self {
            NoiseParam::StdDev => p,
            NoiseParam::Variance => p.sqrt(),
        }
    }
}

/// Training and test environments of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Vec<EnvDataset>,
    pub test: Vec<EnvDataset>,
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| SalError::InvalidParam(format!("normal sd {sd}: {e}")))
}

// ---------------------------------------------------------------------------
// toy

pub const TOY_TRAIN_SIZES: [usize; 2] = [180, 20];
pub const TOY_TRAIN_ALPHAS: [f64; 2] = [1.0, -0.1];
pub const TOY_TEST_ALPHAS: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];

/// `Y = 5S + S² + ε₁`, `V = αY + ε₂`, columns `[S, V]`, one environment per α.
pub fn gen_toy(sizes: &[usize], alphas: &[f64], seed: u64) -> Result<Vec<EnvDataset>> {
    gen_toy_with(sizes, alphas, seed, NoiseParam::StdDev)
}

pub fn gen_toy_with(
    sizes: &[usize],
    alphas: &[f64],
    seed: u64,
    noise: NoiseParam,
) -> Result<Vec<EnvDataset>> {
    if sizes.len() != alphas.len() {
        return Err(SalError::InvalidParam(format!(
            "{} sizes for {} alphas",
            sizes.len(),
            alphas.len()
        )));
    }
    let s_dist = normal(noise.sd(0.5))?;
    let e1 = normal(noise.sd(0.1))?;
    let e2 = normal(noise.sd(1.0))?;
    sizes
        .iter()
        .zip(alphas)
        .enumerate()
        .map(|(k, (&n, &alpha))| {
            if n == 0 {
                return Err(SalError::InvalidParam("toy environment size must be >= 1".into()));
            }
            let mut rng = rng_for(seed, "toy", k as u64);
            let mut x = Array2::zeros((n, 2));
            let mut y = Array1::zeros(n);
            for i in 0..n {
                let s: f64 = s_dist.sample(&mut rng);
                let yi = 5.0 * s + s * s + e1.sample(&mut rng);
                x[[i, 0]] = s;
                x[[i, 1]] = alpha * yi + e2.sample(&mut rng);
                y[i] = yi;
            }
            let mut params = BTreeMap::new();
            params.insert("alpha".to_string(), alpha);
            Ok(EnvDataset::new(x, y, format!("alpha={alpha}"))?.with_meta(EnvMeta {
                params,
                acceptance: Vec::new(),
            }))
        })
        .collect()
}

/// 180 points at α = 1 and 20 at α = −0.1 for training; `test_n` points for
/// each α in {−2, −1.5, …, 2} for testing.
pub fn toy_data(test_n: usize, seed: u64) -> Result<GeneratedData> {
    let train = gen_toy(&TOY_TRAIN_SIZES, &TOY_TRAIN_ALPHAS, seed)?;
    let sizes = vec![test_n; TOY_TEST_ALPHAS.len()];
    let test = gen_toy(&sizes, &TOY_TEST_ALPHAS, crate::rng::derive_seed(seed, "toy-test", 0))?;
    Ok(GeneratedData { train, test })
}

// ---------------------------------------------------------------------------
// selection bias

pub const SELECTION_TEST_RS: [f64; 10] = [-3.0, -2.0, -1.7, -1.5, -1.3, 1.3, 1.5, 1.7, 2.0, 3.0];
pub const SELECTION_SECOND_R: f64 = -1.1;
const STABLE_PATTERN: [f64; 6] = [1.0 / 3.0, -2.0 / 3.0, 1.0, -1.0 / 3.0, 2.0 / 3.0, -1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionBiasConfig {
    pub n: usize,
    pub n_s: usize,
    pub n_v: usize,
    pub n_b: usize,
    pub r: f64,
    pub kappa: f64,
    pub beta: f64,
    pub classification: bool,
    pub noise_sd: f64,
    pub noise: NoiseParam,
    pub test_rs: Vec<f64>,
    pub test_n: usize,
    /// Proposals allowed per environment before giving up.
    pub max_proposals: u64,
    pub seed: u64,
}

impl Default for SelectionBiasConfig {
    fn default() -> Self {
        SelectionBiasConfig {
            n: 2000,
            n_s: 5,
            n_v: 5,
            n_b: 1,
            r: 2.0,
            kappa: 0.95,
            beta: 1.0,
            classification: false,
            noise_sd: 0.3,
            noise: NoiseParam::StdDev,
            test_rs: SELECTION_TEST_RS.to_vec(),
            test_n: 1000,
            max_proposals: 200_000_000,
            seed: 0,
        }
    }
}

impl SelectionBiasConfig {
    pub fn p(&self) -> usize {
        self.n_s + self.n_v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SalError::InvalidParam(m));
        if self.n_s < 3 {
            return bad(format!("n_s must be >= 3, got {}", self.n_s));
        }
        if self.n_b > self.n_v {
            return bad(format!("n_b = {} exceeds n_v = {}", self.n_b, self.n_v));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad(format!("kappa must be in (0,1), got {}", self.kappa));
        }
        for &r in std::iter::once(&self.r).chain(&self.test_rs) {
            if !(r.abs() > 1.0 && r.is_finite()) {
                return bad(format!("|r| must exceed 1, got {r}"));
            }
        }
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        Ok(())
    }

    /// Number of majority-environment points, `⌈κ n⌉`.
    pub fn majority_count(&self) -> usize {
        ((self.kappa * self.n as f64) - 1e-9).ceil() as usize
    }
}

/// Stable coefficients `[1/3, −2/3, 1, −1/3, 2/3, −1]` repeated cyclically.
pub fn stable_coefficients(n_s: usize) -> Array1<f64> {
    (0..n_s).map(|i| STABLE_PATTERN[i % STABLE_PATTERN.len()]).collect()
}

/// `f(s) = θ_sᵀ s + β s₁ s₂ s₃`.
pub fn stable_signal(s: &[f64], theta_s: &Array1<f64>, beta: f64) -> f64 {
    let lin: f64 = s.iter().zip(theta_s.iter()).map(|(a, b)| a * b).sum();
    lin + beta * s[0] * s[1] * s[2]
}

/// `Π_{i < n_b} |r|^{−5 |f(s) − sign(r) v_i|}`.
pub fn selection_probability(f: f64, v_biased: &[f64], r: f64) -> f64 {
    let sign = r.signum();
    v_biased
        .iter()
        .map(|&v| r.abs().powf(-5.0 * (f - sign * v).abs()))
        .product()
}

fn selection_env(
    cfg: &SelectionBiasConfig,
    r: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
    env_id: String,
) -> Result<EnvDataset> {
    let (n_s, n_v) = (cfg.n_s, cfg.n_v);
    let theta_s = stable_coefficients(n_s);
    let eps = normal(cfg.noise.sd(cfg.noise_sd))?;
    let mut x = Array2::zeros((count, n_s + n_v));
    let mut y = Array1::zeros(count);
    let mut acceptance = Vec::with_capacity(count);
    let mut z = vec![0.0; n_s + 1];
    let mut s = vec![0.0; n_s];
    let mut v = vec![0.0; n_v];
    let mut proposals: u64 = 0;
    let mut filled = 0;
    while filled < count {
        if proposals >= cfg.max_proposals
            || (proposals >= 1_000_000 && (filled as f64) / (proposals as f64) < 1e-6)
        {
            return Err(SalError::LowAcceptance {
                r,
                rate: filled as f64 / proposals.max(1) as f64,
            });
        }
        proposals += 1;
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        for i in 0..n_s {
            s[i] = 0.8 * z[i] + 0.2 * z[i + 1];
        }
        for vi in v.iter_mut() {
            *vi = StandardNormal.sample(rng);
        }
        let f = stable_signal(&s, &theta_s, cfg.beta);
        let noise: f64 = eps.sample(rng);
        let p_hat = selection_probability(f, &v[..cfg.n_b], r);
        let mu: f64 = rng.random();
        if mu > p_hat {
            continue;
        }
        let target = f + noise;
        y[filled] = if cfg.classification {
            if target >= 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            target
        };
        for i in 0..n_s {
            x[[filled, i]] = s[i];
        }
        for j in 0..n_v {
            x[[filled, n_s + j]] = v[j];
        }
        acceptance.push(p_hat);
        filled += 1;
    }
    let mut params = BTreeMap::new();
    params.insert("r".to_string(), r);
    params.insert("beta".to_string(), cfg.beta);
    params.insert("n_s".to_string(), n_s as f64);
    params.insert("n_b".to_string(), cfg.n_b as f64);
    params.insert("proposals".to_string(), proposals as f64);
    Ok(EnvDataset::new(x, y, env_id)?.with_meta(EnvMeta { params, acceptance }))
}

/// Training mixture (`⌈κn⌉` points at `r`, the rest at `r = −1.1`) and one
/// test environment per entry of `test_rs`.
pub fn gen_selection_bias(cfg: &SelectionBiasConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let majority = cfg.majority_count();
    let minority = cfg.n - majority;
    let mut train = vec![selection_env(
        cfg,
        cfg.r,
        majority,
        &mut rng_for(cfg.seed, "selection-bias", 0),
        format!("train_r={}", cfg.r),
    )?];
    if minority > 0 {
        train.push(selection_env(
            cfg,
            SELECTION_SECOND_R,
            minority,
            &mut rng_for(cfg.seed, "selection-bias", 1),
            format!("train_r={SELECTION_SECOND_R}"),
        )?);
    }
    let test = cfg
        .test_rs
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            selection_env(
                cfg,
                r,
                cfg.test_n,
                &mut rng_for(cfg.seed, "selection-bias", 2 + k as u64),
                format!("test_r={r}"),
            )
        })
        .collect::<Result<_>>()?;
    Ok(GeneratedData { train, test })
}

// ---------------------------------------------------------------------------
// anti-causal

pub const ANTICAUSAL_SIGMAS: [f64; 10] = [0.2, 0.5, 1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AntiCausalConfig {
    pub n_per_env: usize,
    pub n_s: usize,
    pub n_v: usize,
    /// Component means, each of length `n_s`.
    pub means: Vec<Array1<f64>>,
    /// Noise scale on `V` for each component.
    pub sigmas: Vec<f64>,
    /// Mixture weights over components, one row per environment.
    pub mixtures: Vec<Vec<f64>>,
    pub n_train_envs: usize,
    pub beta: f64,
    pub noise_sd: f64,
    /// Scale of `θ_v ~ N(0, scale)`; zero disables the anti-causal link.
    pub theta_v_scale: f64,
    pub noise: NoiseParam,
    pub seed: u64,
}

/// Component means: zeros except the last two coordinates, which take the
/// sign patterns (+,+), (+,−), (−,+) and then (−,−) for every later component.
pub fn default_means(n_s: usize, k: usize) -> Vec<Array1<f64>> {
    let patterns = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0)];
    (0..k)
        .map(|i| {
            let (a, b) = patterns.get(i).copied().unwrap_or((-1.0, -1.0));
            let mut m = Array1::zeros(n_s);
            if n_s >= 2 {
                m[n_s - 2] = a;
                m[n_s - 1] = b;
            }
            m
        })
        .collect()
}

impl Default for AntiCausalConfig {
    fn default() -> Self {
        Self::new(5, 5)
    }
}

impl AntiCausalConfig {
    pub fn new(n_s: usize, n_v: usize) -> Self {
        let k = ANTICAUSAL_SIGMAS.len();
        AntiCausalConfig {
            n_per_env: 1000,
            n_s,
            n_v,
            means: default_means(n_s, k),
            sigmas: ANTICAUSAL_SIGMAS.to_vec(),
            mixtures: (0..k)
                .map(|e| (0..k).map(|c| if c == e { 1.0 } else { 0.0 }).collect())
                .collect(),
            n_train_envs: 3,
            beta: 0.1,
            noise_sd: 0.3,
            theta_v_scale: 0.1,
            noise: NoiseParam::StdDev,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SalError::InvalidParam(m));
        if self.n_s < 3 {
            return bad(format!("n_s must be >= 3, got {}", self.n_s));
        }
        if self.means.len() != self.sigmas.len() {
            return bad("one sigma per component is required".into());
        }
        if self.means.iter().any(|m| m.len() != self.n_s) {
            return bad("component means must have length n_s".into());
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return bad("sigmas must be positive".into());
        }
        for z in &self.mixtures {
            let sum: f64 = z.iter().sum();
            if z.len() != self.means.len() || z.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("mixture weights {z:?} are not on the simplex"));
            }
        }
        if self.n_train_envs > self.mixtures.len() {
            return bad("more training environments than mixtures".into());
        }
        Ok(())
    }
}

/// Ten environments (three train, seven test by default). `θ_s ~ N(1, I)` and
/// `θ_v ~ N(0, scale·I)` are drawn once per seed and logged in each env's meta.
pub fn gen_anticausal(cfg: &AntiCausalConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let mut coef_rng = rng_for(cfg.seed, "anticausal-coefficients", 0);
    let theta_s: Array1<f64> = (0..cfg.n_s)
        .map(|_| 1.0 + std_normal(&mut coef_rng))
        .collect();
    let v_sd = cfg.noise.sd(cfg.theta_v_scale);
    let theta_v: Array1<f64> = (0..cfg.n_v)
        .map(|_| v_sd * std_normal(&mut coef_rng))
        .collect();
    let y_noise = normal(cfg.noise.sd(cfg.noise_sd))?;

    let mut envs = Vec::with_capacity(cfg.mixtures.len());
    for (e, z) in cfg.mixtures.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, "anticausal", e as u64);
        let n = cfg.n_per_env;
        let mut x = Array2::zeros((n, cfg.n_s + cfg.n_v));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = z.len() - 1;
            for (c, &zc) in z.iter().enumerate() {
                acc += zc;
                if u < acc {
                    comp = c;
                    break;
                }
            }
            let mut s = vec![0.0; cfg.n_s];
            for (j, sj) in s.iter_mut().enumerate() {
                *sj = cfg.means[comp][j] + std_normal(&mut rng);
            }
            let yi = stable_signal(&s, &theta_s, cfg.beta) + y_noise.sample(&mut rng);
            let sigma = cfg.noise.sd(cfg.sigmas[comp]);
            for (j, sj) in s.iter().enumerate() {
                x[[i, j]] = *sj;
            }
            for j in 0..cfg.n_v {
                let eps: f64 = StandardNormal.sample(&mut rng);
                x[[i, cfg.n_s + j]] = theta_v[j] * yi + sigma * eps;
            }
            y[i] = yi;
        }
        let mut params = BTreeMap::new();
        let sigma_mix: f64 = z.iter().zip(&cfg.sigmas).map(|(a, b)| a * b).sum();
        params.insert("sigma".to_string(), sigma_mix);
        params.insert("beta".to_string(), cfg.beta);
        for (j, t) in theta_s.iter().enumerate() {
            params.insert(format!("theta_s.{j}"), *t);
        }
        for (j, t) in theta_v.iter().enumerate() {
            params.insert(format!("theta_v.{j}"), *t);
        }
        envs.push(
            EnvDataset::new(x, y, format!("e{}", e + 1))?.with_meta(EnvMeta {
                params,
                acceptance: Vec::new(),
            }),
        );
    }
    let test = envs.split_off(cfg.n_train_envs);
    Ok(GeneratedData { train: envs, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_pattern_repeats() {
        let t = stable_coefficients(8);
        assert_eq!(t[6], 1.0 / 3.0);
        assert_eq!(t[7], -2.0 / 3.0);
        assert_eq!(t[2], 1.0);
    }

    #[test]
    fn selection_probability_examples() {
        assert_eq!(selection_probability(1.0, &[1.0], 2.0), 1.0);
        assert!((selection_probability(1.0, &[0.0], 2.0) - 2f64.powf(-5.0)).abs() < 1e-15);
        // negative r rewards v close to −f
        assert_eq!(selection_probability(1.0, &[-1.0], -3.0), 1.0);
        assert_eq!(selection_probability(0.0, &[], 3.0), 1.0);
    }

    #[test]
    fn majority_count_is_exact() {
        let cfg = SelectionBiasConfig::default();
        assert_eq!(cfg.majority_count(), 1900);
        let cfg = SelectionBiasConfig {
            n: 1001,
            kappa: 0.9,
            ..Default::default()
        };
        assert_eq!(cfg.majority_count(), 901);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_r = SelectionBiasConfig {
            r: 0.5,
            ..Default::default()
        };
        assert!(gen_selection_bias(&bad_r).is_err());
        let bad_nb = SelectionBiasConfig {
            n_b: 6,
            ..Default::default()
        };
        assert!(gen_selection_bias(&bad_nb).is_err());
        let mut ac = AntiCausalConfig::default();
        ac.mixtures[0] = vec![0.5; 10];
        assert!(gen_anticausal(&ac).is_err());
    }

    #[test]
    fn low_acceptance_reports_r() {
        // |r| = 1e6 makes acceptance practically impossible
        let cfg = SelectionBiasConfig {
            n: 10,
            r: 1e6,
            n_b: 5,
            max_proposals: 2_000_000,
            ..Default::default()
        };
        match gen_selection_bias(&cfg) {
            Err(SalError::LowAcceptance { r, .. }) => assert_eq!(r, 1e6),
            other => panic!("expected LowAcceptance, got {other:?}"),
        }
    }

    #[test]
    fn toy_sizes_and_ids() {
        let d = toy_data(50, 3).unwrap();
        assert_eq!(d.train.len(), 2);
        assert_eq!(d.train[0].len(), 180);
        assert_eq!(d.train[1].len(), 20);
        assert_eq!(d.test.len(), 9);
        assert!(d.test.iter().all(|e| e.len() == 50 && e.dim() == 2));
    }
}
