use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView1, Axis};
use sal_core::datagen::{
    gen_anticausal, gen_selection_bias, gen_toy, selection_probability, stable_coefficients, stable_signal,
    AntiCausalConfig, SelectionBiasConfig, SELECTION_SECOND_R,
};

fn corr(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn toy_correlations_and_stable_slope() {
    let envs = gen_toy(&[10_000, 10_000], &[0.0, 1.0], 17).unwrap();
    let (none, strong) = (&envs[0], &envs[1]);
    assert!(corr(none.x.column(1), none.y.view()).abs() < 0.1);
    assert!(corr(strong.x.column(1), strong.y.view()) > 0.8);
    // least squares of Y on [1, S]
    let n = none.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { none.x[[i, 0]] });
    let y = DVector::from_iterator(n, none.y.iter().cloned());
    let b = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
    assert!((b[1] - 5.0).abs() < 0.2, "slope {}", b[1]);
}

#[test]
fn toy_is_deterministic() {
    let a = gen_toy(&[30, 5], &[1.0, -0.1], 4).unwrap();
    let b = gen_toy(&[30, 5], &[1.0, -0.1], 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_toy(&[30, 5], &[1.0, -0.1], 5).unwrap());
    assert!(gen_toy(&[0], &[1.0], 0).is_err());
    assert!(gen_toy(&[3, 3], &[1.0], 0).is_err());
}

fn big_selection(r: f64) -> SelectionBiasConfig {
    SelectionBiasConfig {
        n: 10_000,
        kappa: 0.999_999,
        r,
        test_rs: vec![],
        seed: 8,
        ..SelectionBiasConfig::default()
    }
}

#[test]
fn selection_bias_induces_signed_correlation() {
    let pos = gen_selection_bias(&big_selection(2.0)).unwrap();
    let env = &pos.train[0];
    assert_eq!(env.len(), 10_000);
    let n_s = 5;
    for j in 0..big_selection(2.0).n_b {
        assert!(corr(env.x.column(n_s + j), env.y.view()) > 0.2);
    }
    let neg = gen_selection_bias(&big_selection(SELECTION_SECOND_R)).unwrap();
    let env = &neg.train[0];
    assert!(corr(env.x.column(n_s), env.y.view()) < 0.0);
}

#[test]
fn stable_coefficients_are_recovered_before_noise() {
    // r close to 1 keeps nearly every proposal, so the stable part is unselected
    let cfg = SelectionBiasConfig {
        beta: 1.0,
        r: 1.000_001,
        ..big_selection(2.0)
    };
    let data = gen_selection_bias(&cfg).unwrap();
    let env = &data.train[0];
    let theta = stable_coefficients(cfg.n_s);
    let n = env.len();
    let x = DMatrix::from_fn(n, cfg.n_s, |i, j| env.x[[i, j]]);
    let y = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let s = env.x.row(i);
            env.y[i] - cfg.beta * s[0] * s[1] * s[2]
        }),
    );
    let b = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
    for j in 0..cfg.n_s {
        assert!((b[j] - theta[j]).abs() < 0.1, "coordinate {j}: {} vs {}", b[j], theta[j]);
    }
}

#[test]
fn logged_acceptance_matches_recomputation() {
    let cfg = SelectionBiasConfig {
        n: 400,
        test_n: 100,
        test_rs: vec![-2.0, 3.0],
        seed: 21,
        ..SelectionBiasConfig::default()
    };
    let data = gen_selection_bias(&cfg).unwrap();
    let theta = stable_coefficients(cfg.n_s);
    for env in data.train.iter().chain(data.test.iter()) {
        let r = env.meta.params["r"];
        assert_eq!(env.meta.acceptance.len(), env.len());
        for (i, row) in env.x.outer_iter().enumerate() {
            let s = row.slice(ndarray::s![..cfg.n_s]).to_vec();
            let v = row.slice(ndarray::s![cfg.n_s..cfg.n_s + cfg.n_b]).to_vec();
            let f = stable_signal(&s, &theta, cfg.beta);
            let want = selection_probability(f, &v, r);
            assert!((env.meta.acceptance[i] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn selection_mixture_counts_are_exact_and_deterministic() {
    let cfg = SelectionBiasConfig {
        n: 300,
        kappa: 0.8,
        test_n: 40,
        seed: 2,
        ..SelectionBiasConfig::default()
    };
    let a = gen_selection_bias(&cfg).unwrap();
    assert_eq!(a.train[0].len(), 240);
    assert_eq!(a.train[1].len(), 60);
    assert_eq!(a.test.len(), cfg.test_rs.len());
    assert!(a.test.iter().all(|e| e.len() == 40));
    assert_eq!(a, gen_selection_bias(&cfg).unwrap());

    let cls = gen_selection_bias(&SelectionBiasConfig {
        classification: true,
        ..cfg
    })
    .unwrap();
    assert!(cls.train.iter().flat_map(|e| e.y.iter()).all(|&y| y == 0.0 || y == 1.0));
}

#[test]
fn anticausal_correlation_weakens_with_noise() {
    let cfg = AntiCausalConfig {
        n_per_env: 10_000,
        seed: 3,
        ..AntiCausalConfig::default()
    };
    let data = gen_anticausal(&cfg).unwrap();
    assert_eq!(data.train.len(), 3);
    assert_eq!(data.test.len(), 7);
    let quiet = &data.train[0];
    let loud = data.test.last().unwrap();
    assert_eq!(quiet.meta.params["sigma"], 0.2);
    assert_eq!(loud.meta.params["sigma"], 15.0);
    for j in 0..cfg.n_v {
        let tv = quiet.meta.params[&format!("theta_v.{j}")];
        if tv == 0.0 {
            continue;
        }
        let c = cfg.n_s + j;
        let near = corr(quiet.x.column(c), quiet.y.view()).abs();
        let far = corr(loud.x.column(c), loud.y.view()).abs();
        assert!(near > far, "V{j}: {near} vs {far}");
    }
}

#[test]
fn anticausal_without_link_is_uncorrelated() {
    let cfg = AntiCausalConfig {
        n_per_env: 10_000,
        theta_v_scale: 0.0,
        seed: 4,
        ..AntiCausalConfig::default()
    };
    let data = gen_anticausal(&cfg).unwrap();
    for env in data.train.iter().chain(data.test.iter()) {
        for j in 0..cfg.n_v {
            assert!(corr(env.x.column(cfg.n_s + j), env.y.view()).abs() < 0.05);
        }
    }
}

#[test]
fn anticausal_is_deterministic() {
    let cfg = AntiCausalConfig {
        n_per_env: 50,
        seed: 9,
        ..AntiCausalConfig::default()
    };
    let a = gen_anticausal(&cfg).unwrap();
    assert_eq!(a, gen_anticausal(&cfg).unwrap());
    let rows: usize = a.train.iter().chain(a.test.iter()).map(|e| e.x.len_of(Axis(0))).sum();
    assert_eq!(rows, 500);
}
