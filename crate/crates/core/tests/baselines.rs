use nalgebra::{DMatrix, DVector};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sal_core::baselines::{
    grid_search, irm_penalty, train_erm, train_irm, train_lasso, train_penalized, train_ridge,
    GdConfig, GridSearchSpec, Penalty, SelectionMetric,
};
use sal_core::{EnvDataset, LinearModel, LossKind, Task};

fn random_problem(seed: u64, n: usize, d: usize) -> EnvDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let beta: Array1<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = x.dot(&beta) + Array1::from_shape_fn(n, |_| rng.random_range(-0.3..0.3));
    EnvDataset::new(x, y, "r").unwrap()
}

fn to_na(env: &EnvDataset) -> (DMatrix<f64>, DVector<f64>) {
    let (n, d) = env.x.dim();
    let x = DMatrix::from_fn(n, d, |i, j| env.x[[i, j]]);
    let y = DVector::from_iterator(n, env.y.iter().cloned());
    (x, y)
}

fn max_abs_diff(a: &Array1<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tight() -> GdConfig {
    GdConfig {
        tol: 1e-12,
        max_iters: 200_000,
        ..GdConfig::default()
    }
}

#[test]
fn erm_matches_normal_equations() {
    for seed in 0..3 {
        let env = random_problem(seed, 100, 5);
        let (x, y) = to_na(&env);
        let want = (x.transpose() * &x).lu().solve(&(x.transpose() * &y)).unwrap();
        let got = train_erm(&[env], LossKind::Squared, &tight()).unwrap();
        assert!(max_abs_diff(&got.theta, &want) < 1e-4);
    }
}

#[test]
fn erm_on_zero_targets_is_zero() {
    let mut env = random_problem(4, 50, 3);
    env.y.fill(0.0);
    let got = train_erm(&[env], LossKind::Squared, &GdConfig::default()).unwrap();
    assert!(got.theta.iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn ridge_matches_regularized_solve() {
    for (seed, lam) in [(1, 0.1), (2, 1.0), (3, 0.01)] {
        let env = random_problem(seed, 100, 5);
        let n = env.len() as f64;
        let (x, y) = to_na(&env);
        let a = x.transpose() * &x / n + DMatrix::identity(5, 5) * lam;
        let want = a.lu().solve(&(x.transpose() * &y / n)).unwrap();
        let got = train_ridge(&[env], LossKind::Squared, lam, &tight()).unwrap();
        assert!(max_abs_diff(&got.theta, &want) < 1e-4);
    }
}

#[test]
fn ridge_extremes() {
    let env = random_problem(5, 60, 4);
    let erm = train_erm(std::slice::from_ref(&env), LossKind::Squared, &tight()).unwrap();
    let r0 = train_ridge(std::slice::from_ref(&env), LossKind::Squared, 0.0, &tight()).unwrap();
    assert!((&erm.theta - &r0.theta).iter().all(|v| v.abs() < 1e-4));
    let big = train_ridge(&[env], LossKind::Squared, 1e6, &GdConfig::default()).unwrap();
    assert!(big.theta.iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn lasso_on_orthonormal_design_soft_thresholds() {
    // columns with XᵀX/n = I, so the mean-loss lasso decouples per coordinate:
    // θ_j = sign(b_j)·max(|b_j| − λ/2, 0) with b = Xᵀy/n
    let x = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let y = array![2.0, 0.5, -0.3, -1.4];
    let env = EnvDataset::new(x.clone(), y.clone(), "o").unwrap();
    let n = 4.0;
    let b = x.t().dot(&y) / n;
    for lam in [0.0, 0.2, 0.9, 5.0] {
        let got = train_lasso(std::slice::from_ref(&env), LossKind::Squared, lam, &tight()).unwrap();
        for j in 0..2 {
            let want = b[j].signum() * (b[j].abs() - lam / 2.0).max(0.0);
            assert!((got.theta[j] - want).abs() < 1e-6, "λ={lam} j={j}: {} vs {want}", got.theta[j]);
        }
    }
}

#[test]
fn lasso_extremes_and_monotone_objective() {
    let env = random_problem(6, 80, 4);
    let erm = train_erm(std::slice::from_ref(&env), LossKind::Squared, &tight()).unwrap();
    let l0 = train_lasso(std::slice::from_ref(&env), LossKind::Squared, 0.0, &tight()).unwrap();
    assert!((&erm.theta - &l0.theta).iter().all(|v| v.abs() < 1e-4));
    let big = train_lasso(std::slice::from_ref(&env), LossKind::Squared, 1e6, &GdConfig::default()).unwrap();
    assert!(big.theta.iter().all(|&v| v == 0.0));
    for pen in [Penalty::L1(0.3), Penalty::L2(0.3)] {
        let rep = train_penalized(std::slice::from_ref(&env), LossKind::Squared, pen, &GdConfig::default()).unwrap();
        for w in rep.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}

#[test]
fn irm_without_penalty_is_erm_on_equal_environments() {
    let a = random_problem(7, 50, 3);
    let b = random_problem(8, 50, 3);
    let envs = [a, b];
    let erm = train_erm(&envs, LossKind::Squared, &tight()).unwrap();
    let irm = train_irm(&envs, LossKind::Squared, 0.0, &tight()).unwrap();
    assert!((&erm.theta - &irm.theta).iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn irm_penalty_matches_finite_difference_in_the_multiplier() {
    let env = random_problem(9, 40, 3);
    for kind in [LossKind::Squared, LossKind::Absolute] {
        let m = LinearModel::new(array![0.3, -0.8, 1.1], Task::Regression).unwrap();
        let risk = |s: f64| -> f64 {
            let ms = LinearModel::new(&m.theta * s, Task::Regression).unwrap();
            env.x
                .outer_iter()
                .zip(env.y.iter())
                .map(|(x, &y)| sal_core::model::loss(&ms, kind, x, y).unwrap())
                .sum::<f64>()
                / env.len() as f64
        };
        let h = 1e-6;
        let fd = (risk(1.0 + h) - risk(1.0 - h)) / (2.0 * h);
        let got = irm_penalty(&m, &env, kind).unwrap();
        assert!((got - fd * fd).abs() <= 1e-5 * got.abs().max(1e-8), "{kind:?}: {got} vs {}", fd * fd);
    }
}

#[test]
fn irm_penalty_vanishes_at_the_least_squares_optimum() {
    let env = random_problem(10, 60, 3);
    let erm = train_erm(std::slice::from_ref(&env), LossKind::Squared, &tight()).unwrap();
    assert!(irm_penalty(&erm, &env, LossKind::Squared).unwrap() < 1e-10);
    let irm = train_irm(std::slice::from_ref(&env), LossKind::Squared, 10.0, &tight()).unwrap();
    assert!((&erm.theta - &irm.theta).iter().all(|v| v.abs() < 1e-4));
    // away from the optimum the penalty is positive
    let off = LinearModel::new(&erm.theta * 1.5, Task::Regression).unwrap();
    assert!(irm_penalty(&off, &env, LossKind::Squared).unwrap() > 1e-4);
}

#[test]
fn grid_search_contracts() {
    let env = random_problem(11, 100, 3);
    let envs = [env];
    let metric = SelectionMetric::MeanLoss(LossKind::Squared);
    let fit = |e: &[EnvDataset], lam: f64| train_ridge(e, LossKind::Squared, lam, &GdConfig::default());

    let (v, _) = grid_search(fit, &envs, &GridSearchSpec::new("ridge", vec![3.0], metric), 0).unwrap();
    assert_eq!(v, 3.0);

    // noiseless linear target: the unregularized candidate reaches zero validation loss
    let mut exact = envs[0].clone();
    exact.y = exact.x.dot(&array![1.0, -2.0, 0.5]);
    let exact = [exact];
    let spec = GridSearchSpec::new("ridge", vec![1.0, 0.0, 10.0, 0.1], metric);
    let (best, _) = grid_search(fit, &exact, &spec, 3).unwrap();
    assert_eq!(best, 0.0);

    let fwd = GridSearchSpec::new("ridge", vec![0.001, 0.1, 1.0, 10.0], metric);
    let rev = GridSearchSpec::new("ridge", vec![10.0, 1.0, 0.1, 0.001], metric);
    let a = grid_search(fit, &envs, &fwd, 5).unwrap();
    let b = grid_search(fit, &envs, &rev, 5).unwrap();
    assert_eq!(a, b);

    assert!(grid_search(fit, &envs, &GridSearchSpec::new("ridge", vec![], metric), 0).is_err());
}

#[test]
fn classification_baselines_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Array2::from_shape_fn((80, 2), |_| rng.random_range(-1.0..1.0));
    let y = x.column(0).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let env = EnvDataset::new(x, y, "c").unwrap();
    let m = train_erm(std::slice::from_ref(&env), LossKind::LogLoss, &GdConfig::default()).unwrap();
    assert_eq!(m.task, Task::BinaryClassification);
    assert!(m.theta[0] > 1.0);
    let mut bad = env.clone();
    bad.y[0] = 0.5;
    assert!(train_erm(&[bad], LossKind::LogLoss, &GdConfig::default()).is_err());
}
