use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sal_core::baselines::{train_erm, train_wdrl, GdConfig};
use sal_core::datagen::{gen_selection_bias, SelectionBiasConfig};
use sal_core::sal::{compute_r, grad_r_wrt_w, theta_inner_loop, JacobianTraces, SalTrainer};
use sal_core::{
    train_sal, CovariateWeights, EnvDataset, LinearModel, LossKind, SalHyperParams, Task,
};

fn random_env(rng: &mut ChaCha8Rng, n: usize, d: usize, id: &str) -> EnvDataset {
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let beta: Array1<f64> = (0..d).map(|j| 1.0 - 0.5 * j as f64).collect();
    let y = x.dot(&beta) + Array1::from_shape_fn(n, |_| rng.random_range(-0.1..0.1));
    EnvDataset::new(x, y, id).unwrap()
}

fn small_hyper() -> SalHyperParams {
    SalHyperParams {
        outer_iters: 5,
        theta_iters: 4,
        w_iters: 1,
        ascent_steps: 10,
        step_x: 0.1,
        step_theta: 0.1,
        step_w: 1.0,
        lambda: 2.0,
        alpha: 1.0,
        ..SalHyperParams::default()
    }
}

#[test]
fn frozen_adversary_gives_one_plain_gradient_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let env = random_env(&mut rng, 12, 3, "a");
    let start = LinearModel::new(array![0.3, -0.2, 0.1], Task::Regression).unwrap();
    let hyper = SalHyperParams {
        theta_iters: 1,
        lambda: 1e9,
        ..small_hyper()
    };
    let w = CovariateWeights::ones(3);
    let (m, _) = theta_inner_loop(&start, &w, std::slice::from_ref(&env), &hyper, LossKind::Squared).unwrap();
    let resid = env.x.dot(&start.theta) - &env.y;
    let grad = env.x.t().dot(&resid) * (2.0 / env.len() as f64);
    let want = &start.theta - &(grad * hyper.step_theta);
    for (a, b) in m.theta.iter().zip(want.iter()) {
        // backtracking leaves a perturbation of order ε_x·2⁻⁶⁰·|∇|
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn one_sample_accumulator_matches_hand_derivative() {
    // ∇_θ ℓ = 2(θx̃ − y)x̃, so ∂/∂x̃ = 2(2θx̃ − y)
    let env = EnvDataset::new(array![[0.7]], array![1.5], "one").unwrap();
    let start = LinearModel::new(array![0.4], Task::Regression).unwrap();
    let hyper = SalHyperParams {
        theta_iters: 1,
        lambda: 3.0,
        ascent_steps: 15,
        ..small_hyper()
    };
    let w = CovariateWeights::ones(1);
    let (_, tr) = theta_inner_loop(&start, &w, std::slice::from_ref(&env), &hyper, LossKind::Squared).unwrap();
    // recover x̃ from the trace: dxtilde_dw sums −4 ε λ w (x̃ᵗ − x) over the steps, so rerun the adversary
    let adv = sal_core::perturb_batch(&start, LossKind::Squared, env.x.view(), env.y.view(), &w, &hyper.adversary()).unwrap();
    let xt = adv.x_tilde[[0, 0]];
    let want = -hyper.step_theta * 2.0 * (2.0 * 0.4 * xt - 1.5);
    assert!((tr.dtheta_dxtilde[[0, 0, 0]] - want).abs() < 1e-12);
    assert_eq!(tr.theta_steps, 1);
}

#[test]
fn accumulated_jacobian_agrees_in_sign_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let env = random_env(&mut rng, 8, 2, "fd");
    let start = LinearModel::new(array![0.5, 0.2], Task::Regression).unwrap();
    let hyper = SalHyperParams {
        theta_iters: 5,
        lambda: 5.0,
        ascent_steps: 30,
        step_theta: 0.05,
        ..small_hyper()
    };
    let w = CovariateWeights::new(array![1.0, 2.0]).unwrap();
    let run = |x: Array2<f64>| {
        let e = EnvDataset::new(x, env.y.clone(), "fd").unwrap();
        theta_inner_loop(&start, &w, &[e], &hyper, LossKind::Squared).unwrap()
    };
    let (_, tr) = run(env.x.clone());
    let h = 1e-5;
    let mut agree = 0;
    for _ in 0..50 {
        let dir = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let mut pred = Array1::<f64>::zeros(2);
        for (block, di) in tr.dtheta_dxtilde.outer_iter().zip(dir.outer_iter()) {
            pred += &block.dot(&di);
        }
        let (plus, _) = run(&env.x + &(&dir * h));
        let (minus, _) = run(&env.x - &(&dir * h));
        let fd = (&plus.theta - &minus.theta) / (2.0 * h);
        if pred.dot(&fd) > 0.0 {
            agree += 1;
        }
    }
    assert!(agree >= 40, "sign agreement {agree}/50");
}

fn abs_env(ys: &[f64], id: &str) -> EnvDataset {
    EnvDataset::new(Array2::zeros((ys.len(), 1)), Array1::from(ys.to_vec()), id).unwrap()
}

#[test]
fn r_examples() {
    let m = LinearModel::zeros(1, Task::Regression);
    let eq = [abs_env(&[0.4, -0.4], "a"), abs_env(&[0.4], "b")];
    assert!((compute_r(&m, &eq, LossKind::Absolute, 10.0).unwrap() - 0.4).abs() < 1e-15);
    let uneq = [abs_env(&[0.2], "a"), abs_env(&[0.6, -0.6], "b")];
    assert!((compute_r(&m, &uneq, LossKind::Absolute, 1.0).unwrap() - 0.8).abs() < 1e-15);
    assert!((compute_r(&m, &uneq, LossKind::Absolute, 0.0).unwrap() - 0.4).abs() < 1e-15);
    let empty = [EnvDataset::new(Array2::zeros((0, 1)), Array1::zeros(0), "e").unwrap()];
    assert!(compute_r(&m, &empty, LossKind::Absolute, 1.0).is_err());
}

#[test]
fn weight_gradient_vanishes_without_transport() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let envs = vec![random_env(&mut rng, 20, 3, "a"), random_env(&mut rng, 20, 3, "b")];
    let m = LinearModel::new(array![0.5, 0.1, -0.3], Task::Regression).unwrap();
    // λ = 0: the adversary records no ∂X̃/∂w
    let hyper = SalHyperParams {
        lambda: 0.0,
        ..small_hyper()
    };
    let (m1, tr) = theta_inner_loop(&m, &CovariateWeights::ones(3), &envs, &hyper, LossKind::Absolute).unwrap();
    assert!(tr.dxtilde_dw.iter().all(|&v| v == 0.0));
    let g = grad_r_wrt_w(&tr, &envs, &m1, LossKind::Absolute, 1.0).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    // no θ steps: nothing accumulated
    let g = grad_r_wrt_w(&JacobianTraces::zeros(40, 3), &envs, &m, LossKind::Squared, 1.0).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    // traces built for other data are rejected
    assert!(grad_r_wrt_w(&JacobianTraces::zeros(7, 3), &envs, &m, LossKind::Squared, 1.0).is_err());
}

#[test]
fn history_and_weights_stay_valid() {
    let data = gen_selection_bias(&SelectionBiasConfig {
        n: 300,
        test_n: 50,
        ..SelectionBiasConfig::default()
    })
    .unwrap();
    let hyper = SalHyperParams {
        lambda: 0.5,
        step_w: 50.0,
        ..small_hyper()
    };
    let fit = train_sal(&data.train, &hyper, LossKind::Squared).unwrap();
    assert_eq!(fit.history.len(), hyper.outer_iters);
    for rec in &fit.history {
        assert!(rec.r_value.is_finite());
        let min = rec.weights.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, 1.0);
        assert!(rec.weights.iter().all(|&v| v >= 1.0));
    }
    let again = train_sal(&data.train, &hyper, LossKind::Squared).unwrap();
    assert_eq!(fit, again);
}

#[test]
fn single_environment_has_no_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let envs = vec![random_env(&mut rng, 30, 2, "only")];
    let fit = train_sal(&envs, &small_hyper(), LossKind::Squared).unwrap();
    for rec in &fit.history {
        assert_eq!(rec.env_losses.len(), 1);
        assert!((rec.r_value - rec.env_losses[0]).abs() < 1e-15);
    }
}

#[test]
fn frozen_weights_reproduce_wdrl_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let envs = vec![random_env(&mut rng, 25, 3, "a"), random_env(&mut rng, 15, 3, "b")];
    let mut hyper = small_hyper();
    hyper.w_iters = 0;
    let sal = train_sal(&envs, &hyper, LossKind::Absolute).unwrap();
    let wdrl = train_wdrl(&envs, LossKind::Absolute, &hyper).unwrap();
    assert_eq!(sal.model, wdrl);
    assert_eq!(sal.weights, CovariateWeights::ones(3));
}

#[test]
fn inert_adversary_matches_erm() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let envs = vec![random_env(&mut rng, 40, 3, "a"), random_env(&mut rng, 40, 3, "b")];
    let hyper = SalHyperParams {
        outer_iters: 100,
        theta_iters: 20,
        w_iters: 0,
        ascent_steps: 3,
        step_theta: 0.3,
        lambda: 1e9,
        ..small_hyper()
    };
    let sal = train_sal(&envs, &hyper, LossKind::Squared).unwrap();
    let erm = train_erm(&envs, LossKind::Squared, &GdConfig::default()).unwrap();
    let diff = (&sal.model.theta - &erm.theta).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-6, "max diff {diff}");
}

#[test]
fn trainer_can_start_from_a_given_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let envs = vec![random_env(&mut rng, 20, 2, "a")];
    let start = LinearModel::new(array![1.0, 0.5], Task::Regression).unwrap();
    let tr = SalTrainer::new(&envs, small_hyper(), LossKind::Squared)
        .unwrap()
        .with_model(start.clone())
        .unwrap();
    assert_eq!(tr.model(), &start);
    let bad = LinearModel::zeros(3, Task::Regression);
    assert!(SalTrainer::new(&envs, small_hyper(), LossKind::Squared)
        .unwrap()
        .with_model(bad)
        .is_err());
    let cls = LinearModel::zeros(2, Task::BinaryClassification);
    assert!(SalTrainer::new(&envs, small_hyper(), LossKind::Squared)
        .unwrap()
        .with_model(cls)
        .is_err());
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let envs = vec![abs_env(&[1.0, 2.0], "a")];
    for h in [
        SalHyperParams { outer_iters: 0, ..small_hyper() },
        SalHyperParams { step_w: 0.0, ..small_hyper() },
        SalHyperParams { lambda: -1.0, ..small_hyper() },
        SalHyperParams { step_x: f64::NAN, ..small_hyper() },
    ] {
        assert!(train_sal(&envs, &h, LossKind::Squared).is_err());
    }
}
