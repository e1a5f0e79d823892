use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sal_core::config::Config;
use sal_core::cost::empirical_radius;
use sal_core::dataio::{read_env_csv, write_atomic, write_env_csv};
use sal_core::eval::{evaluate, gradient_direction_test};
use sal_core::experiment::{
    emit_plot_data, load_data, load_model, run_experiment, run_seed, run_sweep, save_model,
    train_method, ExperimentConfig, Method, PlotKind,
};
use sal_core::sal::SalTrainer;
use sal_core::{Result, SalError, SalHyperParams};

#[derive(Parser)]
#[command(name = "sal", version, about = "Stable adversarial learning toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Method name, or a comma list for `benchmark`.
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long = "outer-iters", global = true)]
    outer_iters: Option<usize>,
    /// Any config key, as key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and test environments of run 0 as CSV.
    Generate,
    /// Train one method on run 0 and save the model.
    Train,
    /// Evaluate a saved model on an environment CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate several methods over all runs.
    Benchmark,
    /// Robustness sweep of WDRL and SAL over a list of lambdas.
    Sweep {
        /// Comma list; defaults to the `sweep.lambdas` config key.
        #[arg(long)]
        lambdas: Option<String>,
    },
    /// Long-format plot data from a sweep directory (`--out`).
    PlotData {
        #[arg(long, default_value = "error")]
        kind: String,
    },
    /// Compare the approximate weight gradient with random directions.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 1000)]
        directions: usize,
        #[arg(long = "step-norm", default_value_t = 1.0)]
        step_norm: f64,
    },
    /// Empirical robustness radius of a saved model.
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn build_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    if let Some(v) = c.seed {
        cfg.set("seed", v);
    }
    if let Some(v) = &c.out {
        cfg.set("out", v.display());
    }
    if let Some(v) = &c.method {
        cfg.set("method", v);
    }
    if let Some(v) = c.runs {
        cfg.set("runs", v);
    }
    if let Some(v) = c.lambda {
        cfg.set("sal.lambda", format!("{v:?}"));
    }
    if let Some(v) = c.alpha {
        cfg.set("sal.alpha", format!("{v:?}"));
    }
    if let Some(v) = c.outer_iters {
        cfg.set("sal.outer_iters", v);
    }
    for s in &c.set {
        cfg.set_assignment(s)?;
    }
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    Ok(std::fs::create_dir_all(p)?)
}

fn single_method(exp: &ExperimentConfig) -> Result<Method> {
    match exp.methods.as_slice() {
        [m] => Ok(*m),
        _ => Err(SalError::Config("this command needs exactly one --method".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    let exp = || ExperimentConfig::from_config(&cfg);
    match cli.command {
        Command::Generate => {
            let exp = exp()?;
            let data = load_data(&exp.data, run_seed(exp.seed, 0))?;
            ensure_dir(&exp.out)?;
            write_env_csv(&exp.out.join("train.csv"), &data.train)?;
            write_env_csv(&exp.out.join("test.csv"), &data.test)?;
            write_atomic(&exp.out.join("manifest.txt"), exp.to_config().to_string().as_bytes())?;
            println!("wrote {} training and {} test environments to {}", data.train.len(), data.test.len(), exp.out.display());
        }
        Command::Train => {
            let exp = exp()?;
            let method = single_method(&exp)?;
            let seed = run_seed(exp.seed, 0);
            let data = load_data(&exp.data, seed)?;
            let t = train_method(method, &exp, &data.train, seed)?;
            ensure_dir(&exp.out)?;
            let path = exp.out.join("model.txt");
            save_model(&path, method, &t.model, t.weights.as_ref())?;
            write_atomic(&exp.out.join("manifest.txt"), exp.to_config().to_string().as_bytes())?;
            println!("theta = {}", t.model.theta);
            if let Some(w) = &t.weights {
                println!("weights = {}", w.as_array());
            }
            println!("wrote {}", path.display());
        }
        Command::Evaluate { model, data } => {
            let (m, _) = load_model(&model)?;
            let envs = read_env_csv(&data)?;
            let report = evaluate(&m, &envs)?;
            let mut text = String::from("env_id,loss\n");
            for (id, l) in &report.per_env_loss {
                text.push_str(&format!("{id},{l:?}\n"));
            }
            let out = cfg.get_str("out").map(PathBuf::from).unwrap_or_else(|| "out".into());
            ensure_dir(&out)?;
            write_atomic(&out.join("evaluation.csv"), text.as_bytes())?;
            println!("mean_error = {:.6}", report.mean_error);
            println!("std_error = {:.6}", report.std_error);
            if let (Some(a), Some(c)) = (report.accuracy, report.confidence) {
                println!("accuracy = {a:.6}");
                println!("confidence = {c:.6}");
            }
        }
        Command::Benchmark => {
            let mut cfg = cfg.clone();
            if !cfg.contains("method") {
                let all: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                cfg.set("method", all.join(","));
            }
            let exp = ExperimentConfig::from_config(&cfg)?;
            let report = run_experiment(&exp)?;
            println!("method,mean_error,std_error");
            for s in &report.summaries {
                println!("{},{:.6},{:.6}", s.method, s.mean_error, s.std_error);
            }
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep { lambdas } => {
            let mut cfg = cfg.clone();
            if !cfg.contains("method") {
                cfg.set("method", "ERM,WDRL,SAL");
            }
            if let Some(l) = lambdas {
                cfg.set("sweep.lambdas", l);
            }
            let lambdas = cfg
                .get_list::<f64>("sweep.lambdas")?
                .ok_or_else(|| SalError::Config("missing --lambdas".into()))?;
            let exp = ExperimentConfig::from_config(&cfg)?;
            let path = run_sweep(&exp, &lambdas)?;
            println!("wrote {}", path.display());
        }
        Command::PlotData { kind } => {
            let dir = cfg.get_str("out").map(PathBuf::from).unwrap_or_else(|| "out".into());
            let path = emit_plot_data(&dir, PlotKind::parse(&kind)?)?;
            println!("wrote {}", path.display());
        }
        Command::GradCheck { iters, directions, step_norm } => {
            let exp = exp()?;
            let seed = run_seed(exp.seed, 0);
            let data = load_data(&exp.data, seed)?;
            let hyper = SalHyperParams { seed, ..exp.sal.clone() };
            let mut trainer = SalTrainer::new(&data.train, hyper, exp.robust_loss)?;
            for _ in 0..iters {
                trainer.step()?;
            }
            let report = gradient_direction_test(&trainer, directions, step_norm, seed)?;
            let mut text = format!("direction,delta_r\nreference,{:?}\n", report.reference_delta);
            for (k, d) in report.random_deltas.iter().enumerate() {
                text.push_str(&format!("{k},{d:?}\n"));
            }
            ensure_dir(&exp.out)?;
            write_atomic(&exp.out.join("grad_check.csv"), text.as_bytes())?;
            println!("gradient = {}", report.gradient);
            println!("reference delta R = {:.6e}", report.reference_delta);
            println!("fraction of random directions beaten = {:.4}", report.fraction);
        }
        Command::Certify { model, data } => {
            let exp = exp()?;
            let (m, w) = load_model(&model)?;
            let envs = read_env_csv(&data)?;
            let w = w.unwrap_or_else(|| sal_core::CovariateWeights::ones(m.dim()));
            let lambda = cfg.get::<f64>("certify.lambda")?.unwrap_or(exp.sal.lambda);
            let adv = SalHyperParams { lambda, ..exp.sal.clone() }.adversary();
            let loss = match m.task {
                sal_core::Task::BinaryClassification => sal_core::LossKind::LogLoss,
                sal_core::Task::Regression => exp.robust_loss,
            };
            let radius = empirical_radius(&m, loss, &w, &envs, &adv)?;
            ensure_dir(&exp.out)?;
            write_atomic(
                &exp.out.join("certificate.txt"),
                format!("lambda = {lambda:?}\nradius = {radius:?}\n").as_bytes(),
            )?;
            println!("radius = {radius:.6e} at lambda = {lambda}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
