use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use distillkit::baselines::{leverage_subsample, min_synth_size, moment_reduce, random_subsample};
use distillkit::data::RegressionDataset;
use distillkit::envs::{collect_random, EnvKind, OfflineRLDataset};
use distillkit::experiment::{
    apply_override, load_supervised_dataset, rl_training_data, run, ExperimentConfig, ExperimentKind,
    ExperimentOutput,
};
use distillkit::fqi::{evaluate_policy, fqi_train, greedy_policy, FQIConfig, TransitionBatch};
use distillkit::nn::QPredictor;
use distillkit::rng::{derive_seed, rng_from_seed};

const SEED_ENV: &str = "DISTILLKIT_SEED";

#[derive(Parser)]
#[command(name = "distillkit", version, about = "Dataset distillation by loss matching against random models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `rl.fqi.iterations=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Directory for the CSV, text and JSON outputs.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised distillation sweep with random and leverage baselines.
    DistillSup {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Offline-RL distillation sweep evaluated with FQI.
    DistillRl {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        env: Option<EnvKind>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Writes a baseline subset of a regression dataset, or its minimum synthetic size.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BaselineMethod::Random)]
        method: BaselineMethod,
        /// Subset size for `random` and `leverage`.
        #[arg(long, default_value_t = 50)]
        m: usize,
        /// Accuracy for `min-size`.
        #[arg(long, default_value_t = 1e-2)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        c_hat: f64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Trains a Q-network with fitted-Q iteration on an offline CSV dataset.
    TrainFqi {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluates the greedy policy of a trained checkpoint.
    EvalPolicy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs the lower-bound construction sweep.
    Lowerbound {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Collects an offline dataset (random policy; mountain car mixes in the expert).
    Collect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        env: Option<EnvKind>,
        /// Transitions for random-policy collection.
        #[arg(long)]
        n: Option<usize>,
        /// Use the random-plus-expert mixture (mountain car only).
        #[arg(long)]
        mixed: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Re-renders saved run records.
    Report {
        /// JSON records written by the sweep commands.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Random,
    Leverage,
    MomentReduce,
    MinSize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
    Json,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    env: EnvKind,
    gamma: f64,
    fqi: FQIConfig,
    predictor: QPredictor,
}

/// Defaults, then the config file, then sugar flags, then `--set`, then the seed variable.
fn load_config(args: &ConfigArgs, kind: ExperimentKind, sugar: &[(&str, String)]) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut v: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if v.get("kind").is_none() {
                apply_override(&mut v, "kind", &serde_json::to_string(&kind)?)?;
            }
            v
        }
        None => serde_json::json!({ "kind": kind }),
    };
    let cfg: ExperimentConfig = serde_json::from_value(base).context("invalid config")?;
    let mut v = serde_json::to_value(&cfg)?;
    for (key, value) in sugar {
        apply_override(&mut v, key, value)?;
    }
    for s in &args.sets {
        let Some((key, value)) = s.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{s}'");
        };
        apply_override(&mut v, key.trim(), value.trim())?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed.trim().parse().with_context(|| format!("{SEED_ENV} must be an unsigned integer"))?;
        apply_override(&mut v, "base_seed", &seed.to_string())?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(v).context("invalid config after overrides")?;
    if cfg.kind != kind {
        bail!("config kind {:?} does not match this subcommand", cfg.kind);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_sugar(key: &'static str, p: &Option<PathBuf>) -> Vec<(&'static str, String)> {
    p.iter().map(|p| (key, serde_json::to_string(p).expect("path serializes"))).collect()
}

fn env_sugar(env: Option<EnvKind>) -> Vec<(&'static str, String)> {
    env.iter().map(|e| ("env", e.name().to_string())).collect()
}

fn run_and_write(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let output = run(cfg)?;
    print!("{}", output.table.to_text());
    for p in output.write_to(out)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn write_regression(ds: &RegressionDataset, output: Option<&Path>) -> Result<()> {
    let mut buf = String::new();
    let header: Vec<String> = (0..ds.d()).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
    buf.push_str(&header.join(","));
    buf.push('\n');
    for (row, y) in ds.features.row_iter().zip(ds.labels.iter()) {
        let fields: Vec<String> = row.iter().chain(std::iter::once(y)).map(|v| v.to_string()).collect();
        buf.push_str(&fields.join(","));
        buf.push('\n');
    }
    match output {
        Some(p) => std::fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{buf}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::DistillSup { cfg, dataset, out } => {
            let cfg = load_config(&cfg, ExperimentKind::Supervised, &path_sugar("dataset", &dataset))?;
            run_and_write(&cfg, &out.out)
        }
        Command::DistillRl { cfg, env, out } => {
            let cfg = load_config(&cfg, ExperimentKind::OfflineRl, &env_sugar(env))?;
            run_and_write(&cfg, &out.out)
        }
        Command::Lowerbound { cfg, out } => {
            let cfg = load_config(&cfg, ExperimentKind::Lowerbound, &[])?;
            run_and_write(&cfg, &out.out)
        }
        Command::Baseline { cfg, dataset, method, m, eps, c_hat, output } => {
            let cfg = load_config(&cfg, ExperimentKind::Supervised, &path_sugar("dataset", &dataset))?;
            let ds = load_supervised_dataset(&cfg)?;
            let mut rng = rng_from_seed(derive_seed(cfg.base_seed, 10 + m as u64));
            match method {
                BaselineMethod::Random => write_regression(&random_subsample(&ds, m, &mut rng)?, output.as_deref()),
                BaselineMethod::Leverage => write_regression(&leverage_subsample(&ds, m, &mut rng)?, output.as_deref()),
                BaselineMethod::MomentReduce => write_regression(&moment_reduce(&ds)?, output.as_deref()),
                BaselineMethod::MinSize => {
                    println!("{}", min_synth_size(&ds, eps, c_hat)?);
                    Ok(())
                }
            }
        }
        Command::Collect { cfg, env, n, mixed, output } => {
            let mut sugar = env_sugar(env);
            sugar.extend(n.map(|n| ("rl.n_train", n.to_string())));
            let cfg = load_config(&cfg, ExperimentKind::OfflineRl, &sugar)?;
            let data = if mixed {
                if cfg.env != EnvKind::MountainCar {
                    bail!("--mixed collection is defined for mountain_car only");
                }
                let (data, info) = rl_training_data(&cfg, cfg.base_seed)?;
                eprintln!("{info}");
                data
            } else {
                collect_random(cfg.env, cfg.rl.n_train, cfg.rl.gamma, derive_seed(cfg.base_seed, 1))?
            };
            data.save_csv(&output)?;
            eprintln!("wrote {} transitions to {}", data.len(), output.display());
            Ok(())
        }
        Command::TrainFqi { cfg, data, env, output } => {
            let cfg = load_config(&cfg, ExperimentKind::OfflineRl, &env_sugar(Some(env)))?;
            let ds = OfflineRLDataset::load_csv(&data, env, cfg.rl.gamma)?;
            let fqi = FQIConfig { seed: cfg.base_seed, ..cfg.rl.fqi_train_for(env) };
            let q = fqi_train(&TransitionBatch::from(&ds), &fqi)?;
            let ck = Checkpoint { env, gamma: cfg.rl.gamma, fqi, predictor: q };
            std::fs::write(&output, serde_json::to_string_pretty(&ck)? + "\n")
                .with_context(|| format!("writing {}", output.display()))?;
            eprintln!("wrote checkpoint to {}", output.display());
            Ok(())
        }
        Command::EvalPolicy { checkpoint, episodes, seed } => {
            let text = std::fs::read_to_string(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let ck: Checkpoint = serde_json::from_str(&text).context("invalid checkpoint")?;
            let summary = evaluate_policy(ck.env, &greedy_policy(&ck.predictor), episodes, seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Report { inputs, format } => {
            for path in inputs {
                let out = ExperimentOutput::load(&path)?;
                match format {
                    ReportFormat::Text => println!("{}", out.table.to_text()),
                    ReportFormat::Csv => print!("{}", out.table.to_csv()),
                    ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&out.table)?),
                }
            }
            Ok(())
        }
    }
}
