use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecvit::data::{load_cifar, synthetic_separable, Dataset, Split, Variant};
use ecvit::train::{self, check_partition_flag, evaluate, load_checkpoint, TrainOptions, TrainState};
use ecvit::verify::{gradcheck_suite, selftest_suite, Check};
use ecvit::{count_costs, ModelConfig};

#[derive(Parser)]
#[command(name = "ecvit", version, about = "Train, evaluate and inspect the ECViT image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on CIFAR-10/100, writing metrics.csv and checkpoints
    Train(TrainArgs),
    /// Top-1 accuracy and mean loss of a checkpoint on the test split
    Eval(EvalArgs),
    /// Parameter and MAC counts for a config
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Float64 finite-difference gradient checks
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Oracle equivalence and encoder invariant checks
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the CIFAR binary files
    #[arg(long, required_unless_present = "synthetic")]
    data_dir: Option<PathBuf>,
    /// Use N generated records per split instead of files on disk
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config (TOML); built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    wd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long)]
    no_augment: bool,
    /// Memorise the first N training images (no shuffle, no augmentation)
    #[arg(long)]
    overfit: Option<usize>,
    /// Clip the global gradient norm at 1.0
    #[arg(long)]
    clip_grad: bool,
    #[arg(long)]
    limit_train: Option<usize>,
    #[arg(long)]
    limit_val: Option<usize>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Refuse checkpoints trained with a different block size
    #[arg(long)]
    partition_size: Option<usize>,
}

fn variant_for(config: &ModelConfig) -> ecvit::Result<Variant> {
    match config.num_classes {
        10 => Ok(Variant::Cifar10),
        100 => Ok(Variant::Cifar100),
        n => Err(ecvit::Error::Config(format!(
            "num_classes = {n} matches neither CIFAR-10 nor CIFAR-100"
        ))),
    }
}

fn load_split(data: &DataArgs, variant: Variant, split: Split) -> ecvit::Result<Dataset> {
    match (&data.data_dir, data.synthetic) {
        (_, Some(n)) => Ok(synthetic_separable(variant, split, n, 20, split as u64)),
        (Some(dir), None) => load_cifar(dir, variant, split),
        (None, None) => unreachable!("clap requires one of the two"),
    }
}

fn run_train(a: TrainArgs) -> ecvit::Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?;
            s.options.epochs = a.epochs;
            s
        }
        None => {
            let config = match &a.config {
                Some(p) => ModelConfig::load(p)?,
                None => ModelConfig::default(),
            };
            let options = TrainOptions {
                epochs: a.epochs,
                batch: a.batch,
                lr: a.lr,
                weight_decay: a.wd,
                seed: a.seed,
                warmup: !a.no_warmup,
                augment: !a.no_augment,
                overfit: a.overfit,
                clip_grad: a.clip_grad,
                limit_train: a.limit_train,
                limit_val: a.limit_val,
                // hundreds of one-step epochs; only last/best are worth keeping
                keep_epoch_checkpoints: a.overfit.is_none(),
            };
            TrainState::new(&config, options)?
        }
    };
    let variant = variant_for(&state.model.config)?;
    let train_raw = load_split(&a.data, variant, Split::Train)?;
    let val_raw = if state.options.overfit.is_some() {
        train_raw.clone()
    } else {
        load_split(&a.data, variant, Split::Test)?
    };
    let (train_set, val_set) = train::select_data(&train_raw, &val_raw, &state.options);
    eprintln!(
        "training {} params on {} images, validating on {}; threads={}",
        state.model.store.num_scalars(),
        train_set.len(),
        val_set.len(),
        train::threads()
    );
    let mut report = |m: &train::EpochMetrics| {
        println!(
            "epoch {:>3}  lr {:.5}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}  {:.1}s",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc, m.wall_seconds
        );
    };
    train::train(&mut state, &train_set, &val_set, &a.out_dir, Some(&mut report))
}

fn run_eval(a: EvalArgs) -> ecvit::Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    check_partition_flag(&state.model.config, a.partition_size)?;
    let variant = variant_for(&state.model.config)?;
    let test = load_split(&a.data, variant, Split::Test)?;
    let m = evaluate(&state.model, &test, a.batch)?;
    let out = serde_json::json!({
        "checkpoint": a.checkpoint,
        "count": m.count,
        "accuracy": m.accuracy,
        "loss": m.loss,
    });
    println!("{out}");
    Ok(())
}

fn run_count(config: Option<&Path>) -> ecvit::Result<()> {
    let config = match config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    let report = count_costs(&config)?;
    print!("{}", report.table());
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("cost report serialises")
    );
    Ok(())
}

fn report_checks(checks: &[Check]) -> ExitCode {
    let mut failed = 0;
    for c in checks {
        let verdict = if c.passed() { "ok  " } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{verdict} {:<56} err {:.3e} (tol {:.0e})", c.name, c.error, c.tol);
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Count { config } => run_count(config.as_deref()),
        Command::Gradcheck { seed } => return gradcheck_suite(seed).map_or_else(fail, |c| report_checks(&c)),
        Command::Selftest { seed } => return selftest_suite(seed).map_or_else(fail, |c| report_checks(&c)),
    };
    result.map_or_else(fail, |()| ExitCode::SUCCESS)
}

fn fail(e: ecvit::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::FAILURE
}
