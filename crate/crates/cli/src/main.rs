use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cosinegate::harness::gradsuite::{run_gradient_suite, SUITE_TOLERANCE};
use cosinegate::harness::{evaluate, load_datasets, run_training, DatasetKind, TrainConfig, Trainer};
use cosinegate::model::GatedNetwork;

#[derive(Parser)]
#[command(name = "cosinegate", version, about = "Cosine-incompatibility gated residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated network from a preset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with hard gates.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "balanced")]
    preset: String,
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subset_train: Option<usize>,
    #[arg(long)]
    subset_test: Option<usize>,
    /// Write per-sample CIR and gate values to gate_trace.csv.
    #[arg(long)]
    trace_gates: bool,
    /// Warmup length of the FLOPs penalty, in epochs.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    tau_target: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    subset_test: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    cfg.dataset = a.dataset;
    cfg.seed = a.seed;
    cfg.subset_train = a.subset_train;
    cfg.subset_test = a.subset_test;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        // keep the warmup inside short runs unless set explicitly
        cfg.warmup = cfg.warmup.min(e);
    }
    if let Some(w) = a.warmup {
        cfg.warmup = w;
    }
    if let Some(t) = a.tau_target {
        cfg.tau_target = t;
    }
    if let Some(lr) = a.lr {
        cfg.lr0 = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;

    let (train_ds, test_ds) = load_datasets(cfg.dataset, &a.data_dir, cfg.subset_train, cfg.subset_test)
        .with_context(|| format!("loading {} from {}", cfg.dataset, a.data_dir.display()))?;
    eprintln!(
        "{} on {}: {} train / {} test, {} epochs (warmup {}), seed {}",
        cfg.name,
        cfg.dataset,
        train_ds.len(),
        test_ds.len(),
        cfg.epochs,
        cfg.warmup,
        cfg.seed
    );
    let mut trainer = Trainer::new(cfg)?;
    let start = Instant::now();
    let out = run_training(&mut trainer, &train_ds, &test_ds, Some(&a.out), a.trace_gates, |m| {
        eprintln!(
            "epoch {:>3}  train {:6.2}%  test {:6.2}%  ce {:.4}  cons {:.4}  flops {:.5}  gate {:.3}  skip {:5.1}%  lr {:.4}  [{:.0}s]",
            m.epoch,
            m.train_acc,
            m.test_acc,
            m.ce,
            m.cons,
            m.flops,
            m.mean_gate,
            m.skip_pct,
            m.lr,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!(
        "final test accuracy {:.2}%, hard-gate skip {:.1}% (per block {:?}); best {:.2}% at epoch {}",
        out.final_eval.accuracy,
        out.final_eval.skip_pct,
        out.final_eval.per_block_skip.iter().map(|s| format!("{s:.1}")).collect::<Vec<_>>(),
        out.best_test_acc,
        out.best_epoch
    );
    println!("artifacts in {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (_, test_ds) = load_datasets(a.dataset, &a.data_dir, Some(0), a.subset_test)
        .with_context(|| format!("loading {} from {}", a.dataset, a.data_dir.display()))?;
    let cfg = TrainConfig::balanced();
    let mut net = GatedNetwork::new(a.dataset.topology(), &cfg.gate_config(), 0)?;
    net.load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let r = evaluate(&net, &test_ds, &a.dataset.augment(), a.batch_size, 0, None)?;
    println!("samples        {}", test_ds.len());
    println!("accuracy       {:.2}%", r.accuracy);
    println!("mean hard gate {:.4}", r.mean_gate_hard);
    println!("skip           {:.2}%", r.skip_pct);
    for (i, s) in r.per_block_skip.iter().enumerate() {
        println!("  block {i:>2}     {s:.2}%");
    }
    Ok(())
}

fn gradcheck() -> Result<()> {
    let start = Instant::now();
    let cases = run_gradient_suite()?;
    let mut failed = 0;
    for c in &cases {
        let ok = c.passed();
        failed += usize::from(!ok);
        println!(
            "{}  {:<36} max rel err {:.2e}",
            if ok { "ok  " } else { "FAIL" },
            c.name,
            c.report.max_rel_error
        );
    }
    println!(
        "{} cases, {} failed, tolerance {:e}, {:.1}s",
        cases.len(),
        failed,
        SUITE_TOLERANCE,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck => gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
