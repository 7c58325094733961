//! Command-line harness: dataset generation, training, evaluation,
//! ablations, gradient checking, and attention traces.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use macx::harness;
use macx::synth::{SyntheticSpec, Task};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "macx", about = "Multimodal compositional attention network harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (train/val bundles + manifest).
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the modality/fusion ablation grid.
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Emit the attention trace of one instance under a checkpoint.
    Trace(TraceArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task: xor3, conj2, copy, or biased.
    #[arg(long, default_value = "xor3")]
    task: String,
    #[arg(long, default_value_t = 2400)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of question groups that go to the train split.
    #[arg(long, default_value_t = 0.875)]
    train_fraction: f64,
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
    #[arg(long, default_value_t = 1)]
    questions_per_group: usize,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    pattern_amp: Option<f64>,
    #[arg(long)]
    bias_leak: Option<f64>,
    #[arg(long)]
    len_modality: Option<usize>,
    #[arg(long)]
    len_question: Option<usize>,
    #[arg(long)]
    len_answer: Option<usize>,
    #[arg(long)]
    width_modality: Option<usize>,
    #[arg(long)]
    width_question: Option<usize>,
    #[arg(long)]
    width_answer: Option<usize>,
    #[arg(long)]
    length_jitter: Option<usize>,
    #[arg(long)]
    correct: Option<usize>,
    #[arg(long)]
    incorrect: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (key=value lines). Defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config's `data` key).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides the config's `out` key).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (defaults to the first configured seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate: train or val.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    p: usize,
    /// Modality sequence length (valid lengths vary below this).
    #[arg(long, default_value_t = 6)]
    len_seq: usize,
    #[arg(long, default_value_t = 5)]
    len_question: usize,
    /// Tolerance on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Instance index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

fn spec_from(args: &GenDataArgs) -> Result<SyntheticSpec> {
    let task = Task::from_tag(&args.task)
        .with_context(|| format!("unknown task `{}`", args.task))?;
    let mut spec = SyntheticSpec {
        task,
        instances: args.instances,
        seed: args.seed,
        questions_per_group: args.questions_per_group,
        ..Default::default()
    };
    macro_rules! set {
        ($field:ident, $opt:expr) => {
            if let Some(v) = $opt {
                spec.$field = v;
            }
        };
    }
    set!(sigma_noise, args.sigma);
    set!(pattern_amp, args.pattern_amp);
    set!(bias_leak, args.bias_leak);
    set!(len_modality, args.len_modality);
    set!(len_question, args.len_question);
    set!(len_answer, args.len_answer);
    set!(width_modality, args.width_modality);
    set!(width_question, args.width_question);
    set!(width_answer, args.width_answer);
    set!(length_jitter, args.length_jitter);
    set!(n_correct, args.correct);
    set!(n_incorrect, args.incorrect);
    Ok(spec)
}

fn load_run_config(path: &Option<PathBuf>) -> Result<harness::RunConfig> {
    match path {
        Some(p) => harness::load_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(harness::RunConfig::default()),
    }
}

fn required_dir(cli: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    cli.or_else(|| cfg.clone())
        .with_context(|| format!("no {what} given (flag or config key)"))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => {
            let spec = spec_from(&args)?;
            let (train, val) =
                harness::cmd_gen_data(&spec, args.train_fraction, args.split_seed, &args.out)?;
            println!(
                "wrote {} train / {} val instances of task {} to {}",
                train,
                val,
                spec.task.tag(),
                args.out.display()
            );
        }
        Command::Train(args) => {
            let cfg = load_run_config(&args.config)?;
            let data = required_dir(args.data, &cfg.data, "dataset directory (--data)")?;
            let out = required_dir(args.out, &cfg.out, "output directory (--out)")?;
            let seed = args.seed.unwrap_or(cfg.seeds[0]);
            let summary = harness::cmd_train(&cfg, &data, &out, seed)?;
            println!(
                "best epoch {}: val A2 {:.4}, val A4 {:.4}",
                summary.best_epoch, summary.best_a2, summary.best_a4
            );
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("history:    {}", summary.history.display());
        }
        Command::Eval(args) => {
            let report =
                harness::cmd_eval(&args.checkpoint, &args.data, &args.split, args.batch_size)?;
            match report.a4 {
                Some(a4) => println!(
                    "A2 {:.6} over {} pairs; A4 {:.6} over {} combinations",
                    report.a2, report.m_a2, a4, report.m_a4
                ),
                None => println!("A2 {:.6} over {} pairs", report.a2, report.m_a2),
            }
        }
        Command::Ablate(args) => {
            let cfg = load_run_config(&args.config)?;
            let data = required_dir(args.data, &cfg.data, "dataset directory (--data)")?;
            let out = required_dir(args.out, &cfg.out, "output directory (--out)")?;
            let table = harness::run_ablation(&cfg, &data, &out)?;
            println!("modalities,fusion,runs,a2_mean,a2_std,a4_mean,a4_std");
            for row in &table.rows {
                println!(
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    harness::modalities_label(&row.modalities),
                    row.fusion.tag(),
                    row.runs,
                    row.a2_mean,
                    row.a2_std,
                    row.a4_mean,
                    row.a4_std
                );
            }
            println!("tables written to {}", out.display());
        }
        Command::Gradcheck(args) => {
            let report =
                harness::gradcheck_suite(args.d, args.p, args.len_seq, args.len_question)?;
            for case in &report.cases {
                println!(
                    "{}: max relative error {:.3e} over {} parameters",
                    case.label, case.max_rel_err, case.params
                );
            }
            println!(
                "max relative error {:.3e} ({:.1}s)",
                report.max_rel_err, report.elapsed_secs
            );
            if report.max_rel_err >= args.tolerance {
                bail!("gradient check failed: {:.3e} >= {:.3e}", report.max_rel_err, args.tolerance);
            }
        }
        Command::Trace(args) => {
            harness::emit_trace(&args.checkpoint, &args.data, &args.split, args.index, &args.out)?;
            println!("trace written to {}", args.out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
