use std::path::PathBuf;
use std::process::ExitCode;

use aop_core::aop::AopVariant;
use aop_core::commands::{self, AopTrainOptions, Arm};
use aop_core::config::RunConfig;
use aop_core::{device_from_env, Result};
use clap::{Parser, Subcommand};

/// Leaf-segmentation pretreatment toolkit.
#[derive(Debug, Parser)]
#[command(name = "aop", version)]
struct Cli {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic corpus described by the configuration.
    SynthGen,
    /// Train one AOP variant on the segmentation pairs.
    TrainAop {
        #[arg(long)]
        variant: AopVariant,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        max_new_epochs: Option<usize>,
    },
    /// Train the classifier for one arm (`raw`, `MAE_prob`, `MAE` or `SSIM`).
    TrainClassifier {
        #[arg(long, default_value = "raw")]
        arm: Arm,
    },
    /// Pretreat every image of a directory tree.
    Pretreat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score trained variants on the held-out segmentation pairs.
    EvaluateSeg {
        /// Defaults to every variant in the configuration.
        #[arg(long)]
        variant: Vec<AopVariant>,
    },
    /// Train and evaluate all four arms and write the report.
    RunComparison,
    /// Evidence maps and leaf overlap for trained arms.
    Gradcam {
        /// Defaults to every arm in the configuration.
        #[arg(long)]
        arm: Vec<Arm>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let device = device_from_env()?;
    log::info!("config hash {}", cfg.hash()?);
    match cli.command {
        Command::SynthGen => {
            let out = commands::synth_gen(&cfg)?;
            println!("corpus {} manifest sha256 {}", out.paths.root.display(), out.manifest_sha256);
        }
        Command::TrainAop { variant, resume, max_new_epochs } => {
            let out = commands::train_aop(&cfg, variant, AopTrainOptions { resume, max_new_epochs }, &device)?;
            if let Some(last) = out.losses.last() {
                println!(
                    "{variant} epoch {}: d_loss {:.4} g_adv {:.4} content {:.4}",
                    last.epoch, last.d_loss, last.g_adv, last.content_loss
                );
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::TrainClassifier { arm } => {
            let data = commands::load_classification(&cfg)?;
            let out = commands::train_classifier_arm(&cfg, arm, &data, &device)?;
            let best = &out.history[out.best_epoch - 1];
            println!("{arm}: best epoch {} val {:.4}", out.best_epoch, best.val_acc);
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Pretreat { checkpoint, input, output } => {
            let out = commands::pretreat_dir(&cfg, &checkpoint, &input, &output, &device)?;
            if out.input_was_pretreated {
                eprintln!("warning: {} was already pretreated", input.display());
            }
            println!("pretreated {} images into {}", out.written, output.display());
        }
        Command::EvaluateSeg { variant } => {
            let variants = if variant.is_empty() { cfg.aop.variants.clone() } else { variant };
            println!("variant,precision,recall,f1");
            for row in commands::evaluate_seg(&cfg, &variants, &device)? {
                println!("{},{:.4},{:.4},{:.4}", row.variant, row.precision, row.recall, row.f1);
            }
        }
        Command::RunComparison => {
            let report = commands::run_comparison(&cfg, &device)?;
            println!("arm,training,validation,test,gap");
            for a in &report.arms {
                let acc = a.accuracy;
                println!("{},{:.4},{:.4},{:.4},{:.4}", a.name, acc.training, acc.validation, acc.test, a.gap);
            }
            println!("report {}", commands::RunLayout::new(&cfg).report_dir().join("metrics.json").display());
        }
        Command::Gradcam { arm } => {
            let arms = if arm.is_empty() { Arm::all(&cfg.aop.variants) } else { arm };
            for (arm, s) in commands::gradcam(&cfg, &arms, &device)? {
                println!("{arm}: mean overlap {:.4} over {} images ({} empty maps)", s.mean_overlap, s.images, s.all_zero);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
