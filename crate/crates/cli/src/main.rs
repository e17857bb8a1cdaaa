use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dkd_core::experiment::{self, ExperimentConfig};
use dkd_core::losses::{Gamma, KdMode};
use dkd_core::Error;

/// Decoupled knowledge distillation experiments on synthetic speakers.
///
/// Settings resolve as command-line flags, then the config file, then
/// built-in defaults. The output directory falls back to `$DKD_OUT`, then
/// `./runs`.
#[derive(Debug, Parser)]
#[command(name = "dkd", version)]
struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra run seed, appended to the configured list. Repeatable.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the training set, held-out set and trial list.
    GenData,
    /// Train the teacher and store its checkpoint under the output directory.
    TrainTeacher,
    /// Distil one student per seed.
    Distill {
        /// Teacher checkpoint [default: <out>/teacher/model.ckpt].
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Distillation mode: none, cosine_embedding, conventional_kld or dkd.
        #[arg(long)]
        mode: Option<KdMode>,
        /// Non-target weight for dkd: a number or `1-p_target`.
        #[arg(long)]
        gamma: Option<Gamma>,
    },
    /// Score trials with a checkpoint and report EER and minDCF.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to score instead of the configured held-out set.
        #[arg(long, requires = "trials")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        trials: Option<PathBuf>,
        /// Also write per-trial scores.
        #[arg(long)]
        scores: bool,
    },
    /// Fixed-budget sweep over the number of training speakers.
    SweepSpeakers,
    /// Compare no KD, cosine, conventional KL and decoupled KD over the gamma grid.
    AblateGamma {
        /// Teacher checkpoint [default: <out>/teacher/model.ckpt].
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Summarise result CSVs into a markdown table and series files.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_IO: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => EXIT_CONFIG,
        Some(Error::Data(_)) => EXIT_DATA,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(Error::Io { .. }) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.seeds.extend(&cli.seeds);
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os("DKD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = output_dir(&cfg);
    let default_teacher = out.join(experiment::TEACHER_CHECKPOINT);
    match cli.command {
        Command::GenData => {
            let m = experiment::gen_data(&cfg, &out)?;
            println!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::TrainTeacher => {
            let t = experiment::cmd_train_teacher(&cfg, &out)?;
            println!(
                "teacher: train accuracy {:.4}, EER {:.4}, minDCF {:.4} -> {}",
                t.record.final_train_accuracy,
                t.eval.eer,
                t.eval.min_dcf,
                t.checkpoint.display()
            );
            for w in &t.record.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Distill { teacher, mode, gamma } => {
            if let Some(m) = mode {
                cfg.student.train.kd.mode = m;
            }
            if let Some(g) = gamma {
                cfg.student.train.kd.gamma = g;
            }
            let rows = experiment::cmd_distill(&cfg, &teacher.unwrap_or(default_teacher), &out)?;
            for r in rows {
                println!("{} seed {}: EER {:.4}, minDCF {:.4}", r.group, r.seed, r.eer, r.min_dcf);
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            trials,
            scores,
        } => {
            let inputs = dataset.as_deref().zip(trials.as_deref());
            experiment::cmd_eval(&cfg, &checkpoint, inputs, &out, scores)?;
            let path = out.join("eval.json");
            print!("{}", std::fs::read_to_string(&path).with_context(|| path.display().to_string())?);
        }
        Command::SweepSpeakers => {
            let rows = experiment::cmd_sweep_speakers(&cfg, &out)?;
            println!("{} runs -> {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::AblateGamma { teacher } => {
            let rows = experiment::cmd_ablate_gamma(&cfg, &teacher.unwrap_or(default_teacher), &out)?;
            println!("{} runs -> {}", rows.len(), out.join("ablation.csv").display());
        }
        Command::Report { csv } => {
            let md = experiment::cmd_report(&csv, &out)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
