use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msd_core::commands::{self, DistillOptions, EvalOutcome};
use msd_core::config::RunConfig;
use msd_core::msd::Stage;
use msd_core::parallel::{configure_threads, Execution};
use msd_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "msd",
    version,
    about = "Multi-student distillation of a toy diffusion teacher"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    /// Budget that finishes on a single core.
    Desk,
    /// Full-length schedules.
    Full,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file, applied on top of --scale.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// Extra `key=value` overrides, applied after the file and MSD_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let base = match self.scale {
            Scale::Desk => RunConfig::desk(),
            Scale::Full => RunConfig::full_scale(),
        };
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, base)?,
            None => {
                let mut c = base;
                c.apply_env()?;
                c
            }
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        configure_threads(cfg.threads)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional teacher denoiser.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Sample (latent, label, teacher output) pairs.
    GenPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs; defaults to `pairs.count`.
        #[arg(short, long)]
        n: Option<usize>,
        /// Sampler steps; defaults to `pairs.sampler_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distill the teacher into one-step students.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `msd.students`.
        #[arg(long)]
        students: Option<usize>,
        /// Comma-separated subset of tsm,dm,adm.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
        /// Hidden width of smaller students.
        #[arg(long)]
        smaller: Option<usize>,
        /// Train students one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Score student bundles against the teacher. With no bundles, reports
    /// the teacher's own sampling noise floor.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run directories or `student_k` directories.
        bundles: Vec<PathBuf>,
    },
    /// Sweep students, batch size, partition strategy and filter mode.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { common, out, resume } => {
            let cfg = common.load()?;
            let s = commands::cmd_train_teacher(&cfg, &out, common.force, resume)?;
            println!(
                "teacher iterations={} loss={:.6} checksum={}",
                s.iterations, s.final_loss, s.checksum
            );
        }
        Command::GenPairs {
            common,
            teacher,
            out,
            n,
            steps,
        } => {
            let cfg = common.load()?;
            let p = commands::cmd_gen_pairs(
                &teacher,
                n.unwrap_or(cfg.pairs.count),
                steps.unwrap_or(cfg.pairs.sampler_steps),
                &out,
                cfg.seed,
                common.force,
                Execution::for_threads(cfg.threads),
            )?;
            println!("pairs={} steps={}", p.labels.len(), p.sampler_steps);
        }
        Command::Distill {
            common,
            teacher,
            pairs,
            out,
            students,
            stages,
            smaller,
            sequential,
        } => {
            let mut cfg = common.load()?;
            if let Some(k) = students {
                cfg.msd.students = k;
            }
            let opts = DistillOptions {
                force: common.force,
                parallel: !sequential && cfg.threads != 1,
                stages,
                smaller,
            };
            let s = commands::cmd_distill(&cfg, &teacher, pairs.as_deref(), &out, &opts)?;
            match s.metrics.last() {
                Some((_, l1)) => println!("students={} l1={l1}", s.bundles.len()),
                None => println!("students={}", s.bundles.len()),
            }
        }
        Command::Eval {
            common,
            teacher,
            out,
            bundles,
        } => {
            let cfg = common.load()?;
            let outcome = commands::cmd_eval(&cfg, &bundles, &teacher, &out, common.force)?;
            if let EvalOutcome::Students(r) = &outcome {
                for (k, v) in r.per_student.iter().enumerate() {
                    log::info!("student {k} l1 {v:.5}");
                }
            }
            println!("{}", outcome.summary_line());
        }
        Command::Ablate {
            common,
            out,
            teacher,
            pairs,
            seeds,
        } => {
            let cfg = common.load()?;
            let rows = commands::cmd_ablate(
                &cfg,
                &out,
                teacher.as_deref(),
                pairs.as_deref(),
                &seeds,
                common.force,
            )?;
            for r in rows {
                println!(
                    "students={} l1={} batch={} strategy={} filter={} seed={}",
                    r.students, r.l1, r.batch, r.strategy, r.filter, r.seed
                );
            }
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
