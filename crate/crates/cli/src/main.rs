use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tclab_cli::commands::{self, ModelPaths, PredictorKind, RefineArgs, RejectArgs, SampleArgs};
use tclab_cli::{CliError, CliResult, Context, RunConfig};
use tclab_core::sampler::{Selector, DEFAULT_REFINE_RATIO, DEFAULT_REFINE_STEPS};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "tclab", version, about = "Masked-token generation experiments on exactly enumerable worlds")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct ModelArgs {
    /// Generator checkpoint [default: OUT/generator.tclw].
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Critic checkpoint [default: OUT/critic.tclw].
    #[arg(long)]
    critic: Option<PathBuf>,
}

impl From<ModelArgs> for ModelPaths {
    fn from(m: ModelArgs) -> Self {
        ModelPaths {
            generator: m.generator,
            critic: m.critic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the masked-token generator.
    TrainGenerator,
    /// Train the critic against a frozen generator.
    TrainCritic {
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Generate samples.
    Sample {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value = "critic")]
        selector: Selector,
        /// `model` or `oracle` (exact conditionals).
        #[arg(long, default_value = "model")]
        predictor: PredictorKind,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Fixed class; drawn from the prior when absent.
        #[arg(long)]
        class: Option<usize>,
        /// Decoding steps [default: from config].
        #[arg(long)]
        steps: Option<usize>,
        /// Also write every selection step to traces.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Compare a samples file with the exact joint.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Critic at T against the confidence baseline at 2T over seeds.
    Compare {
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Quality/diversity grid over temperature and selection noise.
    Sweep {
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Re-mask and re-decode the weakest tokens of finished samples.
    Refine {
        #[arg(long)]
        samples: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_REFINE_RATIO)]
        ratio: f64,
        #[arg(long, default_value_t = DEFAULT_REFINE_STEPS)]
        steps: usize,
        /// Selection noise while refining.
        #[arg(long, default_value_t = 0.0)]
        noise_scale: f64,
    },
    /// Keep the best of round(1/rate) candidates under the class posterior.
    Reject {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value = "critic")]
        selector: Selector,
        #[arg(long, default_value_t = 0.2)]
        accept_rate: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        class: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Context::new(config, cli.seed, cli.out, cli.workers)?;
    match cli.command {
        Command::TrainGenerator => {
            let r = commands::train_generator(&ctx)?;
            println!(
                "{}: held-out masked CE {:.4} (class-marginal baseline {:.4}), best step {}",
                r.checkpoint.display(),
                r.heldout.loss,
                r.baseline.unwrap_or(f64::NAN),
                r.best_step
            );
        }
        Command::TrainCritic { generator } => {
            let generator = generator.unwrap_or_else(|| ctx.path(commands::GENERATOR_FILE));
            let r = commands::train_critic(&ctx, &generator)?;
            println!(
                "{}: held-out BCE {:.4}, AUC {:.4}, best step {}",
                r.checkpoint.display(),
                r.heldout.loss,
                r.heldout.auc.unwrap_or(f64::NAN),
                r.best_step
            );
        }
        Command::Sample {
            models,
            selector,
            predictor,
            n,
            class,
            steps,
            trace,
        } => {
            let args = SampleArgs {
                models: models.into(),
                predictor,
                selector,
                n,
                class,
                steps,
                trace,
            };
            println!("{}", commands::sample(&ctx, &args)?.display());
        }
        Command::Eval { samples, class } => {
            let (path, m) = commands::eval(&ctx, &samples, class)?;
            println!("{}: joint TV {:.4}, plug-in KL {:.4}", path.display(), m.joint_tv, m.plugin_kl);
        }
        Command::Compare { models } => {
            let r = commands::compare(&ctx, &models.into())?;
            let p = r.sign.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "N/A".into());
            println!(
                "median joint TV: critic {:.4}, baseline {:.4}; critic lower on {}/{} seeds (sign test p = {p})",
                r.critic_median_tv,
                r.baseline_median_tv,
                r.sign.wins,
                r.sign.wins + r.sign.losses + r.sign.ties
            );
        }
        Command::Sweep { models } => {
            let t = commands::sweep(&ctx, &models.into())?;
            println!("{}: {} rows", ctx.path("sweep.csv").display(), t.rows.len());
        }
        Command::Refine {
            samples,
            models,
            ratio,
            steps,
            noise_scale,
        } => {
            let args = RefineArgs {
                models: models.into(),
                ratio,
                steps,
                noise_scale,
            };
            let r = commands::refine(&ctx, &samples, &args)?;
            println!("{}: mean NLL {:.4} -> {:.4}", r.path.display(), r.nll_before, r.nll_after);
        }
        Command::Reject {
            models,
            selector,
            accept_rate,
            n,
            class,
        } => {
            let args = RejectArgs {
                models: models.into(),
                selector,
                accept_rate,
                n,
                class,
            };
            println!("{}", commands::reject(&ctx, &args)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
