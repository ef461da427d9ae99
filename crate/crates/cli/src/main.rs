use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ec_core::composition::Occupancy;
use ec_core::continual::Method;
use ec_core::datagen::read_manifest;
use ec_core::fewshot::{mean_by_k, FeatureMode};
use ec_core::harness::{self, RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "ec", version, about = "Experts Composition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Downsampled,
    Quadrants,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark pack.
    Datagen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every expert and the all-class monolith.
    TrainExperts {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hyperparameters and seed; defaults and the pack seed otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Zero-shot composition over the `con` stream.
    ComposeEval {
        #[arg(long)]
        experts: PathBuf,
        #[arg(long)]
        pack: PathBuf,
        #[arg(long, default_value = "results_ec.csv")]
        out: PathBuf,
        /// Use the generator's quadrant metadata instead of detecting occupancy.
        #[arg(long)]
        oracle_occupancy: bool,
    },
    /// Few-shot expert selection with a linear head over the `sys` stream.
    FewshotEval {
        #[arg(long)]
        experts: PathBuf,
        #[arg(long)]
        pack: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_enum, default_value = "downsampled")]
        features: Features,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results_fewshot.csv")]
        out: PathBuf,
    },
    /// Class-incremental baseline over whole composites.
    BaselineEval {
        #[arg(long)]
        method: String,
        #[arg(long)]
        pack: PathBuf,
        /// Model manifest whose convolutional trunk initializes the baseline.
        #[arg(long)]
        pretrained_backbone: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to results_<method>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary and plot series from the result CSVs in a run directory.
    Report {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
    /// Every stage named in the config, reusing finished ones.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfig>> {
    path.map(|p| RunConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

/// Config seed if a config was given, else the pack seed; `EC_SEED` wins.
fn stage_seed(config: Option<&RunConfig>, pack: &Path) -> Result<u64> {
    if let Some(c) = config {
        return Ok(c.seed);
    }
    let mut c = RunConfig {
        seed: read_manifest(pack)?.seed,
        ..RunConfig::default()
    };
    c.apply_env_seed(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(c.seed)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { config, out } => {
            let c = RunConfig::load(&config)?;
            let m = harness::datagen(&c, &out)?;
            let total: u32 = m.sections.iter().map(|s| s.count).sum();
            println!("wrote {} ({total} samples, hash {})", out.display(), m.config_hash);
        }
        Command::TrainExperts { pack, out, config } => {
            let c = load_config(config.as_deref())?;
            let seed = stage_seed(c.as_ref(), &pack)?;
            let c = c.unwrap_or_default();
            let reports = harness::train_experts(&pack, &out, c.classes_per_expert, &c.expert, seed)?;
            for r in reports {
                let who = r.expert_id.map_or("monolith".to_string(), |i| format!("expert {i}"));
                println!("{who:<10} test accuracy {:.4} ({:.1}s)", r.test_accuracy, r.wall_seconds);
            }
        }
        Command::ComposeEval { experts, pack, out, oracle_occupancy } => {
            let occupancy = if oracle_occupancy { Occupancy::Oracle } else { Occupancy::default() };
            let r = harness::compose_eval(&experts, &pack, &out, occupancy)?;
            println!(
                "overall accuracy {:.4} over {} composites ({} duplicates, {} malformed)",
                r.overall.accuracy, r.overall.n_samples, r.overall.duplicates, r.overall.malformed
            );
        }
        Command::FewshotEval { experts, pack, k, seeds, features, config, out } => {
            let c = load_config(config.as_deref())?;
            let base = stage_seed(c.as_ref(), &pack)?;
            let head = c.unwrap_or_default().head;
            let mode = match features {
                Features::Downsampled => FeatureMode::Downsampled,
                Features::Quadrants => FeatureMode::Quadrants,
            };
            let seeds: Vec<u64> = (0..seeds as u64).map(|i| base + i).collect();
            let rows = harness::fewshot_eval(&experts, &pack, &k, &seeds, &head, mode, &out)?;
            for (k, m) in k.iter().zip(mean_by_k(&rows, &k)) {
                println!("k={k} mean accuracy {m:.4}");
            }
        }
        Command::BaselineEval { method, pack, pretrained_backbone, config, out } => {
            let method: Method = method.parse()?;
            let c = load_config(config.as_deref())?;
            let seed = stage_seed(c.as_ref(), &pack)?;
            let hyper = c.unwrap_or_default().baseline;
            let out = out.unwrap_or_else(|| PathBuf::from(harness::baseline_csv(method)));
            let run = harness::baseline_eval(method, &pack, pretrained_backbone.as_deref(), &hyper, seed, &out)?;
            println!("{method} final average accuracy {:.4}", run.final_accuracy());
        }
        Command::Report { dir } => {
            harness::emit_report(&dir)?;
            print!("{}", std::fs::read_to_string(dir.join("summary.txt"))?);
        }
        Command::RunAll { config, out } => {
            let mut c = RunConfig::load(&config)?;
            if let Some(out) = out {
                c.out_dir = out;
            }
            let outcome = harness::run_experiment(&c)?;
            if outcome.executed.is_empty() {
                println!("all stages up to date");
            } else {
                println!("ran: {}", outcome.executed.join(", "));
            }
            print!("{}", std::fs::read_to_string(c.out_dir.join("summary.txt"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
