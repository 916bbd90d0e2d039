//! `skillspace` — drive the full pipeline: synthetic data generation,
//! training batches, clustering reports, self-supervised fine-tuning,
//! bi-level planning, codebook sweeps, and the gradient check.

mod commands;
mod config;
mod error;
mod http_client;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use skillspace::dataset::DemoCount;
use skillspace::planner_high::{CatalogVariant, PromptTemplate};

use config::PipelineConfig;
use error::{config_err, CliError};

#[derive(Parser)]
#[command(name = "skillspace", version, about = "skill discovery and bi-level planning pipeline")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed for everything this command runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; all artifacts land here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel jobs for batch commands (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Basic,
    HiddenPrior,
    Exploration,
}

impl From<TemplateArg> for PromptTemplate {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Basic => PromptTemplate::Basic,
            TemplateArg::HiddenPrior => PromptTemplate::HiddenPrior,
            TemplateArg::Exploration => PromptTemplate::Exploration,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    SkillsOnly,
    WithRelevant,
    WithIrrelevant,
    Both,
    HiddenEnv,
}

impl From<VariantArg> for CatalogVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::SkillsOnly => CatalogVariant::SkillsOnly,
            VariantArg::WithRelevant => CatalogVariant::WithRelevant,
            VariantArg::WithIrrelevant => CatalogVariant::WithIrrelevant,
            VariantArg::Both => CatalogVariant::Both,
            VariantArg::HiddenEnv => CatalogVariant::HiddenEnv,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic kitchen demonstration corpus.
    GenData {
        /// Either one count for all skills or comma-separated per-skill counts.
        #[arg(long)]
        demos_per_skill: Option<String>,
        /// Position noise in meters.
        #[arg(long)]
        noise_std: Option<f64>,
        /// Dataset file name inside the output directory.
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Train a batch of models with consecutive seeds and rank them.
    TrainBatch {
        #[arg(long)]
        data: PathBuf,
        /// Number of models (seeds seed..seed+n-1).
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Assign demos to skill vectors; report clustering metrics and prototypes.
    Discover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Time grid length for prototypes.
        #[arg(long, default_value_t = 150)]
        grid: usize,
        /// Also emit prototype projection plots (PNG).
        #[arg(long)]
        plot: bool,
    },
    /// Retrain with assignments frozen to a phase-1 model's clustering.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Bi-level planning: LLM plan, then latent-space optimization per step.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated stew ingredients, e.g. "tomato,potato".
        #[arg(long)]
        ingredients: String,
        #[arg(long, value_enum, default_value_t = TemplateArg::Basic)]
        template: TemplateArg,
        #[arg(long, value_enum, default_value_t = VariantArg::SkillsOnly)]
        catalog: VariantArg,
        /// Use the deterministic perfect mock client.
        #[arg(long)]
        mock: bool,
        /// Mock that fails every n-th call.
        #[arg(long)]
        mock_fail_every: Option<u64>,
        /// Seed for sampling object poses.
        #[arg(long)]
        env_seed: Option<u64>,
        /// JSON file mapping catalog keys to codebook indices (needed for
        /// unlabeled datasets).
        #[arg(long)]
        skill_map: Option<PathBuf>,
        /// Image payloads forwarded to the client (repeatable).
        #[arg(long)]
        image: Vec<PathBuf>,
    },
    /// Train batches across codebook sizes and tabulate clustering quality.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated codebook sizes, e.g. "3,5,10,20".
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Verify every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Run the ingredient-combination benchmark against a client.
    Benchmark {
        /// Comma-separated catalog variants.
        #[arg(long, default_value = "skills-only,with-relevant,with-irrelevant,both")]
        variants: String,
        /// Trials per ingredient combination.
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        mock: bool,
        #[arg(long)]
        mock_fail_every: Option<u64>,
        /// Mock that fails when the catalog exceeds this many actions.
        #[arg(long)]
        mock_confused_over: Option<usize>,
    },
}

fn client_choice(
    mock: bool,
    fail_every: Option<u64>,
    confused: Option<usize>,
) -> commands::ClientChoice {
    if let Some(n) = fail_every {
        commands::ClientChoice::MockFailEvery(n)
    } else if let Some(n) = confused {
        commands::ClientChoice::MockConfused(n)
    } else if mock {
        commands::ClientChoice::MockPerfect
    } else {
        commands::ClientChoice::Live
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| config_err(format!("cannot configure {jobs} jobs: {e}")))?;
    }

    match cli.cmd {
        Cmd::GenData { demos_per_skill, noise_std, out_file } => {
            if let Some(spec) = demos_per_skill {
                cfg.kitchen.demos_per_skill = parse_demo_counts(&spec)?;
            }
            if let Some(noise) = noise_std {
                cfg.kitchen.noise_std = noise;
            }
            cfg.validate()?;
            commands::gen_data(&cfg, out_file)
        }
        Cmd::TrainBatch { data, n, iterations, k } => {
            if let Some(iterations) = iterations {
                cfg.training.iterations = iterations;
            }
            if let Some(k) = k {
                cfg.training.k = k;
            }
            cfg.validate()?;
            commands::train_batch(&cfg, &data, n)
        }
        Cmd::Discover { model, data, grid, plot } => {
            cfg.validate()?;
            commands::discover(&cfg, &model, &data, grid, plot)
        }
        Cmd::Finetune { model, data, iterations } => {
            if let Some(iterations) = iterations {
                cfg.training.iterations = iterations;
            }
            cfg.validate()?;
            commands::finetune(&cfg, &model, &data)
        }
        Cmd::Plan {
            model,
            data,
            ingredients,
            template,
            catalog,
            mock,
            mock_fail_every,
            env_seed,
            skill_map,
            image,
        } => {
            cfg.validate()?;
            let ingredients: Vec<String> = ingredients
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if ingredients.is_empty() {
                return Err(config_err("--ingredients must name at least one ingredient"));
            }
            let choice = client_choice(mock, mock_fail_every, None);
            commands::plan(
                &cfg,
                &model,
                &data,
                &ingredients,
                template.into(),
                catalog.into(),
                &choice,
                env_seed,
                skill_map.as_deref(),
                &image,
            )
        }
        Cmd::Sweep { data, sizes, batch, iterations } => {
            if let Some(sizes) = sizes {
                cfg.sweep.sizes = parse_usize_list(&sizes)?;
            }
            if let Some(batch) = batch {
                cfg.sweep.batch = batch;
            }
            if let Some(iterations) = iterations {
                cfg.training.iterations = iterations;
            }
            cfg.validate()?;
            commands::sweep(&cfg, &data)
        }
        Cmd::Gradcheck { instances } => {
            cfg.validate()?;
            commands::run_gradcheck(&cfg, instances)
        }
        Cmd::Benchmark { variants, trials, mock, mock_fail_every, mock_confused_over } => {
            cfg.validate()?;
            let variants = parse_variants(&variants)?;
            let choice = client_choice(mock, mock_fail_every, mock_confused_over);
            commands::benchmark(&cfg, &variants, trials, &choice)
        }
    }
}

fn parse_demo_counts(spec: &str) -> Result<DemoCount, CliError> {
    let counts = parse_usize_list(spec)?;
    match counts.as_slice() {
        [] => Err(config_err("empty demo count list")),
        [one] => Ok(DemoCount::Uniform(*one)),
        many => Ok(DemoCount::PerSkill(many.to_vec())),
    }
}

fn parse_usize_list(spec: &str) -> Result<Vec<usize>, CliError> {
    spec.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| config_err(format!("bad count {s:?}"))))
        .collect()
}

fn parse_variants(spec: &str) -> Result<Vec<CatalogVariant>, CliError> {
    spec.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "skills-only" | "skills_only" => Ok(CatalogVariant::SkillsOnly),
            "with-relevant" | "with_relevant" => Ok(CatalogVariant::WithRelevant),
            "with-irrelevant" | "with_irrelevant" => Ok(CatalogVariant::WithIrrelevant),
            "both" => Ok(CatalogVariant::Both),
            "hidden-env" | "hidden_env" => Ok(CatalogVariant::HiddenEnv),
            other => Err(config_err(format!("unknown catalog variant {other:?}"))),
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class as u8)
        }
    }
}
