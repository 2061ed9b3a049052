use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use metagp::checkpoint::{load_prior, save_tasks};
use metagp::config::ConfigFile;
use metagp::experiment::{
    build_tasks, evaluate_priors, required_priors, reproduce_table, rows_to_markdown, table_config, train_priors,
    EnvKind, ExperimentConfig, ModelPreset, Scale, TableId, Trained, CONFIG_KEYS,
};
use metagp::metatrain::LossTrace;
use metagp::verify::verify_suite;
use metagp::{Error, Result};

/// Meta-learned Gaussian-process priors: task generation, meta-training,
/// evaluation and table reproduction.
#[derive(Parser)]
#[command(name = "metagp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file with `[section]` headers and `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Task environment preset: sinusoid, step, mnist or csv.
    #[arg(long, global = true)]
    preset: Option<EnvKind>,
    /// Scale of the preset: paper, desk or smoke.
    #[arg(long, global = true)]
    scale: Option<Scale>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Directory holding the MNIST IDX image files.
    #[arg(long, global = true)]
    mnist_dir: Option<PathBuf>,
    /// Comma-separated model presets.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<ModelPreset>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate meta-training and target tasks and cache them.
    GenTasks,
    /// Meta-train the priors of the configured models.
    MetaTrain,
    /// Condition priors on target contexts and report metrics.
    Evaluate {
        /// Directory with `<model>.gppr` priors from `meta-train`; priors
        /// missing there are trained first.
        #[arg(long)]
        priors: Option<PathBuf>,
    },
    /// Run every method of a table and print the grid with verdict lines.
    Reproduce {
        /// table1, tableS1 or tableS2.
        table: TableId,
    },
    /// Gradient, equivalence, counter-example and linear-algebra checks.
    Verify,
}

fn config_help() -> String {
    let mut out = String::from("Configuration keys (flags override file keys):\n");
    let mut section = "";
    for (s, k, doc) in CONFIG_KEYS {
        if *s != section {
            section = s;
            writeln!(out, "  [{s}]").unwrap();
        }
        writeln!(out, "    {k:<18} {doc}").unwrap();
    }
    out.push_str("\nExit status: 0 success, 1 verification failure, 2 configuration or data error.");
    out
}

fn load_file(common: &Common) -> Result<ConfigFile> {
    match &common.config {
        Some(path) => ConfigFile::load(path),
        None => Ok(ConfigFile::default()),
    }
}

fn apply_flags(cfg: &mut ExperimentConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    if let Some(dir) = &common.mnist_dir {
        cfg.mnist_dir = dir.clone();
    }
    if let Some(models) = &common.models {
        cfg.models = models.clone();
    }
}

fn experiment_config(common: &Common) -> Result<ExperimentConfig> {
    let mut file = load_file(common)?;
    let env = match (common.preset, file.parsed::<EnvKind>("experiment", "env")?) {
        (Some(env), _) | (None, Some(env)) => env,
        (None, None) => EnvKind::Step,
    };
    file.set("experiment", "env", env.to_string());
    let mut cfg = ExperimentConfig::preset(env, common.scale.unwrap_or(Scale::Desk));
    cfg.apply(&file)?;
    apply_flags(&mut cfg, common);
    cfg.validate()?;
    Ok(cfg)
}

fn table_experiment(common: &Common, which: TableId) -> Result<ExperimentConfig> {
    let mut file = load_file(common)?;
    for env in [common.preset, file.parsed::<EnvKind>("experiment", "env")?].into_iter().flatten() {
        if env != which.env() {
            return Err(Error::Config(format!("{} runs the {} environment, not {env}", which.name(), which.env())));
        }
    }
    file.set("experiment", "env", which.env().to_string());
    let mnist_dir = common.mnist_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
    let mut cfg = table_config(which, common.scale.unwrap_or(Scale::Desk), common.seed.unwrap_or(0), &mnist_dir);
    cfg.apply(&file)?;
    apply_flags(&mut cfg, common);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &mut ExperimentConfig) -> PathBuf {
    cfg.out_dir.get_or_insert_with(|| PathBuf::from("out")).clone()
}

/// Returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenTasks => {
            let mut cfg = experiment_config(&cli.common)?;
            let dir = out_dir(&mut cfg);
            std::fs::create_dir_all(&dir)?;
            let sets = build_tasks(&cfg)?;
            save_tasks(&dir.join("meta.gptk"), &sets.meta)?;
            save_tasks(&dir.join("eval.gptk"), &sets.eval)?;
            println!(
                "wrote {} meta-tasks and {} target tasks to {}",
                sets.meta.len(),
                sets.eval.len(),
                dir.display()
            );
        }
        Command::MetaTrain => {
            let mut cfg = experiment_config(&cli.common)?;
            let dir = out_dir(&mut cfg);
            let sets = build_tasks(&cfg)?;
            let trained = train_priors(&cfg, &sets)?;
            for (model, t) in &trained {
                let last = t.trace.per_epoch.last().map_or("n/a".into(), |l| format!("{l:.4}"));
                println!("{model}: final meta-loss {last}");
            }
            println!("priors written to {}", dir.display());
        }
        Command::Evaluate { priors } => {
            let cfg = experiment_config(&cli.common)?;
            let sets = build_tasks(&cfg)?;
            let mut trained = BTreeMap::new();
            let mut missing = Vec::new();
            for model in required_priors(&cfg.models) {
                let path = priors.as_ref().map(|d| d.join(format!("{model}.gppr")));
                match path {
                    Some(path) if model.is_meta_trained() && path.exists() => {
                        info!("loading {}", path.display());
                        let prior = load_prior(&path)?;
                        trained.insert(model, Trained { prior, trace: LossTrace::default() });
                    }
                    _ => missing.push(model),
                }
            }
            if !missing.is_empty() {
                let sub = ExperimentConfig { models: missing, out_dir: None, ..cfg.clone() };
                trained.extend(train_priors(&sub, &sets)?);
            }
            let rows = evaluate_priors(&cfg, &sets, &trained)?;
            print!("{}", rows_to_markdown(&rows));
        }
        Command::Reproduce { table } => {
            let mut cfg = table_experiment(&cli.common, table)?;
            let dir = out_dir(&mut cfg);
            let report = reproduce_table(&cfg, table)?;
            print!("{}", report.markdown());
            println!("written to {}", dir.join(format!("{}.csv", table.name())).display());
        }
        Command::Verify => {
            let report = verify_suite(cli.common.seed.unwrap_or(0));
            print!("{report}");
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_long_help(config_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
