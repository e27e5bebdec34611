use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retformer::run::{self, load_config, RunConfig, RunError};

#[derive(Parser)]
#[command(name = "retformer", version, about = "Train, tune, evaluate and explain Retformer retinal-image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as class folders.
    Synth(Common),
    /// Train on one split and score the held-out fold.
    Train(Common),
    /// Nested cross-validation with Bayesian hyperparameter search.
    Tune(Common),
    /// K1-fold cross-validation of the configured architecture.
    Evaluate(Common),
    /// Cross-validate the baseline and each single-change variant.
    Ablate(Common),
    /// Grad-CAM and attention heatmaps for held-out images.
    Explain(Common),
    /// Compare models trained on original, Grad-CAM-masked and randomly masked images.
    MaskStudy(Common),
    /// Train and validate once per image-size or batch-size setting.
    Sweep(Common),
    /// Summarize the run directory given by --out.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory for on-disk datasets.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    keep_fraction: Option<f64>,
    /// Comma-separated sweep settings.
    #[arg(long)]
    grid: Option<String>,
    /// Any configuration key, e.g. `--set epochs=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, RunError> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| RunError::Config {
                key: s.clone(),
                origin: "command line".into(),
                message: "expected --set KEY=VALUE".into(),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("data_root", self.data_root.as_ref().map(|p| p.display().to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("k1", self.k1.map(|v| v.to_string())),
            ("k2", self.k2.map(|v| v.to_string())),
            ("budget", self.budget.map(|v| v.to_string())),
            ("keep_fraction", self.keep_fraction.map(|v| v.to_string())),
            ("grid", self.grid.clone()),
        ];
        out.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig, RunError> {
        let parsed = load_config(self.config.as_deref(), &self.overrides()?)?;
        for w in &parsed.warnings {
            log::warn!("{w}");
        }
        Ok(parsed.config)
    }
}

type CommandFn = fn(&RunConfig, &Path) -> Result<Vec<PathBuf>, RunError>;

fn execute(command: Command) -> Result<Vec<PathBuf>, RunError> {
    let (common, f): (Common, CommandFn) = match command {
        Command::Synth(c) => (c, run::cmd_synth),
        Command::Train(c) => (c, run::cmd_train),
        Command::Tune(c) => (c, run::cmd_tune),
        Command::Evaluate(c) => (c, run::cmd_evaluate),
        Command::Ablate(c) => (c, run::cmd_ablate),
        Command::Explain(c) => (c, run::cmd_explain),
        Command::MaskStudy(c) => (c, run::cmd_mask_study),
        Command::Sweep(c) => (c, run::cmd_sweep),
        Command::Report(c) => {
            c.load()?;
            return run::cmd_report(&c.out);
        }
    };
    let cfg = common.load()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| RunError::Config { key: "threads".into(), origin: "command line".into(), message: e.to_string() })?;
    f(&cfg, &common.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
