use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixr::data::SyntheticSpec;
use mixr::experiment::{
    cmd_analyze, cmd_augment, cmd_compare, cmd_search, gen_synthetic, replay, RunConfig, RunContext, RunManifest,
};

#[derive(Parser)]
#[command(name = "mixr", version, about = "Per-example kNN mixing policies for regression augmentation")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "MIXR_WORKERS", default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Method kinds to run, e.g. `none`, `mixr` (overrides `methods`).
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Policy CSV (overrides `policy`).
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search a per-example mixing policy.
    Search(RunArgs),
    /// Train and score every configured method.
    Compare(RunArgs),
    /// Write the training split plus its mixes under a policy.
    Augment(RunArgs),
    /// Run the distance studies.
    Analyze(RunArgs),
    /// Generate a synthetic dataset as CSV files.
    GenSynthetic {
        /// JSON synthetic spec.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rerun the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &RunArgs) -> mixr::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if !args.methods.is_empty() {
        cfg.set_methods_by_name(&args.methods)?;
    }
    if let Some(p) = &args.policy {
        cfg.policy = Some(p.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    let out = cfg.out_dir.clone().ok_or_else(|| mixr::Error::Config {
        field: "out_dir".into(),
        message: "set out_dir in the config or pass --out".into(),
    })?;
    cfg.validate()?;
    Ok((cfg.resolved(), out))
}

fn run(cli: Cli) -> mixr::Result<bool> {
    let workers = cli.workers;
    match cli.command {
        Cmd::Search(a) => {
            let (cfg, out_dir) = load(&a)?;
            let r = cmd_search(&cfg, &RunContext { out_dir, workers })?;
            println!("validation loss {:.6} after {} iterations", r.outcome.validation_loss, r.outcome.iterations);
            Ok(true)
        }
        Cmd::Compare(a) => {
            let (cfg, out_dir) = load(&a)?;
            let r = cmd_compare(&cfg, &RunContext { out_dir, workers })?;
            print!("{}", mixr::analysis::render_table(&r.results.rows()));
            Ok(r.results.all_ok())
        }
        Cmd::Augment(a) => {
            let (cfg, out_dir) = load(&a)?;
            cmd_augment(&cfg, &RunContext { out_dir, workers })?;
            Ok(true)
        }
        Cmd::Analyze(a) => {
            let (cfg, out_dir) = load(&a)?;
            cmd_analyze(&cfg, &RunContext { out_dir, workers })?;
            Ok(true)
        }
        Cmd::GenSynthetic { config, out, seed } => {
            let text = std::fs::read_to_string(&config).map_err(|e| mixr::Error::Io { path: config.clone(), source: e })?;
            let mut spec: SyntheticSpec = serde_json::from_str(&text)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            gen_synthetic(&spec, &out)?;
            Ok(true)
        }
        Cmd::Replay { manifest, out } => {
            let m = RunManifest::read(&manifest)?;
            replay(&m, &RunContext { out_dir: out, workers })?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("one or more methods failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
