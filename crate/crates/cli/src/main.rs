use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use vpcat_cli::{Outcome, Pipeline, PipelineConfig, Report, Selector};

/// Two-stage viewport behavior clustering and video-chunk categorization.
#[derive(Parser)]
#[command(name = "vpcat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and resample the traces of a manifest into the unified store.
    Unify {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest; overrides the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Cut traces into chunks and extract behavior features.
    Features {
        #[command(flatten)]
        common: Common,
    },
    /// Cluster trace chunks into viewport behaviors.
    ClusterViewports {
        #[command(flatten)]
        common: Common,
        /// Use this many clusters instead of sweeping.
        #[arg(long)]
        fixed_m: Option<usize>,
    },
    /// Cluster video chunks by their behavior mixture.
    Categorize {
        #[command(flatten)]
        common: Common,
        /// Use this many categories instead of sweeping.
        #[arg(long)]
        fixed_q: Option<usize>,
    },
    /// Write evaluation reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Reports to write; all when omitted.
        #[arg(long, value_enum)]
        which: Vec<Report>,
    },
    /// Render the view density of a category or behavior cluster.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "cluster", required_unless_present = "cluster")]
        category: Option<usize>,
        #[arg(long)]
        cluster: Option<usize>,
    },
}

fn configure(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn report(what: &str, outcome: Outcome) {
    match outcome {
        Outcome::Ran => println!("{what}: done"),
        Outcome::Cached => println!("{what}: up to date"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Unify { common, manifest } => {
            let mut cfg = configure(&common)?;
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            report("unify", Pipeline::new(cfg)?.unify()?);
        }
        Command::Features { common } => {
            report("features", Pipeline::new(configure(&common)?)?.features()?);
        }
        Command::ClusterViewports { common, fixed_m } => {
            let mut cfg = configure(&common)?;
            if fixed_m.is_some() {
                cfg.fixed_m = fixed_m;
            }
            report("cluster-viewports", Pipeline::new(cfg)?.cluster_viewports()?);
        }
        Command::Categorize { common, fixed_q } => {
            let mut cfg = configure(&common)?;
            if fixed_q.is_some() {
                cfg.fixed_q = fixed_q;
            }
            report("categorize", Pipeline::new(cfg)?.categorize()?);
        }
        Command::Evaluate { common, mut which } => {
            if which.is_empty() {
                which = Report::ALL.to_vec();
            }
            which.sort();
            which.dedup();
            let mut p = Pipeline::new(configure(&common)?)?;
            for (r, outcome) in p.evaluate(&which)? {
                report(&format!("evaluate {}", r.name()), outcome);
            }
        }
        Command::Heatmap {
            common,
            category,
            cluster,
        } => {
            let selector = match (category, cluster) {
                (Some(q), _) => Selector::Category(q),
                (None, Some(m)) => Selector::Cluster(m),
                (None, None) => unreachable!("clap requires one selector"),
            };
            report("heatmap", Pipeline::new(configure(&common)?)?.heatmap(selector)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
