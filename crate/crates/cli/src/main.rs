//! Command-line front end for the LiDAR-guided splatting pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "lidarsplat", version, about = "LiDAR-guided Gaussian splatting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    cloud: Option<PathBuf>,
    #[arg(long, global = true)]
    cameras: Option<PathBuf>,
    #[arg(long, global = true)]
    images: Option<PathBuf>,
    #[arg(long, global = true)]
    depth: Option<PathBuf>,
    #[arg(long, global = true)]
    splats: Option<PathBuf>,
    #[arg(long, global = true)]
    predictions: Option<PathBuf>,
    /// Number of points kept by `sample`.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Training steps for `train-toy`.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Score a cloud and draw the Gaussian budget.
    Sample,
    /// Estimate PCA normals.
    Normals,
    /// Project the cloud into every camera as metric depth maps.
    Depthmaps,
    /// Render color and depth of a splat checkpoint.
    Render,
    /// Desk-scale training with finite-difference gradients.
    TrainToy,
    /// PSNR, SSIM and depth-loss tables.
    Eval,
    /// Generate a synthetic scene.
    Synth {
        /// plane, cube, textured-cube or sphere.
        #[arg(long)]
        kind: Option<lidarsplat::synth::SceneKind>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Normals => "normals",
            Command::Depthmaps => "depthmaps",
            Command::Render => "render",
            Command::TrainToy => "train-toy",
            Command::Eval => "eval",
            Command::Synth { .. } => "synth",
        }
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let p = &mut cfg.paths;
    macro_rules! set_path {
        ($field:ident) => {
            if let Some(v) = &cli.$field {
                p.$field = Some(v.clone());
            }
        };
    }
    set_path!(cloud);
    set_path!(cameras);
    set_path!(images);
    set_path!(depth);
    set_path!(splats);
    set_path!(predictions);
    if let Some(o) = &cli.out {
        p.output = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.budget {
        cfg.allocation.budget = m;
    }
    if let Some(a) = cli.alpha {
        cfg.allocation.alpha = a;
    }
    if let Some(b) = cli.beta {
        cfg.allocation.beta = b;
    }
    if let Some(s) = cli.steps {
        cfg.toy.steps = s;
    }
    if let Command::Synth { kind: Some(k) } = cli.command {
        cfg.synth.kind = k;
    }
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let out = &cfg.paths.output;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write(&out.join("effective_config.json"))?;
    let start = Instant::now();
    match cli.command {
        Command::Sample => commands::sample(&cfg),
        Command::Normals => commands::normals(&cfg),
        Command::Depthmaps => commands::depthmaps(&cfg),
        Command::Render => commands::render_cmd(&cfg),
        Command::TrainToy => commands::train_toy(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Synth { .. } => commands::synth_cmd(&cfg),
    }?;
    let timing = json!({ "command": cli.command.name(), "seconds": start.elapsed().as_secs_f64() });
    std::fs::write(out.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<lidarsplat::Error>())
                .map(|c| c.kind())
                .unwrap_or("other");
            let report = json!({
                "error": {
                    "command": cli.command.name(),
                    "kind": kind,
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
