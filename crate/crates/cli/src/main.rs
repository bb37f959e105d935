use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use splatdeform::handles::Method;
use splatdeform::pipeline::StageTimings;
use splatdeform_cli::cache::GraphCache;
use splatdeform_cli::commands::{self, DeformOutputs, References};
use splatdeform_cli::config::{Overrides, RunConfig, CACHE_ENV};
use splatdeform_cli::service::{self, AppState};

#[derive(Parser)]
#[command(name = "splatdeform", version, about = "Deform 2D Gaussian splat scenes")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for cached graphs.
    #[arg(long, global = true, env = CACHE_ENV)]
    cache_dir: Option<PathBuf>,
    /// Always rebuild the graph and leave the cache untouched.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Write stage timings (seconds) as JSON to this file.
    #[arg(long, global = true)]
    timings: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Arap,
    Bbw,
}

#[derive(Args, Default)]
struct Engine {
    /// Scene in PLY format.
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Graph tolerance as a fraction of the scene scale.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    k_laplacian: Option<usize>,
    /// Neighbors used to carry each kernel vertex.
    #[arg(long)]
    k_bind: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or fetch from the cache) the splat graph and print its statistics.
    BuildGraph {
        #[command(flatten)]
        engine: Engine,
        /// Also write the statistics to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Deform the scene with a handle document and adapt the kernels.
    Deform {
        #[command(flatten)]
        engine: Engine,
        #[arg(long)]
        handles: PathBuf,
        /// Overrides the method named in the handle document.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Adapted scene.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Deformed splat means as a point cloud.
        #[arg(long)]
        means: Option<PathBuf>,
        /// Skinning weights (bbw only).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Adapt the kernels to deformed means computed elsewhere.
    Adapt {
        #[command(flatten)]
        engine: Engine,
        /// Point cloud with one deformed position per splat.
        #[arg(long)]
        means: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score one deformation per handle with 3DPCK.
    Eval {
        #[command(flatten)]
        engine: Engine,
        #[arg(long)]
        handles: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Reference cloud at rest.
        #[arg(long)]
        reference_rest: Option<PathBuf>,
        /// Deformed reference cloud, once per handle in handle order.
        #[arg(long)]
        reference_deformed: Vec<PathBuf>,
        #[arg(long)]
        category: Option<String>,
        /// Comma separated thresholds in units of the scene scale.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        keypoint_radius: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the scene over HTTP for the preview client.
    Serve {
        #[command(flatten)]
        engine: Engine,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn method(m: Option<MethodArg>) -> Option<Method> {
    m.map(|m| match m {
        MethodArg::Arap => Method::Arap,
        MethodArg::Bbw => Method::Bbw,
    })
}

impl Engine {
    fn overrides(&self) -> Overrides {
        Overrides {
            input: self.input.clone(),
            epsilon_factor: self.epsilon,
            k_laplacian: self.k_laplacian,
            k_bind: self.k_bind,
            max_iters: self.max_iters,
            tol: self.tol,
            ..Overrides::default()
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut o = match &cli.command {
        Command::BuildGraph { engine, .. }
        | Command::Deform { engine, .. }
        | Command::Adapt { engine, .. }
        | Command::Eval { engine, .. }
        | Command::Serve { engine, .. } => engine.overrides(),
    };
    o.cache_dir.clone_from(&cli.cache_dir);
    match &cli.command {
        Command::Deform { method: m, output, report, .. } => {
            o.method = method(*m);
            o.output.clone_from(output);
            o.report.clone_from(report);
        }
        Command::Eval { method: m, thresholds, keypoint_radius, report, .. } => {
            o.method = method(*m);
            o.thresholds.clone_from(thresholds);
            o.keypoint_radius = *keypoint_radius;
            o.report.clone_from(report);
        }
        Command::Adapt { output, report, .. } => {
            o.output.clone_from(output);
            o.report.clone_from(report);
        }
        Command::BuildGraph { report, .. } => o.report.clone_from(report),
        Command::Serve { .. } => {}
    }
    config.apply(&o);
    config.validate()?;

    let cache = if cli.no_cache { GraphCache::disabled() } else { GraphCache::new(config.cache_dir()) };
    let timings: StageTimings = match cli.command {
        Command::BuildGraph { .. } => {
            let (stats, timings) = commands::build_graph(&config, &cache)?;
            print_json(&stats)?;
            if let Some(p) = &config.report {
                commands::write_json(p, &stats)?;
            }
            timings
        }
        Command::Deform { handles, means, weights, .. } => {
            let spec = commands::load_handles(&handles, &config)?;
            let mut prepared = commands::prepare(&config, &cache)?;
            let outputs = DeformOutputs { splats: config.output.clone(), means, weights };
            let report = commands::run_deform(&mut prepared, &spec, &config, &outputs)?;
            match &config.report {
                Some(p) => commands::write_json(p, &report)?,
                None => print_json(&report)?,
            }
            prepared.timings
        }
        Command::Adapt { means, .. } => {
            let mut prepared = commands::prepare(&config, &cache)?;
            let report = commands::run_adapt(&mut prepared, &means, &config, config.output.as_deref())?;
            match &config.report {
                Some(p) => commands::write_json(p, &report)?,
                None => print_json(&report)?,
            }
            prepared.timings
        }
        Command::Eval { handles, reference_rest, reference_deformed, category, .. } => {
            let spec = commands::load_handles(&handles, &config)?;
            let mut prepared = commands::prepare(&config, &cache)?;
            let refs = References { rest: reference_rest, deformed: reference_deformed, category };
            let report = commands::run_eval(&mut prepared, &spec, &config, &refs)?;
            if let Some(p) = &config.report {
                commands::write_json(p, &report)?;
            }
            print!("{}", report.to_table());
            prepared.timings
        }
        Command::Serve { host, port, .. } => {
            let prepared = commands::prepare(&config, &cache)?;
            let state = Arc::new(AppState::new(prepared.scene, config.engine.clone(), config.max_preview));
            let rt = tokio::runtime::Runtime::new().context("starting the runtime")?;
            rt.block_on(service::serve(state, SocketAddr::new(host, port)))?;
            prepared.timings
        }
    };
    log::info!(
        "timings: graph {:.3}s, laplacian {:.3}s, solve {:.3}s, adapt {:.3}s",
        timings.graph,
        timings.laplacian,
        timings.solve,
        timings.adapt
    );
    if let Some(p) = &cli.timings {
        commands::write_json(p, &timings)?;
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
