//! The work behind each subcommand. Reports hold only deterministic data;
//! wall-clock timings are returned separately.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;
use splatdeform::adapt::AdaptReport;
use splatdeform::eval::PckReport;
use splatdeform::handles::{HandleSpec, Method, ResolvedHandle};
use splatdeform::pipeline::{adapt, deform, deform_each, score_handle, EvalClouds, PreparedScene, StageTimings};
use splatdeform::ply::{load_points, load_splats, write_splats, LoadReport};
use splatdeform::Vec3;

use crate::cache::{CacheStatus, GraphCache};
use crate::config::RunConfig;

pub struct Prepared {
    pub scene: PreparedScene,
    pub load: LoadReport,
    pub cache: CacheStatus,
    pub timings: StageTimings,
}

/// Loads the input scene and builds (or fetches) its graph and Laplacian.
pub fn prepare(config: &RunConfig, cache: &GraphCache) -> Result<Prepared> {
    let input = config.input()?;
    let (splats, load) = load_splats(input, &config.format).with_context(|| format!("loading {}", input.display()))?;
    info!("loaded {} splats ({} dropped below the contribution floor)", splats.len(), load.dropped_low_opacity);
    let mut timings = StageTimings::default();
    let start = Instant::now();
    let (graph, status) = cache.load_or_build(input, &splats, &config.engine)?;
    timings.graph = start.elapsed().as_secs_f64();
    let scene = PreparedScene::with_graph(splats, graph, &config.engine, &mut timings)?;
    Ok(Prepared { scene, load, cache: status, timings })
}

#[derive(Debug, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub components: usize,
    pub epsilon: f64,
    pub cache: CacheStatus,
}

pub fn build_graph(config: &RunConfig, cache: &GraphCache) -> Result<(GraphStats, StageTimings)> {
    let input = config.input()?;
    let (splats, _) = load_splats(input, &config.format).with_context(|| format!("loading {}", input.display()))?;
    let start = Instant::now();
    let (graph, status) = cache.load_or_build(input, &splats, &config.engine)?;
    let timings = StageTimings { graph: start.elapsed().as_secs_f64(), ..StageTimings::default() };
    let stats = GraphStats {
        nodes: graph.node_count(),
        edges: graph.edge_count(),
        components: graph.components().0,
        epsilon: graph.epsilon(),
        cache: status,
    };
    Ok((stats, timings))
}

pub fn load_handles(path: &Path, config: &RunConfig) -> Result<HandleSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading handles {}", path.display()))?;
    let mut spec = HandleSpec::from_json_str(&text).with_context(|| format!("parsing handles {}", path.display()))?;
    if let Some(m) = config.method {
        spec.method = m;
    }
    Ok(spec)
}

#[derive(Debug, Serialize)]
pub struct ArapSummary {
    pub iterations: usize,
    pub converged: bool,
    pub energy_trace: Vec<f64>,
    pub unconstrained_components: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct BbwSummary {
    pub max_row_sum_error: f64,
    pub converged: Vec<bool>,
    pub cages: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct DeformReport {
    pub method: Method,
    pub splats: usize,
    pub load: LoadReport,
    pub graph_edges: usize,
    pub graph_components: usize,
    pub handles: Vec<ResolvedHandle>,
    pub max_displacement: f64,
    pub arap: Option<ArapSummary>,
    pub bbw: Option<BbwSummary>,
    pub adapt: AdaptReport,
}

#[derive(Debug, Default)]
pub struct DeformOutputs {
    pub splats: Option<PathBuf>,
    pub means: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

pub fn run_deform(prepared: &mut Prepared, spec: &HandleSpec, config: &RunConfig, out: &DeformOutputs) -> Result<DeformReport> {
    let scene = &prepared.scene;
    let start = Instant::now();
    let d = deform(scene, spec, &config.engine, None)?;
    prepared.timings.solve = start.elapsed().as_secs_f64();
    let displacements = d.displacements(&scene.means);
    let start = Instant::now();
    let (adapted, adapt_report) = adapt(scene, &displacements, &config.engine)?;
    prepared.timings.adapt = start.elapsed().as_secs_f64();
    if !adapt_report.fallbacks.is_empty() {
        warn!("{} kernels could not be adapted and were translated", adapt_report.fallbacks.len());
    }

    if let Some(path) = &out.splats {
        write_splats(path, &adapted).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &out.means {
        splatdeform::ply::write_points(path, &d.positions).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &out.weights {
        match &d.weights {
            Some(w) => write_json(path, w)?,
            None => bail!("weights: only the bbw method produces a weight field"),
        }
    }
    Ok(DeformReport {
        method: d.method,
        splats: scene.splats.len(),
        load: prepared.load.clone(),
        graph_edges: scene.graph.edge_count(),
        graph_components: scene.graph.components().0,
        max_displacement: displacements.iter().map(|v| v.norm()).fold(0.0, f64::max),
        handles: d.handles.clone(),
        arap: d.arap.as_ref().map(|r| ArapSummary {
            iterations: r.iterations,
            converged: r.converged,
            energy_trace: r.energy_trace.clone(),
            unconstrained_components: r.unconstrained_components.clone(),
        }),
        bbw: d.weights.as_ref().map(|w| BbwSummary {
            max_row_sum_error: w.max_row_sum_error(),
            converged: w.converged.clone(),
            cages: w.cages.iter().map(Vec::len).collect(),
        }),
        adapt: adapt_report,
    })
}

/// Adapts the kernels to externally computed positions of the means.
pub fn run_adapt(prepared: &mut Prepared, means: &Path, config: &RunConfig, output: Option<&Path>) -> Result<AdaptReport> {
    let scene = &prepared.scene;
    let moved = load_points(means).with_context(|| format!("loading {}", means.display()))?;
    if moved.len() != scene.means.len() {
        bail!("means: {} has {} points, the scene has {} splats", means.display(), moved.len(), scene.means.len());
    }
    let displacements: Vec<Vec3> = moved.iter().zip(&scene.means).map(|(p, r)| p - r).collect();
    let start = Instant::now();
    let (adapted, report) = adapt(scene, &displacements, &config.engine)?;
    prepared.timings.adapt = start.elapsed().as_secs_f64();
    if let Some(path) = output {
        write_splats(path, &adapted).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}

#[derive(Debug, Default)]
pub struct References {
    pub rest: Option<PathBuf>,
    /// One deformed reference cloud per handle, in handle order.
    pub deformed: Vec<PathBuf>,
    pub category: Option<String>,
}

/// Scores one independent deformation per handle against reference clouds.
pub fn run_eval(prepared: &mut Prepared, spec: &HandleSpec, config: &RunConfig, refs: &References) -> Result<PckReport> {
    let scene = &prepared.scene;
    let start = Instant::now();
    let runs = deform_each(scene, spec, &config.engine, None)?;
    prepared.timings.solve = start.elapsed().as_secs_f64();

    let reference_rest = match &refs.rest {
        Some(p) => {
            if refs.deformed.len() != runs.len() {
                bail!(
                    "reference_deformed: {} clouds given for {} handles",
                    refs.deformed.len(),
                    runs.len()
                );
            }
            Some(load_points(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => {
            if !refs.deformed.is_empty() {
                bail!("reference_rest: required when deformed references are given");
            }
            warn!("no reference clouds given; scoring the splats against their own deformation");
            None
        }
    };
    let category = refs.category.clone().unwrap_or_else(|| {
        config
            .input
            .as_ref()
            .and_then(|p| p.file_stem())
            .map_or_else(|| "scene".to_string(), |s| s.to_string_lossy().into_owned())
    });

    let mut scores = Vec::with_capacity(runs.len());
    for (h, run) in runs.iter().enumerate() {
        let anchor = run.handles[0].anchor;
        let deformed_ref;
        let clouds = match &reference_rest {
            Some(rest) => {
                let path = &refs.deformed[h];
                deformed_ref = load_points(path).with_context(|| format!("loading {}", path.display()))?;
                EvalClouds {
                    reference_rest: rest,
                    reference_deformed: &deformed_ref,
                    splats_rest: &scene.means,
                    splats_deformed: &run.positions,
                }
            }
            None => EvalClouds {
                reference_rest: &scene.means,
                reference_deformed: &run.positions,
                splats_rest: &scene.means,
                splats_deformed: &run.positions,
            },
        };
        let score = score_handle(&clouds, &scene.means[anchor], h, &category, scene.scale, &config.engine)
            .with_context(|| format!("scoring handle {h}"))?;
        scores.push(score);
    }
    Ok(PckReport::new(config.engine.thresholds.clone(), scores))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
