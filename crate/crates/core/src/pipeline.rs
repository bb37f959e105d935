//! End-to-end stages: graph, Laplacian, handle solve, kernel adaptation and
//! keypoint scoring.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_kernels, AdaptOptions, AdaptReport, K_BIND};
use crate::arap::{handle_constraints, solve_arap, ArapOptions, ArapResult, EdgeWeights};
use crate::bbw::{apply_lbs, solve_bbw, WeightField};
use crate::error::{Error, Result};
use crate::eval::{pck3d, sample_keypoints, HandleScore, PckScore, KEYPOINTS_PER_HANDLE, THRESHOLDS};
use crate::graph::{build_graph, OffsetSampling, SplatGraph};
use crate::handles::{resolve_handles, HandleSpec, Method, ResolvedHandle, DEFAULT_CAGE_RADIUS};
use crate::laplacian::{assemble, LaplacianSystem, K_LAPLACIAN};
use crate::splat::{SceneScale, SplatSet, Vec3};

/// Default graph tolerance, in units of `s`.
pub const EPSILON_FACTOR: f64 = 0.005;

/// Engine settings. Lengths are multiples of the scene scale `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub epsilon_factor: f64,
    pub k_laplacian: usize,
    pub k_bind: usize,
    pub sampling: OffsetSampling,
    pub arap: ArapOptions,
    pub thresholds: Vec<f64>,
    pub keypoints_per_handle: usize,
    /// Radius around each handle that keypoints are drawn from.
    pub keypoint_radius: f64,
    /// Keypoints farther than this from every splat are left unpaired.
    /// `None` pairs every keypoint.
    pub pair_radius: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            epsilon_factor: EPSILON_FACTOR,
            k_laplacian: K_LAPLACIAN,
            k_bind: K_BIND,
            sampling: OffsetSampling::default(),
            arap: ArapOptions::default(),
            thresholds: THRESHOLDS.to_vec(),
            keypoints_per_handle: KEYPOINTS_PER_HANDLE,
            keypoint_radius: DEFAULT_CAGE_RADIUS,
            pair_radius: None,
        }
    }
}

fn check(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{field}: {message}")))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.epsilon_factor.is_finite() && self.epsilon_factor >= 0.0, "epsilon_factor", "must be >= 0")?;
        check(self.k_laplacian >= 3, "k_laplacian", "must be at least 3")?;
        check(self.k_bind >= 1, "k_bind", "must be at least 1")?;
        check(self.sampling.boundary >= 3, "sampling.boundary", "must be at least 3")?;
        check(self.sampling.ring_samples >= 3 || self.sampling.rings == 0, "sampling.ring_samples", "must be at least 3")?;
        check(self.arap.max_iters >= 1, "arap.max_iters", "must be at least 1")?;
        check(self.arap.tol.is_finite() && self.arap.tol >= 0.0, "arap.tol", "must be >= 0")?;
        check(!self.thresholds.is_empty(), "thresholds", "must not be empty")?;
        for (i, t) in self.thresholds.iter().enumerate() {
            check(t.is_finite() && *t > 0.0, &format!("thresholds[{i}]"), "must be positive")?;
        }
        check(self.keypoints_per_handle >= 1, "keypoints_per_handle", "must be at least 1")?;
        check(self.keypoint_radius.is_finite() && self.keypoint_radius > 0.0, "keypoint_radius", "must be positive")?;
        if let Some(r) = self.pair_radius {
            check(r.is_finite() && r > 0.0, "pair_radius", "must be positive")?;
        }
        Ok(())
    }
}

/// Wall-clock seconds per stage; stages that did not run stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub graph: f64,
    pub laplacian: f64,
    pub solve: f64,
    pub adapt: f64,
}

/// Builds the splat graph with `ε = epsilon_factor · s`.
pub fn scene_graph(splats: &SplatSet, config: &PipelineConfig) -> Result<SplatGraph> {
    let s = splats.scale()?;
    build_graph(splats, s.times(config.epsilon_factor), &config.sampling)
}

/// A scene with its graph and Laplacian, ready for repeated deformations.
pub struct PreparedScene {
    pub splats: SplatSet,
    pub means: Vec<Vec3>,
    pub scale: SceneScale,
    pub graph: SplatGraph,
    pub laplacian: LaplacianSystem,
    pub edge_weights: EdgeWeights,
}

impl PreparedScene {
    /// Builds everything from scratch.
    pub fn build(splats: SplatSet, config: &PipelineConfig, timings: &mut StageTimings) -> Result<Self> {
        config.validate()?;
        let start = Instant::now();
        let graph = scene_graph(&splats, config)?;
        timings.graph = start.elapsed().as_secs_f64();
        Self::with_graph(splats, graph, config, timings)
    }

    /// Reuses a previously built graph.
    pub fn with_graph(
        splats: SplatSet,
        graph: SplatGraph,
        config: &PipelineConfig,
        timings: &mut StageTimings,
    ) -> Result<Self> {
        config.validate()?;
        if graph.node_count() != splats.len() {
            return Err(Error::InvalidArgument(format!(
                "graph has {} nodes for {} splats",
                graph.node_count(),
                splats.len()
            )));
        }
        let start = Instant::now();
        let scale = splats.scale()?;
        let means = splats.means();
        let laplacian = assemble(&means, &graph, config.k_laplacian, scale)?;
        let edge_weights = EdgeWeights::from_laplacian(&laplacian.stiffness);
        timings.laplacian = start.elapsed().as_secs_f64();
        Ok(PreparedScene {
            splats,
            means,
            scale,
            graph,
            laplacian,
            edge_weights,
        })
    }

    pub fn resolve(&self, spec: &HandleSpec) -> Result<Vec<ResolvedHandle>> {
        resolve_handles(spec, &self.means, self.scale, |i| self.laplacian.neighborhoods[i].indices())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deformation {
    pub method: Method,
    pub handles: Vec<ResolvedHandle>,
    pub positions: Vec<Vec3>,
    pub arap: Option<ArapResult>,
    pub weights: Option<WeightField>,
}

impl Deformation {
    pub fn displacements(&self, rest: &[Vec3]) -> Vec<Vec3> {
        self.positions.iter().zip(rest).map(|(p, r)| p - r).collect()
    }
}

fn cancelled(cancel: Option<&AtomicBool>) -> bool {
    cancel.is_some_and(|c| c.load(Ordering::Relaxed))
}

fn solve_handles(
    scene: &PreparedScene,
    handles: Vec<ResolvedHandle>,
    spec: &HandleSpec,
    config: &PipelineConfig,
    cancel: Option<&AtomicBool>,
) -> Result<Deformation> {
    if cancelled(cancel) {
        return Err(Error::Cancelled);
    }
    let rest = &scene.means;
    match spec.method {
        Method::Arap => {
            let anchors: Vec<(usize, Vec3)> = handles.iter().map(|h| (h.anchor, h.apply(&rest[h.anchor]))).collect();
            let constraints = handle_constraints(rest, &anchors, scene.scale.times(spec.fixed_radius));
            let result = solve_arap(&scene.edge_weights, rest, &constraints, &config.arap, cancel)?;
            Ok(Deformation {
                method: Method::Arap,
                handles,
                positions: result.positions.clone(),
                arap: Some(result),
                weights: None,
            })
        }
        Method::Bbw => {
            let anchors: Vec<usize> = handles.iter().map(|h| h.anchor).collect();
            let field = solve_bbw(
                &scene.laplacian.stiffness,
                &scene.laplacian.mass,
                rest,
                &anchors,
                scene.scale.times(spec.cage_radius),
            )?;
            if cancelled(cancel) {
                return Err(Error::Cancelled);
            }
            let transforms: Vec<_> = handles.iter().map(|h| h.transform).collect();
            let positions = apply_lbs(rest, &field, &transforms)?;
            Ok(Deformation {
                method: Method::Bbw,
                handles,
                positions,
                arap: None,
                weights: Some(field),
            })
        }
    }
}

/// Interactive mode: all handles act together and the fixed set is the
/// union of the per-handle rules.
pub fn deform(
    scene: &PreparedScene,
    spec: &HandleSpec,
    config: &PipelineConfig,
    cancel: Option<&AtomicBool>,
) -> Result<Deformation> {
    let handles = scene.resolve(spec)?;
    solve_handles(scene, handles, spec, config, cancel)
}

/// Evaluation mode: one independent deformation per handle.
pub fn deform_each(
    scene: &PreparedScene,
    spec: &HandleSpec,
    config: &PipelineConfig,
    cancel: Option<&AtomicBool>,
) -> Result<Vec<Deformation>> {
    scene
        .resolve(spec)?
        .into_iter()
        .map(|h| solve_handles(scene, vec![h], spec, config, cancel))
        .collect()
}

/// Adapts the kernels of `scene` to per-splat displacements.
pub fn adapt(scene: &PreparedScene, displacements: &[Vec3], config: &PipelineConfig) -> Result<(SplatSet, AdaptReport)> {
    let options = AdaptOptions {
        k_bind: config.k_bind,
        min_contribution: scene.splats.layout.options.min_contribution,
    };
    adapt_kernels(&scene.splats, &scene.graph, displacements, scene.scale, &options)
}

/// Rest and deformed positions of the splats and of a reference cloud.
#[derive(Debug, Clone, Copy)]
pub struct EvalClouds<'a> {
    pub reference_rest: &'a [Vec3],
    pub reference_deformed: &'a [Vec3],
    pub splats_rest: &'a [Vec3],
    pub splats_deformed: &'a [Vec3],
}

/// 3DPCK around one handle at every configured threshold.
pub fn score_handle(
    clouds: &EvalClouds,
    center: &Vec3,
    handle: usize,
    category: &str,
    scale: SceneScale,
    config: &PipelineConfig,
) -> Result<HandleScore> {
    let c = clouds;
    if c.reference_rest.len() != c.reference_deformed.len() || c.splats_rest.len() != c.splats_deformed.len() {
        return Err(Error::InvalidArgument("rest and deformed clouds differ in length".into()));
    }
    let keypoints = sample_keypoints(
        c.reference_rest,
        c.splats_rest,
        center,
        scale.times(config.keypoint_radius),
        config.keypoints_per_handle,
        config.pair_radius.map_or(f64::INFINITY, |r| scale.times(r)),
        handle,
    )?;
    let gt: Vec<Vec3> = keypoints.reference.iter().map(|&k| c.reference_deformed[k]).collect();
    let paired: Vec<Option<Vec3>> = keypoints.paired.iter().map(|p| p.map(|j| c.splats_deformed[j])).collect();
    let scores = config
        .thresholds
        .iter()
        .map(|t| pck3d(&gt, &paired, scale.times(*t)))
        .collect::<Result<Vec<PckScore>>>()?;
    Ok(HandleScore {
        category: category.to_string(),
        handle,
        scores,
    })
}
