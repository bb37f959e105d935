//! Kernel adaptation after a deformation of the splat means.
//!
//! Each occupancy ellipse is represented by its maximum-area inscribed
//! triangle. The triangle vertices are moved with the deformation and the
//! adapted ellipse is the Steiner circumellipse of the moved triangle, which
//! keeps the kernel tangent to the deformed surface.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{seeded_knn, SplatGraph};
use crate::splat::{occupancy_ellipse, OccupancyEllipse, SceneScale, Splat, SplatSet, Vec3};

/// Number of splats each triangle vertex is bound to.
pub const K_BIND: usize = 3;

const HALF_SQRT3: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InscribedTriangle {
    pub vertices: [Vec3; 3],
    pub owner: usize,
}

/// `t¹ = p + v₁`, `t²,³ = p − ½v₁ ± (√3/2)v₂` with `v₁, v₂` the semi-axis
/// vectors.
pub fn inscribed_triangle(e: &OccupancyEllipse, owner: usize) -> InscribedTriangle {
    let v1 = e.axis1 * e.semi_a;
    let v2 = e.axis2 * e.semi_b;
    InscribedTriangle {
        vertices: [
            e.center + v1,
            e.center - v1 * 0.5 + v2 * HALF_SQRT3,
            e.center - v1 * 0.5 - v2 * HALF_SQRT3,
        ],
        owner,
    }
}

/// Inverse-distance weighted displacement of `t` from `(p_j, d_j)` pairs.
///
/// If `t` is within `coincide` of some `p_j`, the closest such anchor's
/// displacement is used unchanged.
pub fn transfer_displacement(t: &Vec3, adjacent: &[(Vec3, Vec3)], coincide: f64) -> Result<Vec3> {
    if adjacent.is_empty() {
        return Err(Error::InvalidArgument("no anchors to transfer a displacement from".into()));
    }
    let dists: Vec<f64> = adjacent.iter().map(|(p, _)| (t - p).norm()).collect();
    let (closest, &dmin) = dists
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    if dmin < coincide {
        return Ok(t + adjacent[closest].1);
    }
    let mut sum = Vec3::zeros();
    let mut total = 0.0;
    for ((_, d), dist) in adjacent.iter().zip(&dists) {
        let w = 1.0 / dist;
        sum += d * w;
        total += w;
    }
    Ok(t + sum / total)
}

/// The unique minimal-area ellipse through three points, centered at their
/// centroid.
///
/// Axes come from the conjugate semi-diameters `f₁ = t¹ − g` and
/// `f₂ = (t² − t³)/√3`. When the result is (nearly) a circle, `axis1` is
/// taken from `reference` projected into the plane; otherwise `reference`
/// only fixes the sign of `axis1`.
pub fn steiner_circumellipse(t: &[Vec3; 3], min_area: f64, reference: Option<&Vec3>) -> Result<OccupancyEllipse> {
    let area = 0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm();
    if !(area > min_area) {
        return Err(Error::DegenerateTriangle(area));
    }
    let g = (t[0] + t[1] + t[2]) / 3.0;
    let f1 = t[0] - g;
    let f2 = (t[1] - t[2]) / (2.0 * HALF_SQRT3);
    let cross = f1.cross(&f2);
    let normal = cross.normalize();
    // eigen-decomposition of FᵀF = [[p, r], [r, q]]
    let (p, q, r) = (f1.dot(&f1), f2.dot(&f2), f1.dot(&f2));
    let half_diff = 0.5 * (p - q);
    let major = 0.5 * (p + q) + half_diff.hypot(r);
    let minor = (cross.norm_squared() / major).min(major);
    let phi = 0.5 * (2.0 * r).atan2(p - q);
    let mut axis1 = (f1 * phi.cos() + f2 * phi.sin()).normalize();
    let (semi_a, semi_b) = (major.sqrt(), minor.sqrt());
    if let Some(prev) = reference {
        if semi_a - semi_b < 1e-9 * semi_a {
            let projected = prev - normal * normal.dot(prev);
            if projected.norm() > 1e-6 * prev.norm() {
                axis1 = projected.normalize();
            }
        } else if axis1.dot(prev) < 0.0 {
            axis1 = -axis1;
        }
    }
    let axis2 = normal.cross(&axis1);
    Ok(OccupancyEllipse {
        center: g,
        axis1,
        axis2,
        semi_a,
        semi_b,
        normal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    /// Binding size per triangle vertex.
    pub k_bind: usize,
    /// Minimum rendering contribution used to rebuild occupancy regions.
    pub min_contribution: f64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            k_bind: K_BIND,
            min_contribution: crate::splat::MIN_CONTRIBUTION,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    /// Kernels whose moved triangle was degenerate; translated only.
    pub fallbacks: Vec<usize>,
    /// Kernels with an empty occupancy region; translated only.
    pub empty_regions: usize,
    /// Largest relative mismatch between a recovered ellipse and the
    /// occupancy region of the adapted kernel.
    pub max_lambda_residual: f64,
}

/// Rigid transport used when adaptation is not possible.
fn translated(s: &Splat, d: &Vec3) -> Splat {
    let mut out = s.clone();
    out.mean += d;
    out
}

/// Kernel with its mean moved by its own displacement and everything else
/// unchanged.
pub fn translate_only(splats: &SplatSet, displacements: &[Vec3]) -> SplatSet {
    SplatSet {
        splats: splats.splats.iter().zip(displacements).map(|(s, d)| translated(s, d)).collect(),
        extra_properties: splats.extra_properties.clone(),
        layout: splats.layout.clone(),
    }
}

fn rotation_from_frame(e: &OccupancyEllipse, previous: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let m = Matrix3::from_columns(&[e.axis1, e.axis2, e.normal]);
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    // q and −q are the same rotation; stay in the previous hemisphere
    if q.coords.dot(&previous.coords) < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Anchors of triangle vertex `t` of splat `owner`: the nearest splats by
/// graph distance from a virtual node joined to the owner and its graph
/// neighbors by straight segments.
pub fn bind_vertex(graph: &SplatGraph, means: &[Vec3], owner: usize, t: &Vec3, k: usize) -> Vec<usize> {
    let mut seeds = vec![(owner, (t - means[owner]).norm())];
    seeds.extend(graph.neighbors(owner).iter().map(|&(u, _)| (u, (t - means[u]).norm())));
    seeded_knn(graph, &seeds, k).0.into_iter().map(|(j, _)| j).collect()
}

/// Adapts every kernel to the displacement of the splat means.
pub fn adapt_kernels(
    splats: &SplatSet,
    graph: &SplatGraph,
    displacements: &[Vec3],
    scale: SceneScale,
    options: &AdaptOptions,
) -> Result<(SplatSet, AdaptReport)> {
    let n = splats.len();
    if displacements.len() != n || graph.node_count() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} splats, {} displacements, {} graph nodes",
            displacements.len(),
            graph.node_count()
        )));
    }
    let means = splats.means();
    let coincide = scale.times(1e-12);
    let min_area = scale.times(scale.value()) * 1e-12;
    let c = options.min_contribution;

    enum Outcome {
        Adapted(Splat, f64),
        Fallback(Splat),
        Empty(Splat),
    }
    let outcomes: Vec<Outcome> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = &splats.splats[i];
            let Some(e) = occupancy_ellipse(s, c) else {
                return Ok(Outcome::Empty(translated(s, &displacements[i])));
            };
            let tri = inscribed_triangle(&e, i);
            let mut moved = [Vec3::zeros(); 3];
            for (m, t) in moved.iter_mut().zip(&tri.vertices) {
                let anchors: Vec<(Vec3, Vec3)> = bind_vertex(graph, &means, i, t, options.k_bind)
                    .into_iter()
                    .map(|j| (means[j], displacements[j]))
                    .collect();
                *m = transfer_displacement(t, &anchors, coincide)?;
            }
            let Ok(adapted) = steiner_circumellipse(&moved, min_area, Some(&e.axis1)) else {
                return Ok(Outcome::Fallback(translated(s, &displacements[i])));
            };
            let root = s.occupancy_lambda(c).sqrt();
            let mut out = s.clone();
            out.mean = adapted.center;
            out.rotation = rotation_from_frame(&adapted, &s.rotation);
            out.scales = [adapted.semi_a / root, adapted.semi_b / root];
            let rebuilt = occupancy_ellipse(&out, c).expect("λ is unchanged and positive");
            let residual = ((rebuilt.semi_a - adapted.semi_a).abs() + (rebuilt.semi_b - adapted.semi_b).abs())
                / adapted.semi_a.max(f64::MIN_POSITIVE);
            Ok(Outcome::Adapted(out, residual))
        })
        .collect::<Result<_>>()?;

    let mut report = AdaptReport::default();
    let mut out = Vec::with_capacity(n);
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Outcome::Adapted(s, r) => {
                report.max_lambda_residual = report.max_lambda_residual.max(r);
                out.push(s);
            }
            Outcome::Fallback(s) => {
                report.fallbacks.push(i);
                out.push(s);
            }
            Outcome::Empty(s) => {
                report.empty_regions += 1;
                out.push(s);
            }
        }
    }
    if !report.fallbacks.is_empty() {
        log::warn!("{} kernels were translated without adaptation", report.fallbacks.len());
    }
    Ok((
        SplatSet {
            splats: out,
            extra_properties: splats.extra_properties.clone(),
            layout: splats.layout.clone(),
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse(a: f64, b: f64) -> OccupancyEllipse {
        OccupancyEllipse {
            center: Vec3::zeros(),
            axis1: Vec3::x(),
            axis2: Vec3::y(),
            semi_a: a,
            semi_b: b,
            normal: Vec3::z(),
        }
    }

    #[test]
    fn unit_disk_triangle() {
        let t = inscribed_triangle(&ellipse(1.0, 1.0), 0).vertices;
        assert_eq!(t[0], Vec3::new(1.0, 0.0, 0.0));
        assert!((t[1] - Vec3::new(-0.5, 3f64.sqrt() / 2.0, 0.0)).norm() < 1e-15);
        assert!((t[2] - Vec3::new(-0.5, -(3f64.sqrt()) / 2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn two_by_one_triangle() {
        let t = inscribed_triangle(&ellipse(2.0, 1.0), 0).vertices;
        assert_eq!(t[0], Vec3::new(2.0, 0.0, 0.0));
        assert!((t[1] - Vec3::new(-1.0, 3f64.sqrt() / 2.0, 0.0)).norm() < 1e-15);
        assert!((t[2] - Vec3::new(-1.0, -(3f64.sqrt()) / 2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn circumellipse_round_trip() {
        for (a, b) in [(1.0, 1.0), (2.0, 1.0), (3.0, 0.01)] {
            let e = ellipse(a, b);
            let t = inscribed_triangle(&e, 0).vertices;
            let r = steiner_circumellipse(&t, 1e-300, Some(&e.axis1)).unwrap();
            assert!((r.semi_a - a).abs() < 1e-12 && (r.semi_b - b).abs() < 1e-12);
            assert!((r.axis1 - e.axis1).norm() < 1e-12);
            assert!((r.normal - e.normal).norm() < 1e-12);
            assert!(r.center.norm() < 1e-15);
        }
    }

    #[test]
    fn degenerate_triangle_is_an_error() {
        let t = [Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
        assert!(matches!(steiner_circumellipse(&t, 1e-12, None), Err(Error::DegenerateTriangle(_))));
    }

    #[test]
    fn equal_displacements_translate() {
        let d = Vec3::new(0.1, -0.2, 0.3);
        let adj = [(Vec3::x(), d), (Vec3::y(), d), (Vec3::z(), d)];
        let t = Vec3::new(0.3, 0.3, 0.3);
        assert!((transfer_displacement(&t, &adj, 1e-12).unwrap() - (t + d)).norm() < 1e-15);
    }

    #[test]
    fn coincident_anchor_wins() {
        let adj = [(Vec3::x(), Vec3::z()), (Vec3::y(), Vec3::x())];
        assert_eq!(transfer_displacement(&Vec3::x(), &adj, 1e-12).unwrap(), Vec3::x() + Vec3::z());
    }
}
