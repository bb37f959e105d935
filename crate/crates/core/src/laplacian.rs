//! Cotangent Laplacian and lumped mass matrix over splat means.
//!
//! Each point gets its own Delaunay triangulation of its geodesic
//! neighborhood, projected onto the local tangent plane. A point's row is
//! built from the triangles around it in its own triangulation; the rows are
//! then symmetrized.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::graph::{geodesic_knn, GeodesicNeighborhood, SplatGraph};
use crate::sparse::{Cholesky, SparseMatrixSym};
use crate::splat::{SceneScale, Vec3};

/// Default neighborhood size.
pub const K_LAPLACIAN: usize = 30;

/// Delaunay triangulation of one point's neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTriangulation {
    pub center: usize,
    /// Global indices, center first.
    pub vertices: Vec<usize>,
    /// Positions used for the cotangent weights, parallel to `vertices`.
    pub positions: Vec<Vec3>,
    /// Triangles as indices into `vertices`.
    pub triangles: Vec<[usize; 3]>,
    /// In-plane offset applied when the projection was collinear, else 0.
    pub jitter: f64,
}

struct Projected {
    at: Point2<f64>,
    local: usize,
}

impl HasPosition for Projected {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.at
    }
}

fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Tangent frame `(u, v, n)` of a point set from its covariance, ordered by
/// decreasing variance.
fn tangent_frame(points: &[Vec3]) -> (Vec3, Vec3, Vec3, [f64; 3]) {
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let col = |k: usize| eig.eigenvectors.column(order[k]).into_owned();
    let (u, n) = (col(0), col(2));
    let v = n.cross(&u);
    (
        u,
        v,
        n,
        [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]],
    )
}

/// Triangulates `center` and its neighbors in their tangent plane.
///
/// Triangles with area at most `min_area` are discarded. When the projected
/// points are collinear, neighbors are offset alternately along the minor
/// in-plane axis and joined into a fan around the center.
pub fn local_triangulation(
    points: &[Vec3],
    center: usize,
    neighborhood: &GeodesicNeighborhood,
    min_area: f64,
) -> Result<LocalTriangulation> {
    if neighborhood.neighbors.len() < 3 {
        return Err(Error::NeighborhoodTooSmall {
            center,
            found: neighborhood.neighbors.len(),
        });
    }
    let mut vertices = vec![center];
    vertices.extend(neighborhood.neighbors.iter().map(|&(j, _)| j));
    let positions: Vec<Vec3> = vertices.iter().map(|&j| points[j]).collect();
    let (u, v, _, _) = tangent_frame(&positions);
    let origin = positions[0];
    let flat: Vec<Point2<f64>> = positions
        .iter()
        .map(|p| {
            let d = p - origin;
            Point2::new(d.dot(&u), d.dot(&v))
        })
        .collect();

    let mut dt: DelaunayTriangulation<Projected> = DelaunayTriangulation::new();
    for (local, at) in flat.iter().enumerate() {
        dt.insert(Projected { at: *at, local })
            .map_err(|e| Error::Numerical(format!("triangulation of point {center} failed: {e:?}")))?;
    }
    let mut triangles: Vec<[usize; 3]> = dt
        .inner_faces()
        .map(|f| {
            let [a, b, c] = f.vertices();
            [a.data().local, b.data().local, c.data().local]
        })
        .filter(|t| triangle_area(&positions[t[0]], &positions[t[1]], &positions[t[2]]) > min_area)
        .collect();

    if triangles.iter().any(|t| t.contains(&0)) {
        triangles.sort();
        return Ok(LocalTriangulation {
            center,
            vertices,
            positions,
            triangles,
            jitter: 0.0,
        });
    }
    Ok(collinear_fan(center, vertices, positions, &flat, v, min_area))
}

fn collinear_fan(
    center: usize,
    vertices: Vec<usize>,
    mut positions: Vec<Vec3>,
    flat: &[Point2<f64>],
    minor: Vec3,
    min_area: f64,
) -> LocalTriangulation {
    let radius = flat.iter().map(|p| p.x.hypot(p.y)).fold(0.0, f64::max);
    let jitter = 1e-3 * radius;
    let mut angles = Vec::with_capacity(flat.len() - 1);
    for k in 1..flat.len() {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        positions[k] += minor * (sign * jitter);
        angles.push(((flat[k].y + sign * jitter).atan2(flat[k].x), k));
    }
    angles.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut triangles = Vec::new();
    for w in 0..angles.len() {
        let (a0, k0) = angles[w];
        let (a1, k1) = angles[(w + 1) % angles.len()];
        let gap = (a1 - a0).rem_euclid(std::f64::consts::TAU);
        if gap > 0.0 && gap < std::f64::consts::PI {
            let t = [0, k0, k1];
            if triangle_area(&positions[0], &positions[k0], &positions[k1]) > min_area {
                triangles.push(t);
            }
        }
    }
    triangles.sort();
    LocalTriangulation {
        center,
        vertices,
        positions,
        triangles,
        jitter,
    }
}

fn cot(at: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let (u, v) = (a - at, b - at);
    u.dot(&v) / u.cross(&v).norm()
}

/// One-sided cotangent row of the triangulation's center, as
/// `(global neighbor, weight)`, and its lumped mass.
pub fn cotangent_row(t: &LocalTriangulation) -> (Vec<(usize, f64)>, f64) {
    let mut row: Vec<(usize, f64)> = Vec::new();
    let mut area = 0.0;
    let p = &t.positions;
    for tri in &t.triangles {
        let Some(r) = tri.iter().position(|&x| x == 0) else {
            continue;
        };
        let a = tri[(r + 1) % 3];
        let b = tri[(r + 2) % 3];
        // edge (0, a) is opposite b and edge (0, b) is opposite a
        row.push((t.vertices[a], 0.5 * cot(&p[b], &p[0], &p[a])));
        row.push((t.vertices[b], 0.5 * cot(&p[a], &p[0], &p[b])));
        area += triangle_area(&p[0], &p[a], &p[b]);
    }
    row.sort_by_key(|&(j, _)| j);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
    for (j, w) in row {
        match merged.last_mut() {
            Some(last) if last.0 == j => last.1 += w,
            _ => merged.push((j, w)),
        }
    }
    (merged, area / 3.0)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LaplacianReport {
    /// Points whose row had no positive weight; their row is `[1]`.
    pub isolated: Vec<usize>,
    /// Off-diagonal weights that were negative after symmetrization.
    pub clamped: usize,
    /// Points whose neighborhood could not be triangulated.
    pub untriangulated: Vec<usize>,
    /// Points triangulated through the collinear fallback.
    pub jittered: Vec<usize>,
}

/// Stiffness matrix, lumped masses and the neighborhoods behind them.
#[derive(Debug, Clone)]
pub struct LaplacianSystem {
    pub stiffness: SparseMatrixSym,
    pub mass: Vec<f64>,
    pub neighborhoods: Vec<GeodesicNeighborhood>,
    pub report: LaplacianReport,
}

impl LaplacianSystem {
    /// Positive off-diagonal weights `w_ij = -L_ij` of row `i`.
    pub fn weights(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.stiffness
            .row(i)
            .filter(move |&(j, v)| j != i && v < 0.0)
            .map(|(j, v)| (j, -v))
    }

    pub fn write_text(&self, out: &mut impl std::io::Write) -> Result<()> {
        self.stiffness.write_text(out)?;
        writeln!(out, "mass {}", self.mass.len())?;
        for m in &self.mass {
            writeln!(out, "{m}")?;
        }
        Ok(())
    }
}

/// Rounds weights onto a common power-of-two grid fine enough that every
/// row sum is computed without rounding error.
fn quantize(rows: &mut [Vec<(usize, f64)>]) {
    let max_w = rows.iter().flatten().map(|&(_, w)| w.abs()).fold(0.0, f64::max);
    let max_len = rows.iter().map(Vec::len).max().unwrap_or(0) + 1;
    if max_w == 0.0 {
        return;
    }
    // |w| < 2^e and |partial sums| < 2^(e + c)
    let e = max_w.log2().floor() as i32 + 1;
    let c = (max_len as f64).log2().ceil() as i32 + 1;
    let quantum = 2f64.powi(e + c - 52);
    for row in rows.iter_mut() {
        for (_, w) in row.iter_mut() {
            *w = (*w / quantum).round() * quantum;
        }
    }
}

/// Assembles `L` and `M` from per-point triangulations (`None` for points
/// that have none).
pub fn build_laplacian(
    n: usize,
    triangulations: &[Option<LocalTriangulation>],
    scale: SceneScale,
) -> (SparseMatrixSym, Vec<f64>, LaplacianReport) {
    assert_eq!(triangulations.len(), n);
    let mass_floor = scale.times(scale.value()) * 1e-12;
    let one_sided: Vec<(Vec<(usize, f64)>, f64)> = triangulations
        .par_iter()
        .map(|t| t.as_ref().map(cotangent_row).unwrap_or_default())
        .collect();

    // symmetrize: w_ij = (W_ij + W_ji) / 2
    let mut halves: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, (row, _)) in one_sided.iter().enumerate() {
        for &(j, w) in row {
            if j != i {
                halves[i].push((j, 0.5 * w));
                halves[j].push((i, 0.5 * w));
            }
        }
    }
    let mut report = LaplacianReport::default();
    let mut rows: Vec<Vec<(usize, f64)>> = halves
        .into_par_iter()
        .map(|mut h| {
            h.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(h.len());
            for (j, w) in h {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += w,
                    _ => merged.push((j, w)),
                }
            }
            merged
        })
        .collect();
    for row in rows.iter_mut() {
        let before = row.len();
        row.retain(|&(_, w)| w > 0.0);
        report.clamped += before - row.len();
    }
    report.clamped /= 2;
    quantize(&mut rows);

    let mut triplets = Vec::new();
    let mut mass = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let row: Vec<_> = row.iter().filter(|&&(_, w)| w > 0.0).collect();
        if row.is_empty() {
            report.isolated.push(i);
            triplets.push((i, i, 1.0));
        } else {
            let diag: f64 = row.iter().map(|&&(_, w)| w).sum();
            triplets.push((i, i, diag));
            triplets.extend(row.iter().map(|&&(j, w)| (i, j, -w)));
        }
        mass.push(one_sided[i].1.max(mass_floor));
    }
    for (i, t) in triangulations.iter().enumerate() {
        match t {
            None => report.untriangulated.push(i),
            Some(t) if t.jitter > 0.0 => report.jittered.push(i),
            _ => {}
        }
    }
    let stiffness = SparseMatrixSym::from_triplets(n, triplets).expect("indices are in range and values finite");
    (stiffness, mass, report)
}

/// Full assembly: geodesic neighborhoods, local triangulations, `L` and `M`.
pub fn assemble(points: &[Vec3], graph: &SplatGraph, k: usize, scale: SceneScale) -> Result<LaplacianSystem> {
    if points.len() != graph.node_count() {
        return Err(Error::InvalidArgument(format!(
            "{} points but the graph has {} nodes",
            points.len(),
            graph.node_count()
        )));
    }
    let min_area = 1e-12 * scale.value() * scale.value();
    let built: Vec<(GeodesicNeighborhood, Option<LocalTriangulation>)> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let nb = geodesic_knn(graph, i, k)?;
            let tri = match local_triangulation(points, i, &nb, min_area) {
                Ok(t) => Some(t),
                Err(Error::NeighborhoodTooSmall { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok((nb, tri))
        })
        .collect::<Result<_>>()?;
    let (neighborhoods, triangulations): (Vec<_>, Vec<_>) = built.into_iter().unzip();
    let (stiffness, mass, report) = build_laplacian(points.len(), &triangulations, scale);
    Ok(LaplacianSystem {
        stiffness,
        mass,
        neighborhoods,
        report,
    })
}

/// Smallest `m` generalized eigenvalues of `L x = λ M x`, ascending.
///
/// Shift-invert subspace iteration with a Rayleigh-Ritz step.
pub fn spectrum_check(stiffness: &SparseMatrixSym, mass: &[f64], m: usize) -> Result<Vec<f64>> {
    let n = stiffness.dim();
    if m == 0 || m > n || mass.len() != n {
        return Err(Error::InvalidArgument(format!("cannot compute {m} eigenvalues of a {n}x{n} system")));
    }
    let block = (2 * m).max(m + 8).min(n);
    let ratio = (0..n).map(|i| stiffness.get(i, i) / mass[i]).sum::<f64>() / n as f64;
    let sigma = 1e-6 * ratio.max(f64::MIN_POSITIVE);
    let mut shifted = stiffness.triplets();
    for (i, &mi) in mass.iter().enumerate() {
        shifted.push((i, i, sigma * mi));
    }
    let chol = Cholesky::factor(n, &shifted)?;

    // deterministic start block
    let mut basis = DMatrix::from_fn(n, block, |i, j| {
        let x = ((i * 7919 + j * 104729) % 1000) as f64 / 1000.0;
        if j == 0 {
            1.0
        } else {
            x - 0.5
        }
    });
    let mut previous: Option<Vec<f64>> = None;
    for _ in 0..500 {
        // X <- (L + σM)⁻¹ M X
        let mut data: Vec<f64> = Vec::with_capacity(n * block);
        for j in 0..block {
            data.extend((0..n).map(|i| mass[i] * basis[(i, j)]));
        }
        chol.solve_in_place(&mut data, block);
        let x = DMatrix::from_column_slice(n, block, &data);
        let (values, vectors) = rayleigh_ritz(stiffness, mass, &x)?;
        basis = vectors;
        let head: Vec<f64> = values[..m].to_vec();
        if let Some(prev) = &previous {
            let scale = head.iter().fold(ratio * 1e-12, |a, v| a.max(v.abs()));
            if head.iter().zip(prev).all(|(a, b)| (a - b).abs() <= 1e-13 * scale) {
                return Ok(head);
            }
        }
        previous = Some(head);
    }
    Ok(previous.unwrap_or_default())
}

/// Ritz values and M-orthonormal Ritz vectors of the pencil on `span(x)`.
fn rayleigh_ritz(stiffness: &SparseMatrixSym, mass: &[f64], x: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    let mut lx = DMatrix::zeros(n, p);
    let mut mx = DMatrix::zeros(n, p);
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let l = stiffness.mul_vec(&col);
        for i in 0..n {
            lx[(i, j)] = l[i];
            mx[(i, j)] = mass[i] * col[i];
        }
    }
    let a = x.transpose() * lx;
    let a = (&a + a.transpose()) * 0.5;
    let b = x.transpose() * mx;
    let b = (&b + b.transpose()) * 0.5;
    let c = b
        .cholesky()
        .ok_or_else(|| Error::Numerical("subspace lost rank during iteration".into()))?;
    let l_inv = c
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("subspace lost rank during iteration".into()))?;
    let reduced = &l_inv * a * l_inv.transpose();
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let eig = SymmetricEigen::new(reduced);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let y = l_inv.transpose() * &eig.eigenvectors;
    let coeffs = DMatrix::from_fn(p, p, |r, k| y[(r, order[k])]);
    Ok((values, x * coeffs))
}
