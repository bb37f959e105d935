//! Surface-aware intersection graph over splats.
//!
//! Two splats are joined when one region can be brought into contact with
//! the other by a short translation along the first splat's normal. Edge
//! weights are center distances, so shortest paths approximate distances
//! along the surface.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::{OccupancyEllipse, SplatSet, Vec3};

/// Sample layout for [`normal_offset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffsetSampling {
    /// Samples on the boundary of the target region, and on the unit circle
    /// of the source frame.
    pub boundary: usize,
    /// Number of interior rings.
    pub rings: usize,
    pub ring_samples: usize,
}

impl Default for OffsetSampling {
    fn default() -> Self {
        OffsetSampling {
            boundary: 64,
            rings: 3,
            ring_samples: 32,
        }
    }
}

impl OffsetSampling {
    pub fn total(&self) -> usize {
        self.boundary + self.rings * self.ring_samples
    }
}

/// Local frame of a source ellipse with semi-axes floored away from zero.
struct SourceFrame {
    center: Vec3,
    axis1: Vec3,
    axis2: Vec3,
    normal: Vec3,
    a: f64,
    b: f64,
}

impl SourceFrame {
    fn new(e: &OccupancyEllipse, reference: f64) -> Self {
        let floor = 1e-9 * reference.max(f64::MIN_POSITIVE);
        SourceFrame {
            center: e.center,
            axis1: e.axis1,
            axis2: e.axis2,
            normal: e.normal,
            a: e.semi_a.max(floor),
            b: e.semi_b.max(floor),
        }
    }

    /// `(X² + Y², Z)` of a point.
    fn coords(&self, y: &Vec3) -> (f64, f64) {
        let d = y - self.center;
        let x = d.dot(&self.axis1) / self.a;
        let v = d.dot(&self.axis2) / self.b;
        (x * x + v * v, d.dot(&self.normal))
    }
}

/// Running summary of candidate offsets.
#[derive(Default)]
struct Candidates {
    any: bool,
    min_abs: f64,
    positive: bool,
    negative: bool,
}

impl Candidates {
    fn push(&mut self, z: f64) {
        if !self.any {
            self.any = true;
            self.min_abs = z.abs();
        } else {
            self.min_abs = self.min_abs.min(z.abs());
        }
        self.positive |= z > 0.0;
        self.negative |= z < 0.0;
    }

    fn result(&self) -> f64 {
        if !self.any {
            f64::INFINITY
        } else if self.positive && self.negative {
            // The feasible set is convex and Z is affine on it, so a sign
            // change means it contains a point with Z = 0.
            0.0
        } else {
            self.min_abs
        }
    }
}

/// Sampled normal-wise offset `δ_ij`: the smallest translation along the
/// normal of `ei` that brings a point of `ej` over the region of `ei`.
///
/// Returns `+∞` when the projection of `ej` along that normal misses `ei`.
pub fn normal_offset(ei: &OccupancyEllipse, ej: &OccupancyEllipse, sampling: &OffsetSampling) -> f64 {
    let reference = ei.semi_a.max(ej.semi_a);
    let src = SourceFrame::new(ei, reference);
    let boundary = sampling.boundary.max(16);
    let mut cands = Candidates::default();
    let mut visit = |y: &Vec3| {
        let (r2, z) = src.coords(y);
        if r2 <= 1.0 {
            cands.push(z);
        }
        r2 <= 1.0
    };

    visit(&ej.center);
    for ring in 1..=sampling.rings {
        let rho = ring as f64 / (sampling.rings + 1) as f64;
        for m in 0..sampling.ring_samples {
            let theta = std::f64::consts::TAU * m as f64 / sampling.ring_samples as f64;
            visit(&ej.point(rho, theta));
        }
    }

    let step = std::f64::consts::TAU / boundary as f64;
    let inside: Vec<bool> = (0..boundary).map(|m| visit(&ej.point(1.0, step * m as f64))).collect();
    // Where the boundary of `ej` leaves the cylinder over `ei`, refine the
    // crossing: those points are extreme points of the feasible set.
    for m in 0..boundary {
        let next = (m + 1) % boundary;
        if inside[m] == inside[next] {
            continue;
        }
        let (mut lo, mut hi) = (step * m as f64, step * (m + 1) as f64);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let (r2, _) = src.coords(&ej.point(1.0, mid));
            if (r2 <= 1.0) == inside[m] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let theta = if inside[m] { lo } else { hi };
        let y = ej.point(1.0, theta);
        let (_, z) = src.coords(&y);
        cands.push(z);
    }

    // Lift the unit circle of `ei` along its normal onto the plane of `ej`.
    let denom = src.normal.dot(&ej.normal);
    if denom.abs() > 1e-12 && ej.semi_b > 0.0 && ej.semi_a > 0.0 {
        for m in 0..boundary {
            let theta = step * m as f64;
            let q = src.center + src.axis1 * (src.a * theta.cos()) + src.axis2 * (src.b * theta.sin());
            let t = (ej.center - q).dot(&ej.normal) / denom;
            let local = ej.local(&(q + src.normal * t));
            let u = local.x / ej.semi_a;
            let v = local.y / ej.semi_b;
            if u * u + v * v <= 1.0 + 1e-12 {
                cands.push(t);
            }
        }
    }
    cands.result()
}

/// `min(δ_ij, δ_ji) <= ε`
pub fn eps_intersect(ei: &OccupancyEllipse, ej: &OccupancyEllipse, epsilon: f64, sampling: &OffsetSampling) -> bool {
    normal_offset(ei, ej, sampling) <= epsilon || normal_offset(ej, ei, sampling) <= epsilon
}

/// Undirected weighted graph over splat indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
    epsilon: f64,
}

impl SplatGraph {
    /// Builds a graph from undirected edges `(i, j, w)`; duplicates and
    /// self-loops are rejected.
    pub fn from_edges(node_count: usize, epsilon: f64, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); node_count];
        for &(i, j, w) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) out of range")));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at {i}")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) has weight {w}")));
            }
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
        for (i, list) in adjacency.iter_mut().enumerate() {
            list.sort_by_key(|&(j, _)| j);
            if list.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::InvalidArgument(format!("duplicate edge at node {i}")));
            }
        }
        Ok(SplatGraph { adjacency, epsilon })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Neighbors of `i` sorted by index.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, w) in list {
                if i < j {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Connected-component label per node, labels numbered by first node.
    pub fn components(&self) -> (usize, Vec<usize>) {
        let n = self.node_count();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (count, label)
    }

    pub fn write_text(&self, out: &mut impl Write) -> Result<()> {
        let edges = self.edges();
        writeln!(out, "splatgraph 1")?;
        writeln!(out, "nodes {}", self.node_count())?;
        writeln!(out, "epsilon {}", self.epsilon)?;
        writeln!(out, "edges {}", edges.len())?;
        for (i, j, w) in edges {
            writeln!(out, "{i} {j} {w}")?;
        }
        Ok(())
    }

    pub fn read_text(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let mut field = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("graph file ends before `{key}`")))??;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(v), None) if k == key => Ok(v.to_string()),
                _ => Err(Error::Format(format!("expected `{key} <value>`, got `{line}`"))),
            }
        };
        if field("splatgraph")? != "1" {
            return Err(Error::Format("unsupported graph version".into()));
        }
        let bad = |what: &str| Error::Format(format!("bad graph {what}"));
        let nodes: usize = field("nodes")?.parse().map_err(|_| bad("node count"))?;
        let epsilon: f64 = field("epsilon")?.parse().map_err(|_| bad("epsilon"))?;
        let count: usize = field("edges")?.parse().map_err(|_| bad("edge count"))?;
        let mut edges = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(i), Some(j), Some(w), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Format(format!("bad edge line `{line}`")));
            };
            edges.push((
                i.parse().map_err(|_| bad("edge index"))?,
                j.parse().map_err(|_| bad("edge index"))?,
                w.parse().map_err(|_| bad("edge weight"))?,
            ));
        }
        if edges.len() != count {
            return Err(Error::Format(format!("expected {count} edges, found {}", edges.len())));
        }
        SplatGraph::from_edges(nodes, epsilon, &edges)
            .map_err(|e| Error::Format(format!("inconsistent graph: {e}")))
    }
}

fn edge_weight(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm()
}

fn pair_edge(
    ellipses: &[Option<OccupancyEllipse>],
    i: usize,
    j: usize,
    epsilon: f64,
    sampling: &OffsetSampling,
) -> Option<(usize, usize, f64)> {
    let (ei, ej) = (ellipses[i].as_ref()?, ellipses[j].as_ref()?);
    let reach = ei.semi_a + ej.semi_a + epsilon;
    if (ei.center - ej.center).norm_squared() > reach * reach {
        return None;
    }
    eps_intersect(ei, ej, epsilon, sampling).then(|| (i, j, edge_weight(&ei.center, &ej.center)))
}

fn check_inputs(splats: &SplatSet, epsilon: f64) -> Result<()> {
    if splats.is_empty() {
        return Err(Error::EmptyScene);
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be non-negative, got {epsilon}")));
    }
    Ok(())
}

/// Builds the ε-intersection graph with a fixed-radius search over a
/// uniform spatial hash.
pub fn build_graph(splats: &SplatSet, epsilon: f64, sampling: &OffsetSampling) -> Result<SplatGraph> {
    check_inputs(splats, epsilon)?;
    let ellipses = splats.ellipses(splats.layout.options.min_contribution);
    let max_a = ellipses.iter().flatten().map(|e| e.semi_a).fold(0.0, f64::max);
    if max_a <= 0.0 {
        return SplatGraph::from_edges(splats.len(), epsilon, &[]);
    }
    let cell = max_a;
    let reach = ((2.0 * max_a + epsilon) / cell).ceil() as i64;
    let key = |p: &Vec3| {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, e) in ellipses.iter().enumerate() {
        if let Some(e) = e {
            grid.entry(key(&e.center)).or_default().push(i);
        }
    }
    let edges: Vec<(usize, usize, f64)> = (0..splats.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut found = Vec::new();
            if let Some(e) = &ellipses[i] {
                let (cx, cy, cz) = key(&e.center);
                for dx in -reach..=reach {
                    for dy in -reach..=reach {
                        for dz in -reach..=reach {
                            if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                                for &j in bucket {
                                    if j > i {
                                        if let Some(edge) = pair_edge(&ellipses, i, j, epsilon, sampling) {
                                            found.push(edge);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            found.sort_by_key(|&(_, j, _)| j);
            found
        })
        .collect();
    SplatGraph::from_edges(splats.len(), epsilon, &edges)
}

/// Reference construction testing every pair.
pub fn build_graph_all_pairs(splats: &SplatSet, epsilon: f64, sampling: &OffsetSampling) -> Result<SplatGraph> {
    check_inputs(splats, epsilon)?;
    let ellipses = splats.ellipses(splats.layout.options.min_contribution);
    let n = splats.len();
    let edges: Vec<_> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ellipses = &ellipses;
            (i + 1..n).filter_map(move |j| pair_edge(ellipses, i, j, epsilon, sampling))
        })
        .collect();
    SplatGraph::from_edges(n, epsilon, &edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicNeighborhood {
    pub source: usize,
    /// `(node, distance)` in ascending distance, ties by index.
    pub neighbors: Vec<(usize, f64)>,
    /// Fewer than `k` nodes were reachable.
    pub shortfall: bool,
}

impl GeodesicNeighborhood {
    pub fn indices(&self) -> Vec<usize> {
        self.neighbors.iter().map(|&(i, _)| i).collect()
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    // reversed for a min-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra: nodes settled in (distance, index) order, stopping
/// after `k` nodes other than `exclude`.
fn settle(graph: &SplatGraph, seeds: &[(usize, f64)], k: usize, exclude: Option<usize>) -> (Vec<(usize, f64)>, bool) {
    let mut dist: HashMap<usize, f64> = HashMap::new();
    let mut done = HashSet::new();
    let mut heap = BinaryHeap::new();
    for &(s, d) in seeds {
        if dist.get(&s).is_none_or(|&old| d < old) {
            dist.insert(s, d);
            heap.push(Entry(d, s));
        }
    }
    let mut out = Vec::with_capacity(k);
    while let Some(Entry(d, u)) = heap.pop() {
        if done.contains(&u) || dist.get(&u).is_some_and(|&best| d > best) {
            continue;
        }
        done.insert(u);
        if Some(u) != exclude {
            out.push((u, d));
            if out.len() == k {
                return (out, false);
            }
        }
        for &(v, w) in graph.neighbors(u) {
            if done.contains(&v) {
                continue;
            }
            let nd = d + w;
            if dist.get(&v).is_none_or(|&old| nd < old) {
                dist.insert(v, nd);
                heap.push(Entry(nd, v));
            }
        }
    }
    (out, true)
}

/// The `k` nearest nodes to `source` by shortest-path distance.
pub fn geodesic_knn(graph: &SplatGraph, source: usize, k: usize) -> Result<GeodesicNeighborhood> {
    if source >= graph.node_count() {
        return Err(Error::InvalidArgument(format!(
            "source {source} out of range for {} nodes",
            graph.node_count()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (neighbors, shortfall) = settle(graph, &[(source, 0.0)], k, Some(source));
    Ok(GeodesicNeighborhood {
        source,
        neighbors,
        shortfall,
    })
}

/// The `k` nearest nodes to a virtual source connected to `seeds` by edges
/// of the given lengths. Seeds themselves are eligible.
pub fn seeded_knn(graph: &SplatGraph, seeds: &[(usize, f64)], k: usize) -> (Vec<(usize, f64)>, bool) {
    settle(graph, seeds, k, None)
}
