//! As-rigid-as-possible deformation of splat means.
//!
//! Minimizes `Σ_i Σ_j w_ij ‖(v'_i − v'_j) − R_i (v_i − v_j)‖²` by alternating
//! per-point rotation fits with a global sparse solve. Weights are the
//! off-diagonal entries of the cotangent Laplacian.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Cholesky, SparseMatrixSym};
use crate::splat::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArapOptions {
    pub max_iters: usize,
    /// Stop when an iteration lowers the energy by less than `tol · E0`.
    pub tol: f64,
}

impl Default for ArapOptions {
    fn default() -> Self {
        ArapOptions { max_iters: 50, tol: 1e-6 }
    }
}

/// Rotation maximizing `tr(Rᵀ S)`: `U diag(1, 1, det(U Vᵀ)) Vᵀ` from the
/// SVD `S = U Σ Vᵀ`, with the sign flip on the smallest singular value.
pub fn fit_rotation(s: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = s.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    if (u * v_t).determinant() < 0.0 {
        let k = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]).then(b.cmp(&a)))
            .unwrap_or(2);
        u.column_mut(k).neg_mut();
    }
    u * v_t
}

/// Symmetric edge weights `w_ij > 0` taken from a Laplacian.
#[derive(Debug, Clone)]
pub struct EdgeWeights {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl EdgeWeights {
    pub fn from_laplacian(l: &SparseMatrixSym) -> Self {
        let adjacency = (0..l.dim())
            .map(|i| l.row(i).filter(|&(j, v)| j != i && v < 0.0).map(|(j, v)| (j, -v)).collect())
            .collect();
        EdgeWeights { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// Connected components of the weighted graph.
    pub fn components(&self) -> (usize, Vec<usize>) {
        let n = self.len();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            let mut stack = vec![start];
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
}

/// ARAP energy of `current` against `rest` under per-point rotations.
pub fn arap_energy(weights: &EdgeWeights, rest: &[Vec3], current: &[Vec3], rotations: &[Matrix3<f64>]) -> f64 {
    let per_point: Vec<f64> = (0..rest.len())
        .into_par_iter()
        .map(|i| {
            weights
                .neighbors(i)
                .iter()
                .map(|&(j, w)| {
                    let r = (current[i] - current[j]) - rotations[i] * (rest[i] - rest[j]);
                    w * r.norm_squared()
                })
                .sum()
        })
        .collect();
    per_point.iter().sum()
}

fn local_step(weights: &EdgeWeights, rest: &[Vec3], current: &[Vec3]) -> Vec<Matrix3<f64>> {
    (0..rest.len())
        .into_par_iter()
        .map(|i| {
            let mut s = Matrix3::zeros();
            for &(j, w) in weights.neighbors(i) {
                s += (current[i] - current[j]) * (rest[i] - rest[j]).transpose() * w;
            }
            fit_rotation(&s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArapResult {
    pub positions: Vec<Vec3>,
    #[serde(skip)]
    pub rotations: Vec<Matrix3<f64>>,
    /// Energy after each local step, starting with the initial guess.
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Components without any constraint, moved by a rigid translation.
    pub unconstrained_components: Vec<usize>,
}

/// A pinned point; handles also drive the motion of unconstrained
/// components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub index: usize,
    pub target: Vec3,
    pub handle: bool,
}

/// Prefactored ARAP problem for one constraint set.
pub struct ArapSolver<'a> {
    weights: &'a EdgeWeights,
    rest: &'a [Vec3],
    targets: Vec<Option<Vec3>>,
    /// Global index to position among the solved unknowns.
    slot: Vec<Option<usize>>,
    solved: Vec<usize>,
    factor: Option<Cholesky>,
    drift: Vec<(usize, Vec3)>,
    unconstrained_components: Vec<usize>,
}

impl<'a> ArapSolver<'a> {
    pub fn new(weights: &'a EdgeWeights, rest: &'a [Vec3], constraints: &[Constraint]) -> Result<Self> {
        let n = rest.len();
        if weights.len() != n {
            return Err(Error::InvalidArgument(format!("{} weights rows for {n} points", weights.len())));
        }
        if constraints.is_empty() {
            return Err(Error::InvalidArgument("ARAP needs at least one constraint".into()));
        }
        let mut targets = vec![None; n];
        for c in constraints {
            if c.index >= n {
                return Err(Error::InvalidArgument(format!("constraint index {} out of range", c.index)));
            }
            targets[c.index] = Some(c.target);
        }
        let (count, label) = weights.components();
        let mut anchored = vec![false; count];
        for c in constraints {
            anchored[label[c.index]] = true;
        }
        let unconstrained_components: Vec<usize> = (0..count).filter(|&c| !anchored[c]).collect();

        // rigid translation for each unconstrained component, by inverse
        // distance to the handle anchors
        let handles: Vec<(Vec3, Vec3)> = constraints
            .iter()
            .filter(|c| c.handle)
            .map(|c| (rest[c.index], c.target - rest[c.index]))
            .collect();
        let mut drift = Vec::new();
        if !unconstrained_components.is_empty() {
            let mut centroid = vec![(Vec3::zeros(), 0usize); count];
            for (i, p) in rest.iter().enumerate() {
                centroid[label[i]].0 += p;
                centroid[label[i]].1 += 1;
            }
            for &c in &unconstrained_components {
                let g = centroid[c].0 / centroid[c].1 as f64;
                drift.push((c, idw_translation(&g, &handles)));
            }
            log::warn!(
                "{} components have no constraint and are translated rigidly",
                unconstrained_components.len()
            );
        }

        let mut slot = vec![None; n];
        let mut solved = Vec::new();
        for i in 0..n {
            if targets[i].is_none() && anchored[label[i]] {
                slot[i] = Some(solved.len());
                solved.push(i);
            }
        }
        let factor = if solved.is_empty() {
            None
        } else {
            let mut entries = Vec::new();
            for (r, &i) in solved.iter().enumerate() {
                let diag: f64 = weights.neighbors(i).iter().map(|&(_, w)| w).sum();
                entries.push((r, r, diag));
                for &(j, w) in weights.neighbors(i) {
                    if let Some(c) = slot[j] {
                        if c < r {
                            entries.push((r, c, -w));
                        }
                    }
                }
            }
            Some(Cholesky::factor(solved.len(), &entries).map_err(|e| Error::Singular {
                component: label[solved[0]],
                message: e.to_string(),
            })?)
        };
        Ok(ArapSolver {
            weights,
            rest,
            targets,
            slot,
            solved,
            factor,
            drift,
            unconstrained_components,
        })
    }

    /// Global step: solves `L_FF x_F = b_F − L_FC x_C` for fixed rotations.
    fn global_step(&self, rotations: &[Matrix3<f64>], out: &mut [Vec3]) {
        let Some(factor) = &self.factor else { return };
        let m = self.solved.len();
        let rhs_rows: Vec<Vec3> = self
            .solved
            .par_iter()
            .map(|&i| {
                let mut b = Vec3::zeros();
                for &(j, w) in self.weights.neighbors(i) {
                    b += (rotations[i] + rotations[j]) * (self.rest[i] - self.rest[j]) * (0.5 * w);
                    if self.slot[j].is_none() {
                        b += out[j] * w;
                    }
                }
                b
            })
            .collect();
        let mut rhs = vec![0.0; 3 * m];
        for (r, b) in rhs_rows.iter().enumerate() {
            for d in 0..3 {
                rhs[d * m + r] = b[d];
            }
        }
        factor.solve_in_place(&mut rhs, 3);
        for (r, &i) in self.solved.iter().enumerate() {
            out[i] = Vec3::new(rhs[r], rhs[m + r], rhs[2 * m + r]);
        }
    }

    /// Runs the local-global iteration. `cancel` is polled between
    /// iterations.
    pub fn solve(&self, options: &ArapOptions, cancel: Option<&AtomicBool>) -> Result<ArapResult> {
        let n = self.rest.len();
        let (_, label) = self.weights.components();
        let mut current: Vec<Vec3> = self.rest.to_vec();
        for i in 0..n {
            if let Some(t) = self.targets[i] {
                current[i] = t;
            }
        }
        for &(c, d) in &self.drift {
            for i in 0..n {
                if label[i] == c {
                    current[i] = self.rest[i] + d;
                }
            }
        }
        // initial guess: the same system with identity rotations
        let identity = vec![Matrix3::identity(); n];
        self.global_step(&identity, &mut current);
        let mut rotations = local_step(self.weights, self.rest, &current);
        let mut energy = arap_energy(self.weights, self.rest, &current, &rotations);
        let e0 = energy;
        let mut trace = vec![energy];
        let mut iterations = 0;
        let mut converged = self.factor.is_none() || e0 == 0.0;
        let mut next = current.clone();
        while !converged && iterations < options.max_iters {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(Error::Cancelled);
            }
            next.copy_from_slice(&current);
            self.global_step(&rotations, &mut next);
            let next_rot = local_step(self.weights, self.rest, &next);
            let next_energy = arap_energy(self.weights, self.rest, &next, &next_rot);
            iterations += 1;
            if !(next_energy <= energy) {
                // rounding noise at the optimum; keep the previous iterate
                converged = true;
                break;
            }
            let decrease = energy - next_energy;
            std::mem::swap(&mut current, &mut next);
            rotations = next_rot;
            energy = next_energy;
            trace.push(energy);
            if decrease < options.tol * e0 {
                converged = true;
            }
        }
        Ok(ArapResult {
            positions: current,
            rotations,
            energy_trace: trace,
            iterations,
            converged,
            unconstrained_components: self.unconstrained_components.clone(),
        })
    }
}

fn idw_translation(at: &Vec3, handles: &[(Vec3, Vec3)]) -> Vec3 {
    let mut sum = Vec3::zeros();
    let mut total = 0.0;
    for (p, d) in handles {
        let dist = (p - at).norm();
        if dist == 0.0 {
            return *d;
        }
        sum += d / dist;
        total += 1.0 / dist;
    }
    if total > 0.0 {
        sum / total
    } else {
        Vec3::zeros()
    }
}

/// Convenience wrapper: prefactor and solve.
pub fn solve_arap(
    weights: &EdgeWeights,
    rest: &[Vec3],
    constraints: &[Constraint],
    options: &ArapOptions,
    cancel: Option<&AtomicBool>,
) -> Result<ArapResult> {
    ArapSolver::new(weights, rest, constraints)?.solve(options, cancel)
}

/// Constraints for one or more handles: each anchor moves to its target and
/// every point farther than `fixed_radius` from all anchors stays put.
pub fn handle_constraints(rest: &[Vec3], anchors: &[(usize, Vec3)], fixed_radius: f64) -> Vec<Constraint> {
    let mut out: Vec<Constraint> = anchors
        .iter()
        .map(|&(index, target)| Constraint { index, target, handle: true })
        .collect();
    for (i, p) in rest.iter().enumerate() {
        if anchors.iter().any(|&(a, _)| a == i) {
            continue;
        }
        if anchors.iter().all(|&(a, _)| (p - rest[a]).norm() > fixed_radius) {
            out.push(Constraint { index: i, target: *p, handle: false });
        }
    }
    out.sort_by_key(|c| c.index);
    out
}
