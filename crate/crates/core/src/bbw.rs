//! Bounded biharmonic weights and linear blend skinning.
//!
//! Each handle gets a weight field minimizing `wᵀ (Lᵀ M⁻¹ L) w` inside a
//! spherical cage around its anchor, with `w = 1` at the anchor, `w = 0`
//! outside the cage and at other anchors, and `0 <= w <= 1`. Whatever the
//! handles leave of the unit row sum goes to the identity transform.

use nalgebra::Matrix3x4;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::{Cholesky, SparseMatrixSym};
use crate::splat::Vec3;

pub const MAX_SWEEPS: usize = 100;

/// Per-point blending weights for a set of handles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightField {
    pub n_points: usize,
    pub n_handles: usize,
    /// Row-major `n_points × n_handles`.
    pub weights: Vec<f64>,
    /// Weight of the identity transform, `1 − Σ_h w_h` after normalization.
    pub rest: Vec<f64>,
    /// Point indices inside each handle's cage.
    pub cages: Vec<Vec<usize>>,
    pub anchors: Vec<usize>,
    pub converged: Vec<bool>,
    pub sweeps: Vec<usize>,
    /// `wᵀ Q w` per handle before partition of unity.
    pub objective: Vec<f64>,
}

impl WeightField {
    pub fn weight(&self, point: usize, handle: usize) -> f64 {
        self.weights[point * self.n_handles + handle]
    }

    pub fn row(&self, point: usize) -> &[f64] {
        &self.weights[point * self.n_handles..(point + 1) * self.n_handles]
    }

    /// Largest deviation of `Σ_h w_h + rest` from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n_points)
            .map(|i| (self.row(i).iter().sum::<f64>() + self.rest[i] - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Rows of `Q = L M⁻¹ L` restricted to `free`, in free-local indices.
fn biharmonic_rows(l: &SparseMatrixSym, mass: &[f64], free: &[usize], slot: &[Option<usize>]) -> Vec<Vec<(usize, f64)>> {
    free.par_iter()
        .map(|&a| {
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for (k, l_ak) in l.row(a) {
                let s = l_ak / mass[k];
                for (b, l_kb) in l.row(k) {
                    if let Some(c) = slot[b] {
                        acc.push((c, s * l_kb));
                    }
                }
            }
            acc.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
            for (c, v) in acc {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => merged.push((c, v)),
                }
            }
            merged
        })
        .collect()
}

/// Outcome of the box-constrained solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpSolution {
    pub x: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bound {
    Free,
    Lower,
    Upper,
}

fn mul_rows(rows: &[Vec<(usize, f64)>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|&(c, v)| v * x[c]).sum()).collect()
}

fn objective(rows: &[Vec<(usize, f64)>], c: &[f64], x: &[f64]) -> f64 {
    let ax = mul_rows(rows, x);
    x.iter().zip(&ax).zip(c).map(|((xi, ai), ci)| 0.5 * xi * ai - ci * xi).sum()
}

/// Factors the rows of `A` restricted to `keep`, regularizing once if the
/// plain system is not positive definite.
fn factor_subsystem(rows: &[Vec<(usize, f64)>], keep: &[usize], local: &[Option<usize>]) -> Result<Cholesky> {
    let build = |reg: f64| {
        let mut entries = Vec::new();
        for (r, &i) in keep.iter().enumerate() {
            for &(j, v) in &rows[i] {
                if let Some(c) = local[j] {
                    if c <= r {
                        let v = if c == r { v * (1.0 + reg) } else { v };
                        entries.push((r, c, v));
                    }
                }
            }
        }
        Cholesky::factor(keep.len(), &entries)
    };
    build(0.0).or_else(|_| build(1e-10))
}

/// Minimizes `½ xᵀ A x − cᵀ x` over `0 <= x <= 1` with a primal-dual active
/// set method. `A` is given by symmetric rows.
pub fn solve_box_qp(rows: &[Vec<(usize, f64)>], c: &[f64]) -> Result<BoxQpSolution> {
    let m = rows.len();
    if m == 0 {
        return Ok(BoxQpSolution { x: Vec::new(), converged: true, sweeps: 0 });
    }
    // diagonal scaling of the complementarity test keeps the iteration
    // invariant under A -> αA, c -> αc
    let diag: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().find(|&&(j, _)| j == i).map_or(0.0, |&(_, v)| v))
        .collect();
    if let Some(i) = diag.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Numerical(format!("box QP has non-positive diagonal at {i}")));
    }
    let mut state = vec![Bound::Free; m];
    let mut x = vec![0.0; m];
    let mut mu = vec![0.0; m];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for sweep in 1..=MAX_SWEEPS {
        let keep: Vec<usize> = (0..m).filter(|&i| state[i] == Bound::Free).collect();
        let mut local = vec![None; m];
        for (r, &i) in keep.iter().enumerate() {
            local[i] = Some(r);
        }
        for i in 0..m {
            x[i] = match state[i] {
                Bound::Upper => 1.0,
                _ => 0.0,
            };
        }
        if !keep.is_empty() {
            let chol = factor_subsystem(rows, &keep, &local)
                .map_err(|e| Error::Numerical(format!("box QP system is singular: {e}")))?;
            let mut rhs: Vec<f64> = keep
                .iter()
                .map(|&i| {
                    c[i] - rows[i]
                        .iter()
                        .filter(|&&(j, _)| state[j] == Bound::Upper)
                        .map(|&(_, v)| v)
                        .sum::<f64>()
                })
                .collect();
            chol.solve_in_place(&mut rhs, 1);
            for (r, &i) in keep.iter().enumerate() {
                x[i] = rhs[r];
            }
        }
        let ax = mul_rows(rows, &x);
        for i in 0..m {
            // A x − c + μ = 0 with μ > 0 pushing down at the upper bound
            mu[i] = if state[i] == Bound::Free { 0.0 } else { c[i] - ax[i] };
        }
        let next: Vec<Bound> = (0..m)
            .map(|i| {
                let probe = x[i] + mu[i] / diag[i];
                if probe > 1.0 {
                    Bound::Upper
                } else if probe < 0.0 {
                    Bound::Lower
                } else {
                    Bound::Free
                }
            })
            .collect();
        let feasible: Vec<f64> = x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let f = objective(rows, c, &feasible);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, feasible.clone()));
        }
        if next == state {
            return Ok(BoxQpSolution { x: feasible, converged: true, sweeps: sweep });
        }
        state = next;
    }
    let (_, x) = best.expect("at least one sweep ran");
    Ok(BoxQpSolution { x, converged: false, sweeps: MAX_SWEEPS })
}

/// Solves one weight field per anchor. `cage_radius` is absolute.
pub fn solve_bbw(
    l: &SparseMatrixSym,
    mass: &[f64],
    points: &[Vec3],
    anchors: &[usize],
    cage_radius: f64,
) -> Result<WeightField> {
    let n = points.len();
    if l.dim() != n || mass.len() != n {
        return Err(Error::InvalidArgument("Laplacian, mass and point counts differ".into()));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("BBW needs at least one handle".into()));
    }
    for (k, &a) in anchors.iter().enumerate() {
        if a >= n {
            return Err(Error::InvalidArgument(format!("anchor {a} out of range")));
        }
        if anchors[..k].contains(&a) {
            return Err(Error::InvalidArgument(format!("anchor {a} is used twice")));
        }
    }
    let h = anchors.len();
    let per_handle: Vec<(Vec<usize>, Vec<f64>, bool, usize, f64)> = anchors
        .par_iter()
        .map(|&anchor| {
            let cage: Vec<usize> = (0..n)
                .filter(|&i| (points[i] - points[anchor]).norm() <= cage_radius)
                .collect();
            let mut pinned = vec![0.0; n];
            pinned[anchor] = 1.0;
            let free: Vec<usize> = cage.iter().copied().filter(|i| !anchors.contains(i)).collect();
            let mut slot = vec![None; n];
            for (r, &i) in free.iter().enumerate() {
                slot[i] = Some(r);
            }
            let rows = biharmonic_rows(l, mass, &free, &slot);
            // linear term: −(Q w_P)_F
            let y = l.mul_vec(&pinned);
            let z: Vec<f64> = y.iter().zip(mass).map(|(a, m)| a / m).collect();
            let qp = l.mul_vec(&z);
            let c: Vec<f64> = free.iter().map(|&i| -qp[i]).collect();
            let sol = solve_box_qp(&rows, &c)?;
            let mut w = pinned;
            for (r, &i) in free.iter().enumerate() {
                w[i] = sol.x[r];
            }
            let lw = l.mul_vec(&w);
            let energy = lw.iter().zip(mass).map(|(a, m)| a * a / m).sum();
            Ok((cage, w, sol.converged, sol.sweeps, energy))
        })
        .collect::<Result<_>>()?;

    let mut weights = vec![0.0; n * h];
    for (k, (_, w, _, _, _)) in per_handle.iter().enumerate() {
        for i in 0..n {
            weights[i * h + k] = w[i];
        }
    }
    let mut rest = vec![0.0; n];
    for i in 0..n {
        let row = &mut weights[i * h..(i + 1) * h];
        let sum: f64 = row.iter().sum();
        if sum > 1.0 {
            for w in row.iter_mut() {
                *w /= sum;
            }
        } else {
            rest[i] = 1.0 - sum;
        }
    }
    let mut field = WeightField {
        n_points: n,
        n_handles: h,
        weights,
        rest,
        cages: Vec::with_capacity(h),
        anchors: anchors.to_vec(),
        converged: Vec::with_capacity(h),
        sweeps: Vec::with_capacity(h),
        objective: Vec::with_capacity(h),
    };
    for (cage, _, converged, sweeps, energy) in per_handle {
        field.cages.push(cage);
        field.converged.push(converged);
        field.sweeps.push(sweeps);
        field.objective.push(energy);
    }
    Ok(field)
}

/// `p' = Σ_h w_h T_h(p) + (1 − Σ_h w_h) p`, evaluated as
/// `p + Σ_h w_h (T_h(p) − p)` so that identity transforms are exact.
pub fn apply_lbs(points: &[Vec3], field: &WeightField, transforms: &[Matrix3x4<f64>]) -> Result<Vec<Vec3>> {
    if transforms.len() != field.n_handles || points.len() != field.n_points {
        return Err(Error::InvalidArgument("transform or point count does not match the weights".into()));
    }
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut out = *p;
            for (w, t) in field.row(i).iter().zip(transforms) {
                if *w != 0.0 {
                    let moved = t.fixed_view::<3, 3>(0, 0) * p + t.column(3);
                    out += (moved - p) * *w;
                }
            }
            out
        })
        .collect())
}
