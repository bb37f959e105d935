//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Quaternion, Rotation3, SymmetricEigen, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatdeform::sparse::SparseMatrixSym;
use splatdeform::{OccupancyEllipse, Vec3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let q = Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    UnitQuaternion::from_quaternion(q)
}

/// Random ellipse with `semi_a` in `[0.2, 2]`, aspect in `[0.1, 1]`.
pub fn ellipse(rng: &mut ChaCha8Rng, center: Vec3) -> OccupancyEllipse {
    let m = rotation(rng).to_rotation_matrix().into_inner();
    let a = rng.random_range(0.2..2.0);
    let b = a * rng.random_range(0.1..1.0);
    OccupancyEllipse {
        center,
        axis1: m.column(0).into_owned(),
        axis2: m.column(1).into_owned(),
        semi_a: a,
        semi_b: b,
        normal: m.column(2).into_owned(),
    }
}

/// Dense estimate of the normal-wise offset of `ej` along `ei`'s normal:
/// a `grid × grid` lattice over `ej`, each sample projected onto `ei`'s
/// plane and kept if it lands in the closed region.
pub fn brute_offset(ei: &OccupancyEllipse, ej: &OccupancyEllipse, grid: usize) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..grid {
        let u = -1.0 + 2.0 * (a as f64 + 0.5) / grid as f64;
        for b in 0..grid {
            let v = -1.0 + 2.0 * (b as f64 + 0.5) / grid as f64;
            if u * u + v * v >= 1.0 {
                continue;
            }
            let y = ej.center + ej.axis1 * (ej.semi_a * u) + ej.axis2 * (ej.semi_b * v);
            let d = y - ei.center;
            let x = d.dot(&ei.axis1) / ei.semi_a;
            let w = d.dot(&ei.axis2) / ei.semi_b;
            if x * x + w * w <= 1.0 {
                best = best.min(d.dot(&ei.normal).abs());
            }
        }
    }
    best
}

/// All-pairs shortest path lengths.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for &(i, j, w) in edges {
        d[i][j] = d[i][j].min(w);
        d[j][i] = d[j][i].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

pub fn dense(m: &SparseMatrixSym) -> DMatrix<f64> {
    let n = m.dim();
    let mut out = DMatrix::zeros(n, n);
    for (i, j, v) in m.triplets() {
        out[(i, j)] = v;
    }
    out
}

/// Rotation maximizing `Σ e'ᵀ R e` for `S = Σ e' eᵀ`, via the unit
/// quaternion eigenvector of the 4×4 symmetric matrix of the
/// cross-covariance.
pub fn horn_rotation(s: &Matrix3<f64>) -> Matrix3<f64> {
    // m[a][b] = Σ e_a e'_b
    let m = s.transpose();
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let k = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(k);
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

pub struct DenseArap {
    pub positions: Vec<Vec3>,
    pub energies: Vec<f64>,
}

fn dense_energy(w: &DMatrix<f64>, rest: &[Vec3], cur: &[Vec3], rot: &[Matrix3<f64>]) -> f64 {
    let n = rest.len();
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && w[(i, j)] != 0.0 {
                let r = (cur[i] - cur[j]) - rot[i] * (rest[i] - rest[j]);
                e += w[(i, j)] * r.norm_squared();
            }
        }
    }
    e
}

/// Dense local-global ARAP with edge weights `w_ij = −L_ij`. Starts from
/// the global solve with identity rotations and stops when an iteration
/// lowers the energy by less than `tol · E0`.
pub fn dense_arap(
    l: &SparseMatrixSym,
    rest: &[Vec3],
    constraints: &[(usize, Vec3)],
    max_iters: usize,
    tol: f64,
) -> DenseArap {
    let n = rest.len();
    let lw = dense(l);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[(i, j)] = (-lw[(i, j)]).max(0.0);
            }
        }
    }
    let mut target: Vec<Option<Vec3>> = vec![None; n];
    for &(i, t) in constraints {
        target[i] = Some(t);
    }
    let free: Vec<usize> = (0..n).filter(|&i| target[i].is_none()).collect();
    let nf = free.len();
    let mut a = DMatrix::zeros(nf, nf);
    for (r, &i) in free.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            a[(r, c)] = if i == j { (0..n).map(|k| w[(i, k)]).sum() } else { -w[(i, j)] };
        }
    }
    let lu = a.lu();
    let global = |rot: &[Matrix3<f64>]| -> Vec<Vec3> {
        let mut out: Vec<Vec3> = (0..n).map(|i| target[i].unwrap_or(rest[i])).collect();
        for axis in 0..3 {
            let mut b = DVector::zeros(nf);
            for (r, &i) in free.iter().enumerate() {
                let mut v = 0.0;
                for j in 0..n {
                    if j != i && w[(i, j)] != 0.0 {
                        v += w[(i, j)] * (0.5 * (rot[i] + rot[j]) * (rest[i] - rest[j]))[axis];
                        if let Some(t) = target[j] {
                            v += w[(i, j)] * t[axis];
                        }
                    }
                }
                b[r] = v;
            }
            let x = lu.solve(&b).expect("reduced system is nonsingular");
            for (r, &i) in free.iter().enumerate() {
                out[i][axis] = x[r];
            }
        }
        out
    };
    let local = |cur: &[Vec3]| -> Vec<Matrix3<f64>> {
        (0..n)
            .map(|i| {
                let mut s = Matrix3::zeros();
                for j in 0..n {
                    if j != i && w[(i, j)] != 0.0 {
                        s += w[(i, j)] * (cur[i] - cur[j]) * (rest[i] - rest[j]).transpose();
                    }
                }
                horn_rotation(&s)
            })
            .collect()
    };
    let mut cur = global(&vec![Matrix3::identity(); n]);
    let mut rot = local(&cur);
    let mut energies = vec![dense_energy(&w, rest, &cur, &rot)];
    for _ in 0..max_iters {
        let next = global(&rot);
        let next_rot = local(&next);
        let e = dense_energy(&w, rest, &next, &next_rot);
        let prev = *energies.last().unwrap();
        if e > prev {
            break;
        }
        cur = next;
        rot = next_rot;
        energies.push(e);
        if prev - e < tol * energies[0] {
            break;
        }
    }
    DenseArap { positions: cur, energies }
}

/// Accelerated projected gradient for `min ½xᵀQx + cᵀx` on `[0, 1]ⁿ`.
pub fn fista_box(q: &DMatrix<f64>, c: &DVector<f64>, iters: usize) -> DVector<f64> {
    let n = c.len();
    if n == 0 {
        return DVector::zeros(0);
    }
    let lmax = SymmetricEigen::new(q.clone()).eigenvalues.max();
    let step = 1.0 / lmax;
    let project = |v: DVector<f64>| v.map(|x| x.clamp(0.0, 1.0));
    let mut x = DVector::from_element(n, 0.5);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let objective = |v: &DVector<f64>| 0.5 * v.dot(&(q * v)) + c.dot(v);
    for _ in 0..iters {
        let next = project(&y - (q * &y + c) * step);
        // restart when the objective goes up
        if objective(&next) > objective(&x) {
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        let moved = (&next - &x).amax();
        x = next;
        t = t_next;
        if moved < 1e-15 {
            break;
        }
    }
    x
}

/// Weight field by the dense oracle, row-major `n × h`, normalized the
/// same way as the library (rows summing above one are rescaled).
pub fn bbw_oracle(l: &SparseMatrixSym, mass: &[f64], points: &[Vec3], anchors: &[usize], cage: f64) -> Vec<f64> {
    let n = points.len();
    let h = anchors.len();
    let ld = dense(l);
    let minv = DMatrix::from_diagonal(&DVector::from_iterator(n, mass.iter().map(|m| 1.0 / m)));
    let q = &ld * minv * &ld;
    let mut out = vec![0.0; n * h];
    for (k, &a) in anchors.iter().enumerate() {
        let free: Vec<usize> = (0..n)
            .filter(|&i| (points[i] - points[a]).norm() <= cage && !anchors.contains(&i))
            .collect();
        let mut wp = DVector::zeros(n);
        wp[a] = 1.0;
        let qf = DMatrix::from_fn(free.len(), free.len(), |r, c| q[(free[r], free[c])]);
        let full = &q * &wp;
        let c = DVector::from_iterator(free.len(), free.iter().map(|&i| full[i]));
        let x = fista_box(&qf, &c, 2_000_000);
        let mut w = wp;
        for (r, &i) in free.iter().enumerate() {
            w[i] = x[r];
        }
        for i in 0..n {
            out[i * h + k] = w[i];
        }
    }
    for i in 0..n {
        let row = &mut out[i * h..(i + 1) * h];
        let sum: f64 = row.iter().sum();
        if sum > 1.0 {
            row.iter_mut().for_each(|w| *w /= sum);
        }
    }
    out
}

/// Tangent-plane distance of ellipse samples from the plane through `origin`
/// with normal `normal`, maximized over a polar lattice.
pub fn max_plane_distance(e: &OccupancyEllipse, origin: &Vec3, normal: &Vec3) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..=8 {
        let rho = r as f64 / 8.0;
        for k in 0..64 {
            let theta = std::f64::consts::TAU * k as f64 / 64.0;
            let x = e.center + e.axis1 * (e.semi_a * rho * theta.cos()) + e.axis2 * (e.semi_b * rho * theta.sin());
            worst = worst.max((x - origin).dot(normal).abs());
        }
    }
    worst
}

/// Nearby pair: the second center lies within the sum of the major
/// semi-axes, a fifth of the pairs share the first normal.
pub fn nearby_pair(rng: &mut ChaCha8Rng) -> (OccupancyEllipse, OccupancyEllipse) {
    let a = ellipse(rng, Vec3::zeros());
    let mut b = ellipse(rng, Vec3::zeros());
    let reach = a.semi_a + b.semi_a;
    b.center = unit_vector(rng) * rng.random_range(0.0..reach);
    if rng.random_bool(0.2) {
        let m = Rotation3::rotation_between(&b.normal, &a.normal).unwrap_or_else(Rotation3::identity);
        b.axis1 = m * b.axis1;
        b.axis2 = m * b.axis2;
        b.normal = a.normal;
    }
    (a, b)
}

/// Rotation matrix written out from the quaternion components.
pub fn quat_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let n = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / n, x / n, y / n, z / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    )
}

/// Kernel value from the pseudo-inverse of the rank-2 covariance.
pub fn kernel(q: &Quaternion<f64>, sigma: [f64; 2], mean: &Vec3, x: &Vec3) -> f64 {
    let r = quat_matrix(q.w, q.i, q.j, q.k);
    let s = Matrix3::from_diagonal(&Vec3::new(sigma[0] * sigma[0], sigma[1] * sigma[1], 0.0));
    let cov = r * s * r.transpose();
    let pinv = cov.pseudo_inverse(1e-14 * cov.norm()).unwrap();
    let d = x - mean;
    (-0.5 * d.dot(&(pinv * d))).exp()
}
