//! Keypoint evaluation: handle directions, farthest point sampling and 3DPCK.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::Vec3;

/// Default 3DPCK thresholds, in units of `s`.
pub const THRESHOLDS: [f64; 3] = [0.05, 0.075, 0.1];
pub const KEYPOINTS_PER_HANDLE: usize = 100;

const PREFERRED: [Vec3; 3] = [
    Vec3::new(0.0, 0.0, 1.0),
    Vec3::new(0.0, 1.0, 0.0),
    Vec3::new(1.0, 0.0, 0.0),
];

/// Orients `dir` into the +z hemisphere, falling back to +y then +x.
fn preferred_sign(dir: Vec3) -> Vec3 {
    for axis in PREFERRED {
        let d = dir.dot(&axis);
        if d.abs() > 1e-12 {
            return if d > 0.0 { dir } else { -dir };
        }
    }
    dir
}

/// Unit normal of a handle neighborhood: the covariance eigenvector with the
/// smallest eigenvalue, pointing away from the neighborhood centroid.
///
/// When the smallest eigenvalue is repeated, the direction is the
/// projection of +z (then +y, then +x) onto its eigenspace. When the handle
/// sits on the centroid, the sign follows the same axis preference.
pub fn pca_handle_direction(points: &[Vec3], handle: &Vec3) -> Result<Vec3> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a handle direction needs at least 3 points, got {}",
            points.len()
        )));
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lam = |k: usize| eig.eigenvalues[order[k]];
    let vec = |k: usize| eig.eigenvectors.column(order[k]).into_owned();
    let top = lam(2).max(0.0);
    if top <= 0.0 || lam(1) <= 1e-12 * top {
        return Err(Error::InvalidArgument("handle neighborhood is degenerate (rank < 2)".into()));
    }
    let tie = 1e-12 * top;
    let mut space = vec![vec(0)];
    if lam(1) - lam(0) < tie {
        space.push(vec(1));
        if lam(2) - lam(0) < tie {
            space.push(vec(2));
        }
    }
    let mut dir = vec(0);
    if space.len() > 1 {
        for axis in PREFERRED {
            let proj: Vec3 = space.iter().map(|e| e * e.dot(&axis)).sum();
            if proj.norm() > 1e-6 {
                dir = proj.normalize();
                break;
            }
        }
    }
    let offset = handle - centroid;
    let side = dir.dot(&offset);
    let reach = points.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    Ok(if side.abs() <= 1e-12 * reach {
        preferred_sign(dir)
    } else if side > 0.0 {
        dir
    } else {
        -dir
    })
}

/// Greedy max-min sampling from `seed`; ties go to the lowest index.
///
/// Duplicated points have zero distance to their first occurrence once that
/// is chosen, so they are only picked after every distinct point.
pub fn farthest_point_sampling(points: &[Vec3], n: usize, seed: usize) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(Error::InvalidArgument(format!("cannot sample {n} of {} points", points.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if seed >= points.len() {
        return Err(Error::InvalidArgument(format!("seed {seed} out of range")));
    }
    let mut chosen = vec![seed];
    let mut taken = vec![false; points.len()];
    taken[seed] = true;
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[seed]).norm_squared()).collect();
    while chosen.len() < n {
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if !taken[i] && best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("fewer points than requested");
        taken[b] = true;
        chosen.push(b);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min((p - points[b]).norm_squared());
        }
    }
    Ok(chosen)
}

/// Keypoints tracked around one handle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    /// Indices into the reference cloud.
    pub reference: Vec<usize>,
    /// Nearest splat in the rest pose, if one is close enough.
    pub paired: Vec<Option<usize>>,
    pub handle: usize,
    /// Reference point the sampling started from.
    pub seed: usize,
}

/// Samples up to `n` keypoints from the reference points within `radius`
/// of `center`, starting at the one closest to it, and pairs each with the
/// nearest splat mean within `max_pair_distance`.
pub fn sample_keypoints(
    reference: &[Vec3],
    means: &[Vec3],
    center: &Vec3,
    radius: f64,
    n: usize,
    max_pair_distance: f64,
    handle: usize,
) -> Result<KeypointSet> {
    let region: Vec<usize> = (0..reference.len())
        .filter(|&i| (reference[i] - center).norm() <= radius)
        .collect();
    if region.is_empty() {
        return Err(Error::InvalidArgument(format!("no reference points within {radius} of handle {handle}")));
    }
    let local: Vec<Vec3> = region.iter().map(|&i| reference[i]).collect();
    let seed = crate::handles::nearest_point(&local, center).expect("region is non-empty");
    let picked = farthest_point_sampling(&local, n.min(local.len()), seed)?;
    let keypoints: Vec<usize> = picked.iter().map(|&k| region[k]).collect();
    let paired = keypoints
        .iter()
        .map(|&k| {
            crate::handles::nearest_point(means, &reference[k])
                .filter(|&j| (means[j] - reference[k]).norm() <= max_pair_distance)
        })
        .collect();
    Ok(KeypointSet {
        reference: keypoints,
        paired,
        handle,
        seed: region[seed],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckScore {
    pub score: f64,
    pub correct: usize,
    pub total: usize,
    pub unpaired: usize,
}

/// Fraction of keypoints whose paired splat lands within `tau` of the
/// keypoint's deformed reference position. Unpaired keypoints count as
/// incorrect.
pub fn pck3d(gt_deformed: &[Vec3], paired_deformed: &[Option<Vec3>], tau: f64) -> Result<PckScore> {
    if gt_deformed.len() != paired_deformed.len() {
        return Err(Error::InvalidArgument("keypoint and pairing counts differ".into()));
    }
    if gt_deformed.is_empty() {
        return Err(Error::InvalidArgument("no keypoints".into()));
    }
    let mut correct = 0;
    let mut unpaired = 0;
    for (g, p) in gt_deformed.iter().zip(paired_deformed) {
        match p {
            None => unpaired += 1,
            Some(p) if (g - p).norm() <= tau => correct += 1,
            Some(_) => {}
        }
    }
    Ok(PckScore {
        score: correct as f64 / gt_deformed.len() as f64,
        correct,
        total: gt_deformed.len(),
        unpaired,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandleScore {
    pub category: String,
    pub handle: usize,
    /// One score per threshold.
    pub scores: Vec<PckScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    /// In units of `s`.
    pub thresholds: Vec<f64>,
    pub handles: Vec<HandleScore>,
    /// Mean score per category and threshold.
    pub categories: BTreeMap<String, Vec<f64>>,
}

impl PckReport {
    pub fn new(thresholds: Vec<f64>, handles: Vec<HandleScore>) -> Self {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for h in &handles {
            let entry = sums
                .entry(h.category.clone())
                .or_insert_with(|| (vec![0.0; thresholds.len()], 0));
            for (acc, s) in entry.0.iter_mut().zip(&h.scores) {
                *acc += s.score;
            }
            entry.1 += 1;
        }
        let categories = sums
            .into_iter()
            .map(|(k, (v, n))| (k, v.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        PckReport {
            thresholds,
            handles,
            categories,
        }
    }

    /// Mean over all handles, per threshold.
    pub fn overall(&self) -> Vec<f64> {
        let n = self.handles.len().max(1) as f64;
        (0..self.thresholds.len())
            .map(|t| self.handles.iter().map(|h| h.scores[t].score).sum::<f64>() / n)
            .collect()
    }

    /// Aligned text table, one row per category plus the overall mean.
    pub fn to_table(&self) -> String {
        let headers: Vec<String> = self.thresholds.iter().map(|t| format!("tau={t}s")).collect();
        let mut rows: Vec<(String, Vec<f64>)> = self.categories.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        rows.push(("mean".into(), self.overall()));
        let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("category".len());
        let col_w = headers.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:<name_w$}", "category");
        for h in &headers {
            out += &format!("  {h:>col_w$}");
        }
        out.push('\n');
        for (name, vals) in rows {
            out += &format!("{name:<name_w$}");
            for v in vals {
                out += &format!("  {v:>col_w$.4}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_normal_points_away() {
        let pts: Vec<Vec3> = (0..9).map(|i| Vec3::new((i % 3) as f64, (i / 3) as f64, 0.0)).collect();
        let dir = pca_handle_direction(&pts, &Vec3::new(1.0, 1.0, 0.0)).unwrap();
        // handle on the centroid: sign from the +z preference
        assert!((dir - Vec3::z()).norm() < 1e-12);
        let below = pca_handle_direction(&pts, &Vec3::new(1.0, 1.0, -0.5)).unwrap();
        assert!((below - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn isotropic_cloud_prefers_z() {
        let mut pts = Vec::new();
        for s in [-1.0, 1.0] {
            pts.push(Vec3::new(s, 0.0, 0.0));
            pts.push(Vec3::new(0.0, s, 0.0));
            pts.push(Vec3::new(0.0, 0.0, s));
        }
        let dir = pca_handle_direction(&pts, &Vec3::zeros()).unwrap();
        assert!((dir - Vec3::z()).norm() < 1e-9, "{dir}");
    }

    #[test]
    fn collinear_neighborhood_is_rejected() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(pca_handle_direction(&pts, &Vec3::zeros()).is_err());
        assert!(pca_handle_direction(&pts[..2], &Vec3::zeros()).is_err());
    }

    #[test]
    fn fps_on_a_line() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(farthest_point_sampling(&pts, 3, 0).unwrap(), vec![0, 9, 4]);
        assert_eq!(farthest_point_sampling(&pts, 1, 3).unwrap(), vec![3]);
        let mut all = farthest_point_sampling(&pts, 10, 0).unwrap();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn pck_counts() {
        let gt: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mut paired: Vec<Option<Vec3>> = gt.iter().copied().map(Some).collect();
        assert_eq!(pck3d(&gt, &paired, 0.1).unwrap().score, 1.0);
        paired[7] = Some(gt[7] + Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(pck3d(&gt, &paired, 0.1).unwrap().score, 0.99);
        paired[8] = None;
        let s = pck3d(&gt, &paired, 0.1).unwrap();
        assert_eq!((s.correct, s.unpaired), (98, 1));
    }

    #[test]
    fn report_table_lists_categories() {
        let score = |s: f64| PckScore { score: s, correct: 0, total: 1, unpaired: 0 };
        let report = PckReport::new(
            vec![0.05, 0.1],
            vec![
                HandleScore { category: "bar".into(), handle: 0, scores: vec![score(0.5), score(1.0)] },
                HandleScore { category: "bar".into(), handle: 1, scores: vec![score(1.0), score(1.0)] },
            ],
        );
        assert_eq!(report.categories["bar"], vec![0.75, 1.0]);
        let table = report.to_table();
        assert!(table.contains("bar"));
        assert!(table.lines().count() == 3);
    }
}
