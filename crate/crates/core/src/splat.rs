//! Flat Gaussian primitives and the elliptic region each one occupies.
//!
//! A splat is a rank-2 Gaussian: its covariance is `R diag(σ1², σ2², 0) Rᵀ`,
//! so it lives in the plane spanned by the first two columns of `R`. The
//! region where the kernel is "active" (above both the spiking cut-off and
//! the minimum rendering contribution) is an open ellipse in that plane.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Minimum rendering contribution, one 8-bit intensity step.
pub const MIN_CONTRIBUTION: f64 = 1.0 / 255.0;

/// Default in-plane membership tolerance, as a multiple of the scene scale.
pub const PLANE_TOL_FACTOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub mean: Vec3,
    pub rotation: UnitQuaternion<f64>,
    /// In-plane standard deviations, `scales[0] >= scales[1] >= 0`.
    pub scales: [f64; 2],
    /// Post-sigmoid opacity α.
    pub opacity: f64,
    /// Post-sigmoid spiking threshold. Zero disables the constraint.
    pub spike_threshold: f64,
    /// Third scale of 3D-style records, carried through untouched.
    pub normal_scale: f64,
    /// Extra per-record properties, in the order of [`SplatSet::extra_properties`].
    pub payload: Vec<f64>,
}

impl Splat {
    /// Builds a canonical splat: the quaternion is normalized and the scale
    /// axes are ordered so that `σ1 >= σ2`.
    pub fn new(
        mean: Vec3,
        rotation: Quaternion<f64>,
        scales: [f64; 2],
        opacity: f64,
        spike_threshold: f64,
    ) -> Result<Self> {
        let norm = rotation.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "rotation quaternion has norm {norm}"
            )));
        }
        let mut splat = Splat {
            mean,
            rotation: UnitQuaternion::from_quaternion(rotation),
            scales,
            opacity,
            spike_threshold,
            normal_scale: 0.0,
            payload: Vec::new(),
        };
        splat.canonicalize();
        Ok(splat)
    }

    /// Swaps the scale axes when `σ1 < σ2`, rotating the frame by a quarter
    /// turn about the normal so the covariance is unchanged.
    pub fn canonicalize(&mut self) {
        if self.scales[0] < self.scales[1] {
            self.scales.swap(0, 1);
            let quarter = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2);
            self.rotation *= quarter;
        }
    }

    /// Rotation matrix whose columns are the tangent axes and the normal.
    pub fn frame(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn normal(&self) -> Vec3 {
        self.frame().column(2).into_owned()
    }

    /// The rank-2 covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.frame();
        let s = Matrix3::from_diagonal(&Vec3::new(
            self.scales[0] * self.scales[0],
            self.scales[1] * self.scales[1],
            0.0,
        ));
        r * s * r.transpose()
    }

    /// Squared Mahalanobis radius of the occupancy region,
    /// `λ = -2 max{ln V̄ᵖ, ln(c/α)}`.
    pub fn occupancy_lambda(&self, c: f64) -> f64 {
        let spike = self.spike_threshold.abs().ln();
        let contribution = (c / self.opacity).ln();
        -2.0 * spike.max(contribution)
    }
}

/// The active elliptic region of one splat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyEllipse {
    pub center: Vec3,
    pub axis1: Vec3,
    pub axis2: Vec3,
    pub semi_a: f64,
    pub semi_b: f64,
    pub normal: Vec3,
}

impl OccupancyEllipse {
    /// Point of the closed ellipse at polar coordinates `(ρ, θ)`.
    pub fn point(&self, rho: f64, theta: f64) -> Vec3 {
        self.center
            + self.axis1 * (rho * self.semi_a * theta.cos())
            + self.axis2 * (rho * self.semi_b * theta.sin())
    }

    /// Local coordinates `(u, v, w)` of `x` along `axis1`, `axis2`, `normal`.
    pub fn local(&self, x: &Vec3) -> Vec3 {
        let d = x - self.center;
        Vec3::new(d.dot(&self.axis1), d.dot(&self.axis2), d.dot(&self.normal))
    }

    /// Applies a rigid motion `x -> rotation * x + translation`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> Self {
        OccupancyEllipse {
            center: rotation * self.center + translation,
            axis1: rotation * self.axis1,
            axis2: rotation * self.axis2,
            semi_a: self.semi_a,
            semi_b: self.semi_b,
            normal: rotation * self.normal,
        }
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.semi_a * self.semi_b
    }
}

/// Occupancy region of `splat`, or `None` when the threshold excludes
/// every point (`λ <= 0`).
pub fn occupancy_ellipse(splat: &Splat, c: f64) -> Option<OccupancyEllipse> {
    let lambda = splat.occupancy_lambda(c);
    if !(lambda > 0.0) {
        return None;
    }
    let root = lambda.sqrt();
    let frame = splat.frame();
    Some(OccupancyEllipse {
        center: splat.mean,
        axis1: frame.column(0).into_owned(),
        axis2: frame.column(1).into_owned(),
        semi_a: root * splat.scales[0],
        semi_b: root * splat.scales[1],
        normal: frame.column(2).into_owned(),
    })
}

/// Open-region membership: `x` must lie within `plane_tol` of the ellipse
/// plane and strictly inside the boundary.
///
/// Degenerate regions shrink to a segment (`semi_b = 0`) or the center point
/// (`semi_a = 0`); the collapsed coordinates are then tested against
/// `plane_tol` as well.
pub fn in_region(ellipse: &OccupancyEllipse, x: &Vec3, plane_tol: f64) -> bool {
    let local = ellipse.local(x);
    if local.z.abs() > plane_tol {
        return false;
    }
    if ellipse.semi_a == 0.0 {
        return local.x.abs() <= plane_tol && local.y.abs() <= plane_tol;
    }
    let u = local.x / ellipse.semi_a;
    if ellipse.semi_b == 0.0 {
        return local.y.abs() <= plane_tol && u * u < 1.0;
    }
    let v = local.y / ellipse.semi_b;
    u * u + v * v < 1.0
}

/// Extent of the scene: the diagonal length of the axis-aligned bounding
/// box over splat means. Every radius and tolerance is a multiple of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneScale(f64);

impl SceneScale {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(SceneScale(value))
        } else {
            Err(Error::DegenerateScene(value))
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Result<Self> {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let mut any = false;
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
            any = true;
        }
        if !any {
            return Err(Error::EmptyScene);
        }
        SceneScale::new((hi - lo).norm())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `factor · s`
    pub fn times(self, factor: f64) -> f64 {
        factor * self.0
    }
}

/// Scalar type of a PLY property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

/// An ordered, canonicalized collection of splats together with the
/// on-disk layout needed to write them back.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatSet {
    pub splats: Vec<Splat>,
    /// Names and types of pass-through vertex properties.
    pub extra_properties: Vec<(String, ScalarType)>,
    pub layout: crate::ply::Layout,
}

impl SplatSet {
    pub fn from_splats(splats: Vec<Splat>) -> Self {
        SplatSet {
            splats,
            extra_properties: Vec::new(),
            layout: crate::ply::Layout::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn means(&self) -> Vec<Vec3> {
        self.splats.iter().map(|s| s.mean).collect()
    }

    pub fn scale(&self) -> Result<SceneScale> {
        SceneScale::from_points(self.splats.iter().map(|s| &s.mean))
    }

    /// Occupancy regions for every splat, `None` for empty regions.
    pub fn ellipses(&self, c: f64) -> Vec<Option<OccupancyEllipse>> {
        self.splats.iter().map(|s| occupancy_ellipse(s, c)).collect()
    }
}
