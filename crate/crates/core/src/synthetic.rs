//! Procedural splat scenes for tests, benchmarks and demos.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::splat::{Splat, SplatSet, Vec3, MIN_CONTRIBUTION};

/// Standard deviation whose occupancy semi-axis is `radius` for an opaque
/// splat without a spiking threshold.
pub fn sigma_for_radius(radius: f64) -> f64 {
    radius / (2.0 * (1.0 / MIN_CONTRIBUTION).ln()).sqrt()
}

/// Opaque splat with the given tangent frame columns and occupancy
/// semi-axes.
pub fn splat_with_frame(mean: Vec3, axis1: Vec3, normal: Vec3, radii: [f64; 2]) -> Splat {
    let n = normal.normalize();
    let a1 = (axis1 - n * n.dot(&axis1)).normalize();
    let a2 = n.cross(&a1);
    let m = Matrix3::from_columns(&[a1, a2, n]);
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let mut s = Splat {
        mean,
        rotation,
        scales: [sigma_for_radius(radii[0]), sigma_for_radius(radii[1])],
        opacity: 1.0,
        spike_threshold: 0.0,
        normal_scale: 0.0,
        payload: Vec::new(),
    };
    s.canonicalize();
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SheetOptions {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    /// Occupancy radius as a multiple of `spacing`.
    pub radius: f64,
    /// Uniform in-plane jitter as a multiple of `spacing`.
    pub jitter: f64,
    pub seed: u64,
    pub origin: Vec3,
    /// Rotation applied to the sheet, which is built in the xy-plane.
    pub rotation: Rotation3<f64>,
}

impl Default for SheetOptions {
    fn default() -> Self {
        SheetOptions {
            nx: 20,
            ny: 20,
            spacing: 0.05,
            radius: 1.0,
            jitter: 0.0,
            seed: 0,
            origin: Vec3::zeros(),
            rotation: Rotation3::identity(),
        }
    }
}

/// A flat grid of circular splats.
pub fn planar_sheet(o: &SheetOptions) -> SplatSet {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let r = o.radius * o.spacing;
    let mut splats = Vec::with_capacity(o.nx * o.ny);
    for j in 0..o.ny {
        for i in 0..o.nx {
            let mut p = Vec3::new(i as f64 * o.spacing, j as f64 * o.spacing, 0.0);
            if o.jitter > 0.0 {
                let h = o.jitter * o.spacing;
                p.x += rng.random_range(-h..=h);
                p.y += rng.random_range(-h..=h);
            }
            let mean = o.origin + o.rotation * p;
            splats.push(splat_with_frame(mean, o.rotation * Vec3::x(), o.rotation * Vec3::z(), [r, r]));
        }
    }
    SplatSet::from_splats(splats)
}

/// Two parallel sheets, the second offset along the normal by `gap`.
pub fn parallel_sheets(o: &SheetOptions, gap: f64) -> SplatSet {
    let mut splats = planar_sheet(o).splats;
    let upper = SheetOptions {
        origin: o.origin + o.rotation * Vec3::new(0.0, 0.0, gap),
        seed: o.seed.wrapping_add(1),
        ..o.clone()
    };
    splats.extend(planar_sheet(&upper).splats);
    SplatSet::from_splats(splats)
}

/// A thin bar of `nx × ny` splats along the x axis, sized for bending tests.
pub fn bar(nx: usize, ny: usize, spacing: f64) -> SplatSet {
    planar_sheet(&SheetOptions {
        nx,
        ny,
        spacing,
        ..SheetOptions::default()
    })
}

/// Splats tangent to a sphere at Fibonacci lattice points.
pub fn fibonacci_sphere(n: usize, radius: f64, center: Vec3, kernel_radius: f64) -> SplatSet {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let splats = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let ring = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            let normal = Vec3::new(ring * theta.cos(), ring * theta.sin(), z);
            let helper = if normal.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
            let tangent = helper.cross(&normal);
            splat_with_frame(center + normal * radius, tangent, normal, [kernel_radius, kernel_radius])
        })
        .collect();
    SplatSet::from_splats(splats)
}
