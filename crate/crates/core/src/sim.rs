//! Synthetic environments and LiDAR scan rendering.
//!
//! Three scene archetypes cover the qualitative regimes of registration
//! error: a corridor (one unobservable translation), a wide plain (two
//! translations and yaw weakly observable) and a structured box field
//! (fully constrained). A rotating-LiDAR-style sensor model casts rings
//! of rays and adds truncated Gaussian radial noise, and a Monte-Carlo
//! oracle runs the full ICP pipeline repeatedly to measure the empirical
//! registration-error distribution on a scene.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_initial_guess, DatasetError, InitialGuessConfig};
use crate::icp::{register, IcpConfig, IcpError};
use crate::pointcloud::{CloudError, PointCloud};
use crate::se3::{icp_error, Matrix6, Pose, Twist, Vector6};
use crate::seeding::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown archetype '{0}' (expected corridor, plain or structured)")]
    UnknownArchetype(String),
    #[error("sensor origin {0:?} is outside the scene extent")]
    SensorOutsideScene(Vector3<f64>),
    #[error("no rays hit the scene")]
    NoHits,
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
    #[error("scene file {path}: {reason}")]
    SceneFile { path: String, reason: String },
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Icp(#[from] IcpError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("error oracle needs at least 100 trials, got {0}")]
    TooFewTrials(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Corridor,
    Plain,
    Structured,
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Archetype::Corridor => "corridor",
            Archetype::Plain => "plain",
            Archetype::Structured => "structured",
        };
        f.write_str(s)
    }
}

impl FromStr for Archetype {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "corridor" => Ok(Archetype::Corridor),
            "plain" => Ok(Archetype::Plain),
            "structured" => Ok(Archetype::Structured),
            other => Err(SimError::UnknownArchetype(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangle {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub c: Vector3<f64>,
}

impl Triangle {
    /// Moeller-Trumbore ray intersection; returns the ray parameter t.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EDGE_EPS: f64 = 1e-9;
        let e1 = self.b - self.a;
        let e2 = self.c - self.a;
        let pvec = dir.cross(&e2);
        let det = e1.dot(&pvec);
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = 1.0 / det;
        let tvec = origin - self.a;
        let u = tvec.dot(&pvec) * inv;
        if !(-EDGE_EPS..=1.0 + EDGE_EPS).contains(&u) {
            return None;
        }
        let qvec = tvec.cross(&e1);
        let v = dir.dot(&qvec) * inv;
        if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
            return None;
        }
        let t = e2.dot(&qvec) * inv;
        (t > 1e-9).then_some(t)
    }

    fn centroid(&self) -> Vector3<f64> {
        (self.a + self.b + self.c) / 3.0
    }

    fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        (self.a - c).norm().max((self.b - c).norm()).max((self.c - c).norm())
    }
}

/// Axis-aligned operating volume of a scene; surfaces fit inside it and
/// the sensor must stay inside it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - 1e-9 && p[i] <= self.max[i] + 1e-9)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub archetype: Archetype,
    pub triangles: Vec<Triangle>,
    pub extent: Aabb,
}

/// Geometry parameters for the three archetypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub corridor_width: f64,
    pub corridor_length: f64,
    pub corridor_height: f64,
    pub plain_size: f64,
    pub plain_cell: f64,
    pub plain_roughness: f64,
    pub structured_size: f64,
    pub box_count_min: usize,
    pub box_count_max: usize,
    pub box_dim_min: f64,
    pub box_dim_max: f64,
    /// Half-width of the sensor path channel kept free of boxes.
    pub path_clearance: f64,
    /// Airspace height added above the surfaces to the scene extent.
    pub airspace: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            corridor_width: 4.0,
            corridor_length: 100.0,
            corridor_height: 3.0,
            plain_size: 40.0,
            plain_cell: 2.0,
            plain_roughness: 0.05,
            structured_size: 40.0,
            box_count_min: 5,
            box_count_max: 20,
            box_dim_min: 0.5,
            box_dim_max: 4.0,
            path_clearance: 1.5,
            airspace: 5.0,
        }
    }
}

fn quad(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>) -> [Triangle; 2] {
    [Triangle { a, b, c }, Triangle { a, b: c, c: d }]
}

fn make_corridor(p: &SceneParams) -> Scene {
    let w = p.corridor_width / 2.0;
    let l = p.corridor_length;
    let h = p.corridor_height;
    let mut triangles = Vec::new();
    // Floor, then the two walls; no ceiling, open ends.
    triangles.extend(quad(
        Vector3::new(0.0, -w, 0.0),
        Vector3::new(l, -w, 0.0),
        Vector3::new(l, w, 0.0),
        Vector3::new(0.0, w, 0.0),
    ));
    for y in [-w, w] {
        triangles.extend(quad(
            Vector3::new(0.0, y, 0.0),
            Vector3::new(l, y, 0.0),
            Vector3::new(l, y, h),
            Vector3::new(0.0, y, h),
        ));
    }
    Scene {
        archetype: Archetype::Corridor,
        triangles,
        extent: Aabb { min: [0.0, -w, 0.0], max: [l, w, h.max(p.airspace)] },
    }
}

fn make_plain(p: &SceneParams, seed: u64) -> Scene {
    let half = p.plain_size / 2.0;
    let cells = (p.plain_size / p.plain_cell).round().max(1.0) as usize;
    let step = p.plain_size / cells as f64;
    let mut rng = rng_from_seed(derive_seed(seed, "plain-heights", 0));
    let nv = cells + 1;
    let mut heights = vec![0.0f64; nv * nv];
    if p.plain_roughness > 0.0 {
        for h in heights.iter_mut() {
            *h = rng.random_range(-p.plain_roughness..p.plain_roughness);
        }
    }
    let vertex = |i: usize, j: usize| {
        Vector3::new(-half + i as f64 * step, -half + j as f64 * step, heights[i * nv + j])
    };
    let mut triangles = Vec::new();
    for i in 0..cells {
        for j in 0..cells {
            triangles.extend(quad(vertex(i, j), vertex(i + 1, j), vertex(i + 1, j + 1), vertex(i, j + 1)));
        }
    }
    Scene {
        archetype: Archetype::Plain,
        triangles,
        extent: Aabb {
            min: [-half, -half, -p.plain_roughness],
            max: [half, half, p.airspace],
        },
    }
}

fn box_triangles(center: Vector3<f64>, dims: Vector3<f64>, yaw: f64) -> Vec<Triangle> {
    let (hx, hy, hz) = (dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0);
    let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let corner = |sx: f64, sy: f64, sz: f64| {
        center + rot * Vector3::new(sx * hx, sy * hy, 0.0) + Vector3::new(0.0, 0.0, hz + sz * hz)
    };
    let mut t = Vec::with_capacity(12);
    // Four side faces, top and bottom.
    t.extend(quad(corner(-1.0, -1.0, -1.0), corner(1.0, -1.0, -1.0), corner(1.0, -1.0, 1.0), corner(-1.0, -1.0, 1.0)));
    t.extend(quad(corner(-1.0, 1.0, -1.0), corner(1.0, 1.0, -1.0), corner(1.0, 1.0, 1.0), corner(-1.0, 1.0, 1.0)));
    t.extend(quad(corner(-1.0, -1.0, -1.0), corner(-1.0, 1.0, -1.0), corner(-1.0, 1.0, 1.0), corner(-1.0, -1.0, 1.0)));
    t.extend(quad(corner(1.0, -1.0, -1.0), corner(1.0, 1.0, -1.0), corner(1.0, 1.0, 1.0), corner(1.0, -1.0, 1.0)));
    t.extend(quad(corner(-1.0, -1.0, 1.0), corner(1.0, -1.0, 1.0), corner(1.0, 1.0, 1.0), corner(-1.0, 1.0, 1.0)));
    t.extend(quad(corner(-1.0, -1.0, -1.0), corner(1.0, -1.0, -1.0), corner(1.0, 1.0, -1.0), corner(-1.0, 1.0, -1.0)));
    t
}

fn make_structured(p: &SceneParams, seed: u64) -> Scene {
    let half = p.structured_size / 2.0;
    let mut triangles = Vec::new();
    triangles.extend(quad(
        Vector3::new(-half, -half, 0.0),
        Vector3::new(half, -half, 0.0),
        Vector3::new(half, half, 0.0),
        Vector3::new(-half, half, 0.0),
    ));
    let mut rng = rng_from_seed(derive_seed(seed, "structured-boxes", 0));
    let count = rng.random_range(p.box_count_min..=p.box_count_max);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < count && attempts < 1000 {
        attempts += 1;
        let dims = Vector3::new(
            rng.random_range(p.box_dim_min..p.box_dim_max),
            rng.random_range(p.box_dim_min..p.box_dim_max),
            rng.random_range(p.box_dim_min..p.box_dim_max),
        );
        let margin = dims[0].max(dims[1]);
        let cx = rng.random_range(-half + margin..half - margin);
        let cy = rng.random_range(-half + margin..half - margin);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        // Keep the sensor path channel along the x axis clear.
        if cy.abs() < p.path_clearance + margin {
            continue;
        }
        triangles.extend(box_triangles(Vector3::new(cx, cy, 0.0), dims, yaw));
        placed += 1;
    }
    Scene {
        archetype: Archetype::Structured,
        triangles,
        extent: Aabb { min: [-half, -half, 0.0], max: [half, half, p.airspace] },
    }
}

/// Builds one of the three scene archetypes; deterministic for a seed.
pub fn make_scene(archetype: Archetype, params: &SceneParams, seed: u64) -> Scene {
    match archetype {
        Archetype::Corridor => make_corridor(params),
        Archetype::Plain => make_plain(params, seed),
        Archetype::Structured => make_structured(params, seed),
    }
}

/// Rotating-LiDAR-style sensor: `rings` elevation rings times `azimuths`
/// horizontal steps, radial Gaussian noise truncated at 3 sigma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub rings: usize,
    pub azimuths: usize,
    pub vertical_fov: f64,
    pub range_max: f64,
    pub noise_sigma: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self { rings: 32, azimuths: 720, vertical_fov: 0.6, range_max: 60.0, noise_sigma: 0.02 }
    }
}

impl SensorModel {
    /// Reduced-resolution model for fast desk-scale experiments.
    pub fn desk() -> Self {
        Self { rings: 16, azimuths: 360, ..Self::default() }
    }

    pub fn num_rays(&self) -> usize {
        self.rings * self.azimuths
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.rings == 0 || self.azimuths == 0 {
            return Err(SimError::InvalidSensor("rings and azimuths must be positive".into()));
        }
        if self.range_max <= 0.0 {
            return Err(SimError::InvalidSensor("range_max must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SimError::InvalidSensor("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    fn ray_direction(&self, ring: usize, azimuth: usize) -> Vector3<f64> {
        let elevation = if self.rings == 1 {
            0.0
        } else {
            -self.vertical_fov / 2.0
                + ring as f64 * self.vertical_fov / (self.rings - 1) as f64
        };
        let az = azimuth as f64 * std::f64::consts::TAU / self.azimuths as f64;
        Vector3::new(elevation.cos() * az.cos(), elevation.cos() * az.sin(), elevation.sin())
    }
}

/// Per-origin raycaster: triangles sorted by centroid distance so most
/// rays terminate before scanning the whole list.
struct Raycaster<'a> {
    triangles: &'a [Triangle],
    order: Vec<(f64, f64, u32)>, // (centroid distance, bounding radius, index)
}

impl<'a> Raycaster<'a> {
    fn new(scene: &'a Scene, origin: &Vector3<f64>) -> Self {
        let mut order: Vec<(f64, f64, u32)> = scene
            .triangles
            .iter()
            .enumerate()
            .map(|(i, t)| ((t.centroid() - origin).norm(), t.bounding_radius(), i as u32))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        Self { triangles: &scene.triangles, order }
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut best = f64::INFINITY;
        for &(dist, radius, idx) in &self.order {
            if dist - radius > best.min(t_max) {
                break;
            }
            if let Some(t) = self.triangles[idx as usize].intersect(origin, dir) {
                if t <= t_max && t < best {
                    best = t;
                }
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Casts the sensor's rays from `sensor_pose`, adds radial noise and
/// returns the hits in the sensor frame. Misses are dropped; zero hits is
/// an error.
pub fn render_scan(
    scene: &Scene,
    sensor_pose: &Pose,
    sensor: &SensorModel,
    seed: u64,
) -> Result<PointCloud, SimError> {
    sensor.validate()?;
    let origin = *sensor_pose.translation();
    if !scene.extent.contains(&origin) {
        return Err(SimError::SensorOutsideScene(origin));
    }
    let caster = Raycaster::new(scene, &origin);
    let mut rng = rng_from_seed(seed);
    let mut points = Vec::new();
    for ring in 0..sensor.rings {
        for az in 0..sensor.azimuths {
            let dir_s = sensor.ray_direction(ring, az);
            let dir_w = sensor_pose.rotation() * dir_s;
            if let Some(t) = caster.cast(&origin, &dir_w, sensor.range_max) {
                let noise = if sensor.noise_sigma > 0.0 {
                    let raw: f64 = rng.sample::<f64, _>(StandardNormal);
                    (raw * sensor.noise_sigma).clamp(-3.0 * sensor.noise_sigma, 3.0 * sensor.noise_sigma)
                } else {
                    0.0
                };
                let depth = t + noise;
                if depth > 1e-6 {
                    points.push(dir_s * depth);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(SimError::NoHits);
    }
    Ok(PointCloud::new(points, format!("sim-{}", scene.archetype))?)
}

/// Distance from a point to the nearest scene surface along no particular
/// direction (used by tests and validation tooling).
pub fn distance_to_scene(scene: &Scene, point: &Vector3<f64>) -> f64 {
    scene
        .triangles
        .iter()
        .map(|t| point_triangle_distance(point, t))
        .fold(f64::INFINITY, f64::min)
}

fn point_triangle_distance(p: &Vector3<f64>, t: &Triangle) -> f64 {
    // Projection onto the triangle plane, clamped to the triangle via
    // barycentric checks against the three edges.
    let ab = t.b - t.a;
    let ac = t.c - t.a;
    let ap = p - t.a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - t.b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm();
    }
    let cp = p - t.c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (t.c - t.b) * w).norm();
    }
    let n = ab.cross(&ac);
    (ap.dot(&n) / n.norm()).abs()
}

/// Plain-text scene format: header lines then one triangle per line.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SimError> {
    let mut out = String::new();
    out.push_str(&format!("archetype {}\n", scene.archetype));
    out.push_str(&format!(
        "extent {} {} {} {} {} {}\n",
        scene.extent.min[0], scene.extent.min[1], scene.extent.min[2],
        scene.extent.max[0], scene.extent.max[1], scene.extent.max[2],
    ));
    for t in &scene.triangles {
        out.push_str(&format!(
            "tri {} {} {} {} {} {} {} {} {}\n",
            t.a[0], t.a[1], t.a[2], t.b[0], t.b[1], t.b[2], t.c[0], t.c[1], t.c[2],
        ));
    }
    std::fs::write(path, out)
        .map_err(|e| SimError::SceneFile { path: path.display().to_string(), reason: e.to_string() })
}

pub fn load_scene(path: &Path) -> Result<Scene, SimError> {
    let bad = |reason: String| SimError::SceneFile { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut archetype = None;
    let mut extent = None;
    let mut triangles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let parse_floats = |tok: std::str::SplitWhitespace<'_>, n: usize| -> Result<Vec<f64>, SimError> {
            let vals: Vec<f64> = tok
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != n {
                return Err(bad(format!("line {}: expected {n} numbers", lineno + 1)));
            }
            Ok(vals)
        };
        match tok.next() {
            Some("archetype") => {
                let name = tok.next().ok_or_else(|| bad("missing archetype".into()))?;
                archetype = Some(Archetype::from_str(name)?);
            }
            Some("extent") => {
                let v = parse_floats(tok, 6)?;
                extent = Some(Aabb { min: [v[0], v[1], v[2]], max: [v[3], v[4], v[5]] });
            }
            Some("tri") => {
                let v = parse_floats(tok, 9)?;
                triangles.push(Triangle {
                    a: Vector3::new(v[0], v[1], v[2]),
                    b: Vector3::new(v[3], v[4], v[5]),
                    c: Vector3::new(v[6], v[7], v[8]),
                });
            }
            Some(other) => return Err(bad(format!("line {}: unknown record '{other}'", lineno + 1))),
            None => {}
        }
    }
    if triangles.is_empty() {
        return Err(bad("scene has no surfaces".into()));
    }
    Ok(Scene {
        archetype: archetype.ok_or_else(|| bad("missing archetype".into()))?,
        triangles,
        extent: extent.ok_or_else(|| bad("missing extent".into()))?,
    })
}

/// A forward path through a scene for scan-sequence generation: steps
/// along +x from a safe start with a small seeded yaw wander, sensor at
/// 1.5 m height. Errors if the path would leave the scene.
pub fn trajectory_poses(
    archetype: Archetype,
    params: &SceneParams,
    scans: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<Pose>, SimError> {
    let (x0, x_limit) = match archetype {
        Archetype::Corridor => (3.0, params.corridor_length - 2.0),
        Archetype::Plain => (-params.plain_size / 2.0 + 4.0, params.plain_size / 2.0 - 4.0),
        Archetype::Structured => {
            (-params.structured_size / 2.0 + 4.0, params.structured_size / 2.0 - 4.0)
        }
    };
    let reach = x0 + step * scans as f64;
    if reach > x_limit {
        return Err(SimError::InvalidSensor(format!(
            "trajectory of {scans} scans at step {step} leaves the scene (reaches {reach:.1}, limit {x_limit:.1})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut poses = Vec::with_capacity(scans);
    let mut yaw: f64 = 0.0;
    for i in 0..scans {
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        let t = Vector3::new(x0 + i as f64 * step, 0.0, 1.5);
        poses.push(Pose::new(rot.into_inner(), t).expect("yaw rotation is orthonormal"));
        yaw += rng.random_range(-0.02..0.02);
        yaw = yaw.clamp(-0.15, 0.15);
    }
    Ok(poses)
}

/// Configuration for the Monte-Carlo registration-error oracle.
#[derive(Clone, Debug)]
pub struct ErrorTrialConfig {
    pub trials: usize,
    pub icp: IcpConfig,
    /// Initial-guess perturbation; `None` starts every trial at the truth.
    pub guess: Option<InitialGuessConfig>,
    pub base_seed: u64,
}

/// Empirical distribution of label twists over repeated ICP runs.
#[derive(Clone, Debug)]
pub struct ErrorDistribution {
    pub twists: Vec<Twist>,
    /// Trials whose registration was flagged (kept in `twists` anyway).
    pub non_converged: usize,
    /// Trials that produced no usable label (log failure).
    pub label_failures: usize,
}

impl ErrorDistribution {
    pub fn mean(&self) -> Vector6 {
        let mut acc = Vector6::zeros();
        for t in &self.twists {
            acc += t.as_vector();
        }
        acc / self.twists.len().max(1) as f64
    }

    /// Population covariance of the twists (about the sample mean).
    pub fn covariance(&self) -> Matrix6 {
        let mean = self.mean();
        let mut acc = Matrix6::zeros();
        for t in &self.twists {
            let d = t.as_vector() - mean;
            acc += d * d.transpose();
        }
        acc / self.twists.len().max(1) as f64
    }

    /// Per-dimension variances (diagonal of the covariance).
    pub fn variances(&self) -> Vector6 {
        let c = self.covariance();
        Vector6::from_fn(|i, _| c[(i, i)])
    }
}

/// Runs the full ICP pipeline `trials` times on freshly rendered scans
/// with independent noise, subsampling and guess seeds, and returns the
/// label twists. This is the ground-truth error oracle for a scene.
pub fn empirical_icp_error_distribution(
    scene: &Scene,
    pose_a: &Pose,
    pose_b: &Pose,
    sensor: &SensorModel,
    cfg: &ErrorTrialConfig,
) -> Result<ErrorDistribution, SimError> {
    if cfg.trials < 100 {
        return Err(SimError::TooFewTrials(cfg.trials));
    }
    let truth = pose_a.inverse().compose(pose_b);
    let outcomes: Vec<Result<(Option<Twist>, bool), SimError>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let reference = render_scan(scene, pose_a, sensor, derive_seed(cfg.base_seed, "scan-a", trial))?;
            let reading = render_scan(scene, pose_b, sensor, derive_seed(cfg.base_seed, "scan-b", trial))?;
            let guess = match &cfg.guess {
                Some(g) => sample_initial_guess(&truth, g, derive_seed(cfg.base_seed, "guess", trial))?,
                None => truth,
            };
            let (res, _) = register(&reading, &reference, &guess, &cfg.icp, derive_seed(cfg.base_seed, "icp", trial))?;
            let flagged = !res.converged;
            match icp_error(&res.estimate, &truth) {
                Ok(label) => Ok((Some(label), flagged)),
                Err(_) => Ok((None, true)),
            }
        })
        .collect();

    let mut twists = Vec::with_capacity(cfg.trials);
    let mut non_converged = 0;
    let mut label_failures = 0;
    for outcome in outcomes {
        let (label, flagged) = outcome?;
        if flagged {
            non_converged += 1;
        }
        match label {
            Some(t) => twists.push(t),
            None => label_failures += 1,
        }
    }
    if twists.is_empty() {
        return Err(SimError::NoHits);
    }
    Ok(ErrorDistribution { twists, non_converged, label_failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corridor_walls_at_half_width() {
        let p = SceneParams::default();
        let scene = make_scene(Archetype::Corridor, &p, 0);
        let mut wall_tris = 0;
        for t in &scene.triangles {
            let ys = [t.a[1], t.b[1], t.c[1]];
            let planar = ys[0] == ys[1] && ys[1] == ys[2];
            if planar && (ys[0].abs() - 2.0).abs() < 1e-12 {
                wall_tris += 1;
            }
        }
        assert_eq!(wall_tris, 4, "two walls, two triangles each");
    }

    #[test]
    fn plain_roughness_zero_is_flat() {
        let p = SceneParams { plain_roughness: 0.0, ..SceneParams::default() };
        let scene = make_scene(Archetype::Plain, &p, 3);
        for t in &scene.triangles {
            for v in [t.a, t.b, t.c] {
                assert_eq!(v[2], 0.0);
            }
        }
    }

    #[test]
    fn structured_is_seed_deterministic() {
        let p = SceneParams::default();
        let a = make_scene(Archetype::Structured, &p, 9);
        let b = make_scene(Archetype::Structured, &p, 9);
        assert_eq!(a, b);
        let c = make_scene(Archetype::Structured, &p, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn structured_box_count_in_range() {
        let p = SceneParams::default();
        for seed in 0..5 {
            let scene = make_scene(Archetype::Structured, &p, seed);
            let boxes = (scene.triangles.len() - 2) / 12;
            assert!((p.box_count_min..=p.box_count_max).contains(&boxes), "{boxes} boxes");
        }
    }

    #[test]
    fn downward_ray_hits_plane() {
        let p = SceneParams { plain_roughness: 0.0, plain_size: 10.0, ..SceneParams::default() };
        let scene = make_scene(Archetype::Plain, &p, 0);
        let sensor = SensorModel { rings: 3, azimuths: 4, vertical_fov: std::f64::consts::PI, range_max: 10.0, noise_sigma: 0.0 };
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let cloud = render_scan(&scene, &pose, &sensor, 0).unwrap();
        // Ring 0 points straight down from (0,0,1): sensor-frame hit (0,0,-1).
        let down = cloud
            .points()
            .iter()
            .find(|pt| (*pt - &Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        assert!(down.is_some(), "straight-down ray missing");
        assert!(cloud.len() <= sensor.num_rays());
    }

    #[test]
    fn rendered_points_lie_on_surfaces_in_world_frame() {
        let p = SceneParams::default();
        let scene = make_scene(Archetype::Structured, &p, 4);
        let sensor = SensorModel { rings: 8, azimuths: 90, noise_sigma: 0.0, ..SensorModel::default() };
        let pose = crate::se3::exp_map(&Twist::new(
            Vector3::new(1.0, 0.3, 1.5),
            Vector3::new(0.02, -0.03, 0.4),
        ));
        let cloud = render_scan(&scene, &pose, &sensor, 1).unwrap();
        for pt in cloud.points() {
            let world = pose.apply(pt);
            assert!(distance_to_scene(&scene, &world) < 1e-9);
        }
    }

    #[test]
    fn radial_noise_statistics() {
        let p = SceneParams { plain_roughness: 0.0, ..SceneParams::default() };
        let scene = make_scene(Archetype::Plain, &p, 0);
        let sigma = 0.02;
        let noisy_sensor = SensorModel { rings: 32, azimuths: 1000, noise_sigma: sigma, ..SensorModel::default() };
        let clean_sensor = SensorModel { noise_sigma: 0.0, ..noisy_sensor };
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.5));
        let noisy = render_scan(&scene, &pose, &noisy_sensor, 7).unwrap();
        let clean = render_scan(&scene, &pose, &clean_sensor, 7).unwrap();
        assert_eq!(noisy.len(), clean.len());
        assert!(noisy.len() > 10_000, "need enough samples, got {}", noisy.len());
        let residuals: Vec<f64> = noisy
            .points()
            .iter()
            .zip(clean.points())
            .map(|(a, b)| a.norm() - b.norm())
            .collect();
        let mean: f64 = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
            / residuals.len() as f64)
            .sqrt();
        assert!((std - sigma).abs() / sigma < 0.10, "std {std:.5} vs sigma {sigma}");
        let max_dev = residuals.iter().map(|r| r.abs()).fold(0.0f64, f64::max);
        assert!(max_dev <= 3.0 * sigma + 1e-9, "noise beyond 3 sigma: {max_dev}");
    }

    #[test]
    fn sensor_outside_scene_rejected() {
        let scene = make_scene(Archetype::Corridor, &SceneParams::default(), 0);
        let pose = Pose::from_translation(Vector3::new(-5.0, 0.0, 1.5));
        assert!(matches!(
            render_scan(&scene, &pose, &SensorModel::default(), 0),
            Err(SimError::SensorOutsideScene(_))
        ));
    }

    #[test]
    fn scene_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        let scene = make_scene(Archetype::Structured, &SceneParams::default(), 5);
        save_scene(&scene, &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn render_is_seed_deterministic() {
        let scene = make_scene(Archetype::Structured, &SceneParams::default(), 2);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.5));
        let sensor = SensorModel::desk();
        let a = render_scan(&scene, &pose, &sensor, 3).unwrap();
        let b = render_scan(&scene, &pose, &sensor, 3).unwrap();
        assert_eq!(a.points(), b.points());
    }
}
