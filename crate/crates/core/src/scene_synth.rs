//! Analytic ray-cast scenes with exact color, depth and labels.
//!
//! World frame is z-up with the floor at `z = 0`. Every pixel center casts
//! one ray; the closest box or sphere hit decides the pixel. Shading is flat
//! Lambertian under a fixed directional light, optionally modulated by a
//! world-space pattern, so appearance does not depend on the viewpoint.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::geometry::{Intrinsics, RigidPose};
use crate::semantic_tree::SemanticTree;

pub const TOY_TREE_JSON: &str = include_str!("../fixtures/toy16_tree.json");

/// The 16-class, 3-level hierarchy the synthetic scenes draw labels from.
pub fn toy_taxonomy() -> SemanticTree {
    SemanticTree::from_json(TOY_TREE_JSON).expect("bundled toy taxonomy is valid")
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned box rotated by `yaw` radians about the world z axis.
    Box { half_extents: [f64; 3], yaw: f64 },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: [f64; 3],
    pub color: [f64; 3],
    pub class_id: u32,
    /// Relative amplitude of the procedural surface pattern; 0 is flat color.
    #[serde(default)]
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrajectorySpec {
    /// Arc of `arc` radians around `target` at a fixed height.
    Orbit {
        target: [f64; 3],
        radius: f64,
        height: f64,
        start_angle: f64,
        arc: f64,
    },
    /// Back-and-forth rows along x, stepping in y, looking ahead and down.
    Lawnmower {
        origin: [f64; 3],
        row_length: f64,
        row_spacing: f64,
        rows: usize,
        look_ahead: [f64; 3],
    },
    Static { eye: [f64; 3], target: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room size along x, y (centered at the origin) and z (from the floor).
    pub room_extent: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub trajectory: TrajectorySpec,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub frame_count: usize,
    pub seed: u64,
}

/// Direction towards the light, world frame.
fn light_dir() -> Vector3<f64> {
    Vector3::new(0.35, -0.25, 1.0).normalize()
}

const AMBIENT: f64 = 0.35;

/// Pattern amplitude used by [`SceneSpec::toy_room`].
pub const TOY_TEXTURE: f64 = 0.3;

impl SceneSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        let f = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        Intrinsics::new(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
        .expect("positive focal length")
    }

    /// A closed room with furniture and small objects from every toy group,
    /// viewed along an orbit. The seed jitters object placement and colors.
    pub fn toy_room(seed: u64, width: usize, height: usize, frame_count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hx, hy, hz) = (2.5, 2.5, 2.6);
        let mut objects = Vec::new();
        let mut boxed = |class_id: u32, center: [f64; 3], half: [f64; 3], yaw: f64, color: [f64; 3]| {
            objects.push(SceneObject {
                shape: Shape::Box {
                    half_extents: half,
                    yaw,
                },
                center,
                color,
                class_id,
                texture: TOY_TEXTURE,
            })
        };
        let t = 0.05;
        boxed(1, [0.0, 0.0, -t], [hx, hy, t], 0.0, [0.55, 0.45, 0.35]);
        boxed(3, [0.0, 0.0, hz + t], [hx, hy, t], 0.0, [0.9, 0.9, 0.85]);
        boxed(2, [hx + t, 0.0, hz / 2.0], [t, hy, hz / 2.0], 0.0, [0.75, 0.8, 0.7]);
        boxed(2, [-hx - t, 0.0, hz / 2.0], [t, hy, hz / 2.0], 0.0, [0.7, 0.75, 0.85]);
        boxed(2, [0.0, hy + t, hz / 2.0], [hx, t, hz / 2.0], 0.0, [0.85, 0.75, 0.7]);
        boxed(2, [0.0, -hy - t, hz / 2.0], [hx, t, hz / 2.0], 0.0, [0.8, 0.8, 0.6]);
        boxed(4, [-hx + 0.01, 1.0, 1.0], [0.03, 0.45, 1.0], 0.0, [0.45, 0.25, 0.15]);
        boxed(16, [0.8, -hy + 0.01, 1.5], [0.5, 0.03, 0.35], 0.0, [0.2, 0.4, 0.75]);

        let mut jitter = |v: f64| v + rng.random_range(-0.05..0.05);
        let table_top = 0.75;
        let furniture: [(u32, [f64; 3], [f64; 3], [f64; 3]); 4] = [
            (5, [0.0, 0.0, table_top / 2.0], [0.6, 0.4, table_top / 2.0], [0.6, 0.35, 0.2]),
            (6, [-1.1, 0.3, 0.45], [0.25, 0.25, 0.45], [0.25, 0.55, 0.3]),
            (7, [0.3, -1.6, 0.4], [0.9, 0.4, 0.4], [0.7, 0.2, 0.25]),
            (8, [-1.9, -0.4, 0.7], [0.35, 0.5, 0.7], [0.35, 0.3, 0.5]),
        ];
        let mut items = Vec::new();
        for (class_id, c, h, col) in furniture {
            items.push(SceneObject {
                shape: Shape::Box {
                    half_extents: h,
                    yaw: jitter(0.0),
                },
                center: [jitter(c[0]), jitter(c[1]), c[2]],
                color: col,
                class_id,
                texture: TOY_TEXTURE,
            });
        }
        let small: [(u32, [f64; 2], f64, [f64; 3]); 4] = [
            (9, [-0.3, 0.1], 0.2, [0.9, 0.6, 0.1]),
            (13, [0.3, -0.1], 0.22, [0.1, 0.7, 0.8]),
            (14, [-1.9, -0.4], 0.25, [0.95, 0.9, 0.4]),
            (15, [-1.7, -1.5], 0.35, [0.2, 0.6, 0.15]),
        ];
        for (class_id, c, r, col) in small {
            let base = if class_id == 14 {
                1.4
            } else if class_id == 15 {
                0.0
            } else {
                table_top
            };
            items.push(SceneObject {
                shape: Shape::Sphere { radius: r },
                center: [jitter(c[0]), jitter(c[1]), base + r],
                color: col,
                class_id,
                texture: TOY_TEXTURE,
            });
        }
        items.push(SceneObject {
            shape: Shape::Box {
                half_extents: [0.1, 0.1, 0.2],
                yaw: 0.3,
            },
            center: [0.0, 0.25, table_top + 0.2],
            color: [0.3, 0.8, 0.4],
            class_id: 12,
            texture: TOY_TEXTURE,
        });
        objects.extend(items);

        Self {
            room_extent: [2.0 * hx, 2.0 * hy, hz],
            objects,
            trajectory: TrajectorySpec::Orbit {
                target: [0.0, 0.0, 0.6],
                radius: 1.8,
                height: 1.5,
                start_angle: 0.0,
                arc: std::f64::consts::FRAC_PI_3,
            },
            width,
            height,
            fov_deg: 70.0,
            frame_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return Err(SynthError::InvalidSpec("empty resolution or sequence".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(SynthError::InvalidSpec(format!("fov {}", self.fov_deg)));
        }
        let [ex, ey, ez] = self.room_extent;
        let tol = 0.25;
        for (i, o) in self.objects.iter().enumerate() {
            let [x, y, z] = o.center;
            if x.abs() > ex / 2.0 + tol || y.abs() > ey / 2.0 + tol || z < -tol || z > ez + tol {
                return Err(SynthError::InvalidSpec(format!("object {i} outside the room")));
            }
            if o.class_id == 0 {
                return Err(SynthError::InvalidSpec(format!("object {i} uses the background label")));
            }
            let ok = match &o.shape {
                Shape::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
                Shape::Sphere { radius } => *radius > 0.0,
            };
            if !ok {
                return Err(SynthError::InvalidSpec(format!("object {i} has non-positive size")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera z-depth for rays with unit camera-z.
    pub t: f64,
    pub normal: Vector3<f64>,
    pub object: usize,
}

fn intersect(o: &SceneObject, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let c = Vector3::from(o.center);
    match &o.shape {
        Shape::Sphere { radius } => {
            let oc = origin - c;
            let a = dir.dot(dir);
            let b = 2.0 * dir.dot(&oc);
            let cc = oc.dot(&oc) - radius * radius;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = (-b - sq) / (2.0 * a);
            let t1 = (-b + sq) / (2.0 * a);
            let t = if t0 > 1e-9 { t0 } else if t1 > 1e-9 { t1 } else { return None };
            Some((t, (origin + dir * t - c) / *radius))
        }
        Shape::Box { half_extents, yaw } => {
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), *yaw);
            let lo = rot.inverse() * (origin - c);
            let ld = rot.inverse() * dir;
            let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut nmin, mut nmax) = (Vector3::zeros(), Vector3::zeros());
            for a in 0..3 {
                let h = half_extents[a];
                if ld[a].abs() < 1e-15 {
                    if lo[a].abs() > h {
                        return None;
                    }
                    continue;
                }
                let mut t1 = (-h - lo[a]) / ld[a];
                let mut t2 = (h - lo[a]) / ld[a];
                let mut n1 = Vector3::zeros();
                n1[a] = -1.0;
                let mut n2 = -n1;
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                    std::mem::swap(&mut n1, &mut n2);
                }
                if t1 > tmin {
                    tmin = t1;
                    nmin = n1;
                }
                if t2 < tmax {
                    tmax = t2;
                    nmax = n2;
                }
                if tmin > tmax {
                    return None;
                }
            }
            if tmin > 1e-9 {
                Some((tmin, rot * nmin))
            } else if tmax > 1e-9 {
                Some((tmax, rot * nmax))
            } else {
                None
            }
        }
    }
}

/// Closest hit along `origin + t * dir`, `t > 0`.
pub fn raycast(objects: &[SceneObject], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, o) in objects.iter().enumerate() {
        if let Some((t, normal)) = intersect(o, origin, dir) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, object: i });
            }
        }
    }
    best
}

/// Smooth pattern in [-1, 1] fixed to world space, with a wavelength of a
/// few pixels at room scale so it varies along every surface orientation.
fn pattern(p: &Vector3<f64>) -> f64 {
    let k = std::f64::consts::TAU / 0.45;
    ((k * p.x + 1.3 * p.y).sin() + (k * p.y + 0.7 * p.z + 1.0).sin() + (k * p.z + 0.9 * p.x + 2.0).sin()) / 3.0
}

fn shade(o: &SceneObject, point: &Vector3<f64>, normal: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
    let n = if normal.dot(dir) > 0.0 { -normal } else { *normal };
    let lambert = n.dot(&light_dir()).max(0.0);
    let mut k = AMBIENT + (1.0 - AMBIENT) * lambert;
    if o.texture != 0.0 {
        k *= 1.0 + o.texture * pattern(point);
    }
    o.color.map(|c| (c * k).clamp(0.0, 1.0))
}

/// Ray-casts one view. Misses keep color 0, depth 0 (invalid) and label 0.
pub fn render_oracle(objects: &[SceneObject], pose: &RigidPose, k: &Intrinsics) -> Frame {
    let (w, h) = (k.width, k.height);
    let rot = pose.rotation_matrix();
    let origin = *pose.translation();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut color = vec![0.0; 3 * w];
            let mut depth = vec![0.0; w];
            let mut labels = vec![0u32; w];
            for x in 0..w {
                let dc = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let dir = rot * dc;
                if let Some(hit) = raycast(objects, &origin, &dir) {
                    let o = &objects[hit.object];
                    let point = origin + hit.t * dir;
                    color[3 * x..3 * x + 3].copy_from_slice(&shade(o, &point, &hit.normal, &dir));
                    depth[x] = hit.t;
                    labels[x] = o.class_id;
                }
            }
            (color, depth, labels)
        })
        .collect();
    let mut color = Vec::with_capacity(3 * w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for (c, d, l) in rows {
        color.extend(c);
        depth.extend(d);
        labels.extend(l);
    }
    Frame::new(w, h, color).with_depth(depth).with_labels(labels)
}

/// Camera-to-world poses along the trajectory.
pub fn camera_poses(spec: &SceneSpec) -> Vec<RigidPose> {
    let n = spec.frame_count;
    let up = Vector3::z();
    let frac = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    match &spec.trajectory {
        TrajectorySpec::Orbit {
            target,
            radius,
            height,
            start_angle,
            arc,
        } => {
            let target = Vector3::from(*target);
            (0..n)
                .map(|i| {
                    let a = start_angle + arc * frac(i);
                    let eye = Vector3::new(target.x + radius * a.cos(), target.y + radius * a.sin(), *height);
                    RigidPose::look_at(eye, target, up)
                })
                .collect()
        }
        TrajectorySpec::Lawnmower {
            origin,
            row_length,
            row_spacing,
            rows,
            look_ahead,
        } => {
            let rows = (*rows).max(1);
            let total = row_length * rows as f64;
            let ahead = Vector3::from(*look_ahead);
            (0..n)
                .map(|i| {
                    let s = total * frac(i);
                    let row = ((s / row_length) as usize).min(rows - 1);
                    let along = s - row as f64 * row_length;
                    let x = if row.is_multiple_of(2) { along } else { row_length - along };
                    let eye = Vector3::from(*origin) + Vector3::new(x, row as f64 * row_spacing, 0.0);
                    RigidPose::look_at(eye, eye + ahead, up)
                })
                .collect()
        }
        TrajectorySpec::Static { eye, target } => {
            vec![RigidPose::look_at(Vector3::from(*eye), Vector3::from(*target), up); n]
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleFrame {
    pub frame: Frame,
    pub pose: RigidPose,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<OracleFrame>,
    pub intrinsics: Intrinsics,
    pub tree: SemanticTree,
}

pub fn generate(spec: &SceneSpec) -> Result<Sequence, SynthError> {
    spec.validate()?;
    let k = spec.intrinsics();
    let frames = camera_poses(spec)
        .into_iter()
        .map(|pose| OracleFrame {
            frame: render_oracle(&spec.objects, &pose, &k),
            pose,
        })
        .collect();
    Ok(Sequence {
        frames,
        intrinsics: k,
        tree: toy_taxonomy(),
    })
}
