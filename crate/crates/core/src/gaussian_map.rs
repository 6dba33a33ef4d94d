//! The global map of isotropic semantic Gaussians.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{is_valid_depth, Frame};
use crate::geometry::{unproject, Intrinsics, RigidPose};
use crate::rasterizer::RenderedMaps;
use crate::semantic_tree::LayoutKind;

const MAGIC: &[u8; 4] = b"HSPP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("frame has no valid depth")]
    NoValidDepth,
    #[error("semantic vector has length {got}, map expects {expected}")]
    SemanticWidth { expected: usize, got: usize },
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub radius: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub sem: Vec<f64>,
}

/// Initialization, densification and pruning parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub init_opacity: f64,
    /// Radius at birth in units of the pixel footprint `depth / f_mean`.
    pub radius_scale: f64,
    /// Take every n-th pixel in both directions when spawning primitives.
    pub pixel_stride: usize,
    /// Semantic entries start uniform in `[0, sem_init_max]`.
    pub sem_init_max: f64,
    pub densify_silhouette: f64,
    pub densify_depth_rel: f64,
    pub prune_opacity: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            init_opacity: 0.5,
            radius_scale: 1.0,
            pixel_stride: 1,
            sem_init_max: 1e-4,
            densify_silhouette: 0.5,
            densify_depth_rel: 0.05,
            prune_opacity: 0.005,
            seed: 0,
        }
    }
}

/// Struct-of-arrays storage; all primitives share one semantic width.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMap {
    layout: LayoutKind,
    sem_width: usize,
    pub(crate) means: Vec<Vector3<f64>>,
    pub(crate) radii: Vec<f64>,
    pub(crate) opacities: Vec<f64>,
    pub(crate) colors: Vec<[f64; 3]>,
    pub(crate) sem: Vec<f64>,
    pub(crate) birth: Vec<u32>,
}

impl GaussianMap {
    pub fn new(layout: LayoutKind, sem_width: usize) -> Self {
        Self {
            layout,
            sem_width,
            means: Vec::new(),
            radii: Vec::new(),
            opacities: Vec::new(),
            colors: Vec::new(),
            sem: Vec::new(),
            birth: Vec::new(),
        }
    }

    pub fn layout(&self) -> LayoutKind {
        self.layout
    }

    pub fn sem_width(&self) -> usize {
        self.sem_width
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, p: GaussianPrimitive, birth_frame: u32) -> Result<(), MapError> {
        if p.sem.len() != self.sem_width {
            return Err(MapError::SemanticWidth {
                expected: self.sem_width,
                got: p.sem.len(),
            });
        }
        if !(p.radius > 0.0) {
            return Err(MapError::InvalidPrimitive(format!("radius {}", p.radius)));
        }
        self.means.push(p.mu);
        self.radii.push(p.radius);
        self.opacities.push(p.opacity.clamp(0.0, 1.0));
        self.colors.push(p.color);
        self.sem.extend_from_slice(&p.sem);
        self.birth.push(birth_frame);
        Ok(())
    }

    pub fn get(&self, i: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            mu: self.means[i],
            radius: self.radii[i],
            opacity: self.opacities[i],
            color: self.colors[i],
            sem: self.sem_of(i).to_vec(),
        }
    }

    pub fn mean(&self, i: usize) -> &Vector3<f64> {
        &self.means[i]
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.radii[i]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.opacities[i]
    }

    pub fn color(&self, i: usize) -> &[f64; 3] {
        &self.colors[i]
    }

    pub fn sem_of(&self, i: usize) -> &[f64] {
        &self.sem[i * self.sem_width..(i + 1) * self.sem_width]
    }

    pub fn birth_frame(&self, i: usize) -> u32 {
        self.birth[i]
    }

    /// Overwrites primitive `i`, keeping its birth frame.
    pub fn set(&mut self, i: usize, p: GaussianPrimitive) -> Result<(), MapError> {
        if p.sem.len() != self.sem_width {
            return Err(MapError::SemanticWidth {
                expected: self.sem_width,
                got: p.sem.len(),
            });
        }
        if !(p.radius > 0.0) {
            return Err(MapError::InvalidPrimitive(format!("radius {}", p.radius)));
        }
        self.means[i] = p.mu;
        self.radii[i] = p.radius;
        self.opacities[i] = p.opacity.clamp(0.0, 1.0);
        self.colors[i] = p.color;
        let w = self.sem_width;
        self.sem[i * w..(i + 1) * w].copy_from_slice(&p.sem);
        Ok(())
    }

    pub fn set_opacity(&mut self, i: usize, o: f64) {
        self.opacities[i] = o.clamp(0.0, 1.0);
    }

    /// Drops every primitive for which `keep` is false, preserving order.
    pub fn retain_by(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.len());
        let w = self.sem_width;
        let mut out = 0;
        for i in 0..self.len() {
            if !keep[i] {
                continue;
            }
            if out != i {
                self.means[out] = self.means[i];
                self.radii[out] = self.radii[i];
                self.opacities[out] = self.opacities[i];
                self.colors[out] = self.colors[i];
                self.birth[out] = self.birth[i];
                self.sem.copy_within(i * w..(i + 1) * w, out * w);
            }
            out += 1;
        }
        let removed = self.len() - out;
        self.means.truncate(out);
        self.radii.truncate(out);
        self.opacities.truncate(out);
        self.colors.truncate(out);
        self.birth.truncate(out);
        self.sem.truncate(out * w);
        removed
    }

    /// Rounds every stored scalar through f32, matching a checkpoint reload.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        for m in &mut self.means {
            m.iter_mut().for_each(q);
        }
        self.radii.iter_mut().for_each(q);
        self.opacities.iter_mut().for_each(q);
        for c in &mut self.colors {
            c.iter_mut().for_each(q);
        }
        self.sem.iter_mut().for_each(q);
    }

    /// Writes the packed little-endian checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), MapError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.sem_width as u32).to_le_bytes())?;
        for i in 0..self.len() {
            let m = &self.means[i];
            let c = &self.colors[i];
            let fixed = [m.x, m.y, m.z, self.radii[i], self.opacities[i], c[0], c[1], c[2]];
            for v in fixed.iter().chain(self.sem_of(i)) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, layout: LayoutKind) -> Result<Self, MapError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, layout)
    }

    pub fn read_from(r: &mut impl Read, layout: LayoutKind) -> Result<Self, MapError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MapError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(MapError::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let width = u32::from_le_bytes(b4) as usize;
        let mut map = GaussianMap::new(layout, width);
        let mut vals = vec![0f64; 8 + width];
        for _ in 0..count {
            for v in vals.iter_mut() {
                r.read_exact(&mut b4)?;
                *v = f32::from_le_bytes(b4) as f64;
            }
            map.push(
                GaussianPrimitive {
                    mu: Vector3::new(vals[0], vals[1], vals[2]),
                    radius: vals[3],
                    opacity: vals[4],
                    color: [vals[5], vals[6], vals[7]],
                    sem: vals[8..].to_vec(),
                },
                0,
            )?;
        }
        Ok(map)
    }
}

fn spawn(
    map: &mut GaussianMap,
    frame: &Frame,
    pixel: usize,
    depth: f64,
    pose: &RigidPose,
    k: &Intrinsics,
    config: &MapConfig,
    rng: &mut ChaCha8Rng,
    birth_frame: u32,
) -> Result<(), MapError> {
    let (x, y) = (pixel % frame.width, pixel / frame.width);
    let mu = unproject(&Vector2::new(x as f64, y as f64), depth, pose, k);
    let radius = depth / k.focal_mean() * config.radius_scale;
    let color = [
        frame.color[3 * pixel],
        frame.color[3 * pixel + 1],
        frame.color[3 * pixel + 2],
    ];
    let sem = (0..map.sem_width())
        .map(|_| rng.random_range(0.0..=config.sem_init_max))
        .collect();
    map.push(
        GaussianPrimitive {
            mu,
            radius,
            opacity: config.init_opacity,
            color,
            sem,
        },
        birth_frame,
    )
}

fn strided(frame: &Frame, stride: usize) -> impl Iterator<Item = usize> + '_ {
    let s = stride.max(1);
    (0..frame.height)
        .step_by(s)
        .flat_map(move |y| (0..frame.width).step_by(s).map(move |x| y * frame.width + x))
}

/// One primitive per sampled pixel with a valid depth.
pub fn init_from_frame(
    frame: &Frame,
    pose: &RigidPose,
    k: &Intrinsics,
    layout: LayoutKind,
    sem_width: usize,
    config: &MapConfig,
    frame_index: u32,
) -> Result<GaussianMap, MapError> {
    let depth = frame.depth.as_ref().ok_or(MapError::NoValidDepth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (frame_index as u64).wrapping_mul(0x9E37_79B9));
    let mut map = GaussianMap::new(layout, sem_width);
    for i in strided(frame, config.pixel_stride) {
        if is_valid_depth(depth[i]) {
            spawn(&mut map, frame, i, depth[i], pose, k, config, &mut rng, frame_index)?;
        }
    }
    if map.is_empty() {
        return Err(MapError::NoValidDepth);
    }
    Ok(map)
}

/// Pixels that need new primitives: valid depth and either low coverage or a
/// large relative depth disagreement.
pub fn densify_mask(frame: &Frame, rendered: &RenderedMaps, config: &MapConfig) -> Vec<bool> {
    let n = frame.pixel_count();
    let mut mask = vec![false; n];
    let Some(depth) = frame.depth.as_ref() else {
        return mask;
    };
    for i in 0..n {
        let d = depth[i];
        if !is_valid_depth(d) {
            continue;
        }
        let low_cover = rendered.silhouette[i] < config.densify_silhouette;
        let depth_off = (rendered.depth[i] - d).abs() > config.densify_depth_rel * d;
        mask[i] = low_cover || depth_off;
    }
    mask
}

/// Adds primitives at pixels selected by [`densify_mask`]; returns the count.
pub fn densify(
    map: &mut GaussianMap,
    frame: &Frame,
    rendered: &RenderedMaps,
    pose: &RigidPose,
    k: &Intrinsics,
    config: &MapConfig,
    frame_index: u32,
) -> Result<usize, MapError> {
    let mask = densify_mask(frame, rendered, config);
    let depth = match frame.depth.as_ref() {
        Some(d) => d,
        None => return Ok(0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(
        config.seed ^ (frame_index as u64).wrapping_mul(0x9E37_79B9) ^ (map.len() as u64) << 20,
    );
    let s = config.pixel_stride.max(1);
    let mut added = 0;
    for (i, &m) in mask.iter().enumerate() {
        let (x, y) = (i % frame.width, i / frame.width);
        if m && x % s == 0 && y % s == 0 {
            spawn(map, frame, i, depth[i], pose, k, config, &mut rng, frame_index)?;
            added += 1;
        }
    }
    Ok(added)
}

/// Removes primitives whose opacity fell below the configured floor.
pub fn prune(map: &mut GaussianMap, config: &MapConfig) -> usize {
    let keep: Vec<bool> = map.opacities.iter().map(|&o| o >= config.prune_opacity).collect();
    map.retain_by(&keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub geometry_bytes: usize,
    pub color_bytes: usize,
    pub semantic_bytes: usize,
    pub total_bytes: usize,
}

/// Parameter storage by field group at a fixed per-scalar width.
pub fn storage_report(map: &GaussianMap, bytes_per_scalar: usize) -> StorageReport {
    let n = map.len();
    let geometry_bytes = n * 5 * bytes_per_scalar;
    let color_bytes = n * 3 * bytes_per_scalar;
    let semantic_bytes = n * map.sem_width() * bytes_per_scalar;
    StorageReport {
        geometry_bytes,
        color_bytes,
        semantic_bytes,
        total_bytes: geometry_bytes + color_bytes + semantic_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k2() -> Intrinsics {
        Intrinsics::new(2.0, 2.0, 0.5, 0.5, 2, 2).unwrap()
    }

    fn uniform_frame(w: usize, h: usize, depth: f64) -> Frame {
        Frame::new(w, h, vec![0.5; 3 * w * h]).with_depth(vec![depth; w * h])
    }

    fn map_with(opacities: &[f64]) -> GaussianMap {
        let mut m = GaussianMap::new(LayoutKind::Onehot, 2);
        for (i, &o) in opacities.iter().enumerate() {
            m.push(
                GaussianPrimitive {
                    mu: Vector3::new(i as f64, 0.0, 1.0),
                    radius: 0.1,
                    opacity: o,
                    color: [0.1, 0.2, 0.3],
                    sem: vec![i as f64, 0.0],
                },
                0,
            )
            .unwrap();
        }
        m
    }

    #[test]
    fn init_unprojects_every_pixel() {
        let f = uniform_frame(2, 2, 1.0);
        let k = k2();
        let map = init_from_frame(&f, &RigidPose::identity(), &k, LayoutKind::Onehot, 3, &MapConfig::default(), 0).unwrap();
        assert_eq!(map.len(), 4);
        let expected = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
        for (i, (x, y)) in expected.iter().enumerate() {
            let m = map.mean(i);
            assert!((m.x - x).abs() < 1e-12 && (m.y - y).abs() < 1e-12 && (m.z - 1.0).abs() < 1e-12);
            assert!((map.radius(i) - 0.5).abs() < 1e-12);
            assert_eq!(map.opacity(i), 0.5);
            assert!(map.sem_of(i).iter().all(|&s| (0.0..=1e-4).contains(&s)));
        }
    }

    #[test]
    fn init_without_depth_fails() {
        let f = uniform_frame(2, 2, 0.0);
        let err = init_from_frame(&f, &RigidPose::identity(), &k2(), LayoutKind::Onehot, 1, &MapConfig::default(), 0);
        assert!(matches!(err, Err(MapError::NoValidDepth)));
    }

    #[test]
    fn prune_removes_transparent_primitives() {
        let cfg = MapConfig::default();
        let mut m = map_with(&[0.9, 0.9, 0.9]);
        assert_eq!(prune(&mut m, &cfg), 0);
        let mut m = map_with(&[0.9, 1e-4, 0.8, 0.7]);
        assert_eq!(prune(&mut m, &cfg), 1);
        assert_eq!(m.len(), 3);
        // survivors keep their order
        assert_eq!(m.sem_of(0)[0], 0.0);
        assert_eq!(m.sem_of(1)[0], 2.0);
        assert_eq!(m.sem_of(2)[0], 3.0);
    }

    #[test]
    fn prune_matches_filter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ops: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..0.02)).collect();
        let mut m = map_with(&ops);
        let cfg = MapConfig::default();
        let survivors: Vec<f64> = ops.iter().copied().filter(|&o| o >= cfg.prune_opacity).collect();
        let removed = prune(&mut m, &cfg);
        assert_eq!(removed, ops.len() - survivors.len());
        assert_eq!(m.opacities, survivors);
    }

    #[test]
    fn storage_arithmetic() {
        let empty = GaussianMap::new(LayoutKind::Flat, 102);
        let r = storage_report(&empty, 4);
        assert_eq!(r.total_bytes, 0);
        let mut m = GaussianMap::new(LayoutKind::Flat, 102);
        for _ in 0..1000 {
            m.push(
                GaussianPrimitive {
                    mu: Vector3::zeros(),
                    radius: 1.0,
                    opacity: 1.0,
                    color: [0.0; 3],
                    sem: vec![0.0; 102],
                },
                0,
            )
            .unwrap();
        }
        let r = storage_report(&m, 4);
        assert_eq!(r.semantic_bytes, 1000 * 102 * 4);
        assert_eq!(r.total_bytes, r.geometry_bytes + r.color_bytes + r.semantic_bytes);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = map_with(&[0.9, 0.3]);
        m.quantize_f32();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HSPP");
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 2 * (8 + 2) * 4);
        let back = GaussianMap::read_from(&mut buf.as_slice(), LayoutKind::Onehot).unwrap();
        assert_eq!(back.means, m.means);
        assert_eq!(back.sem, m.sem);
        assert_eq!(back.opacities, m.opacities);
    }

    #[test]
    fn push_rejects_bad_primitives() {
        let mut m = GaussianMap::new(LayoutKind::Binary, 3);
        let p = GaussianPrimitive {
            mu: Vector3::zeros(),
            radius: 1.0,
            opacity: 2.0,
            color: [0.0; 3],
            sem: vec![0.0; 2],
        };
        assert!(matches!(m.push(p.clone(), 0), Err(MapError::SemanticWidth { .. })));
        let p = GaussianPrimitive { sem: vec![0.0; 3], radius: 0.0, ..p };
        assert!(m.push(p.clone(), 0).is_err());
        m.push(GaussianPrimitive { radius: 0.1, ..p }, 0).unwrap();
        assert_eq!(m.opacity(0), 1.0);
    }
}
