//! On-disk sequences and TUM-style trajectories.
//!
//! ```text
//! root/
//!   manifest.json
//!   color/000000.png   8-bit RGB
//!   depth/000000.png   16-bit, meters = value * depth_scale, 0 = invalid
//!   sem/000000.png     16-bit class ids, 0 = unlabeled
//!   prior/000000.png   16-bit prior depth + prior/000000.json sidecar
//!   gt_traj.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::geometry::{Intrinsics, RigidPose};
use crate::mono_prior::PriorDepth;
use crate::scene_synth::Sequence;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("corrupt image {path}: {message}")]
    CorruptImage { path: PathBuf, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("trajectory line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_color_dir() -> String {
    "color".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub intrinsics: Intrinsics,
    pub frame_count: usize,
    /// Meters per integer depth step.
    pub depth_scale: f64,
    #[serde(default = "default_color_dir")]
    pub color_dir: String,
    #[serde(default)]
    pub depth_dir: Option<String>,
    #[serde(default)]
    pub sem_dir: Option<String>,
    #[serde(default)]
    pub prior_dir: Option<String>,
    #[serde(default)]
    pub gt_trajectory: Option<String>,
    /// Hierarchy over the label ids, relative to the root.
    #[serde(default)]
    pub tree: Option<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.depth_scale > 0.0) {
            return Err(DatasetError::Manifest(format!("depth_scale {}", self.depth_scale)));
        }
        self.intrinsics
            .validate()
            .map_err(|e| DatasetError::Manifest(e.to_string()))
    }
}

/// Side information for a 16-bit prior depth image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSidecar {
    pub scale_to_units: f64,
    pub valid_min: u16,
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join("manifest.json");
        if !path.exists() {
            return Err(DatasetError::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frame_count == 0
    }

    fn file(&self, dir: &str, i: usize, ext: &str) -> Result<PathBuf, DatasetError> {
        let p = self.root.join(dir).join(frame_name(i, ext));
        if i >= self.manifest.frame_count || !p.exists() {
            return Err(DatasetError::MissingFile(p));
        }
        Ok(p)
    }

    fn check_size(&self, path: &Path, w: u32, h: u32) -> Result<(), DatasetError> {
        let k = &self.manifest.intrinsics;
        if w as usize != k.width || h as usize != k.height {
            return Err(DatasetError::CorruptImage {
                path: path.to_path_buf(),
                message: format!("{w}x{h}, manifest says {}x{}", k.width, k.height),
            });
        }
        Ok(())
    }

    fn read_u16(&self, path: &Path) -> Result<Vec<u16>, DatasetError> {
        let img = open_image(path)?.into_luma16();
        self.check_size(path, img.width(), img.height())?;
        Ok(img.into_raw())
    }

    pub fn load_frame(&self, i: usize) -> Result<Frame, DatasetError> {
        let cpath = self.file(&self.manifest.color_dir, i, "png")?;
        let img = open_image(&cpath)?.to_rgb8();
        self.check_size(&cpath, img.width(), img.height())?;
        let color = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        let k = &self.manifest.intrinsics;
        let mut frame = Frame::new(k.width, k.height, color);
        if let Some(dir) = &self.manifest.depth_dir {
            let raw = self.read_u16(&self.file(dir, i, "png")?)?;
            frame = frame.with_depth(raw.into_iter().map(|v| v as f64 * self.manifest.depth_scale).collect());
        }
        if let Some(dir) = &self.manifest.sem_dir {
            let raw = self.read_u16(&self.file(dir, i, "png")?)?;
            frame = frame.with_labels(raw.into_iter().map(u32::from).collect());
        }
        Ok(frame)
    }

    pub fn has_priors(&self) -> bool {
        self.manifest.prior_dir.is_some()
    }

    pub fn load_prior(&self, i: usize) -> Result<PriorDepth, DatasetError> {
        let dir = self
            .manifest
            .prior_dir
            .as_ref()
            .ok_or_else(|| DatasetError::Manifest("no prior_dir".into()))?;
        let raw = self.read_u16(&self.file(dir, i, "png")?)?;
        let side_path = self.file(dir, i, "json")?;
        let side: PriorSidecar = serde_json::from_str(&std::fs::read_to_string(&side_path)?)
            .map_err(|e| DatasetError::Manifest(format!("{}: {e}", side_path.display())))?;
        let depth: Vec<f64> = raw
            .iter()
            .map(|&v| if v >= side.valid_min.max(1) { v as f64 * side.scale_to_units } else { 0.0 })
            .collect();
        Ok(PriorDepth::new(i, depth))
    }

    pub fn gt_trajectory(&self) -> Result<Option<Vec<(f64, RigidPose)>>, DatasetError> {
        match &self.manifest.gt_trajectory {
            None => Ok(None),
            Some(rel) => read_trajectory(&self.root.join(rel)).map(Some),
        }
    }

    pub fn tree_path(&self) -> Option<PathBuf> {
        self.manifest.tree.as_ref().map(|t| self.root.join(t))
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    image::open(path).map_err(|e| DatasetError::CorruptImage {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_u16(path: &Path, w: usize, h: usize, data: Vec<u16>) -> Result<(), DatasetError> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).ok_or_else(|| DatasetError::Encode("buffer size".into()))?;
    img.save(path).map_err(|e| DatasetError::Encode(format!("{}: {e}", path.display())))
}

pub fn encode_depth(d: f64, scale: f64) -> u16 {
    if d > 0.0 && d.is_finite() {
        (d / scale).round().clamp(1.0, u16::MAX as f64) as u16
    } else {
        0
    }
}

/// Writes one frame's images into the dataset layout.
pub fn write_frame(root: &Path, manifest: &DatasetManifest, i: usize, frame: &Frame) -> Result<(), DatasetError> {
    let (w, h) = (frame.width, frame.height);
    let bytes: Vec<u8> = frame
        .color
        .iter()
        .map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| DatasetError::Encode("color size".into()))?;
    let p = root.join(&manifest.color_dir).join(frame_name(i, "png"));
    img.save(&p)
        .map_err(|e| DatasetError::Encode(format!("{}: {e}", p.display())))?;
    if let (Some(dir), Some(depth)) = (&manifest.depth_dir, &frame.depth) {
        let data = depth.iter().map(|&d| encode_depth(d, manifest.depth_scale)).collect();
        save_u16(&root.join(dir).join(frame_name(i, "png")), w, h, data)?;
    }
    if let (Some(dir), Some(labels)) = (&manifest.sem_dir, &frame.labels) {
        let mut data = Vec::with_capacity(labels.len());
        for &l in labels {
            data.push(u16::try_from(l).map_err(|_| DatasetError::Encode(format!("label {l} exceeds 16 bits")))?);
        }
        save_u16(&root.join(dir).join(frame_name(i, "png")), w, h, data)?;
    }
    Ok(())
}

/// Writes a prior depth image with a sidecar choosing a scale that keeps the
/// maximum value within 16 bits.
pub fn write_prior(root: &Path, dir: &str, prior: &PriorDepth, w: usize, h: usize) -> Result<(), DatasetError> {
    let max = prior
        .depth
        .iter()
        .zip(&prior.valid)
        .filter(|(_, &v)| v)
        .map(|(&d, _)| d)
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { max / 60000.0 } else { 1.0 };
    let data = prior
        .depth
        .iter()
        .zip(&prior.valid)
        .map(|(&d, &v)| if v { encode_depth(d, scale) } else { 0 })
        .collect();
    let i = prior.frame_index;
    save_u16(&root.join(dir).join(frame_name(i, "png")), w, h, data)?;
    let side = PriorSidecar {
        scale_to_units: scale,
        valid_min: 1,
    };
    std::fs::write(
        root.join(dir).join(frame_name(i, "json")),
        serde_json::to_string(&side).expect("sidecar serializes"),
    )?;
    Ok(())
}

/// Writes a synthetic sequence (and optional priors) as a dataset.
pub fn write_sequence(
    root: &Path,
    seq: &Sequence,
    depth_scale: f64,
    priors: Option<&[PriorDepth]>,
) -> Result<DatasetManifest, DatasetError> {
    let manifest = DatasetManifest {
        intrinsics: seq.intrinsics,
        frame_count: seq.frames.len(),
        depth_scale,
        color_dir: default_color_dir(),
        depth_dir: Some("depth".into()),
        sem_dir: Some("sem".into()),
        prior_dir: priors.map(|_| "prior".into()),
        gt_trajectory: Some("gt_traj.txt".into()),
        tree: Some("tree.json".into()),
    };
    manifest.validate()?;
    for d in ["color", "depth", "sem"] {
        std::fs::create_dir_all(root.join(d))?;
    }
    for (i, f) in seq.frames.iter().enumerate() {
        write_frame(root, &manifest, i, &f.frame)?;
    }
    if let Some(priors) = priors {
        std::fs::create_dir_all(root.join("prior"))?;
        for p in priors {
            write_prior(root, "prior", p, seq.intrinsics.width, seq.intrinsics.height)?;
        }
    }
    let traj: Vec<(f64, RigidPose)> = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| (i as f64, f.pose))
        .collect();
    write_trajectory(&root.join("gt_traj.txt"), &traj)?;
    std::fs::write(root.join("tree.json"), seq.tree.to_json())?;
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(manifest)
}

/// `timestamp tx ty tz qx qy qz qw` per line; `#` comments and blank lines skipped.
pub fn parse_trajectory(text: &str) -> Result<Vec<(f64, RigidPose)>, DatasetError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| DatasetError::Parse { line: n + 1, message };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let qn = (vals[4] * vals[4] + vals[5] * vals[5] + vals[6] * vals[6] + vals[7] * vals[7]).sqrt();
        if qn < 1e-12 {
            return Err(err("zero quaternion".into()));
        }
        let pose = RigidPose::from_parts(vals[4], vals[5], vals[6], vals[7], Vector3::new(vals[1], vals[2], vals[3]));
        out.push((vals[0], pose));
    }
    Ok(out)
}

pub fn format_trajectory(traj: &[(f64, RigidPose)]) -> String {
    let mut s = String::new();
    for (ts, p) in traj {
        let t = p.translation();
        let q = p.rotation().quaternion();
        writeln!(s, "{ts} {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w).expect("string write");
    }
    s
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, RigidPose)>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    parse_trajectory(&std::fs::read_to_string(path)?)
}

pub fn write_trajectory(path: &Path, traj: &[(f64, RigidPose)]) -> Result<(), DatasetError> {
    std::fs::write(path, format_trajectory(traj))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_line() {
        let t = parse_trajectory("0 0 0 0 0 0 0 1\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].0, 0.0);
        assert_eq!(t[0].1.distance(&RigidPose::identity()), (0.0, 0.0));
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = "# header\n0 0 0 0 0 0 0 1\n1 0 0 x 0 0 0 1\n";
        match parse_trajectory(text) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_trajectory("0 1 2 3\n") {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn depth_steps() {
        assert_eq!(encode_depth(1.0, 0.0002), 5000);
        assert_eq!(encode_depth(0.0, 0.0002), 0);
        assert_eq!(encode_depth(f64::NAN, 0.0002), 0);
        assert_eq!(5000.0 * 0.0002, 1.0);
    }
}
