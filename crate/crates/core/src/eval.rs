//! Trajectory, reconstruction and segmentation metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidPose;
use crate::losses;
use crate::semantic_tree::{SemanticTree, TreeError};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectories differ: {estimated} estimated vs {ground_truth} ground-truth poses")]
    LengthMismatch { estimated: usize, ground_truth: usize },
    #[error("timestamp mismatch at pose {0}")]
    TimestampMismatch(usize),
    #[error("no valid pixel")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("level {level} out of range for a {depth}-level tree")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Rotation and translation minimizing `Σ |R a_i + t − b_i|²` (Kabsch).
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len().max(1) as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - cb) * (p - ca).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    (r, cb - r * ca)
}

/// RMSE of camera positions after rigid alignment, in centimeters.
pub fn ate_rmse(estimated: &[RigidPose], ground_truth: &[RigidPose]) -> Result<f64, EvalError> {
    if estimated.len() != ground_truth.len() || estimated.is_empty() {
        return Err(EvalError::LengthMismatch {
            estimated: estimated.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let a: Vec<Vector3<f64>> = estimated.iter().map(|p| *p.translation()).collect();
    let b: Vec<Vector3<f64>> = ground_truth.iter().map(|p| *p.translation()).collect();
    let (r, t) = align_rigid(&a, &b);
    let sq: f64 = a.iter().zip(&b).map(|(p, q)| (r * p + t - q).norm_squared()).sum();
    Ok(100.0 * (sq / a.len() as f64).sqrt())
}

/// As [`ate_rmse`], after checking the timestamps pair up.
pub fn ate_rmse_timed(estimated: &[(f64, RigidPose)], ground_truth: &[(f64, RigidPose)]) -> Result<f64, EvalError> {
    if estimated.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            estimated: estimated.len(),
            ground_truth: ground_truth.len(),
        });
    }
    for (i, (e, g)) in estimated.iter().zip(ground_truth).enumerate() {
        if (e.0 - g.0).abs() > 1e-6 {
            return Err(EvalError::TimestampMismatch(i));
        }
    }
    let e: Vec<RigidPose> = estimated.iter().map(|p| p.1).collect();
    let g: Vec<RigidPose> = ground_truth.iter().map(|p| p.1).collect();
    ate_rmse(&e, &g)
}

/// Diagonal of the bounding box of the camera positions, in meters.
pub fn trajectory_extent(poses: &[RigidPose]) -> f64 {
    let Some(first) = poses.first() else {
        return 0.0;
    };
    let (mut lo, mut hi) = (*first.translation(), *first.translation());
    for p in poses {
        lo = lo.inf(p.translation());
        hi = hi.sup(p.translation());
    }
    (hi - lo).norm()
}

/// Mean absolute depth error over pixels with valid ground truth, in centimeters.
pub fn depth_l1(rendered: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    if rendered.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(format!("{} vs {}", rendered.len(), gt.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, g) in rendered.iter().zip(gt) {
        if *g > 0.0 && g.is_finite() {
            sum += (r - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(100.0 * sum / n as f64)
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::ShapeMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Windowed SSIM of interleaved RGB images.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, EvalError> {
    if a.len() != b.len() || a.len() != 3 * width * height {
        return Err(EvalError::ShapeMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    Ok(losses::ssim(a, b, width, height, 3))
}

/// Which classes enter the mIoU average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouAveraging {
    /// Classes that occur in the ground truth.
    #[default]
    GtPresent,
    /// Classes that occur in the ground truth or the prediction.
    AnyPresent,
}

/// Confusion counts at one tree level, accumulated over frames.
#[derive(Debug, Clone, PartialEq)]
pub struct IouCounts {
    pub level: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub pixels: u64,
}

impl IouCounts {
    pub fn new(tree: &SemanticTree, level: usize) -> Result<Self, EvalError> {
        if level >= tree.depth() {
            return Err(EvalError::LevelOutOfRange {
                level,
                depth: tree.depth(),
            });
        }
        let n = tree.level_len(level);
        Ok(Self {
            level,
            tp: vec![0; n],
            fp: vec![0; n],
            fn_: vec![0; n],
            pixels: 0,
        })
    }

    /// Adds one frame of decoded class predictions against class labels;
    /// unlabeled ground-truth pixels (0) are skipped.
    pub fn add(&mut self, tree: &SemanticTree, pred: &[u32], gt: &[u32]) -> Result<(), EvalError> {
        if pred.len() != gt.len() {
            return Err(EvalError::ShapeMismatch(format!("{} vs {}", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == 0 {
                continue;
            }
            let gn = tree.path_of(g)?.0[self.level];
            let pn = tree.path_of(p)?.0[self.level];
            self.pixels += 1;
            if gn == pn {
                self.tp[gn] += 1;
            } else {
                self.fn_[gn] += 1;
                self.fp[pn] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU in percent; `None` when no class qualifies.
    pub fn miou(&self, averaging: MiouAveraging) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..self.tp.len() {
            let in_gt = self.tp[c] + self.fn_[c] > 0;
            let in_pred = self.tp[c] + self.fp[c] > 0;
            let take = match averaging {
                MiouAveraging::GtPresent => in_gt,
                MiouAveraging::AnyPresent => in_gt || in_pred,
            };
            if take {
                sum += self.tp[c] as f64 / (self.tp[c] + self.fp[c] + self.fn_[c]) as f64;
                n += 1;
            }
        }
        (n > 0).then(|| 100.0 * sum / n as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        (self.pixels > 0).then(|| 100.0 * self.tp.iter().sum::<u64>() as f64 / self.pixels as f64)
    }
}

/// mIoU in percent of one labelled image at a tree level. Returns 100 when
/// the ground truth carries no labels and nothing can be wrong.
pub fn miou(pred: &[u32], gt: &[u32], tree: &SemanticTree, level: usize) -> Result<f64, EvalError> {
    let mut c = IouCounts::new(tree, level)?;
    c.add(tree, pred, gt)?;
    Ok(c.miou(MiouAveraging::GtPresent).unwrap_or(100.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub track_ms_per_iter: f64,
    pub map_ms_per_iter: f64,
}

/// Run summary. Lengths in centimeters, PSNR in dB, mIoU in percent from
/// the coarsest level to the finest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_rmse: Option<f64>,
    pub depth_l1: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub miou_per_level: Vec<f64>,
    pub runtime: Runtime,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic_tree::{TreeDocument, TreeNode};

    fn two_level() -> SemanticTree {
        let doc = TreeDocument {
            levels: vec![
                vec![TreeNode { name: "x".into(), parent: None }],
                vec![
                    TreeNode { name: "a".into(), parent: Some(0) },
                    TreeNode { name: "b".into(), parent: Some(0) },
                ],
            ],
            classes: [(1, 0), (2, 1)].into_iter().collect(),
        };
        SemanticTree::from_document(doc).unwrap()
    }

    #[test]
    fn psnr_formula() {
        let a = vec![0.0; 100];
        let b = vec![0.1; 100];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn constant_prediction_two_classes() {
        let t = two_level();
        let m = miou(&[1, 1, 1, 1], &[1, 1, 2, 2], &t, 1).unwrap();
        assert!((m - 25.0).abs() < 1e-12);
        assert_eq!(miou(&[1, 1, 1, 1], &[1, 1, 2, 2], &t, 0).unwrap(), 100.0);
    }

    #[test]
    fn level_out_of_range() {
        let t = two_level();
        assert_eq!(
            miou(&[1], &[1], &t, 2),
            Err(EvalError::LevelOutOfRange { level: 2, depth: 2 })
        );
    }

    #[test]
    fn unlabeled_pixels_are_ignored() {
        let t = two_level();
        assert_eq!(miou(&[2, 1], &[0, 1], &t, 1).unwrap(), 100.0);
    }

    #[test]
    fn depth_offset() {
        let r = vec![1.02; 10];
        let g = vec![1.0; 10];
        assert!((depth_l1(&r, &g).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(depth_l1(&r, &[0.0; 10]), Err(EvalError::EmptyMask));
    }
}
