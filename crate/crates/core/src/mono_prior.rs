//! Scale-ambiguous depth priors and their per-frame affine correction.
//!
//! A prior `D̂` is mapped to metric depth as `λ D̂ + τ`. The pair is first
//! fitted in closed form against the current rendering, then refined jointly
//! with the map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::Adam;

#[derive(Debug, Error, PartialEq)]
pub enum MonoError {
    #[error("no pixel is both visible and covered by the prior")]
    EmptyMask,
    #[error("prior is constant over the mask; falling back to λ=1, τ={}", .fallback.tau)]
    DegeneratePrior { fallback: AffineAlignment },
    #[error("image set index {index} out of range for {total} frames")]
    OutOfRange { index: usize, total: usize },
    #[error("invalid image set spec: {0}")]
    InvalidSpec(String),
    #[error("prior has {got} pixels, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSetSpec {
    pub start: usize,
    pub count: usize,
    pub skip: usize,
}

impl Default for ImageSetSpec {
    fn default() -> Self {
        Self {
            start: 0,
            count: 5,
            skip: 3,
        }
    }
}

impl ImageSetSpec {
    fn validate(&self) -> Result<(), MonoError> {
        if self.count < 2 || self.skip < 1 {
            return Err(MonoError::InvalidSpec(format!(
                "need count >= 2 and skip >= 1, got count={} skip={}",
                self.count, self.skip
            )));
        }
        Ok(())
    }

    /// Frames spanned by one set.
    pub fn span(&self) -> usize {
        self.count * self.skip
    }
}

/// Sets `{i0 + skip·(s−1) : s = 1..=count}` starting at `spec.start` and then
/// every `stride` frames. The final set is truncated at the sequence end.
pub fn sample_image_sets(total: usize, spec: &ImageSetSpec, stride: usize) -> Result<Vec<Vec<usize>>, MonoError> {
    spec.validate()?;
    if stride == 0 {
        return Err(MonoError::InvalidSpec("stride must be positive".into()));
    }
    if spec.start >= total {
        return Err(MonoError::OutOfRange {
            index: spec.start,
            total,
        });
    }
    let mut sets = Vec::new();
    let mut i0 = spec.start;
    while i0 < total {
        let set: Vec<usize> = (0..spec.count)
            .map(|s| i0 + spec.skip * s)
            .take_while(|&i| i < total)
            .collect();
        sets.push(set);
        i0 += stride;
    }
    Ok(sets)
}

/// First frame of the [`partition_frames`] set that contains `frame`. Frames
/// with the same leader share one alignment.
pub fn set_leader(frame: usize, spec: &ImageSetSpec) -> usize {
    let span = spec.span().max(1);
    let block = frame / span * span;
    block + (frame - block) % spec.skip.max(1)
}

/// Covers every frame: `skip` interleaved phases of sets with stride
/// `count·skip`, ordered by first frame.
pub fn partition_frames(total: usize, spec: &ImageSetSpec) -> Result<Vec<Vec<usize>>, MonoError> {
    spec.validate()?;
    let mut sets = Vec::new();
    for phase in 0..spec.skip.min(total) {
        let s = ImageSetSpec {
            start: phase,
            ..*spec
        };
        sets.extend(sample_image_sets(total, &s, spec.span())?);
    }
    sets.sort_by_key(|s| s[0]);
    Ok(sets)
}

/// A per-frame depth prior in arbitrary units.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDepth {
    pub frame_index: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PriorDepth {
    pub fn new(frame_index: usize, depth: Vec<f64>) -> Self {
        let valid = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Self {
            frame_index,
            depth,
            valid,
        }
    }

    /// `λ D̂ + τ` at valid pixels, 0 elsewhere.
    pub fn aligned(&self, a: &AffineAlignment) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.valid)
            .map(|(&d, &v)| if v { (a.lambda * d + a.tau).max(0.0) } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineAlignment {
    pub lambda: f64,
    pub tau: f64,
}

impl AffineAlignment {
    pub const IDENTITY: Self = Self { lambda: 1.0, tau: 0.0 };
}

pub const MIN_LAMBDA: f64 = 1e-3;

fn alignment_mask(prior: &PriorDepth, rendered: &[f64], silhouette: &[f64], threshold: f64) -> Vec<bool> {
    prior
        .valid
        .iter()
        .zip(rendered.iter().zip(silhouette))
        .map(|(&v, (&d, &s))| v && s > threshold && d > 0.0)
        .collect()
}

fn check_shapes(prior: &PriorDepth, rendered: &[f64], silhouette: &[f64]) -> Result<(), MonoError> {
    for got in [rendered.len(), silhouette.len(), prior.valid.len()] {
        if got != prior.depth.len() {
            return Err(MonoError::ShapeMismatch {
                expected: prior.depth.len(),
                got,
            });
        }
    }
    Ok(())
}

/// Least squares `min Σ_M (λ D̂ + τ − D)²` over pixels visible in the render
/// (`S > threshold`) with a valid prior.
pub fn align_depth(
    prior: &PriorDepth,
    rendered_depth: &[f64],
    silhouette: &[f64],
    threshold: f64,
) -> Result<AffineAlignment, MonoError> {
    check_shapes(prior, rendered_depth, silhouette)?;
    let mask = alignment_mask(prior, rendered_depth, silhouette, threshold);
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(MonoError::EmptyMask);
    }
    let nf = n as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        mx += prior.depth[i];
        my += rendered_depth[i];
    }
    mx /= nf;
    my /= nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let dx = prior.depth[i] - mx;
        sxx += dx * dx;
        sxy += dx * (rendered_depth[i] - my);
    }
    if sxx <= 1e-14 * nf * (1.0 + mx * mx) {
        return Err(MonoError::DegeneratePrior {
            fallback: AffineAlignment {
                lambda: 1.0,
                tau: my - mx,
            },
        });
    }
    let lambda = sxy / sxx;
    Ok(AffineAlignment {
        lambda,
        tau: my - lambda * mx,
    })
}

/// Settings for the refinement of `(λ, τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub reg_weight: f64,
    pub iterations: usize,
    pub lr: f64,
    pub threshold: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            reg_weight: 0.1,
            iterations: 60,
            lr: 0.005,
            threshold: 0.99,
        }
    }
}

/// Adam on `(λ, τ)` with the deviation penalty `reg·(|λ−λ0| + |τ−τ0|)`
/// applied as a proximal shrink toward the initialization.
#[derive(Debug, Clone)]
pub struct AlignmentOptimizer {
    pub init: AffineAlignment,
    pub current: AffineAlignment,
    reg_weight: f64,
    adam: Adam,
}

impl AlignmentOptimizer {
    pub fn new(init: AffineAlignment, reg_weight: f64, lr: f64) -> Self {
        Self {
            init,
            current: init,
            reg_weight,
            adam: Adam::new(2, lr),
        }
    }

    /// One step given the data-term gradient `(dL/dλ, dL/dτ)`.
    pub fn step(&mut self, grad: [f64; 2]) {
        let mut p = [self.current.lambda, self.current.tau];
        let steps = self.adam.step(&mut p, &grad);
        let init = [self.init.lambda, self.init.tau];
        for j in 0..2 {
            let dev = p[j] - init[j];
            let shrink = steps[j] * self.reg_weight;
            p[j] = init[j] + dev.signum() * (dev.abs() - shrink).max(0.0);
        }
        self.current = AffineAlignment {
            lambda: p[0].max(MIN_LAMBDA),
            tau: p[1],
        };
    }

    /// Regularizer value at the current iterate.
    pub fn penalty(&self) -> f64 {
        self.reg_weight
            * ((self.current.lambda - self.init.lambda).abs() + (self.current.tau - self.init.tau).abs())
    }
}

/// Masked L1 between the aligned prior and a fixed rendering, with its
/// gradient in `(λ, τ)`.
pub fn alignment_l1(
    a: &AffineAlignment,
    prior: &PriorDepth,
    rendered_depth: &[f64],
    mask: &[bool],
) -> (f64, [f64; 2]) {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return (0.0, [0.0; 2]);
    }
    let inv = 1.0 / n as f64;
    let (mut loss, mut gl, mut gt) = (0.0, 0.0, 0.0);
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let r = a.lambda * prior.depth[i] + a.tau - rendered_depth[i];
        loss += r.abs() * inv;
        let s = if r > 0.0 {
            inv
        } else if r < 0.0 {
            -inv
        } else {
            0.0
        };
        gl += s * prior.depth[i];
        gt += s;
    }
    (loss, [gl, gt])
}

/// Refines an alignment against a fixed rendering (map held constant).
pub fn refine_alignment(
    init: AffineAlignment,
    prior: &PriorDepth,
    rendered_depth: &[f64],
    silhouette: &[f64],
    config: &RefineConfig,
) -> Result<AffineAlignment, MonoError> {
    check_shapes(prior, rendered_depth, silhouette)?;
    let mask = alignment_mask(prior, rendered_depth, silhouette, config.threshold);
    if !mask.iter().any(|&m| m) {
        return Err(MonoError::EmptyMask);
    }
    let mut opt = AlignmentOptimizer::new(init, config.reg_weight, config.lr);
    for _ in 0..config.iterations {
        let (_, g) = alignment_l1(&opt.current, prior, rendered_depth, &mask);
        opt.step(g);
    }
    Ok(opt.current)
}

/// Source of per-frame priors.
pub trait DepthPriorProvider {
    fn prior(&self, index: usize) -> Result<PriorDepth, MonoError>;
}

/// Oracle depth pushed through a seeded affine distortion per image set,
/// `D̂ = (D − τ) / λ`, plus optional relative Gaussian noise. The set holding
/// frame 0 stays undistorted so the reconstruction keeps metric scale.
#[derive(Debug, Clone)]
pub struct SyntheticPriors {
    priors: Vec<PriorDepth>,
    injected: Vec<AffineAlignment>,
}

impl SyntheticPriors {
    pub fn new(oracle_depths: &[Vec<f64>], spec: &ImageSetSpec, noise: f64, seed: u64) -> Result<Self, MonoError> {
        let total = oracle_depths.len();
        let sets = partition_frames(total, spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut injected = vec![AffineAlignment::IDENTITY; total];
        for set in &sets {
            let a = if set.contains(&0) {
                AffineAlignment::IDENTITY
            } else {
                AffineAlignment {
                    lambda: rng.random_range(0.5f64.ln()..2f64.ln()).exp(),
                    tau: rng.random_range(-0.3..0.3),
                }
            };
            for &i in set {
                injected[i] = a;
            }
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let priors = oracle_depths
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let a = injected[i];
                let depth = d
                    .iter()
                    .map(|&z| {
                        if z > 0.0 {
                            let p = (z - a.tau) / a.lambda;
                            let p = p * (1.0 + noise * normal.sample(&mut rng));
                            if p > 0.0 {
                                p
                            } else {
                                0.0
                            }
                        } else {
                            0.0
                        }
                    })
                    .collect();
                PriorDepth::new(i, depth)
            })
            .collect();
        Ok(Self { priors, injected })
    }

    /// The distortion applied to frame `i`, as the alignment that undoes it.
    pub fn injected(&self, i: usize) -> AffineAlignment {
        self.injected[i]
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn into_priors(self) -> Vec<PriorDepth> {
        self.priors
    }
}

impl DepthPriorProvider for SyntheticPriors {
    fn prior(&self, index: usize) -> Result<PriorDepth, MonoError> {
        self.priors.get(index).cloned().ok_or(MonoError::OutOfRange {
            index,
            total: self.priors.len(),
        })
    }
}
