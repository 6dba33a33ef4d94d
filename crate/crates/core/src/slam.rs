//! Alternating tracking and mapping over a frame stream.
//!
//! Tracking optimizes the camera pose against a frozen map; mapping
//! optimizes every primitive (and the semantic decoder) against fixed poses.
//! In monocular mode the depth target of each frame is an affinely corrected
//! prior whose `(λ, τ)` is refined together with the map.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Dataset, DatasetError};
use crate::eval::{self, IouCounts, Metrics, MiouAveraging, Runtime};
use crate::frame::Frame;
use crate::gaussian_map::{densify, init_from_frame, prune, GaussianMap, MapConfig, MapError};
use crate::geometry::{constant_velocity_predict, skew, Intrinsics, RigidPose};
use crate::losses::{
    mapping_loss, tracking_loss, DecoderGrads, InterLevelDecoder, LabelTable, LossError, SemanticLossWeights,
    SemanticTerm, TrackMapWeights,
};
use crate::mono_prior::{
    align_depth, set_leader, AffineAlignment, AlignmentOptimizer, ImageSetSpec, MonoError, PriorDepth,
    RefineConfig,
};
use crate::optim::Adam;
use crate::rasterizer::{render, render_backward, ParamGrads, RenderOptions, RenderedMaps};
use crate::semantic_tree::{LayoutKind, SemanticCodec, SemanticTree, TreeError};

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("tracking diverged: {0}")]
    TrackingDiverged(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame has no depth target")]
    MissingDepth,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Mono(#[from] MonoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("frame {index}: {source}")]
    AtFrame {
        index: usize,
        #[source]
        source: Box<SlamError>,
    },
}

fn at(index: usize) -> impl FnOnce(SlamError) -> SlamError {
    move |e| match e {
        e @ SlamError::AtFrame { .. } => e,
        e => SlamError::AtFrame {
            index,
            source: Box::new(e),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlamMode {
    #[default]
    Rgbd,
    Mono,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub pose_rotation: f64,
    pub pose_translation: f64,
    pub means: f64,
    pub log_radius: f64,
    pub logit_opacity: f64,
    pub color: f64,
    pub sem: f64,
    pub decoder: f64,
    pub alignment: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            pose_rotation: 0.002,
            pose_translation: 0.004,
            means: 0.001,
            log_radius: 0.01,
            logit_opacity: 0.05,
            color: 0.01,
            sem: 0.05,
            decoder: 0.003,
            alignment: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct MonoConfig {
    pub image_sets: ImageSetSpec,
    pub refine: RefineConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub mode: SlamMode,
    pub tracking_iters: usize,
    pub mapping_iters: usize,
    /// Map every n-th frame (frame 0 always initializes the map).
    pub map_every: usize,
    /// Replay the last few keyframes during mapping.
    pub keyframe_replay: bool,
    pub replay_window: usize,
    pub densify: bool,
    pub prune: bool,
    pub lr: LearningRates,
    pub weights: TrackMapWeights,
    pub semantic_weights: SemanticLossWeights,
    pub map: MapConfig,
    pub render: RenderOptions,
    pub layout: LayoutKind,
    /// Semantic supervision on/off; off also zeroes the map's semantic width.
    pub semantics: bool,
    pub mono: MonoConfig,
    /// Best tracking loss above this counts as divergence.
    pub divergence_loss: f64,
    /// Evaluate every n-th frame in the final metrics pass.
    pub eval_stride: usize,
    pub seed: u64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            mode: SlamMode::Rgbd,
            tracking_iters: 40,
            mapping_iters: 60,
            map_every: 5,
            keyframe_replay: false,
            replay_window: 8,
            densify: true,
            prune: true,
            lr: LearningRates::default(),
            weights: TrackMapWeights::default(),
            semantic_weights: SemanticLossWeights::default(),
            map: MapConfig::default(),
            render: RenderOptions::default(),
            layout: LayoutKind::Onehot,
            semantics: true,
            mono: MonoConfig::default(),
            divergence_loss: 0.75,
            eval_stride: 1,
            seed: 0,
        }
    }
}

impl SlamConfig {
    /// Slower settings that hold the map together over longer sequences:
    /// keyframe replay, many more iterations, robust tracking.
    pub fn quality() -> Self {
        let mut c = Self {
            tracking_iters: 100,
            mapping_iters: 400,
            keyframe_replay: true,
            replay_window: 10,
            eval_stride: 5,
            ..Self::default()
        };
        c.weights.tracking_outlier_factor = Some(10.0);
        c
    }

    pub fn validate(&self) -> Result<(), SlamError> {
        if self.tracking_iters == 0 || self.mapping_iters == 0 || self.map_every == 0 || self.eval_stride == 0 {
            return Err(SlamError::Config("iteration counts and cadences must be at least 1".into()));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("pose_rotation", lr.pose_rotation),
            ("pose_translation", lr.pose_translation),
            ("means", lr.means),
            ("log_radius", lr.log_radius),
            ("logit_opacity", lr.logit_opacity),
            ("color", lr.color),
            ("sem", lr.sem),
            ("decoder", lr.decoder),
            ("alignment", lr.alignment),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SlamError::Config(format!("learning rate {name} must be positive")));
            }
        }
        if self.keyframe_replay && self.replay_window == 0 {
            return Err(SlamError::Config("replay_window must be at least 1".into()));
        }
        if let Some(f) = self.weights.tracking_outlier_factor {
            if !(f > 1.0 && f.is_finite()) {
                return Err(SlamError::Config("tracking_outlier_factor must exceed 1".into()));
            }
        }
        Ok(())
    }
}

/// One input frame. In monocular mode `frame.depth`, when present, is only
/// used for evaluation.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub timestamp: f64,
    pub frame: Frame,
    pub prior: Option<PriorDepth>,
    pub gt_pose: Option<RigidPose>,
}

/// Random access to a sequence.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<FrameInput, SlamError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [FrameInput] {
    fn len(&self) -> usize {
        <[FrameInput]>::len(self)
    }

    fn get(&self, index: usize) -> Result<FrameInput, SlamError> {
        Ok(self[index].clone())
    }
}

impl FrameSource for Vec<FrameInput> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<FrameInput, SlamError> {
        Ok(self[index].clone())
    }
}

/// Frames from a dataset directory with its ground truth and priors.
pub struct DatasetSource {
    dataset: Dataset,
    gt: Option<Vec<(f64, RigidPose)>>,
}

impl DatasetSource {
    pub fn new(dataset: Dataset) -> Result<Self, SlamError> {
        let gt = dataset.gt_trajectory()?;
        if let Some(g) = &gt {
            if g.len() != dataset.len() {
                return Err(SlamError::Dataset(DatasetError::Manifest(format!(
                    "trajectory has {} poses for {} frames",
                    g.len(),
                    dataset.len()
                ))));
            }
        }
        Ok(Self { dataset, gt })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }
}

impl FrameSource for DatasetSource {
    fn len(&self) -> usize {
        self.dataset.len()
    }

    fn get(&self, index: usize) -> Result<FrameInput, SlamError> {
        let frame = self.dataset.load_frame(index)?;
        let prior = if self.dataset.has_priors() {
            Some(self.dataset.load_prior(index)?)
        } else {
            None
        };
        let (timestamp, gt_pose) = match &self.gt {
            Some(g) => (g[index].0, Some(g[index].1)),
            None => (index as f64, None),
        };
        Ok(FrameInput {
            timestamp,
            frame,
            prior,
            gt_pose,
        })
    }
}

/// Right Jacobian of the rotation exponential.
fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let th = w.norm();
    let k = skew(w);
    if th < 1e-8 {
        return Matrix3::identity() - 0.5 * k;
    }
    Matrix3::identity() - (1.0 - th.cos()) / (th * th) * k + (th - th.sin()) / (th * th * th) * k * k
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub pose: RigidPose,
    pub best_loss: f64,
    pub trace: Vec<f64>,
}

/// Pose optimization against a frozen map. `frame.depth` is the depth target.
pub fn track(
    map: &GaussianMap,
    frame: &Frame,
    init: &RigidPose,
    k: &Intrinsics,
    config: &SlamConfig,
) -> Result<TrackResult, SlamError> {
    if map.is_empty() {
        return Err(SlamError::TrackingDiverged("empty map".into()));
    }
    let opts = config.render.clone().without_semantics();
    let mut x_rot = [0.0; 3];
    let mut x_trans = [0.0; 3];
    let mut adam_rot = Adam::new(3, config.lr.pose_rotation);
    let mut adam_trans = Adam::new(3, config.lr.pose_translation);
    let mut best: Option<(f64, RigidPose)> = None;
    let mut trace = Vec::with_capacity(config.tracking_iters);
    let mut empty = 0;
    for _ in 0..config.tracking_iters {
        let xi = Vector6::new(x_rot[0], x_rot[1], x_rot[2], x_trans[0], x_trans[1], x_trans[2]);
        let pose = init.retract(&xi);
        let r = render(map, &pose, k, &opts);
        let eval = match tracking_loss(&r.maps, frame, &config.weights) {
            Ok(e) => e,
            Err(LossError::EmptyMask) => {
                empty += 1;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if !eval.value.is_finite() {
            return Err(SlamError::TrackingDiverged("non-finite tracking loss".into()));
        }
        trace.push(eval.value);
        if best.as_ref().is_none_or(|b| eval.value < b.0) {
            best = Some((eval.value, pose));
        }
        let g = render_backward(&r, map, &pose, &eval.grads).pose;
        let w = Vector3::new(x_rot[0], x_rot[1], x_rot[2]);
        let g_rot = right_jacobian(&w).transpose() * Vector3::new(g[0], g[1], g[2]);
        let g_trans = Rotation3::new(w) * Vector3::new(g[3], g[4], g[5]);
        adam_rot.update(&mut x_rot, g_rot.as_slice());
        adam_trans.update(&mut x_trans, g_trans.as_slice());
    }
    let Some((best_loss, pose)) = best else {
        return Err(SlamError::TrackingDiverged(format!(
            "no pixel passes the silhouette mask ({empty} attempts)"
        )));
    };
    if best_loss > config.divergence_loss {
        return Err(SlamError::TrackingDiverged(format!(
            "best tracking loss {best_loss:.4} exceeds {}",
            config.divergence_loss
        )));
    }
    Ok(TrackResult {
        pose,
        best_loss,
        trace,
    })
}

/// Tracking for the first frame of an image set, whose depth scale is still
/// unknown: the pose comes from the color term alone and the prior is then
/// aligned to the render at that pose.
pub fn track_with_prior(
    map: &GaussianMap,
    frame: &Frame,
    prior: &PriorDepth,
    init: &RigidPose,
    k: &Intrinsics,
    config: &SlamConfig,
) -> Result<(TrackResult, AffineAlignment), SlamError> {
    let mut photometric = config.clone();
    photometric.weights.w1 = 0.0;
    let r = track(map, frame, init, k, &photometric)?;
    let rendered = render(map, &r.pose, k, &config.render.clone().without_semantics());
    let a = align_to_render(prior, &rendered.maps, config.mono.refine.threshold)?;
    Ok((r, a))
}

fn align_to_render(prior: &PriorDepth, maps: &RenderedMaps, threshold: f64) -> Result<AffineAlignment, SlamError> {
    match align_depth(prior, &maps.depth, &maps.silhouette, threshold) {
        Ok(a) => Ok(a),
        Err(MonoError::DegeneratePrior { fallback }) => Ok(fallback),
        Err(MonoError::EmptyMask) => Err(SlamError::TrackingDiverged(
            "no visible pixel to align the depth prior".into(),
        )),
        Err(e) => Err(e.into()),
    }
}

fn logit(o: f64) -> f64 {
    let o = o.clamp(1e-6, 1.0 - 1e-6);
    (o / (1.0 - o)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adam state for every primitive field in unconstrained coordinates.
struct MapOptimizer {
    means: Adam,
    log_radius: Adam,
    logit_opacity: Adam,
    color: Adam,
    sem: Adam,
    p_means: Vec<f64>,
    p_log_radius: Vec<f64>,
    p_logit_opacity: Vec<f64>,
    p_color: Vec<f64>,
    p_sem: Vec<f64>,
}

impl MapOptimizer {
    fn new(map: &GaussianMap, lr: &LearningRates) -> Self {
        let n = map.len();
        let p_means: Vec<f64> = map.means.iter().flat_map(|m| [m.x, m.y, m.z]).collect();
        let p_log_radius: Vec<f64> = map.radii.iter().map(|r| r.ln()).collect();
        let p_logit_opacity: Vec<f64> = map.opacities.iter().map(|&o| logit(o)).collect();
        let p_color: Vec<f64> = map.colors.iter().flatten().copied().collect();
        let p_sem = map.sem.clone();
        Self {
            means: Adam::new(3 * n, lr.means),
            log_radius: Adam::new(n, lr.log_radius),
            logit_opacity: Adam::new(n, lr.logit_opacity),
            color: Adam::new(3 * n, lr.color),
            sem: Adam::new(p_sem.len(), lr.sem),
            p_means,
            p_log_radius,
            p_logit_opacity,
            p_color,
            p_sem,
        }
    }

    fn step(&mut self, map: &mut GaussianMap, g: &ParamGrads) {
        let n = map.len();
        let gm: Vec<f64> = g.means.iter().flat_map(|m| [m.x, m.y, m.z]).collect();
        let gr: Vec<f64> = (0..n).map(|i| g.radii[i] * map.radii[i]).collect();
        let go: Vec<f64> = (0..n)
            .map(|i| g.opacities[i] * map.opacities[i] * (1.0 - map.opacities[i]))
            .collect();
        let gc: Vec<f64> = g.colors.iter().flatten().copied().collect();
        self.means.update(&mut self.p_means, &gm);
        self.log_radius.update(&mut self.p_log_radius, &gr);
        self.logit_opacity.update(&mut self.p_logit_opacity, &go);
        self.color.update(&mut self.p_color, &gc);
        if !self.p_sem.is_empty() {
            self.sem.update(&mut self.p_sem, &g.sem);
        }
        for i in 0..n {
            map.means[i] = Vector3::new(self.p_means[3 * i], self.p_means[3 * i + 1], self.p_means[3 * i + 2]);
            map.radii[i] = self.p_log_radius[i].exp();
            map.opacities[i] = sigmoid(self.p_logit_opacity[i]);
            for c in 0..3 {
                let v = self.p_color[3 * i + c].clamp(0.0, 1.0);
                self.p_color[3 * i + c] = v;
                map.colors[i][c] = v;
            }
        }
        map.sem.copy_from_slice(&self.p_sem);
    }
}

struct DecoderOptimizer {
    w1: Adam,
    b1: Adam,
    w2: Adam,
    b2: Adam,
}

impl DecoderOptimizer {
    fn new(d: &InterLevelDecoder, lr: f64) -> Self {
        Self {
            w1: Adam::new(d.w1.len(), lr),
            b1: Adam::new(d.b1.len(), lr),
            w2: Adam::new(d.w2.len(), lr),
            b2: Adam::new(d.b2.len(), lr),
        }
    }

    fn step(&mut self, d: &mut InterLevelDecoder, g: &DecoderGrads) {
        self.w1.update(&mut d.w1, &g.w1);
        self.b1.update(&mut d.b1, &g.b1);
        self.w2.update(&mut d.w2, &g.w2);
        self.b2.update(&mut d.b2, &g.b2);
    }
}

/// A mapped frame retained for replay.
#[derive(Debug, Clone)]
struct Keyframe {
    index: usize,
    frame: Frame,
    pose: RigidPose,
    prior: Option<PriorDepth>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timing {
    pub track_iters: usize,
    pub track_ms: f64,
    pub map_iters: usize,
    pub map_ms: f64,
}

/// Everything the pipeline carries between frames.
pub struct SlamState {
    pub map: GaussianMap,
    pub trajectory: Vec<(f64, RigidPose)>,
    pub decoder: Option<InterLevelDecoder>,
    pub frame_counter: usize,
    pub alignments: Vec<Option<AffineAlignment>>,
    pub track_traces: Vec<Vec<f64>>,
    pub map_traces: Vec<(usize, Vec<f64>)>,
    pub timing: Timing,
}

pub struct Slam {
    config: SlamConfig,
    k: Intrinsics,
    codec: Option<Arc<SemanticCodec>>,
    table: Option<LabelTable>,
    state: SlamState,
    decoder_opt: Option<DecoderOptimizer>,
    keyframes: VecDeque<Keyframe>,
}

impl Slam {
    pub fn new(config: SlamConfig, k: Intrinsics, tree: Option<Arc<SemanticTree>>) -> Result<Self, SlamError> {
        config.validate()?;
        k.validate().map_err(|e| SlamError::Config(e.to_string()))?;
        let codec = match (config.semantics, tree) {
            (true, Some(t)) => Some(Arc::new(SemanticCodec::new(t, config.layout)?)),
            _ => None,
        };
        let table = codec.as_deref().map(LabelTable::new).transpose()?;
        let decoder = codec
            .as_ref()
            .map(|c| InterLevelDecoder::new(c.width(), c.class_count(), config.seed ^ 0xdec0));
        let decoder_opt = decoder.as_ref().map(|d| DecoderOptimizer::new(d, config.lr.decoder));
        let sem_width = codec.as_ref().map_or(0, |c| c.width());
        Ok(Self {
            state: SlamState {
                map: GaussianMap::new(config.layout, sem_width),
                trajectory: Vec::new(),
                decoder,
                frame_counter: 0,
                alignments: Vec::new(),
                track_traces: Vec::new(),
                map_traces: Vec::new(),
                timing: Timing::default(),
            },
            config,
            k,
            codec,
            table,
            decoder_opt,
            keyframes: VecDeque::new(),
        })
    }

    pub fn state(&self) -> &SlamState {
        &self.state
    }

    pub fn config(&self) -> &SlamConfig {
        &self.config
    }

    pub fn codec(&self) -> Option<&Arc<SemanticCodec>> {
        self.codec.as_ref()
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    pub fn into_state(self) -> SlamState {
        self.state
    }

    /// The frame with its depth target: sensor depth, or the aligned prior.
    fn target_frame(&self, input: &FrameInput, alignment: Option<&AffineAlignment>) -> Result<Frame, SlamError> {
        let mut f = input.frame.clone();
        if self.config.mode == SlamMode::Mono {
            let prior = input.prior.as_ref().ok_or(SlamError::MissingDepth)?;
            f.depth = Some(prior.aligned(alignment.unwrap_or(&AffineAlignment::IDENTITY)));
        } else if f.depth.is_none() {
            return Err(SlamError::MissingDepth);
        }
        if !self.config.semantics {
            f.labels = None;
        }
        Ok(f)
    }

    /// Tracks (or initializes with) one frame and maps it when due.
    pub fn process(&mut self, input: &FrameInput) -> Result<RigidPose, SlamError> {
        let index = self.state.frame_counter;
        self.process_inner(index, input).map_err(at(index))
    }

    fn process_inner(&mut self, index: usize, input: &FrameInput) -> Result<RigidPose, SlamError> {
        let mono = self.config.mode == SlamMode::Mono;
        let pose = if index == 0 {
            let pose = input.gt_pose.unwrap_or_else(RigidPose::identity);
            let alignment = mono.then_some(AffineAlignment::IDENTITY);
            let target = self.target_frame(input, alignment.as_ref())?;
            let sem_width = self.state.map.sem_width();
            self.state.map = init_from_frame(&target, &pose, &self.k, self.config.layout, sem_width, &self.config.map, 0)?;
            self.state.alignments.push(alignment);
            pose
        } else {
            let traj = &self.state.trajectory;
            let prev = &traj[traj.len() - 1].1;
            let predicted = if traj.len() >= 2 {
                constant_velocity_predict(prev, &traj[traj.len() - 2].1)
            } else {
                *prev
            };
            let start = Instant::now();
            let (result, alignment) = if mono {
                let prior = input.prior.as_ref().ok_or(SlamError::MissingDepth)?;
                let leader = set_leader(index, &self.config.mono.image_sets);
                if leader < index {
                    // the set's alignment is already known; track against it
                    let a = self.state.alignments[leader].unwrap_or(AffineAlignment::IDENTITY);
                    let target = self.target_frame(input, Some(&a))?;
                    (track(&self.state.map, &target, &predicted, &self.k, &self.config)?, Some(a))
                } else {
                    let target = self.target_frame(input, None)?;
                    let (r, a) = track_with_prior(&self.state.map, &target, prior, &predicted, &self.k, &self.config)?;
                    (r, Some(a))
                }
            } else {
                let target = self.target_frame(input, None)?;
                (track(&self.state.map, &target, &predicted, &self.k, &self.config)?, None)
            };
            self.state.timing.track_ms += start.elapsed().as_secs_f64() * 1e3;
            self.state.timing.track_iters += result.trace.len();
            self.state.track_traces.push(result.trace);
            self.state.alignments.push(alignment);
            result.pose
        };
        self.state.trajectory.push((input.timestamp, pose));
        self.state.frame_counter += 1;

        if index.is_multiple_of(self.config.map_every) {
            let kf = Keyframe {
                index,
                frame: input.frame.clone(),
                pose,
                prior: input.prior.clone(),
            };
            let trace = self.map_update(kf)?;
            self.state.map_traces.push((index, trace));
        }
        Ok(pose)
    }

    /// Densify at the new keyframe, optimize the map, prune.
    fn map_update(&mut self, kf: Keyframe) -> Result<Vec<f64>, SlamError> {
        let mono = self.config.mode == SlamMode::Mono;
        if self.config.keyframe_replay {
            self.keyframes.push_back(kf);
            while self.keyframes.len() > self.config.replay_window {
                self.keyframes.pop_front();
            }
        } else {
            self.keyframes.clear();
            self.keyframes.push_back(kf);
        }
        let current = self.keyframes.len() - 1;

        // one optimizer per image set; the first set fixes the scale and
        // offset of the whole map and stays put
        let spec = self.config.mono.image_sets;
        let mut aligners: BTreeMap<usize, AlignmentOptimizer> = BTreeMap::new();
        if mono {
            for kf in &self.keyframes {
                let leader = set_leader(kf.index, &spec);
                if leader > 0 {
                    aligners.entry(leader).or_insert_with(|| {
                        let init = self.state.alignments[leader].unwrap_or(AffineAlignment::IDENTITY);
                        AlignmentOptimizer::new(init, self.config.mono.refine.reg_weight, self.config.lr.alignment)
                    });
                }
            }
        }
        let target_of = |slam: &Slam, kf: &Keyframe, aligners: &BTreeMap<usize, AlignmentOptimizer>| {
            let input = FrameInput {
                timestamp: 0.0,
                frame: kf.frame.clone(),
                prior: kf.prior.clone(),
                gt_pose: None,
            };
            let leader = set_leader(kf.index, &spec);
            let a = aligners.get(&leader).map(|a| a.current).or(slam.state.alignments[leader]);
            slam.target_frame(&input, a.as_ref())
        };

        if self.config.densify && self.state.frame_counter > 1 {
            let kf = &self.keyframes[current];
            let target = target_of(self, kf, &aligners)?;
            let r = render(&self.state.map, &kf.pose, &self.k, &self.config.render.clone().without_semantics());
            densify(
                &mut self.state.map,
                &target,
                &r.maps,
                &kf.pose,
                &self.k,
                &self.config.map,
                kf.index as u32,
            )?;
        }

        let mut opt = MapOptimizer::new(&self.state.map, &self.config.lr);
        let mut trace = Vec::with_capacity(self.config.mapping_iters);
        let start = Instant::now();
        for it in 0..self.config.mapping_iters {
            // with replay, every other iteration revisits an older keyframe
            let j = if self.keyframes.len() > 1 && it % 2 == 1 {
                (it / 2) % (self.keyframes.len() - 1)
            } else {
                current
            };
            let kf = &self.keyframes[j];
            let target = target_of(self, kf, &aligners)?;
            let r = render(&self.state.map, &kf.pose, &self.k, &self.config.render);
            let sem = match (&self.codec, &self.table, &self.state.decoder) {
                (Some(codec), Some(table), Some(decoder)) => Some(SemanticTerm {
                    codec,
                    table,
                    decoder,
                    weights: &self.config.semantic_weights,
                    iteration: it,
                }),
                _ => None,
            };
            let eval = mapping_loss(&r.maps, &target, &self.config.weights, sem)?;
            let mut value = eval.value;
            let leader = set_leader(kf.index, &spec);
            if let Some(a) = aligners.get(&leader) {
                value += a.penalty();
            }
            if !value.is_finite() {
                return Err(SlamError::NonFiniteLoss);
            }
            trace.push(value);
            let grads = render_backward(&r, &self.state.map, &kf.pose, &eval.grads);
            opt.step(&mut self.state.map, &grads);
            if let (Some(dg), Some(d), Some(dopt)) = (
                eval.semantic.as_ref().and_then(|s| s.decoder.as_ref()),
                self.state.decoder.as_mut(),
                self.decoder_opt.as_mut(),
            ) {
                dopt.step(d, dg);
            }
            if let (Some(a), Some(prior)) = (aligners.get_mut(&leader), kf.prior.as_ref()) {
                let (mut gl, mut gt) = (0.0, 0.0);
                for (i, g) in eval.depth_target_grad.iter().enumerate() {
                    if prior.valid[i] && *g != 0.0 {
                        gl += g * prior.depth[i];
                        gt += g;
                    }
                }
                a.step([gl, gt]);
            }
        }
        self.state.timing.map_ms += start.elapsed().as_secs_f64() * 1e3;
        self.state.timing.map_iters += self.config.mapping_iters;
        for (i, slot) in self.state.alignments.iter_mut().enumerate() {
            if let Some(a) = aligners.get(&set_leader(i, &spec)) {
                *slot = Some(a.current);
            }
        }
        if self.config.prune {
            prune(&mut self.state.map, &self.config.map);
        }
        Ok(trace)
    }
}

/// Renders every evaluated frame from the final map at the estimated poses.
pub fn evaluate(
    map: &GaussianMap,
    trajectory: &[(f64, RigidPose)],
    source: &dyn FrameSource,
    k: &Intrinsics,
    codec: Option<&SemanticCodec>,
    render_options: &RenderOptions,
    stride: usize,
    timing: &Timing,
) -> Result<Metrics, SlamError> {
    let n = trajectory.len().min(source.len());
    let mut gt_poses = Vec::new();
    let (mut depth_sum, mut depth_n) = (0.0, 0usize);
    let (mut psnr_sum, mut ssim_sum, mut frames) = (0.0, 0.0, 0usize);
    let mut counts: Vec<IouCounts> = match codec {
        Some(c) => (0..c.tree().depth())
            .map(|l| IouCounts::new(c.tree(), l))
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };
    let with_sem = render_options.clone();
    for i in 0..n {
        let input = source.get(i)?;
        if let Some(g) = input.gt_pose {
            gt_poses.push(g);
        }
        if i % stride.max(1) != 0 {
            continue;
        }
        let pose = &trajectory[i].1;
        let r = render(map, pose, k, &with_sem);
        let f = &input.frame;
        if let Some(d) = &f.depth {
            for (r, g) in r.maps.depth.iter().zip(d) {
                if *g > 0.0 && g.is_finite() {
                    depth_sum += (r - g).abs();
                    depth_n += 1;
                }
            }
        }
        psnr_sum += eval::psnr(&r.maps.color, &f.color)?;
        ssim_sum += eval::ssim(&r.maps.color, &f.color, f.width, f.height)?;
        frames += 1;
        if let (Some(codec), Some(labels)) = (codec, &f.labels) {
            let w = r.maps.sem_width;
            let pred: Vec<u32> = (0..f.pixel_count())
                .map(|p| codec.decode_class(&r.maps.semantic[p * w..(p + 1) * w]))
                .collect::<Result<_, _>>()?;
            for c in counts.iter_mut() {
                c.add(codec.tree(), &pred, labels)?;
            }
        }
    }
    let ate_rmse = if gt_poses.len() == n && n > 0 {
        let est: Vec<RigidPose> = trajectory[..n].iter().map(|p| p.1).collect();
        Some(eval::ate_rmse(&est, &gt_poses)?)
    } else {
        None
    };
    let per_iter = |ms: f64, it: usize| if it > 0 { ms / it as f64 } else { 0.0 };
    Ok(Metrics {
        ate_rmse,
        depth_l1: (depth_n > 0).then(|| 100.0 * depth_sum / depth_n as f64),
        psnr: psnr_sum / frames.max(1) as f64,
        ssim: ssim_sum / frames.max(1) as f64,
        miou_per_level: counts
            .iter()
            .map(|c| c.miou(MiouAveraging::GtPresent).unwrap_or(0.0))
            .collect(),
        runtime: Runtime {
            track_ms_per_iter: per_iter(timing.track_ms, timing.track_iters),
            map_ms_per_iter: per_iter(timing.map_ms, timing.map_iters),
        },
    })
}

pub struct RunOutput {
    pub state: SlamState,
    pub metrics: Metrics,
    pub codec: Option<Arc<SemanticCodec>>,
}

/// Processes every frame, then quantizes the map to checkpoint precision and
/// evaluates it.
pub fn run(
    source: &dyn FrameSource,
    k: &Intrinsics,
    config: &SlamConfig,
    tree: Option<Arc<SemanticTree>>,
) -> Result<RunOutput, SlamError> {
    let mut slam = Slam::new(config.clone(), *k, tree)?;
    for i in 0..source.len() {
        let input = source.get(i).map_err(at(i))?;
        slam.process(&input)?;
    }
    let codec = slam.codec.clone();
    let mut state = slam.into_state();
    state.map.quantize_f32();
    let metrics = evaluate(
        &state.map,
        &state.trajectory,
        source,
        k,
        codec.as_deref(),
        &config.render,
        config.eval_stride,
        &state.timing,
    )?;
    Ok(RunOutput { state, metrics, codec })
}
