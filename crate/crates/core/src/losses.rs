//! Photometric, depth, SSIM and hierarchical semantic objectives.
//!
//! Every loss returns its value together with the gradient with respect to
//! the rendered channels, ready to feed into [`render_backward`].
//!
//! [`render_backward`]: crate::rasterizer::render_backward

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{is_valid_depth, Frame};
use crate::rasterizer::{ChannelGrads, RenderedMaps};
use crate::semantic_tree::{SemanticCodec, TreeError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("semantic width {got} does not match layout width {expected}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no pixel passes the tracking mask")]
    EmptyMask,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Balancing of the intra- and inter-level terms with a warm-up switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticLossWeights {
    pub omega1: f64,
    pub omega2: f64,
    /// Iterations before `omega2` engages.
    pub eta: usize,
}

impl Default for SemanticLossWeights {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 5.0,
            eta: 15,
        }
    }
}

impl SemanticLossWeights {
    pub fn schedule(&self, iteration: usize) -> (f64, f64) {
        if iteration < self.eta {
            (self.omega1, 0.0)
        } else {
            (self.omega1, self.omega2)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackMapWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub delta: f64,
    pub lambda_ssim: f64,
    /// Tracking ignores pixels whose depth residual exceeds this multiple of
    /// the median residual. `None` keeps every masked pixel.
    pub tracking_outlier_factor: Option<f64>,
}

impl Default for TrackMapWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.5,
            w3: 1.0,
            w4: 0.5,
            w5: 0.2,
            delta: 0.99,
            lambda_ssim: 0.2,
            tracking_outlier_factor: None,
        }
    }
}

/// Mean absolute error over the pixels where `mask` holds, across `ch`
/// interleaved channels. Returns the value and d/d(pred).
pub fn masked_l1(pred: &[f64], target: &[f64], mask: &[bool], ch: usize) -> (f64, Vec<f64>) {
    let count = mask.iter().filter(|&&m| m).count() * ch;
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let d = pred[i] - target[i];
            sum += d.abs();
            grad[i] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    (sum * inv, grad)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable 11×11 Gaussian filter, zero padded, same size output. The kernel
/// is symmetric, so this operator is its own adjoint.
fn blur(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_window();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - 5;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - 5;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &[f64], ch: usize, c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(ch).copied().collect()
}

/// Mean SSIM over pixels and channels, with its gradient with respect to `a`.
pub fn ssim_with_grad(a: &[f64], b: &[f64], w: usize, h: usize, ch: usize) -> (f64, Vec<f64>) {
    let n = w * h;
    let scale = 1.0 / (n * ch) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; a.len()];
    for c in 0..ch {
        let x = channel(a, ch, c);
        let y = channel(b, ch, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h), blur(&y, w, h));
        let (mxx, myy, mxy) = (blur(&xx, w, h), blur(&yy, w, h), blur(&xy, w, h));
        let mut g_mx = vec![0.0; n];
        let mut g_mxx = vec![0.0; n];
        let mut g_mxy = vec![0.0; n];
        for p in 0..n {
            let a1 = 2.0 * mx[p] * my[p] + SSIM_C1;
            let a2 = 2.0 * (mxy[p] - mx[p] * my[p]) + SSIM_C2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let b2 = mxx[p] - mx[p] * mx[p] + myy[p] - my[p] * my[p] + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            g_mx[p] = scale * s * (2.0 * my[p] / a1 - 2.0 * my[p] / a2 - 2.0 * mx[p] / b1 + 2.0 * mx[p] / b2);
            g_mxy[p] = scale * s * 2.0 / a2;
            g_mxx[p] = -scale * s / b2;
        }
        let (bx, bxx, bxy) = (blur(&g_mx, w, h), blur(&g_mxx, w, h), blur(&g_mxy, w, h));
        for p in 0..n {
            grad[p * ch + c] = bx[p] + 2.0 * x[p] * bxx[p] + y[p] * bxy[p];
        }
    }
    (total * scale, grad)
}

pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, ch: usize) -> f64 {
    ssim_with_grad(a, b, w, h, ch).0
}

/// `λ (1 − SSIM) + (1 − λ) L1` over the whole image, with d/d(rendered).
pub fn color_loss_prime(
    rendered: &[f64],
    gt: &[f64],
    w: usize,
    h: usize,
    lambda_ssim: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    if rendered.len() != gt.len() || rendered.len() != 3 * w * h {
        return Err(LossError::ShapeMismatch(format!(
            "color buffers {} and {} for {w}x{h}",
            rendered.len(),
            gt.len()
        )));
    }
    let all = vec![true; w * h];
    let (l1, g1) = masked_l1(rendered, gt, &all, 3);
    if lambda_ssim == 0.0 {
        return Ok((l1, g1));
    }
    let (s, gs) = ssim_with_grad(rendered, gt, w, h, 3);
    let grad = g1
        .iter()
        .zip(&gs)
        .map(|(a, b)| (1.0 - lambda_ssim) * a - lambda_ssim * b)
        .collect();
    Ok((lambda_ssim * (1.0 - s) + (1.0 - lambda_ssim) * l1, grad))
}

/// Per-pixel 1×1 two-stage decoder from the hierarchical code to flat logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterLevelDecoder {
    pub n_in: usize,
    pub n_mid: usize,
    pub n_out: usize,
    /// `n_mid × n_in`, row major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `n_out × n_mid`, row major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl InterLevelDecoder {
    /// He-initialized weights, zero biases, hidden width `max(n_in, 64)`.
    pub fn new(n_in: usize, n_out: usize, seed: u64) -> Self {
        let n_mid = n_in.max(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (2.0 / n_in.max(1) as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (2.0 / n_mid as f64).sqrt()).unwrap();
        let w1 = (0..n_mid * n_in).map(|_| n1.sample(&mut rng)).collect();
        let w2 = (0..n_out * n_mid).map(|_| n2.sample(&mut rng)).collect();
        Self {
            n_in,
            n_mid,
            n_out,
            w1,
            b1: vec![0.0; n_mid],
            w2,
            b2: vec![0.0; n_out],
        }
    }

    /// Passes non-negative inputs through unchanged (`n_in == n_out`).
    pub fn identity_lift(n: usize) -> Self {
        let n_mid = n.max(64);
        let mut w1 = vec![0.0; n_mid * n];
        let mut w2 = vec![0.0; n * n_mid];
        for i in 0..n {
            w1[i * n + i] = 1.0;
            w2[i * n_mid + i] = 1.0;
        }
        Self {
            n_in: n,
            n_mid,
            n_out: n,
            w1,
            b1: vec![0.0; n_mid],
            w2,
            b2: vec![0.0; n],
        }
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Fills `mid` with the post-ReLU hidden activations and `out` with logits.
    pub fn forward(&self, h: &[f64], mid: &mut [f64], out: &mut [f64]) {
        for (j, m) in mid.iter_mut().enumerate() {
            let row = &self.w1[j * self.n_in..(j + 1) * self.n_in];
            let z: f64 = self.b1[j] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
            *m = z.max(0.0);
        }
        for (o, v) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.n_mid..(o + 1) * self.n_mid];
            *v = self.b2[o] + row.iter().zip(mid.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients and writes d/dh given d/d(logits).
    fn backward(&self, h: &[f64], mid: &[f64], g_out: &[f64], grads: &mut DecoderGrads, g_h: &mut [f64]) {
        let mut g_mid = vec![0.0; self.n_mid];
        for (o, &go) in g_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grads.b2[o] += go;
            let row = o * self.n_mid;
            for j in 0..self.n_mid {
                grads.w2[row + j] += go * mid[j];
                g_mid[j] += go * self.w2[row + j];
            }
        }
        for j in 0..self.n_mid {
            if mid[j] <= 0.0 {
                continue;
            }
            let gz = g_mid[j];
            grads.b1[j] += gz;
            let row = j * self.n_in;
            for i in 0..self.n_in {
                grads.w1[row + i] += gz * h[i];
                g_h[i] += gz * self.w1[row + i];
            }
        }
    }
}

/// Softmax cross entropy `-log softmax(z)[t]`; writes `softmax(z) - e_t` scaled into `grad`.
fn softmax_ce(z: &[f64], t: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    for (i, g) in grad.iter_mut().enumerate() {
        let p = (z[i] - lse).exp();
        *g += scale * (p - if i == t { 1.0 } else { 0.0 });
    }
    lse - z[t]
}

/// Stable `BCE(sigmoid(x), b)`; returns the loss and `sigmoid(x) - b`.
fn bce_logit(x: f64, b: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * b + (-x.abs()).exp().ln_1p();
    let s = 1.0 / (1.0 + (-x).exp());
    (loss, s - b)
}

/// Per-class targets: sibling ranks along the code tree and the flat index.
#[derive(Debug, Clone)]
pub struct LabelTable {
    entries: HashMap<u32, (Vec<usize>, usize)>,
}

impl LabelTable {
    pub fn new(codec: &SemanticCodec) -> Result<Self, LossError> {
        let mut entries = HashMap::new();
        for c in codec.tree().class_ids() {
            let flat = codec.flat_index(c).expect("class from tree");
            entries.insert(c, (codec.code_ranks(c)?, flat));
        }
        Ok(Self { entries })
    }

    /// `None` for unlabeled pixels (class 0).
    fn lookup(&self, label: u32) -> Result<Option<&(Vec<usize>, usize)>, LossError> {
        if label == 0 {
            return Ok(None);
        }
        self.entries
            .get(&label)
            .map(Some)
            .ok_or(LossError::Tree(TreeError::UnknownClass(label)))
    }
}

fn check_width(h_map: &[f64], width: usize, pixels: usize) -> Result<(), LossError> {
    if width == 0 || h_map.len() != width * pixels {
        return Err(LossError::LayoutMismatch {
            expected: width,
            got: if pixels == 0 { 0 } else { h_map.len() / pixels },
        });
    }
    Ok(())
}

/// Sum over code levels of the pixel-mean classification loss of each
/// level's slice. Softmax cross entropy for one-hot/flat codes, per-bit
/// logistic BCE (averaged over bits) for binary codes.
pub fn intra_level_loss(
    h_map: &[f64],
    labels: &[u32],
    codec: &SemanticCodec,
    table: &LabelTable,
) -> Result<(f64, Vec<f64>), LossError> {
    let width = codec.width();
    check_width(h_map, width, labels.len())?;
    let mut grad = vec![0.0; h_map.len()];
    let labeled = labels.iter().filter(|&&l| l != 0).count();
    if labeled == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / labeled as f64;
    let mut total = 0.0;
    for (p, &label) in labels.iter().enumerate() {
        let Some((ranks, _)) = table.lookup(label)? else {
            continue;
        };
        let px = &h_map[p * width..(p + 1) * width];
        let gx = &mut grad[p * width..(p + 1) * width];
        for (l, &rank) in ranks.iter().enumerate() {
            let r = codec.level_slice(l);
            if r.is_empty() {
                continue;
            }
            if codec.is_binary() {
                let bits = r.len() as f64;
                for (j, i) in r.enumerate() {
                    let (loss, g) = bce_logit(px[i], ((rank >> j) & 1) as f64);
                    total += loss * inv / bits;
                    gx[i] += g * inv / bits;
                }
            } else {
                total += inv * softmax_ce(&px[r.clone()], rank, inv, &mut gx[r]);
            }
        }
    }
    Ok((total, grad))
}

/// Pixel-mean softmax cross entropy of the decoded flat logits.
pub fn inter_level_loss(
    h_map: &[f64],
    labels: &[u32],
    decoder: &InterLevelDecoder,
    table: &LabelTable,
) -> Result<(f64, Vec<f64>, DecoderGrads), LossError> {
    check_width(h_map, decoder.n_in, labels.len())?;
    let width = decoder.n_in;
    let mut grad = vec![0.0; h_map.len()];
    let mut dg = decoder.zero_grads();
    let labeled = labels.iter().filter(|&&l| l != 0).count();
    if labeled == 0 {
        return Ok((0.0, grad, dg));
    }
    let inv = 1.0 / labeled as f64;
    let mut mid = vec![0.0; decoder.n_mid];
    let mut out = vec![0.0; decoder.n_out];
    let mut g_out = vec![0.0; decoder.n_out];
    let mut total = 0.0;
    for (p, &label) in labels.iter().enumerate() {
        let Some(&(_, flat)) = table.lookup(label)? else {
            continue;
        };
        let px = &h_map[p * width..(p + 1) * width];
        decoder.forward(px, &mut mid, &mut out);
        g_out.iter_mut().for_each(|g| *g = 0.0);
        total += inv * softmax_ce(&out, flat, inv, &mut g_out);
        decoder.backward(px, &mid, &g_out, &mut dg, &mut grad[p * width..(p + 1) * width]);
    }
    Ok((total, grad, dg))
}

#[derive(Debug, Clone)]
pub struct SemanticEval {
    pub value: f64,
    pub intra: f64,
    pub inter: f64,
    pub grad: Vec<f64>,
    pub decoder: Option<DecoderGrads>,
}

/// `ω1 L_intra + ω2 L_inter` with the warm-up schedule applied.
pub fn semantic_loss(
    h_map: &[f64],
    labels: &[u32],
    codec: &SemanticCodec,
    table: &LabelTable,
    decoder: &InterLevelDecoder,
    weights: &SemanticLossWeights,
    iteration: usize,
) -> Result<SemanticEval, LossError> {
    let (w1, w2) = weights.schedule(iteration);
    let (intra, mut grad) = intra_level_loss(h_map, labels, codec, table)?;
    grad.iter_mut().for_each(|g| *g *= w1);
    let mut eval = SemanticEval {
        value: w1 * intra,
        intra,
        inter: 0.0,
        grad,
        decoder: None,
    };
    if w2 > 0.0 {
        let (inter, g, mut dg) = inter_level_loss(h_map, labels, decoder, table)?;
        for (a, b) in eval.grad.iter_mut().zip(&g) {
            *a += w2 * b;
        }
        for v in dg.w1.iter_mut().chain(&mut dg.b1).chain(&mut dg.w2).chain(&mut dg.b2) {
            *v *= w2;
        }
        eval.inter = inter;
        eval.value += w2 * inter;
        eval.decoder = Some(dg);
    }
    Ok(eval)
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub depth: f64,
    pub color: f64,
    pub semantic: Option<SemanticEval>,
    pub grads: ChannelGrads,
    /// d/d(depth target) of the weighted depth term, for learnable targets.
    pub depth_target_grad: Vec<f64>,
}

fn check_frame(rendered: &RenderedMaps, frame: &Frame) -> Result<(), LossError> {
    if rendered.width != frame.width || rendered.height != frame.height {
        return Err(LossError::ShapeMismatch(format!(
            "render {}x{} vs frame {}x{}",
            rendered.width, rendered.height, frame.width, frame.height
        )));
    }
    Ok(())
}

fn depth_or_zero(frame: &Frame) -> Vec<f64> {
    frame
        .depth
        .clone()
        .unwrap_or_else(|| vec![0.0; frame.pixel_count()])
}

/// Clears mask entries whose depth residual exceeds `factor` times the median
/// masked residual.
pub fn reject_depth_outliers(mask: &mut [bool], rendered: &[f64], target: &[f64], factor: f64) {
    let mut res: Vec<f64> = (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| (rendered[i] - target[i]).abs())
        .collect();
    if res.is_empty() {
        return;
    }
    let mid = res.len() / 2;
    let median = *res.select_nth_unstable_by(mid, f64::total_cmp).1;
    for i in 0..mask.len() {
        if mask[i] && (rendered[i] - target[i]).abs() > factor * median {
            mask[i] = false;
        }
    }
}

/// Masked depth and color L1 over pixels with `S > δ` and valid depth.
pub fn tracking_loss(rendered: &RenderedMaps, frame: &Frame, weights: &TrackMapWeights) -> Result<LossEval, LossError> {
    check_frame(rendered, frame)?;
    let depth = depth_or_zero(frame);
    let mask: Vec<bool> = rendered
        .silhouette
        .iter()
        .zip(&depth)
        .map(|(&s, &d)| s > weights.delta && is_valid_depth(d))
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(LossError::EmptyMask);
    }
    let mut mask = mask;
    if let Some(f) = weights.tracking_outlier_factor {
        reject_depth_outliers(&mut mask, &rendered.depth, &depth, f);
    }
    let (ld, gd) = masked_l1(&rendered.depth, &depth, &mask, 1);
    let (lc, gc) = masked_l1(&rendered.color, &frame.color, &mask, 3);
    let mut grads = ChannelGrads::zeros_like(rendered);
    grads.depth = gd.iter().map(|g| weights.w1 * g).collect();
    grads.color = gc.iter().map(|g| weights.w2 * g).collect();
    let depth_target_grad = grads.depth.iter().map(|g| -g).collect();
    Ok(LossEval {
        value: weights.w1 * ld + weights.w2 * lc,
        depth: ld,
        color: lc,
        semantic: None,
        grads,
        depth_target_grad,
    })
}

/// Semantic inputs for the mapping objective.
pub struct SemanticTerm<'a> {
    pub codec: &'a SemanticCodec,
    pub table: &'a LabelTable,
    pub decoder: &'a InterLevelDecoder,
    pub weights: &'a SemanticLossWeights,
    pub iteration: usize,
}

/// `w3 L_depth + w4 L'_color + w5 L_semantic`. The depth term covers pixels
/// with a valid measurement; color is unmasked.
pub fn mapping_loss(
    rendered: &RenderedMaps,
    frame: &Frame,
    weights: &TrackMapWeights,
    semantic: Option<SemanticTerm<'_>>,
) -> Result<LossEval, LossError> {
    check_frame(rendered, frame)?;
    let depth = depth_or_zero(frame);
    let mask: Vec<bool> = depth.iter().map(|&d| is_valid_depth(d)).collect();
    let (ld, gd) = masked_l1(&rendered.depth, &depth, &mask, 1);
    let (lc, gc) = color_loss_prime(
        &rendered.color,
        &frame.color,
        frame.width,
        frame.height,
        weights.lambda_ssim,
    )?;
    let mut grads = ChannelGrads::zeros_like(rendered);
    grads.depth = gd.iter().map(|g| weights.w3 * g).collect();
    grads.color = gc.iter().map(|g| weights.w4 * g).collect();
    let depth_target_grad = grads.depth.iter().map(|g| -g).collect();
    let mut value = weights.w3 * ld + weights.w4 * lc;
    let mut sem_eval = None;
    if let (Some(term), Some(labels)) = (semantic, frame.labels.as_ref()) {
        if weights.w5 > 0.0 {
            let e = semantic_loss(
                &rendered.semantic,
                labels,
                term.codec,
                term.table,
                term.decoder,
                term.weights,
                term.iteration,
            )?;
            value += weights.w5 * e.value;
            grads.semantic = e.grad.iter().map(|g| weights.w5 * g).collect();
            let mut e = e;
            if let Some(dg) = e.decoder.as_mut() {
                for v in dg.w1.iter_mut().chain(&mut dg.b1).chain(&mut dg.w2).chain(&mut dg.b2) {
                    *v *= weights.w5;
                }
            }
            sem_eval = Some(e);
        }
    }
    Ok(LossEval {
        value,
        depth: ld,
        color: lc,
        semantic: sem_eval,
        grads,
        depth_target_grad,
    })
}
