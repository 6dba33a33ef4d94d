//! Differentiable splatting of isotropic Gaussians.
//!
//! Every primitive projects to a circular footprint of radius
//! `f_mean * r / z`. Per pixel, splats are composited front to back by camera
//! depth:
//!
//! ```text
//! alpha_i = min(o_i * exp(-d^2 / (2 rho_i^2)), max_alpha)
//! T_i     = prod_{j<i} (1 - alpha_j)
//! C = sum c_i alpha_i T_i    D = sum z_i alpha_i T_i
//! H = sum h_i alpha_i T_i    S = sum alpha_i T_i
//! ```
//!
//! The forward pass records each pixel's contributions so the backward pass
//! can walk them in reverse and produce gradients for every primitive field
//! and for the camera pose in one sweep.

use nalgebra::{Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gaussian_map::GaussianMap;
use crate::geometry::{Intrinsics, RigidPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Footprint cutoff in projected radii; `None` lets every splat reach every pixel.
    pub cutoff_radii: Option<f64>,
    /// Stop compositing once transmittance drops below this value.
    pub min_transmittance: Option<f64>,
    pub max_alpha: f64,
    pub near_clip: f64,
    pub semantics: bool,
    pub tile_size: usize,
    /// Reduce per-tile gradients in tile order instead of a parallel tree.
    pub deterministic: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            cutoff_radii: Some(3.0),
            min_transmittance: Some(1e-4),
            max_alpha: 0.999,
            near_clip: 0.01,
            semantics: true,
            tile_size: 8,
            deterministic: true,
        }
    }
}

impl RenderOptions {
    /// No cutoff and no early exit: the exact sums.
    pub fn exact() -> Self {
        Self {
            cutoff_radii: None,
            min_transmittance: None,
            ..Self::default()
        }
    }

    pub fn without_semantics(mut self) -> Self {
        self.semantics = false;
        self
    }
}

/// A primitive's screen-space footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub center: Vector2<f64>,
    pub radius: f64,
    pub depth: f64,
    pub index: usize,
}

/// Opacity-weighted Gaussian falloff at a pixel, clamped to `[0, max_alpha]`.
pub fn alpha_at(splat: &Splat2D, opacity: f64, pixel: &Vector2<f64>, max_alpha: f64) -> f64 {
    let d2 = (pixel - splat.center).norm_squared();
    (opacity * (-d2 / (2.0 * splat.radius * splat.radius)).exp()).clamp(0.0, max_alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMaps {
    pub width: usize,
    pub height: usize,
    pub sem_width: usize,
    /// Interleaved RGB.
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
    /// Interleaved per-pixel semantic vectors, empty when semantics are off.
    pub semantic: Vec<f64>,
}

impl RenderedMaps {
    pub fn zeros(width: usize, height: usize, sem_width: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            sem_width,
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            silhouette: vec![0.0; n],
            semantic: vec![0.0; sem_width * n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn sem_at(&self, i: usize) -> &[f64] {
        &self.semantic[i * self.sem_width..(i + 1) * self.sem_width]
    }
}

/// Upstream gradients of a scalar loss with respect to each rendered channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
    pub semantic: Vec<f64>,
}

impl ChannelGrads {
    pub fn zeros_like(maps: &RenderedMaps) -> Self {
        let n = maps.pixel_count();
        Self {
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            silhouette: vec![0.0; n],
            semantic: vec![0.0; maps.sem_width * n],
        }
    }

    pub fn add_scaled(&mut self, other: &ChannelGrads, s: f64) {
        fn axpy(a: &mut [f64], b: &[f64], s: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        axpy(&mut self.color, &other.color, s);
        axpy(&mut self.depth, &other.depth, s);
        axpy(&mut self.silhouette, &other.silhouette, s);
        axpy(&mut self.semantic, &other.semantic, s);
    }
}

/// Gradients for every primitive field and the pose tangent `[ω, v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub means: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub sem: Vec<f64>,
    pub pose: Vector6<f64>,
}

impl ParamGrads {
    pub fn zeros(n: usize, sem_width: usize) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            radii: vec![0.0; n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            sem: vec![0.0; n * sem_width],
            pose: Vector6::zeros(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = self.pose.amax();
        for v in &self.means {
            m = m.max(v.amax());
        }
        for c in &self.colors {
            m = c.iter().fold(m, |a, b| a.max(b.abs()));
        }
        self.radii
            .iter()
            .chain(&self.opacities)
            .chain(&self.sem)
            .fold(m, |a, b| a.max(b.abs()))
    }
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    /// position in the visible splat list
    splat: u32,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
}

#[derive(Debug, Clone, Default)]
struct TileState {
    /// visible-splat positions in depth order
    splats: Vec<u32>,
    pixels: Vec<u32>,
    /// contribution range per pixel in `contribs`
    ranges: Vec<(u32, u32)>,
    contribs: Vec<Contribution>,
}

/// Forward outputs plus the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct Render {
    pub maps: RenderedMaps,
    splats: Vec<Splat2D>,
    cam_points: Vec<Vector3<f64>>,
    tiles: Vec<TileState>,
    options: RenderOptions,
    focal: (f64, f64, f64),
    sem_width: usize,
}

impl Render {
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }

    /// Number of recorded (splat, pixel) contributions.
    pub fn contribution_count(&self) -> usize {
        self.tiles.iter().map(|t| t.contribs.len()).sum()
    }
}

/// Projects every primitive in front of the near plane.
pub fn project_splats(
    map: &GaussianMap,
    pose: &RigidPose,
    k: &Intrinsics,
    options: &RenderOptions,
) -> (Vec<Splat2D>, Vec<Vector3<f64>>) {
    let f = k.focal_mean();
    let mut out: Vec<(Splat2D, Vector3<f64>)> = Vec::with_capacity(map.len());
    let (w, h) = (k.width as f64, k.height as f64);
    for i in 0..map.len() {
        let pc = pose.inverse_transform_point(map.mean(i));
        if pc.z <= options.near_clip {
            continue;
        }
        let center = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
        let radius = f * map.radius(i) / pc.z;
        if let Some(c) = options.cutoff_radii {
            let reach = c * radius;
            if center.x + reach < 0.0
                || center.y + reach < 0.0
                || center.x - reach > w - 1.0
                || center.y - reach > h - 1.0
            {
                continue;
            }
        }
        out.push((
            Splat2D {
                center,
                radius,
                depth: pc.z,
                index: i,
            },
            pc,
        ));
    }
    out.sort_by(|a, b| {
        a.0.depth
            .total_cmp(&b.0.depth)
            .then(a.0.index.cmp(&b.0.index))
    });
    out.into_iter().unzip()
}

struct TileGrid {
    size: usize,
    cols: usize,
    rows: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize, size: usize) -> Self {
        let size = size.max(1);
        Self {
            size,
            cols: width.div_ceil(size),
            rows: height.div_ceil(size),
        }
    }
}

/// Renders color, depth, silhouette and semantics in one pass.
pub fn render(map: &GaussianMap, pose: &RigidPose, k: &Intrinsics, options: &RenderOptions) -> Render {
    let (splats, cam_points) = project_splats(map, pose, k, options);
    let (width, height) = (k.width, k.height);
    let sem_width = if options.semantics { map.sem_width() } else { 0 };
    let grid = TileGrid::new(width, height, options.tile_size);

    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); grid.cols * grid.rows];
    for (s, sp) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = match options.cutoff_radii {
            Some(c) => {
                let reach = c * sp.radius;
                let x0 = (sp.center.x - reach).ceil().max(0.0) as usize;
                let y0 = (sp.center.y - reach).ceil().max(0.0) as usize;
                let x1 = (sp.center.x + reach).floor().min(width as f64 - 1.0);
                let y1 = (sp.center.y + reach).floor().min(height as f64 - 1.0);
                if x1 < 0.0 || y1 < 0.0 || x0 as f64 > x1 || y0 as f64 > y1 {
                    continue;
                }
                (x0, x1 as usize, y0, y1 as usize)
            }
            None => (0, width - 1, 0, height - 1),
        };
        for ty in y0 / grid.size..=y1 / grid.size {
            for tx in x0 / grid.size..=x1 / grid.size {
                bins[ty * grid.cols + tx].push(s as u32);
            }
        }
    }

    let cutoff2 = options.cutoff_radii.map(|c| c * c);
    let tiles: Vec<TileState> = bins
        .into_par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t % grid.cols, t / grid.cols);
            let mut st = TileState {
                splats: list,
                ..Default::default()
            };
            for y in ty * grid.size..((ty + 1) * grid.size).min(height) {
                for x in tx * grid.size..((tx + 1) * grid.size).min(width) {
                    let start = st.contribs.len() as u32;
                    let px = Vector2::new(x as f64, y as f64);
                    let mut trans = 1.0;
                    for &s in &st.splats {
                        let sp = &splats[s as usize];
                        let d2 = (px - sp.center).norm_squared();
                        let r2 = sp.radius * sp.radius;
                        if let Some(c2) = cutoff2 {
                            if d2 > c2 * r2 {
                                continue;
                            }
                        }
                        let gauss = (-d2 / (2.0 * r2)).exp();
                        let alpha = (map.opacity(sp.index) * gauss).min(options.max_alpha);
                        st.contribs.push(Contribution {
                            splat: s,
                            alpha,
                            gauss,
                            transmittance: trans,
                        });
                        trans *= 1.0 - alpha;
                        if let Some(tmin) = options.min_transmittance {
                            if trans < tmin {
                                break;
                            }
                        }
                    }
                    st.pixels.push((y * width + x) as u32);
                    st.ranges.push((start, st.contribs.len() as u32));
                }
            }
            st
        })
        .collect();

    let mut maps = RenderedMaps::zeros(width, height, sem_width);
    for st in &tiles {
        for (p, &(a, b)) in st.pixels.iter().zip(&st.ranges) {
            let p = *p as usize;
            let mut col = [0.0; 3];
            let (mut dep, mut sil) = (0.0, 0.0);
            let sem_out = &mut maps.semantic[p * sem_width..(p + 1) * sem_width];
            for c in &st.contribs[a as usize..b as usize] {
                let sp = &splats[c.splat as usize];
                let w = c.alpha * c.transmittance;
                let rgb = map.color(sp.index);
                col[0] += w * rgb[0];
                col[1] += w * rgb[1];
                col[2] += w * rgb[2];
                dep += w * sp.depth;
                sil += w;
                if sem_width > 0 {
                    for (o, h) in sem_out.iter_mut().zip(map.sem_of(sp.index)) {
                        *o += w * h;
                    }
                }
            }
            maps.color[3 * p..3 * p + 3].copy_from_slice(&col);
            maps.depth[p] = dep;
            maps.silhouette[p] = sil;
        }
    }

    Render {
        maps,
        splats,
        cam_points,
        tiles,
        options: options.clone(),
        focal: (k.fx, k.fy, k.focal_mean()),
        sem_width,
    }
}

// per-splat accumulator layout: [o, u, v, rho, r, g, b, z, sem...]
const G_O: usize = 0;
const G_U: usize = 1;
const G_V: usize = 2;
const G_RHO: usize = 3;
const G_COL: usize = 4;
const G_Z: usize = 7;
const G_SEM: usize = 8;

fn tile_backward(
    st: &TileState,
    render: &Render,
    map: &GaussianMap,
    upstream: &ChannelGrads,
) -> Vec<f64> {
    let sw = render.sem_width;
    let stride = G_SEM + sw;
    let mut local = vec![0.0; st.splats.len() * stride];
    if st.contribs.is_empty() {
        return local;
    }
    // position of each visible splat inside this tile's list
    let mut slot = std::collections::HashMap::with_capacity(st.splats.len());
    for (j, &s) in st.splats.iter().enumerate() {
        slot.insert(s, j);
    }
    let max_alpha = render.options.max_alpha;
    for (p, &(a, b)) in st.pixels.iter().zip(&st.ranges) {
        let p = *p as usize;
        let gc = &upstream.color[3 * p..3 * p + 3];
        let gd = upstream.depth[p];
        let gs = upstream.silhouette[p];
        let gh = if sw > 0 {
            &upstream.semantic[p * sw..(p + 1) * sw]
        } else {
            &[][..]
        };
        let px = Vector2::new((p % render.maps.width) as f64, (p / render.maps.width) as f64);
        let mut acc_after = 0.0;
        for c in st.contribs[a as usize..b as usize].iter().rev() {
            let sp = &render.splats[c.splat as usize];
            let j = slot[&c.splat];
            let acc = &mut local[j * stride..(j + 1) * stride];
            let w = c.alpha * c.transmittance;
            let rgb = map.color(sp.index);
            let mut vdotg = rgb[0] * gc[0] + rgb[1] * gc[1] + rgb[2] * gc[2] + sp.depth * gd + gs;
            acc[G_COL] += w * gc[0];
            acc[G_COL + 1] += w * gc[1];
            acc[G_COL + 2] += w * gc[2];
            acc[G_Z] += w * gd;
            if sw > 0 {
                let h = map.sem_of(sp.index);
                for q in 0..sw {
                    acc[G_SEM + q] += w * gh[q];
                    vdotg += h[q] * gh[q];
                }
            }
            let d_alpha = c.transmittance * vdotg - acc_after / (1.0 - c.alpha);
            acc_after += w * vdotg;
            let o = map.opacity(sp.index);
            if o * c.gauss < max_alpha {
                let r2 = sp.radius * sp.radius;
                let diff = px - sp.center;
                acc[G_O] += d_alpha * c.gauss;
                acc[G_U] += d_alpha * c.alpha * diff.x / r2;
                acc[G_V] += d_alpha * c.alpha * diff.y / r2;
                acc[G_RHO] += d_alpha * c.alpha * diff.norm_squared() / (r2 * sp.radius);
            }
        }
    }
    local
}

/// Gradients of a scalar loss, given its per-channel pixel gradients, with
/// respect to every primitive parameter and the camera pose.
pub fn render_backward(
    render: &Render,
    map: &GaussianMap,
    pose: &RigidPose,
    upstream: &ChannelGrads,
) -> ParamGrads {
    let sw = render.sem_width;
    let stride = G_SEM + sw;
    let nvis = render.splats.len();
    let merge = |total: &mut Vec<f64>, st: &TileState, local: &[f64]| {
        for (j, &s) in st.splats.iter().enumerate() {
            let dst = &mut total[s as usize * stride..(s as usize + 1) * stride];
            for (d, v) in dst.iter_mut().zip(&local[j * stride..(j + 1) * stride]) {
                *d += v;
            }
        }
    };

    let per_splat: Vec<f64> = if render.options.deterministic {
        let locals: Vec<Vec<f64>> = render
            .tiles
            .par_iter()
            .map(|st| tile_backward(st, render, map, upstream))
            .collect();
        let mut total = vec![0.0; nvis * stride];
        for (st, local) in render.tiles.iter().zip(&locals) {
            merge(&mut total, st, local);
        }
        total
    } else {
        render
            .tiles
            .par_iter()
            .fold(
                || vec![0.0; nvis * stride],
                |mut total, st| {
                    let local = tile_backward(st, render, map, upstream);
                    merge(&mut total, st, &local);
                    total
                },
            )
            .reduce(
                || vec![0.0; nvis * stride],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(&b) {
                        *x += y;
                    }
                    a
                },
            )
    };

    let (fx, fy, f) = render.focal;
    let rot = pose.rotation_matrix();
    let full_sw = map.sem_width();
    let mut out = ParamGrads::zeros(map.len(), full_sw);
    for (s, sp) in render.splats.iter().enumerate() {
        let g = &per_splat[s * stride..(s + 1) * stride];
        let i = sp.index;
        let pc = &render.cam_points[s];
        let z = pc.z;
        let r = map.radius(i);
        out.opacities[i] += g[G_O];
        out.colors[i][0] += g[G_COL];
        out.colors[i][1] += g[G_COL + 1];
        out.colors[i][2] += g[G_COL + 2];
        out.radii[i] += g[G_RHO] * f / z;
        for q in 0..sw {
            out.sem[i * full_sw + q] += g[G_SEM + q];
        }
        let gx = g[G_U] * fx / z;
        let gy = g[G_V] * fy / z;
        let gz = g[G_Z] - g[G_RHO] * f * r / (z * z) - g[G_U] * fx * pc.x / (z * z) - g[G_V] * fy * pc.y / (z * z);
        let gpc = Vector3::new(gx, gy, gz);
        out.means[i] += rot * gpc;
        let g_omega = gpc.cross(pc);
        out.pose[0] += g_omega.x;
        out.pose[1] += g_omega.y;
        out.pose[2] += g_omega.z;
        out.pose[3] -= gpc.x;
        out.pose[4] -= gpc.y;
        out.pose[5] -= gpc.z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_map::GaussianPrimitive;
    use crate::semantic_tree::LayoutKind;

    fn k_small() -> Intrinsics {
        Intrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap()
    }

    #[test]
    fn alpha_closed_forms() {
        let sp = Splat2D {
            center: Vector2::new(2.0, 3.0),
            radius: 1.5,
            depth: 1.0,
            index: 0,
        };
        assert_eq!(alpha_at(&sp, 0.8, &Vector2::new(2.0, 3.0), 0.999), 0.8);
        let a = alpha_at(&sp, 1.0, &Vector2::new(3.5, 3.0), 0.999);
        assert!((a - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(alpha_at(&sp, 1.0, &Vector2::new(2.0, 3.0), 0.999), 0.999);
    }

    #[test]
    fn empty_map_renders_zeros() {
        let map = GaussianMap::new(LayoutKind::Onehot, 2);
        let r = render(&map, &RigidPose::identity(), &k_small(), &RenderOptions::default());
        assert!(r.maps.silhouette.iter().all(|&s| s == 0.0));
        assert!(r.maps.color.iter().all(|&c| c == 0.0));
        assert_eq!(r.maps.semantic.len(), 18);
    }

    #[test]
    fn single_splat_single_pixel() {
        // A tiny splat right on pixel (1,1) at depth 2 with opacity 0.7.
        let mut map = GaussianMap::new(LayoutKind::Onehot, 1);
        map.push(
            GaussianPrimitive {
                mu: Vector3::new(0.0, 0.0, 2.0),
                radius: 0.01,
                opacity: 0.7,
                color: [1.0, 0.0, 0.0],
                sem: vec![1.0],
            },
            0,
        )
        .unwrap();
        let r = render(&map, &RigidPose::identity(), &k_small(), &RenderOptions::default());
        let p = 4;
        assert!((r.maps.silhouette[p] - 0.7).abs() < 1e-12);
        assert!((r.maps.depth[p] - 1.4).abs() < 1e-12);
        assert!((r.maps.color[3 * p] - 0.7).abs() < 1e-12);
        assert_eq!(r.maps.color[3 * p + 1], 0.0);
        for q in 0..9 {
            if q != p {
                assert_eq!(r.maps.silhouette[q], 0.0);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut map = GaussianMap::new(LayoutKind::Onehot, 2);
        for i in 0..3 {
            map.push(
                GaussianPrimitive {
                    mu: Vector3::new(0.05 * i as f64, 0.0, 2.0 + i as f64 * 0.1),
                    radius: 0.2,
                    opacity: 0.6,
                    color: [0.3, 0.4, 0.5],
                    sem: vec![0.1, 0.2],
                },
                0,
            )
            .unwrap();
        }
        let r = render(&map, &RigidPose::identity(), &k_small(), &RenderOptions::default());
        let up = ChannelGrads::zeros_like(&r.maps);
        let g = render_backward(&r, &map, &RigidPose::identity(), &up);
        assert_eq!(g.max_abs(), 0.0);
    }
}
