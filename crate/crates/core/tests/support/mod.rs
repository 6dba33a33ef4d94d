//! Independent oracles shared by integration and acceptance tests.
#![allow(dead_code)]

use hiersplat_core::gaussian_map::{GaussianMap, GaussianPrimitive};
use hiersplat_core::geometry::{Intrinsics, RigidPose};
use hiersplat_core::rasterizer::{ChannelGrads, RenderedMaps};
use hiersplat_core::semantic_tree::LayoutKind;
use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Scene {
    pub map: GaussianMap,
    pub pose: RigidPose,
    pub k: Intrinsics,
}

/// Random camera pose with Gaussians at well separated depths in front of it.
pub fn random_scene(seed: u64, count: usize, size: usize, sem_width: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    let k = Intrinsics::new(f, f * 1.1, c, c + 0.3, size, size).unwrap();
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rot = UnitQuaternion::from_scaled_axis(axis * 0.3);
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let pose = RigidPose::new(rot, t);
    let mut depths: Vec<f64> = (0..count).map(|i| 1.5 + 0.3 * i as f64 + rng.random_range(0.0..0.2)).collect();
    depths.shuffle(&mut rng);
    let mut map = GaussianMap::new(LayoutKind::Onehot, sem_width);
    for z in depths {
        let u = rng.random_range(0.0..f - 1.0);
        let v = rng.random_range(0.0..f - 1.0);
        let pc = Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
        let rho = rng.random_range(1.0..3.5);
        map.push(
            GaussianPrimitive {
                mu: pose.transform_point(&pc),
                radius: rho * z / k.focal_mean(),
                opacity: rng.random_range(0.1..0.9),
                color: [rng.random(), rng.random(), rng.random()],
                sem: (0..sem_width).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
            0,
        )
        .unwrap();
    }
    Scene { map, pose, k }
}

/// Per-pixel compositor over every primitive: no cutoff, no early exit, no tiles.
pub fn brute_force_render(map: &GaussianMap, pose: &RigidPose, k: &Intrinsics) -> RenderedMaps {
    let sw = map.sem_width();
    let mut out = RenderedMaps::zeros(k.width, k.height, sw);
    let fm = 0.5 * (k.fx + k.fy);
    let r_inv = pose.rotation_matrix().transpose();
    let mut cam: Vec<(f64, usize, f64, f64, f64)> = Vec::new();
    for i in 0..map.len() {
        let p = r_inv * (map.mean(i) - pose.translation());
        if p.z <= 0.01 {
            continue;
        }
        cam.push((p.z, i, k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, fm * map.radius(i) / p.z));
    }
    cam.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    for y in 0..k.height {
        for x in 0..k.width {
            let pix = y * k.width + x;
            let mut t = 1.0;
            for &(z, i, u, v, rho) in &cam {
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                let a = (map.opacity(i) * (-d2 / (2.0 * rho * rho)).exp()).min(0.999);
                let w = a * t;
                for ch in 0..3 {
                    out.color[3 * pix + ch] += w * map.color(i)[ch];
                }
                out.depth[pix] += w * z;
                out.silhouette[pix] += w;
                for q in 0..sw {
                    out.semantic[pix * sw + q] += w * map.sem_of(i)[q];
                }
                t *= 1.0 - a;
            }
        }
    }
    out
}

/// Random per-channel weights defining the scalar loss `L = <weights, maps>`.
pub fn random_weights(seed: u64, maps: &RenderedMaps) -> ChannelGrads {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = ChannelGrads::zeros_like(maps);
    for v in g
        .color
        .iter_mut()
        .chain(g.depth.iter_mut())
        .chain(g.silhouette.iter_mut())
        .chain(g.semantic.iter_mut())
    {
        *v = rng.random_range(-1.0..1.0);
    }
    g
}

pub fn linear_loss(maps: &RenderedMaps, w: &ChannelGrads) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&maps.color, &w.color)
        + dot(&maps.depth, &w.depth)
        + dot(&maps.silhouette, &w.silhouette)
        + dot(&maps.semantic, &w.semantic)
}

/// Relative agreement test with an absolute floor.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < floor || diff / analytic.abs().max(numeric.abs()) < rel
}

pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Compares every analytic render gradient against central differences of the
/// linear probe loss; returns a description of each disagreeing entry.
pub fn render_gradient_mismatches(seed: u64, count: usize, size: usize, sem_width: usize) -> Vec<String> {
    use hiersplat_core::rasterizer::{render, render_backward, RenderOptions};
    use nalgebra::Vector6;

    let scene = random_scene(seed, count, size, sem_width);
    let opts = RenderOptions::exact();
    let base = render(&scene.map, &scene.pose, &scene.k, &opts);
    let w = random_weights(seed, &base.maps);
    let grads = render_backward(&base, &scene.map, &scene.pose, &w);
    let h = 1e-4;
    let mut bad = Vec::new();
    let loss_with = |map: &GaussianMap, pose: &RigidPose| linear_loss(&render(map, pose, &scene.k, &opts).maps, &w);
    let mut check = |name: String, analytic: f64, numeric: f64| {
        if !grad_close(analytic, numeric, 1e-3, 1e-6) {
            bad.push(format!("{name}: analytic {analytic:e} numeric {numeric:e}"));
        }
    };

    for i in 0..scene.map.len() {
        let p0 = scene.map.get(i);
        let perturbed = |edit: &dyn Fn(&mut GaussianPrimitive, f64), e: f64| {
            let mut m = scene.map.clone();
            let mut p = p0.clone();
            edit(&mut p, e);
            m.set(i, p).unwrap();
            loss_with(&m, &scene.pose)
        };
        for a in 0..3 {
            let n = central_difference(h, |e| perturbed(&|p, e| p.mu[a] += e, e));
            check(format!("mu[{i}][{a}]"), grads.means[i][a], n);
            let n = central_difference(h, |e| perturbed(&|p, e| p.color[a] += e, e));
            check(format!("color[{i}][{a}]"), grads.colors[i][a], n);
        }
        let n = central_difference(h, |e| perturbed(&|p, e| p.radius += e, e));
        check(format!("radius[{i}]"), grads.radii[i], n);
        let n = central_difference(h, |e| perturbed(&|p, e| p.opacity += e, e));
        check(format!("opacity[{i}]"), grads.opacities[i], n);
        for q in 0..sem_width {
            let n = central_difference(h, |e| perturbed(&|p, e| p.sem[q] += e, e));
            check(format!("sem[{i}][{q}]"), grads.sem[i * sem_width + q], n);
        }
    }
    for a in 0..6 {
        let n = central_difference(h, |e| {
            let mut xi = Vector6::zeros();
            xi[a] = e;
            loss_with(&scene.map, &scene.pose.retract(&xi))
        });
        check(format!("pose[{a}]"), grads.pose[a], n);
    }
    bad
}
