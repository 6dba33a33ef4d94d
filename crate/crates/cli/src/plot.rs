//! PNG plots of a finished run.

use std::path::Path;

use hiersplat_core::rasterizer::render;
use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};
use crate::eval_cmd::load_run;
use crate::slam_cmd::{Traces, TRACES_FILE};
use crate::PlotArgs;

pub const PALETTE_SIZE: usize = 64;

/// Fixed label palette: hues stepped by the golden angle over four
/// saturation/value bands. Node `i` gets entry `i mod 64`.
pub fn palette() -> [[u8; 3]; PALETTE_SIZE] {
    let mut out = [[0u8; 3]; PALETTE_SIZE];
    for (i, c) in out.iter_mut().enumerate() {
        let h = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
        let (s, v) = [(0.85, 0.95), (0.55, 0.9), (0.9, 0.65), (0.4, 0.7)][i / 16];
        let f = h.fract();
        let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
        let rgb = match h as usize {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        *c = [rgb.0, rgb.1, rgb.2].map(|x| (x * 255.0).round() as u8);
    }
    out
}

/// Node index per pixel to colors; `None` (unlabeled) is black.
pub fn label_image(nodes: &[Option<usize>], width: usize, height: usize) -> RgbImage {
    let pal = palette();
    RgbImage::from_fn(width as u32, height as u32, |x, y| match nodes[y as usize * width + x as usize] {
        Some(n) => Rgb(pal[n % PALETTE_SIZE]),
        None => Rgb([0, 0, 0]),
    })
}

/// Places images left to right.
fn hstack(parts: &[RgbImage]) -> RgbImage {
    let w = parts.iter().map(|p| p.width()).sum();
    let h = parts.iter().map(|p| p.height()).max().unwrap_or(0);
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for p in parts {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width();
    }
    out
}

fn color_image(color: &[f64], width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = 3 * (y as usize * width + x as usize);
        Rgb([0, 1, 2].map(|c| (color[i + c].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn depth_image(depth: &[f64], max: f64, width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = (depth[y as usize * width + x as usize] / max).clamp(0.0, 1.0);
        let g = (255.0 * (1.0 - v)).round() as u8;
        Rgb([g, g, g])
    })
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

/// Polylines of `series` (x, y) scaled into a shared box.
fn polylines(series: &[(Vec<(f64, f64)>, [u8; 3])], size: (u32, u32), equal_axes: bool) -> RgbImage {
    let mut img = RgbImage::from_pixel(size.0, size.1, Rgb([255, 255, 255]));
    let pts = series.iter().flat_map(|s| s.0.iter());
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in pts {
        lo = (lo.0.min(p.0), lo.1.min(p.1));
        hi = (hi.0.max(p.0), hi.1.max(p.1));
    }
    if !lo.0.is_finite() {
        return img;
    }
    let margin = 8.0;
    let (w, h) = (size.0 as f64 - 2.0 * margin, size.1 as f64 - 2.0 * margin);
    let mut sx = w / (hi.0 - lo.0).max(1e-12);
    let mut sy = h / (hi.1 - lo.1).max(1e-12);
    if equal_axes {
        sx = sx.min(sy);
        sy = sx;
    }
    let map = |p: &(f64, f64)| (margin + (p.0 - lo.0) * sx, size.1 as f64 - margin - (p.1 - lo.1) * sy);
    for (points, c) in series {
        for w in points.windows(2) {
            line(&mut img, map(&w[0]), map(&w[1]), *c);
        }
        if points.len() == 1 {
            let p = map(&points[0]);
            line(&mut img, p, p, *c);
        }
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save(path)
        .map_err(|e| CliError::generic(format!("{}: {e}", path.display())))
}

pub fn run(a: &PlotArgs) -> CliResult<()> {
    let r = load_run(&a.run, a.gt.as_deref())?;
    let f = a.frame;
    if f >= r.frames.len() {
        return Err(CliError::config(format!("frame {f} out of range ({} frames)", r.frames.len())));
    }
    std::fs::create_dir_all(&a.out)?;
    let (w, h) = (r.k.width, r.k.height);
    let input = &r.frames[f];
    let rendered = render(&r.map, &r.trajectory[f].1, &r.k, &r.record.config.render);
    let maps = &rendered.maps;

    let gt_depth = input.frame.depth.clone().unwrap_or_else(|| vec![0.0; w * h]);
    let max_depth = gt_depth.iter().chain(&maps.depth).cloned().fold(1e-6, f64::max);
    let panel = hstack(&[
        color_image(&maps.color, w, h),
        color_image(&input.frame.color, w, h),
        depth_image(&maps.depth, max_depth, w, h),
        depth_image(&gt_depth, max_depth, w, h),
    ]);
    save(&panel, &a.out.join(format!("render_frame{f:06}.png")))?;

    if let Some(codec) = &r.codec {
        let tree = codec.tree();
        let levels: Vec<usize> = match a.level {
            Some(l) if l >= tree.depth() => {
                return Err(CliError::config(format!("level {l} out of range for a {}-level tree", tree.depth())));
            }
            Some(l) => vec![l],
            None => (0..tree.depth()).collect(),
        };
        let sw = maps.sem_width;
        let decoded = (0..w * h)
            .map(|p| codec.decode(&maps.semantic[p * sw..(p + 1) * sw]))
            .collect::<Result<Vec<_>, _>>()?;
        for l in levels {
            let pred: Vec<Option<usize>> = decoded.iter().map(|d| Some(d.nodes[l])).collect();
            let gt: Vec<Option<usize>> = match &input.frame.labels {
                Some(labels) => labels
                    .iter()
                    .map(|&c| if c == 0 { None } else { tree.path_of(c).ok().map(|p| p.0[l]) })
                    .collect(),
                None => vec![None; w * h],
            };
            let img = hstack(&[label_image(&pred, w, h), label_image(&gt, w, h)]);
            save(&img, &a.out.join(format!("labels_level{l}_frame{f:06}.png")))?;
        }
    } else if a.level.is_some() {
        return Err(CliError::config("run has no semantic tree"));
    }

    // top-down view: the two axes along which the ground truth (or the
    // estimate) spreads the most
    let est3: Vec<[f64; 3]> = r.trajectory.iter().map(|p| (*p.1.translation()).into()).collect();
    let gt3: Vec<[f64; 3]> = r
        .frames
        .iter()
        .filter_map(|f| f.gt_pose.as_ref().map(|p| (*p.translation()).into()))
        .collect();
    let basis = if gt3.is_empty() { &est3 } else { &gt3 };
    let spread = |a: usize| {
        let (lo, hi) = basis.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |m, p| (m.0.min(p[a]), m.1.max(p[a])));
        hi - lo
    };
    let mut axes = [0usize, 1, 2];
    axes.sort_by(|&a, &b| spread(b).total_cmp(&spread(a)));
    let (ax, ay) = (axes[0].min(axes[1]), axes[0].max(axes[1]));
    let flat = |v: &[[f64; 3]]| v.iter().map(|p| (p[ax], p[ay])).collect::<Vec<_>>();
    let (gt, est) = (flat(&gt3), flat(&est3));
    let traj = polylines(&[(gt, [40, 160, 40]), (est, [200, 30, 30])], (320, 320), true);
    save(&traj, &a.out.join("trajectory.png"))?;

    let traces_path = a.run.join(TRACES_FILE);
    if traces_path.exists() {
        let traces: Traces = serde_json::from_str(&std::fs::read_to_string(&traces_path)?)
            .map_err(|e| CliError::generic(format!("{}: {e}", traces_path.display())))?;
        let log = |v: f64| v.max(1e-12).log10();
        let track: Vec<(f64, f64)> = traces
            .tracking
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.iter().cloned().reduce(f64::min).map(|m| (i as f64 + 1.0, log(m))))
            .collect();
        let mapping: Vec<(f64, f64)> = traces
            .mapping
            .iter()
            .flat_map(|(_, t)| t.iter())
            .enumerate()
            .map(|(i, &v)| (i as f64, log(v)))
            .collect();
        let img = hstack(&[
            polylines(&[(track, [30, 60, 200])], (320, 200), false),
            polylines(&[(mapping, [200, 120, 20])], (320, 200), false),
        ]);
        save(&img, &a.out.join("losses.png"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct() {
        let p = palette();
        for i in 0..PALETTE_SIZE {
            for j in 0..i {
                assert_ne!(p[i], p[j], "{i} {j}");
            }
        }
    }

    #[test]
    fn first_entry_is_pure_hue() {
        // hue 0, s 0.85, v 0.95
        assert_eq!(palette()[0], [242, 36, 36]);
    }
}
