//! Brute-force oracles shared by the integration tests and the acceptance
//! runner. None of them call into the code they check beyond data types.

#![allow(dead_code)]

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewstyle::frame::{CameraView, Intrinsics, Pose, RgbdFrame};
use viewstyle::geometry::DepthMesh;
use viewstyle::synthetic::{random_frame, random_pose};
use viewstyle::warp::{FlowEntry, FlowField};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A smooth random frame and a nearby camera to warp it into.
pub fn random_case(seed: u64, size: usize) -> (RgbdFrame, CameraView) {
    let f = random_frame(seed, size, size, Pose::identity()).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let med = f.depth.data().iter().sum::<f64>() / f.depth.len() as f64;
    let pose = random_pose(&mut r, 0.08 * med, 6f64.to_radians());
    let view = CameraView::new("target", f.intrinsics, pose);
    (f, view)
}

fn to_camera(k: &Intrinsics, pose: &Pose, world: Vector3<f64>) -> Option<(f64, f64, f64)> {
    let p = pose.rotation().transpose() * (world - pose.translation());
    if p.z <= 1e-6 {
        return None;
    }
    Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

fn backproject(k: &Intrinsics, pose: &Pose, u: f64, v: f64, z: f64) -> Vector3<f64> {
    let c = Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
    pose.rotation() * c + pose.translation()
}

/// Per target pixel: nearest splatted depth and its color, or `None`.
pub struct Splat {
    pub width: usize,
    pub height: usize,
    pub px: Vec<Option<(f64, [f64; 3])>>,
}

/// Point-splat oracle. Every source pixel quad is sampled `sub x sub` times
/// on its bilinear surface; each sample is projected and kept for the target
/// pixel whose center lies within `radius` on both axes. Per pixel the
/// nearest depth picks the front surface (samples within `FRONT_BAND` of it)
/// and the front sample closest to the center wins; taking the plain minimum
/// would bias depth towards the camera on slanted surfaces.
/// With `sub = 1` this is a plain per-pixel point splat.
pub const FRONT_BAND: f64 = 0.02;

pub fn point_splat(src: &RgbdFrame, target: &CameraView, sub: usize, radius: f64) -> Splat {
    let k = &src.intrinsics;
    let tk = &target.intrinsics;
    let (w, h) = (src.width(), src.height());
    // (offset from center, depth, color) per target pixel
    let mut hits: Vec<Vec<(f64, f64, [f64; 3])>> = vec![Vec::new(); tk.width * tk.height];
    let mut splat = |world: Vector3<f64>, c: [f64; 3]| {
        let Some((x, y, z)) = to_camera(tk, &target.pose, world) else { return };
        let (ru, rv) = (x.round(), y.round());
        if (x - ru).abs() > radius || (y - rv).abs() > radius {
            return;
        }
        if ru < 0.0 || rv < 0.0 || ru >= tk.width as f64 || rv >= tk.height as f64 {
            return;
        }
        let i = rv as usize * tk.width + ru as usize;
        hits[i].push(((x - ru).hypot(y - rv), z, c));
    };
    if sub == 1 {
        for v in 0..h {
            for u in 0..w {
                let z = *src.depth.get(u, v);
                splat(backproject(k, &src.pose, u as f64, v as f64, z), *src.rgb.get(u, v));
            }
        }
    } else {
        for v in 0..h - 1 {
            for u in 0..w - 1 {
                let corners = [(u, v), (u + 1, v), (u, v + 1), (u + 1, v + 1)];
                let pts = corners.map(|(a, b)| backproject(k, &src.pose, a as f64, b as f64, *src.depth.get(a, b)));
                let cols = corners.map(|(a, b)| *src.rgb.get(a, b));
                for j in 0..=sub {
                    for i in 0..=sub {
                        let (s, t) = (i as f64 / sub as f64, j as f64 / sub as f64);
                        let wts = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
                        let mut p = Vector3::zeros();
                        let mut c = [0.0; 3];
                        for q in 0..4 {
                            p += pts[q] * wts[q];
                            for ch in 0..3 {
                                c[ch] += cols[q][ch] * wts[q];
                            }
                        }
                        splat(p, c);
                    }
                }
            }
        }
    }
    let px = hits
        .iter()
        .map(|hs| {
            let front = hs.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
            hs.iter()
                .filter(|h| h.1 <= front * (1.0 + FRONT_BAND))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|h| (h.1, h.2))
        })
        .collect();
    Splat { width: tk.width, height: tk.height, px }
}

/// Per target pixel, bounds on the depth a z-buffer must report: the minimum
/// over every fragment whose triangle covers the pixel center allowing a
/// `slack` (in edge-function units), and the minimum over fragments strictly
/// inside by more than `slack`. Vertices are snapped to 1/256 px like the
/// rasterizer documents, but coverage is a plain closed/open test.
pub struct FragmentBounds {
    pub loose: Vec<Option<f64>>,
    pub strict: Vec<Option<f64>>,
}

pub fn fragment_bounds(mesh: &DepthMesh, target: &CameraView, slack: f64) -> FragmentBounds {
    let tk = &target.intrinsics;
    let (w, h) = (tk.width, tk.height);
    let snap = |x: f64| (x * 256.0).round() / 256.0;
    let proj: Vec<Option<(f64, f64, f64)>> = mesh
        .vertices
        .iter()
        .map(|v| to_camera(tk, &target.pose, v.position).map(|(x, y, z)| (snap(x), snap(y), z)))
        .collect();
    let mut loose = vec![None::<f64>; w * h];
    let mut strict = vec![None::<f64>; w * h];
    for tri in &mesh.triangles {
        let [Some(a), Some(b), Some(c)] = tri.map(|i| proj[i as usize]) else { continue };
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area == 0.0 {
            continue;
        }
        for py in 0..h {
            for pxl in 0..w {
                let (x, y) = (pxl as f64, py as f64);
                let e = |p: (f64, f64, f64), q: (f64, f64, f64)| ((q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)) / area;
                let l0 = e(b, c);
                let l1 = e(c, a);
                let l2 = e(a, b);
                let lo = l0.min(l1).min(l2);
                if lo < -slack {
                    continue;
                }
                let z = l0 * a.2 + l1 * b.2 + l2 * c.2;
                let i = py * w + pxl;
                if loose[i].map_or(true, |d| z < d) {
                    loose[i] = Some(z);
                }
                if lo > slack && strict[i].map_or(true, |d| z < d) {
                    strict[i] = Some(z);
                }
            }
        }
    }
    FragmentBounds { loose, strict }
}

/// Random flow over a `w x h` reference into a `w x h` target: fractional
/// targets, some landing outside, some occluded.
pub fn random_flow(r: &mut ChaCha8Rng, w: usize, h: usize) -> FlowField {
    let entries = viewstyle::frame::Raster::from_fn(w, h, |_, _| {
        let x = r.random_range(-1.0..w as f64 + 0.4);
        let y = r.random_range(-1.0..h as f64 + 0.4);
        let inside = x.round() >= 0.0 && y.round() >= 0.0 && x.round() < w as f64 && y.round() < h as f64;
        let occluded = !inside || r.random_bool(0.25);
        FlowEntry { target: (x, y), depth: r.random_range(0.5..5.0), occluded }
    });
    FlowField { entries, target_width: w, target_height: h }
}

/// Quadruple-loop heatmap: delta tensor, kernel sum (or max) over reference
/// pixels, clamp, then windowed max over both pixel pairs. Returned row-major
/// with target tokens as rows.
pub fn heatmap_oracle(
    flow: &FlowField,
    d_max: f64,
    l_min: f64,
    upper: bool,
    sum: bool,
    target_res: (usize, usize),
    ref_res: (usize, usize),
) -> Vec<f64> {
    let (rw, rh) = flow.entries.dims();
    let (tw, th) = (flow.target_width, flow.target_height);
    // a[v][u][v'][u']
    let mut a = vec![0u8; rw * rh * tw * th];
    let at = |u: usize, v: usize, tu: usize, tv: usize| ((v * rw + u) * th + tv) * tw + tu;
    for v in 0..rh {
        for u in 0..rw {
            let e = flow.entries.get(u, v);
            if e.occluded {
                continue;
            }
            let (tu, tv) = (e.target.0.round() as usize, e.target.1.round() as usize);
            a[at(u, v, tu, tv)] = 1;
        }
    }
    let kernel = |du: f64, dv: f64| (1.0 - (du * du + dv * dv).sqrt() / d_max).max(0.0);
    let mut l = vec![0.0f64; rw * rh * tw * th];
    for tv in 0..th {
        for tu in 0..tw {
            for v in 0..rh {
                for u in 0..rw {
                    let mut acc = 0.0f64;
                    for b in 0..rh {
                        for c in 0..rw {
                            if a[at(c, b, tu, tv)] == 1 {
                                let k = kernel(u as f64 - c as f64, v as f64 - b as f64);
                                acc = if sum { acc + k } else { acc.max(k) };
                            }
                        }
                    }
                    let mut x = acc.max(l_min);
                    if upper {
                        x = x.min(1.0);
                    }
                    l[at(u, v, tu, tv)] = x;
                }
            }
        }
    }
    let (twx, twy) = (tw / target_res.0, th / target_res.1);
    let (rwx, rwy) = (rw / ref_res.0, rh / ref_res.1);
    let mut out = vec![f64::NEG_INFINITY; target_res.0 * target_res.1 * ref_res.0 * ref_res.1];
    let m = ref_res.0 * ref_res.1;
    for tv in 0..th {
        for tu in 0..tw {
            for v in 0..rh {
                for u in 0..rw {
                    let j = (tv / twy) * target_res.0 + tu / twx;
                    let i = (v / rwy) * ref_res.0 + u / rwx;
                    let x = l[at(u, v, tu, tv)];
                    if x > out[j * m + i] {
                        out[j * m + i] = x;
                    }
                }
            }
        }
    }
    out
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
}

/// Two-loop `h'_j = (1 - w_j) h_j + w_j sum_i M[j, i] h_ref_i`.
pub fn inject_oracle(h: &DMatrix<f64>, h_ref: &DMatrix<f64>, m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut out = h.clone();
    for j in 0..h.nrows() {
        for c in 0..h.ncols() {
            let mut mix = 0.0;
            for i in 0..h_ref.nrows() {
                mix += m[(j, i)] * h_ref[(i, c)];
            }
            out[(j, c)] = (1.0 - w[j]) * h[(j, c)] + w[j] * mix;
        }
    }
    out
}

/// Plain scaled dot-product attention over explicit key/value rows with an
/// additive log-bias per (query, key).
pub fn attention_oracle(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, log_bias: &DMatrix<f64>) -> DMatrix<f64> {
    let d = q.ncols() as f64;
    let mut out = DMatrix::zeros(q.nrows(), v.ncols());
    for j in 0..q.nrows() {
        let logits: Vec<f64> = (0..k.nrows()).map(|i| q.row(j).dot(&k.row(i)) / d.sqrt() + log_bias[(j, i)]).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..k.nrows() {
            for c in 0..v.ncols() {
                out[(j, c)] += e[i] / z * v[(i, c)];
            }
        }
    }
    out
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rmse(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        acc += (a - b) * (a - b);
        n += 1;
    }
    (acc / n.max(1) as f64).sqrt()
}
