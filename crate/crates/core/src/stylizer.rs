//! Stylizer plug-in contract and a deterministic mock.
//!
//! A stylizer receives the unstylized target frame plus whatever conditioning
//! the pipeline prepared (composite, per-reference heatmaps, cached reference
//! latents) and returns stylized RGB and depth. An external diffusion model
//! would implement [`Stylizer`] by wrapping its own denoiser in a
//! [`Denoiser`] and driving it through the [`Scheduler`].
//!
//! The mock builds a target `x0*` per channel group as
//! `input + T_max * (style - input)`, overrides it with the composite where
//! the composite took a warped pixel, injects reference token features, and
//! then runs the real partial-inversion / denoising loop with a denoiser
//! that is self-consistent with `x0*`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{inject_features, injection_weights, mixing_matrix, AttentionConfig, DenseHeatmap};
use crate::composite::CompositeFrame;
use crate::error::{Error, Result};
use crate::frame::{ColorRaster, DepthMap, Raster, RgbdFrame};
use crate::rng::NoiseKey;
use crate::schedule::{ChannelGroup, Denoiser, Latent, LatentCache, Scheduler, StyleStrength};

/// Floor on decoded disparity, keeps depth finite.
const MIN_DISPARITY: f32 = 1e-6;

/// RGB in planes 0..3, `disparity_scale / depth` in plane 3.
pub fn encode(rgb: &ColorRaster, depth: &DepthMap, disparity_scale: f64) -> Result<Latent> {
    rgb.check_dims(depth, "encode rgb vs depth")?;
    let (w, h) = rgb.dims();
    let mut l = Latent::zeros(w, h);
    for c in 0..3 {
        for (x, p) in l.plane_mut(c).iter_mut().zip(rgb.data()) {
            *x = p[c] as f32;
        }
    }
    for (x, d) in l.plane_mut(3).iter_mut().zip(depth.data()) {
        *x = (disparity_scale / d) as f32;
    }
    Ok(l)
}

pub fn decode_rgb(l: &Latent) -> ColorRaster {
    let (w, h) = (l.width(), l.height());
    let (r, g, b) = (l.plane(0), l.plane(1), l.plane(2));
    Raster::from_fn(w, h, |u, v| {
        let i = v * w + u;
        [r[i], g[i], b[i]].map(|x| (x as f64).clamp(0.0, 1.0))
    })
}

pub fn decode_depth(l: &Latent, disparity_scale: f64) -> DepthMap {
    let (w, h) = (l.width(), l.height());
    let d = l.plane(3);
    Raster::from_fn(w, h, |u, v| disparity_scale / d[v * w + u].max(MIN_DISPARITY) as f64)
}

/// One reference frame as seen by the stylizer.
#[derive(Debug, Clone)]
pub struct ReferenceInput<'a> {
    pub index: usize,
    /// Stylized reference.
    pub frame: &'a RgbdFrame,
    /// Target-token x reference-token heatmap.
    pub heatmap: Option<&'a DenseHeatmap>,
    /// Final latent of the reference, when cached.
    pub latent: Option<Arc<Latent>>,
}

#[derive(Debug, Clone)]
pub struct StylizeRequest<'a> {
    pub input: &'a RgbdFrame,
    pub composite: Option<&'a CompositeFrame>,
    pub references: Vec<ReferenceInput<'a>>,
    pub strengths: StyleStrength,
    pub attention: AttentionConfig,
}

#[derive(Debug, Clone)]
pub struct StylizedOutput {
    pub rgb: ColorRaster,
    pub depth: DepthMap,
    pub latent: Latent,
}

pub trait Stylizer: Sync {
    /// Stylize `req.input`. Intermediate latents go to `cache` under
    /// `req.input.index` when one is given.
    fn stylize(&self, req: &StylizeRequest<'_>, cache: Option<&LatentCache>) -> Result<StylizedOutput>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockStylizer {
    /// Hue rotation in degrees at `T_rgb = 1`.
    pub hue_per_unit: f64,
    /// Amplitude of the per-frame color jitter at `T_rgb = 1`.
    pub jitter: f64,
    /// Depth displacement amplitude in meters at `T_d = 1`.
    pub depth_amplitude: f64,
    pub seed: u64,
    /// Feature-injection tokens per side (largest divisor of the frame size
    /// not above this).
    pub token_grid: usize,
    pub scheduler: Scheduler,
}

impl Default for MockStylizer {
    fn default() -> Self {
        Self { hue_per_unit: 150.0, jitter: 0.25, depth_amplitude: 0.3, seed: 0, token_grid: 32, scheduler: Scheduler::default() }
    }
}

/// Rotate `c` about the gray axis by `deg` degrees.
pub fn rotate_hue(c: [f64; 3], deg: f64) -> [f64; 3] {
    let (s, co) = deg.to_radians().sin_cos();
    let k = (1.0 - co) / 3.0;
    let r3 = s / 3f64.sqrt();
    let m = [[co + k, k - r3, k + r3], [k + r3, co + k, k - r3], [k - r3, k + r3, co + k]];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2]).clamp(0.0, 1.0);
    }
    out
}

/// Three image-space sinusoids with parameters drawn from `key`.
#[derive(Debug, Clone, Copy)]
struct Waves([(f64, f64, f64); 3]);

impl Waves {
    fn new(key: NoiseKey, offset: u64) -> Self {
        let mut p = [(0.0, 0.0, 0.0); 3];
        for (k, w) in p.iter_mut().enumerate() {
            let base = offset + 3 * k as u64;
            *w = (
                0.5 + 2.0 * key.uniform(base),
                0.5 + 2.0 * key.uniform(base + 1),
                std::f64::consts::TAU * key.uniform(base + 2),
            );
        }
        Self(p)
    }

    /// In `[-1, 1]`.
    fn at(&self, x: f64, y: f64) -> f64 {
        self.0.iter().map(|&(fx, fy, ph)| (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin()).sum::<f64>() / 3.0
    }
}

fn divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Average-pool planes `0..3` over `g x g` token windows, tokens row-major.
fn pool_rgb(l: &Latent, gx: usize, gy: usize) -> DMatrix<f64> {
    let (w, h) = (l.width(), l.height());
    let (sx, sy) = (w / gx, h / gy);
    let mut out = DMatrix::zeros(gx * gy, 3);
    for c in 0..3 {
        let p = l.plane(c);
        for ty in 0..gy {
            for tx in 0..gx {
                let mut acc = 0.0;
                for v in ty * sy..(ty + 1) * sy {
                    for u in tx * sx..(tx + 1) * sx {
                        acc += p[v * w + u] as f64;
                    }
                }
                out[(ty * gx + tx, c)] = acc / (sx * sy) as f64;
            }
        }
    }
    out
}

/// Bilinear upsample of a token field (row-major `gx x gy`, token centers at
/// window centers) to `w x h`.
fn upsample(tokens: &DMatrix<f64>, c: usize, gx: usize, gy: usize, w: usize, h: usize) -> Vec<f64> {
    let (sx, sy) = (w as f64 / gx as f64, h as f64 / gy as f64);
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        let fy = ((v as f64 + 0.5) / sy - 0.5).clamp(0.0, (gy - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(gy - 1);
        for u in 0..w {
            let fx = ((u as f64 + 0.5) / sx - 0.5).clamp(0.0, (gx - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(gx - 1);
            let t = |x: usize, y: usize| tokens[(y * gx + x, c)];
            out[v * w + u] =
                (1.0 - ty) * ((1.0 - tx) * t(x0, y0) + tx * t(x1, y0)) + ty * ((1.0 - tx) * t(x0, y1) + tx * t(x1, y1));
        }
    }
    out
}

/// `eps(x_t) = (x_t - sqrt(ab) x0*) / sqrt(1 - ab)`, so every DDIM step
/// predicts `x0*` exactly.
pub struct TargetDenoiser<'a> {
    pub target: &'a Latent,
    pub scheduler: &'a Scheduler,
}

impl Denoiser for TargetDenoiser<'_> {
    type Cond = ();

    fn predict_noise(&self, x: &Latent, t: f64, _: &()) -> Result<Latent> {
        if !x.same_shape(self.target) {
            return Err(Error::ShapeMismatch("latent vs denoiser target".into()));
        }
        let a = self.scheduler.schedule.alpha_bar(t);
        let mut eps = Latent::zeros(x.width(), x.height());
        if 1.0 - a < 1e-12 {
            return Ok(eps);
        }
        let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
        for g in ChannelGroup::ALL {
            for c in g.channels() {
                let (xs, ts) = (x.plane(c), self.target.plane(c));
                for ((e, &xv), &tv) in eps.plane_mut(c).iter_mut().zip(xs).zip(ts) {
                    *e = ((xv as f64 - s * tv as f64) / n) as f32;
                }
            }
        }
        Ok(eps)
    }
}

impl MockStylizer {
    /// Scale that maps the frame's nearest depth to disparity 1.
    pub fn disparity_scale(depth: &DepthMap) -> f64 {
        depth.data().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// The unconditioned style of `input`.
    pub fn style(&self, input: &RgbdFrame, s: &StyleStrength) -> (ColorRaster, DepthMap) {
        let (w, h) = (input.width(), input.height());
        let run = NoiseKey::new(self.seed, u64::MAX, 0);
        let frame_key = NoiseKey::new(self.seed, input.index as u64, 1);
        let depth_waves = Waves::new(run, 0);
        let jitter = [Waves::new(frame_key, 0), Waves::new(frame_key, 9), Waves::new(frame_key, 18)];
        let hue = s.t_rgb_max * self.hue_per_unit;
        let amp = self.jitter * s.t_rgb_max;
        let rgb = Raster::from_fn(w, h, |u, v| {
            let (x, y) = (u as f64 / w as f64, v as f64 / h as f64);
            let mut c = rotate_hue(*input.rgb.get(u, v), hue);
            for k in 0..3 {
                c[k] = (c[k] + amp * jitter[k].at(x, y)).clamp(0.0, 1.0);
            }
            c
        });
        let da = self.depth_amplitude * s.t_depth_max;
        let depth = Raster::from_fn(w, h, |u, v| {
            let (x, y) = (u as f64 / w as f64, v as f64 / h as f64);
            let d = *input.depth.get(u, v);
            (d + da * depth_waves.at(x, y)).max(0.05 * d)
        });
        (rgb, depth)
    }

    fn target_latent(&self, req: &StylizeRequest<'_>, x0: &Latent, scale: f64) -> Result<Latent> {
        let s = &req.strengths;
        let (style_rgb, style_depth) = self.style(req.input, s);
        let styled = encode(&style_rgb, &style_depth, scale)?;
        let mut target = x0.clone();
        for g in ChannelGroup::ALL {
            let t = s.t_max(g) as f32;
            for c in g.channels() {
                let sp = styled.plane(c);
                for (x, &st) in target.plane_mut(c).iter_mut().zip(sp) {
                    *x += t * (st - *x);
                }
            }
        }
        if s.active(ChannelGroup::Rgb) {
            self.inject(req, &mut target)?;
        }
        if let Some(comp) = req.composite {
            let enc = encode(&comp.rgb, &comp.depth, scale)?;
            let mask = comp.source_mask.raster().data();
            for g in ChannelGroup::ALL.into_iter().filter(|&g| s.active(g)) {
                for c in g.channels() {
                    let ep = enc.plane(c);
                    for (i, x) in target.plane_mut(c).iter_mut().enumerate() {
                        if mask[i] {
                            *x = ep[i];
                        }
                    }
                }
            }
        }
        Ok(target)
    }

    /// Blend reference token colors into the target through the heatmaps.
    fn inject(&self, req: &StylizeRequest<'_>, target: &mut Latent) -> Result<()> {
        let refs: Vec<&ReferenceInput> = req.references.iter().filter(|r| r.heatmap.is_some()).collect();
        if refs.is_empty() {
            return Ok(());
        }
        let (w, h) = (target.width(), target.height());
        let (gx, gy) = (divisor_at_most(w, self.token_grid), divisor_at_most(h, self.token_grid));
        let n = gx * gy;
        let h_tgt = pool_rgb(target, gx, gy);

        let mut blocks = Vec::new();
        let mut feats = Vec::new();
        for r in &refs {
            let hm = r.heatmap.unwrap();
            if hm.target_res != (gx, gy) {
                return Err(Error::DimensionMismatch(format!(
                    "heatmap target tokens {:?}, stylizer uses {:?}",
                    hm.target_res,
                    (gx, gy)
                )));
            }
            let (rx, ry) = hm.reference_res;
            let lat = match &r.latent {
                Some(l) => l.clone(),
                None => Arc::new(encode(&r.frame.rgb, &r.frame.depth, 1.0)?),
            };
            if lat.width() % rx != 0 || lat.height() % ry != 0 {
                return Err(Error::DimensionMismatch("reference latent vs heatmap tokens".into()));
            }
            blocks.push(hm.to_matrix());
            feats.push(pool_rgb(&lat, rx, ry));
        }
        let total: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut l = DMatrix::zeros(n, total);
        let mut h_ref = DMatrix::zeros(total, 3);
        let mut col = 0;
        for (b, f) in blocks.iter().zip(&feats) {
            l.view_mut((0, col), (n, b.ncols())).copy_from(b);
            h_ref.view_mut((col, 0), (b.ncols(), 3)).copy_from(f);
            col += b.ncols();
        }
        let m = mixing_matrix(&l, req.attention.temperature)?;
        let wts = injection_weights(&l, req.attention.lambda_inject);
        let mixed = inject_features(&h_tgt, &h_ref, &m, &wts)?;
        let delta = mixed - &h_tgt;
        for c in 0..3 {
            let up = upsample(&delta, c, gx, gy, w, h);
            for (x, d) in target.plane_mut(c).iter_mut().zip(up) {
                *x += d as f32;
            }
        }
        Ok(())
    }

    /// Token grid used for heatmaps of `w x h` frames.
    pub fn token_resolution(&self, w: usize, h: usize) -> (usize, usize) {
        (divisor_at_most(w, self.token_grid), divisor_at_most(h, self.token_grid))
    }
}

impl Stylizer for MockStylizer {
    fn stylize(&self, req: &StylizeRequest<'_>, cache: Option<&LatentCache>) -> Result<StylizedOutput> {
        let s = req.strengths;
        s.validate()?;
        let input = req.input;
        let scale = Self::disparity_scale(&input.depth);
        let x0 = encode(&input.rgb, &input.depth, scale)?;
        let target = self.target_latent(req, &x0, scale)?;
        let den = TargetDenoiser { target: &target, scheduler: &self.scheduler };
        let key = NoiseKey::new(self.seed, input.index as u64, 2);
        let frame = input.index;
        let noised = self.scheduler.partial_invert(&x0, &den, &s, &(), key, None)?;
        let latent = self.scheduler.denoise(&noised, &den, &s, &(), cache.map(|c| (c, frame)))?;

        let rgb = if s.active(ChannelGroup::Rgb) { decode_rgb(&latent) } else { input.rgb.clone() };
        let depth = if s.active(ChannelGroup::Depth) { decode_depth(&latent, scale) } else { input.depth.clone() };
        Ok(StylizedOutput { rgb, depth, latent })
    }
}
