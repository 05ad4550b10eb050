//! Dual-channel noise scheduling.
//!
//! Latents are 8 planar `f32` channels: RGB (0..3), normalized disparity (3),
//! the two channel masks (4, 5) and two reserved planes. RGB and disparity
//! form the two gated groups; the mask planes are rewritten before each
//! denoiser call and never updated by DDIM steps.
//!
//! Timesteps are normalized to `[0, 1]` under a variance-preserving cosine
//! schedule. Gating follows one rule everywhere: an update whose noisier end
//! lies at `t` is applied to a group iff `t <= T_max` of that group. Groups
//! with `T_max = 0` are therefore never touched.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composite::median_scale;
use crate::error::{Error, Result};
use crate::frame::{DepthMap, ValidityMask};
use crate::rng::NoiseKey;

pub const LATENT_CHANNELS: usize = 8;
pub const MASK_RGB_PLANE: usize = 4;
pub const MASK_DEPTH_PLANE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelGroup {
    Rgb,
    Depth,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 2] = [ChannelGroup::Rgb, ChannelGroup::Depth];

    pub fn channels(self) -> std::ops::Range<usize> {
        match self {
            ChannelGroup::Rgb => 0..3,
            ChannelGroup::Depth => 3..4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleStrength {
    pub t_rgb_max: f64,
    pub t_depth_max: f64,
    pub t_noise: f64,
}

impl Default for StyleStrength {
    fn default() -> Self {
        Self { t_rgb_max: 0.6, t_depth_max: 0.4, t_noise: 0.2 }
    }
}

impl StyleStrength {
    pub fn new(t_rgb_max: f64, t_depth_max: f64, t_noise: f64) -> Result<Self> {
        let s = Self { t_rgb_max, t_depth_max, t_noise };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("t_rgb_max", self.t_rgb_max), ("t_depth_max", self.t_depth_max), ("t_noise", self.t_noise)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Config(format!("{name} = {x} outside [0, 1]")));
            }
        }
        let bound = if self.t_rgb_max > 0.0 && self.t_depth_max > 0.0 {
            self.t_rgb_max.min(self.t_depth_max)
        } else {
            self.t_high()
        };
        if self.t_noise > bound {
            return Err(Error::Config(format!("t_noise = {} exceeds {bound}", self.t_noise)));
        }
        Ok(())
    }

    pub fn t_max(&self, group: ChannelGroup) -> f64 {
        match group {
            ChannelGroup::Rgb => self.t_rgb_max,
            ChannelGroup::Depth => self.t_depth_max,
        }
    }

    /// Highest timestep reached by inversion.
    pub fn t_high(&self) -> f64 {
        self.t_rgb_max.max(self.t_depth_max)
    }

    /// Whether `group` is stylized at all.
    pub fn active(&self, group: ChannelGroup) -> bool {
        self.t_max(group) > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMasks {
    pub rgb: bool,
    pub depth: bool,
}

impl ChannelMasks {
    pub const NONE: ChannelMasks = ChannelMasks { rgb: false, depth: false };
    pub const ALL: ChannelMasks = ChannelMasks { rgb: true, depth: true };

    pub fn get(&self, group: ChannelGroup) -> bool {
        match group {
            ChannelGroup::Rgb => self.rgb,
            ChannelGroup::Depth => self.depth,
        }
    }
}

/// `m_g = 1` iff `t <= T_max(g)`, except that groups with `T_max = 0` stay off.
pub fn channel_masks(t: f64, s: &StyleStrength) -> ChannelMasks {
    let on = |g| s.active(g) && t <= s.t_max(g);
    ChannelMasks { rgb: on(ChannelGroup::Rgb), depth: on(ChannelGroup::Depth) }
}

/// Variance-preserving cosine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub offset: f64,
    /// Lower clamp on `alpha_bar`, keeps the x0 estimate finite at `t = 1`.
    pub alpha_bar_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { offset: 0.008, alpha_bar_min: 1e-4 }
    }
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let f = |t: f64| {
            let c = ((t + self.offset) / (1.0 + self.offset) * std::f64::consts::FRAC_PI_2).cos();
            c * c
        };
        if t <= 0.0 {
            return 1.0;
        }
        (f(t) / f(0.0)).clamp(self.alpha_bar_min, 1.0)
    }
}

/// Strictly decreasing timesteps from 1 to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        Ok(Self((0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()))
    }

    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || points.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Config("grid must be strictly decreasing with at least two points".into()));
        }
        if points.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("grid points must lie in [0, 1]".into()));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self::uniform(50).expect("50 steps")
    }
}

/// Planar `f32` latent, `LATENT_CHANNELS x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Latent {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; LATENT_CHANNELS * width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != LATENT_CHANNELS * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {LATENT_CHANNELS}x{height}x{width} latent",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn group(&self, g: ChannelGroup) -> &[f32] {
        let n = self.plane_len();
        let r = g.channels();
        &self.data[r.start * n..r.end * n]
    }

    fn group_mut(&mut self, g: ChannelGroup) -> &mut [f32] {
        let n = self.plane_len();
        let r = g.channels();
        &mut self.data[r.start * n..r.end * n]
    }

    pub fn same_shape(&self, other: &Latent) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_shape(&self, other: &Latent, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn set_masks(&mut self, m: ChannelMasks) {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        self.plane_mut(MASK_RGB_PLANE).fill(f(m.rgb));
        self.plane_mut(MASK_DEPTH_PLANE).fill(f(m.depth));
    }

    /// Standard normal noise for the gated groups, zero elsewhere. Sample
    /// counter is `pixel * LATENT_CHANNELS + channel`.
    pub fn noise(width: usize, height: usize, key: NoiseKey) -> Self {
        let mut out = Self::zeros(width, height);
        let n = width * height;
        for g in ChannelGroup::ALL {
            for c in g.channels() {
                out.plane_mut(c).par_iter_mut().enumerate().for_each(|(p, x)| {
                    *x = key.gaussian((p * LATENT_CHANNELS + c) as u64) as f32;
                });
            }
        }
        debug_assert_eq!(out.plane_len(), n);
        out
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).fold(0.0, f64::max)
    }
}

/// Replace each group of `latent` by `proposed` iff its mask is set.
pub fn gated_update(latent: &Latent, proposed: &Latent, masks: ChannelMasks) -> Result<Latent> {
    latent.check_shape(proposed, "gated_update")?;
    let mut out = latent.clone();
    apply_gated(&mut out, proposed, masks);
    Ok(out)
}

fn apply_gated(latent: &mut Latent, proposed: &Latent, masks: ChannelMasks) {
    for g in ChannelGroup::ALL {
        if masks.get(g) {
            latent.group_mut(g).copy_from_slice(proposed.group(g));
        }
    }
}

/// Noise predictor driven by the scheduler.
pub trait Denoiser {
    type Cond: ?Sized;

    /// Predicted noise `eps(x_t)`; only the RGB and depth planes are read.
    fn predict_noise(&self, latent: &Latent, t: f64, cond: &Self::Cond) -> Result<Latent>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Invert,
    Denoise,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Invert => "invert",
            Phase::Denoise => "denoise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub frame: usize,
    pub phase: Phase,
    t_bits: u64,
}

impl CacheKey {
    pub fn new(frame: usize, phase: Phase, t: f64) -> Self {
        Self { frame, phase, t_bits: t.to_bits() }
    }

    pub fn t(&self) -> f64 {
        f64::from_bits(self.t_bits)
    }
}

/// Append-only store of intermediate latents, shared across frames.
#[derive(Debug, Default)]
pub struct LatentCache {
    entries: RwLock<HashMap<CacheKey, Arc<Latent>>>,
}

impl LatentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, key: CacheKey, latent: Latent) -> Result<Arc<Latent>> {
        let mut map = self.entries.write().expect("cache lock");
        if map.contains_key(&key) {
            return Err(Error::CacheEntryExists { frame: key.frame, phase: key.phase.name(), t: key.t() });
        }
        let arc = Arc::new(latent);
        map.insert(key, arc.clone());
        Ok(arc)
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<Latent>> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, frame: usize, phase: Phase) -> usize {
        self.entries.read().expect("cache lock").keys().filter(|k| k.frame == frame && k.phase == phase).count()
    }

    /// Drop every entry of `frame`.
    pub fn evict_frame(&self, frame: usize) {
        self.entries.write().expect("cache lock").retain(|k, _| k.frame != frame);
    }
}

/// Schedule plus grid; owns the DDIM arithmetic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scheduler {
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
}

impl Scheduler {
    pub fn new(schedule: NoiseSchedule, grid: TimeGrid) -> Self {
        Self { schedule, grid }
    }

    /// Ascending timesteps from `lo` to `hi`: interior grid points plus the
    /// group thresholds that fall inside, so gates switch exactly on a knot.
    fn knots(&self, lo: f64, hi: f64, s: &StyleStrength) -> Vec<f64> {
        let mut k: Vec<f64> = self
            .grid
            .points()
            .iter()
            .cloned()
            .chain([s.t_rgb_max, s.t_depth_max])
            .filter(|&t| t > lo && t < hi)
            .chain([lo, hi])
            .collect();
        k.sort_by(f64::total_cmp);
        k.dedup();
        k
    }

    /// Inversion knots from `t_noise` to `t_high`.
    pub fn inversion_knots(&self, s: &StyleStrength) -> Result<Vec<f64>> {
        let hi = s.t_high();
        if hi <= s.t_noise {
            return Ok(vec![s.t_noise]);
        }
        let k = self.knots(s.t_noise, hi, s);
        if k.len() < 3 {
            return Err(Error::GridTooCoarse { from: s.t_noise, to: hi, steps: k.len() - 1 });
        }
        Ok(k)
    }

    /// Denoising knots from `t_high` down to 0.
    pub fn denoise_knots(&self, s: &StyleStrength) -> Vec<f64> {
        let hi = s.t_high();
        if hi <= 0.0 {
            return vec![0.0];
        }
        let mut k = self.knots(0.0, hi, s);
        k.reverse();
        k
    }

    /// `x_to = sqrt(ab_to) x0 + sqrt(1 - ab_to) eps` with
    /// `x0 = (x - sqrt(1 - ab_from) eps) / sqrt(ab_from)`, on gated groups only.
    pub fn ddim_step(&self, x: &Latent, eps: &Latent, t_from: f64, t_to: f64, masks: ChannelMasks) -> Result<Latent> {
        x.check_shape(eps, "ddim_step")?;
        let (af, at) = (self.schedule.alpha_bar(t_from), self.schedule.alpha_bar(t_to));
        let (sf, nf) = (af.sqrt(), (1.0 - af).sqrt());
        let (st, nt) = (at.sqrt(), (1.0 - at).sqrt());
        let mut out = x.clone();
        for g in ChannelGroup::ALL {
            if !masks.get(g) {
                continue;
            }
            out.group_mut(g).par_iter_mut().zip(eps.group(g).par_iter()).for_each(|(xv, &e)| {
                let (xv64, e) = (*xv as f64, e as f64);
                let x0 = (xv64 - nf * e) / sf;
                *xv = (st * x0 + nt * e) as f32;
            });
        }
        Ok(out)
    }

    /// Forward-noise `x0` to `t` on the gated groups.
    pub fn add_noise(&self, x0: &Latent, noise: &Latent, t: f64, masks: ChannelMasks) -> Result<Latent> {
        x0.check_shape(noise, "add_noise")?;
        let a = self.schedule.alpha_bar(t);
        let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
        let mut out = x0.clone();
        for g in ChannelGroup::ALL {
            if !masks.get(g) {
                continue;
            }
            out.group_mut(g).par_iter_mut().zip(noise.group(g).par_iter()).for_each(|(xv, &e)| {
                *xv = (s * *xv as f64 + n * e as f64) as f32;
            });
        }
        Ok(out)
    }

    /// Noise to `t_noise`, then DDIM-invert to `max(T_rgb, T_d)`. A step
    /// `t_a -> t_b` reuses `eps(x_{t_a})` and is applied to a group iff
    /// `t_b <= T_max` of that group.
    pub fn partial_invert<D: Denoiser>(
        &self,
        x0: &Latent,
        denoiser: &D,
        s: &StyleStrength,
        cond: &D::Cond,
        key: NoiseKey,
        cache: Option<(&LatentCache, usize)>,
    ) -> Result<Latent> {
        s.validate()?;
        let knots = self.inversion_knots(s)?;
        let put = |t: f64, x: &Latent| -> Result<()> {
            if let Some((c, frame)) = cache {
                c.insert(CacheKey::new(frame, Phase::Invert, t), x.clone())?;
            }
            Ok(())
        };

        let noise_masks = channel_masks(s.t_noise, s);
        let mut x = if noise_masks.rgb || noise_masks.depth {
            let noise = Latent::noise(x0.width, x0.height, key);
            self.add_noise(x0, &noise, s.t_noise, noise_masks)?
        } else {
            x0.clone()
        };
        x.set_masks(noise_masks);
        put(s.t_noise, &x)?;

        for w in knots.windows(2) {
            let (ta, tb) = (w[0], w[1]);
            let masks = channel_masks(tb, s);
            x.set_masks(channel_masks(ta, s));
            let eps = denoiser.predict_noise(&x, ta, cond)?;
            x = self.ddim_step(&x, &eps, ta, tb, masks)?;
            x.set_masks(masks);
            put(tb, &x)?;
        }
        Ok(x)
    }

    /// DDIM-denoise from `max(T_rgb, T_d)` to 0. A step `t_b -> t_a` is
    /// applied to a group iff `t_b <= T_max` of that group.
    pub fn denoise<D: Denoiser>(
        &self,
        x_high: &Latent,
        denoiser: &D,
        s: &StyleStrength,
        cond: &D::Cond,
        cache: Option<(&LatentCache, usize)>,
    ) -> Result<Latent> {
        s.validate()?;
        let knots = self.denoise_knots(s);
        let mut x = x_high.clone();
        for w in knots.windows(2) {
            let (tb, ta) = (w[0], w[1]);
            let masks = channel_masks(tb, s);
            x.set_masks(masks);
            let eps = denoiser.predict_noise(&x, tb, cond)?;
            x = self.ddim_step(&x, &eps, tb, ta, masks)?;
            x.set_masks(channel_masks(ta, s));
            if let Some((c, frame)) = cache {
                c.insert(CacheKey::new(frame, Phase::Denoise, ta), x.clone())?;
            }
        }
        Ok(x)
    }
}

/// Scale stylized depth onto the rendered depth by the median ratio over `mask`.
pub fn rescale_stylized_depth(stylized: &DepthMap, rendered: &DepthMap, mask: &ValidityMask) -> Result<DepthMap> {
    let k = median_scale(stylized, rendered, mask)?;
    Ok(stylized.map(|d| d * k))
}
