//! Conditioning composites: per-pixel choice between a warped stylized
//! reference and the unstylized target, with depth-scale alignment.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{look_at_vector, CameraView, ColorRaster, DepthMap, Raster, RgbdFrame, ValidityMask};
use crate::geometry::MeshClip;
use crate::warp::{warp_frame_with_mesh, WarpResult, NO_FACE};

/// Weights of the compositing score `S = a|sin θ| - o·(d'/d) + g·(idx - idx')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub angle: f64,
    pub occlusion: f64,
    pub age: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self { angle: 1.0, occlusion: 3.0, age: 0.02 }
    }
}

impl CompositeWeights {
    /// Raw score from precomputed terms.
    #[inline]
    pub fn score(&self, abs_sin: f64, depth_ratio: f64, index_gap: f64) -> f64 {
        self.angle * abs_sin - self.occlusion * depth_ratio + self.age * index_gap
    }
}

pub fn compositing_score(
    theta: f64,
    d_warp: f64,
    d_target: f64,
    idx_target: usize,
    idx_ref: usize,
    w: &CompositeWeights,
) -> Result<f64> {
    if !(d_target > 0.0 && d_target.is_finite()) {
        return Err(Error::NonPositiveDepth { u: 0, v: 0, value: d_target });
    }
    if idx_target <= idx_ref {
        return Err(Error::BadIndexOrder { target: idx_target, reference: idx_ref });
    }
    Ok(w.score(theta.sin().abs(), d_warp / d_target, (idx_target - idx_ref) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeConfig {
    pub weights: CompositeWeights,
    /// A warped pixel is used iff its score exceeds this.
    pub threshold: f64,
    /// Width of the boundary band used for depth alignment, in pixels.
    pub band_px: usize,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self { weights: CompositeWeights::default(), threshold: 0.0, band_px: 3 }
    }
}

/// Median of a non-empty slice (mean of the two middle values for even
/// lengths). Reorders the slice.
pub fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let (_, &mut hi, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        return Some(hi);
    }
    let lo = values[..n / 2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(0.5 * (lo + hi))
}

/// `median(reference / pred)` over `mask`.
pub fn median_scale(pred: &DepthMap, reference: &DepthMap, mask: &ValidityMask) -> Result<f64> {
    pred.check_dims(reference, "median_scale pred vs reference")?;
    pred.check_dims(mask.raster(), "median_scale pred vs mask")?;
    let mut ratios: Vec<f64> = mask
        .raster()
        .data()
        .iter()
        .zip(pred.data().iter().zip(reference.data()))
        .filter(|(&m, _)| m)
        .map(|(_, (p, r))| r / p)
        .collect();
    median(&mut ratios).ok_or(Error::EmptyMask)
}

/// Valid pixels within `band_px` (Chebyshev) of a valid pixel that has an
/// invalid 4-neighbour.
pub fn boundary_band(validity: &ValidityMask, band_px: usize) -> ValidityMask {
    let (w, h) = (validity.width(), validity.height());
    let ok = |u: usize, v: usize| validity.get(u, v);
    let boundary = Raster::from_fn(w, h, |u, v| {
        ok(u, v)
            && ((u > 0 && !ok(u - 1, v))
                || (u + 1 < w && !ok(u + 1, v))
                || (v > 0 && !ok(u, v - 1))
                || (v + 1 < h && !ok(u, v + 1)))
    });
    // separable square dilation
    let r = band_px;
    let rows = Raster::from_fn(w, h, |u, v| (u.saturating_sub(r)..=(u + r).min(w - 1)).any(|x| *boundary.get(x, v)));
    ValidityMask(Raster::from_fn(w, h, |u, v| {
        ok(u, v) && (v.saturating_sub(r)..=(v + r).min(h - 1)).any(|y| *rows.get(u, y))
    }))
}

/// Scale for the warped depth so it meets the target depth at the seam
/// between warped and unwarped regions. Falls back to the median over all
/// valid pixels when the warp has no boundary.
pub fn align_composite_depth(warped: &WarpResult, target: &RgbdFrame, band_px: usize) -> Result<f64> {
    warped.depth.check_dims(&target.depth, "warp vs target")?;
    if warped.validity.count() == 0 {
        return Err(Error::EmptyValidity);
    }
    let band = boundary_band(&warped.validity, band_px);
    let mask = if band.count() > 0 { &band } else { &warped.validity };
    median_scale(&warped.depth, &target.depth, mask)
}

/// A reference frame rendered into the target view, with what the
/// compositing score needs from its mesh.
#[derive(Debug, Clone)]
pub struct WarpedReference {
    pub index: usize,
    pub look_at: Vector3<f64>,
    pub warp: WarpResult,
    /// Per-triangle world normals of the reference mesh.
    pub normals: Vec<Vector3<f64>>,
}

impl WarpedReference {
    pub fn new(reference: &RgbdFrame, target: &CameraView, clip: &MeshClip) -> Result<Self> {
        let (mesh, warp) = warp_frame_with_mesh(reference, target, clip)?;
        Ok(Self { index: reference.index, look_at: look_at_vector(&reference.pose), warp, normals: mesh.normals })
    }

    /// `|sin θ|` between the covering triangle's normal and the reference look-at.
    pub fn abs_sin(&self, u: usize, v: usize) -> Option<f64> {
        let f = *self.warp.face.get(u, v);
        (f != NO_FACE).then(|| {
            let c = self.normals[f as usize].dot(&self.look_at).clamp(-1.0, 1.0);
            (1.0 - c * c).sqrt()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFrame {
    pub rgb: ColorRaster,
    pub depth: DepthMap,
    /// True where the pixel came from a warped stylized reference.
    pub source_mask: ValidityMask,
    pub weights: CompositeWeights,
}

pub fn build_composite(
    references: &[WarpedReference],
    target: &RgbdFrame,
    config: &CompositeConfig,
) -> Result<CompositeFrame> {
    let (w, h) = (target.width(), target.height());
    let mut scales = Vec::with_capacity(references.len());
    for r in references {
        r.warp.depth.check_dims(&target.depth, "reference warp vs target")?;
        if r.index >= target.index {
            return Err(Error::BadIndexOrder { target: target.index, reference: r.index });
        }
        scales.push(match align_composite_depth(&r.warp, target, config.band_px) {
            Ok(s) => s,
            Err(Error::EmptyValidity) => 1.0,
            Err(e) => return Err(e),
        });
    }

    let mut rgb = target.rgb.clone();
    let mut depth = target.depth.clone();
    let mut mask = Raster::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            let d = *target.depth.get(u, v);
            let mut best: Option<(f64, usize)> = None;
            for (k, r) in references.iter().enumerate() {
                let Some(abs_sin) = r.abs_sin(u, v) else { continue };
                let d_warp = scales[k] * *r.warp.depth.get(u, v);
                let s = config.weights.score(abs_sin, d_warp / d, (target.index - r.index) as f64);
                if best.map_or(true, |(b, _)| s > b) {
                    best = Some((s, k));
                }
            }
            if let Some((s, k)) = best {
                if s > config.threshold {
                    let r = &references[k];
                    rgb.set(u, v, *r.warp.rgb.get(u, v));
                    depth.set(u, v, scales[k] * *r.warp.depth.get(u, v));
                    mask.set(u, v, true);
                }
            }
        }
    }
    Ok(CompositeFrame { rgb, depth, source_mask: ValidityMask(mask), weights: config.weights })
}

/// Composite that takes the warped pixel wherever the warp is valid.
pub fn composite_valid(warped: &WarpResult, rgb: &ColorRaster, depth: &DepthMap, depth_scale: f64) -> Result<CompositeFrame> {
    warped.rgb.check_dims(rgb, "warp vs target rgb")?;
    warped.depth.check_dims(depth, "warp vs target depth")?;
    let mut out_rgb = rgb.clone();
    let mut out_depth = depth.clone();
    for (i, &ok) in warped.validity.raster().data().iter().enumerate() {
        if ok {
            out_rgb.data_mut()[i] = warped.rgb.data()[i];
            out_depth.data_mut()[i] = depth_scale * warped.depth.data()[i];
        }
    }
    Ok(CompositeFrame {
        rgb: out_rgb,
        depth: out_depth,
        source_mask: warped.validity.clone(),
        weights: CompositeWeights::default(),
    })
}
