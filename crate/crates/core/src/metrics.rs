//! Warp-based consistency metrics and evaluation-view utilities.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::frame::{CameraView, ColorRaster, FeatureRaster, Intrinsics, Pose, RgbdFrame, Trajectory};
use crate::geometry::MeshClip;
use crate::warp::{warp_frame, warp_frame_with_mesh, WarpResult};

/// RMSE between the warped colors and `target` over the warp's validity,
/// averaged over pixels and channels.
pub fn rmse_over_validity(warp: &WarpResult, target: &ColorRaster) -> Result<f64> {
    warp.rgb.check_dims(target, "warp vs target")?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((a, b), &ok) in warp.rgb.data().iter().zip(target.data()).zip(warp.validity.raster().data()) {
        if !ok {
            continue;
        }
        for c in 0..3 {
            acc += (a[c] - b[c]) * (a[c] - b[c]);
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::EmptyValidity);
    }
    Ok((acc / n as f64).sqrt())
}

/// Warp stylized frame `i` into frame `j` and compare colors where the warp lands.
pub fn sequential_rmse(frame_i: &RgbdFrame, frame_j: &RgbdFrame) -> Result<f64> {
    let warp = warp_frame(frame_i, &frame_j.view(), &MeshClip::default())?;
    rmse_over_validity(&warp, &frame_j.rgb)
}

/// Per-pixel feature maps for the feature distance.
pub trait FeatureExtractor {
    fn channels(&self) -> usize;
    fn extract(&self, rgb: &ColorRaster) -> FeatureRaster;
}

/// Raw RGB.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn channels(&self) -> usize {
        3
    }

    fn extract(&self, rgb: &ColorRaster) -> FeatureRaster {
        FeatureRaster::from_color(rgb)
    }
}

/// Per color channel: value, `|d/du|`, `|d/dv|` and the 3x3 local standard
/// deviation, 12 channels laid out `4 * color + k`. Derivatives are forward
/// differences, backward on the last column/row; the 3x3 window is clipped at
/// the border.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientPatchExtractor;

impl FeatureExtractor for GradientPatchExtractor {
    fn channels(&self) -> usize {
        12
    }

    fn extract(&self, rgb: &ColorRaster) -> FeatureRaster {
        let (w, h) = rgb.dims();
        let mut out = FeatureRaster::zeros(w, h, 12);
        let at = |u: usize, v: usize, c: usize| rgb.get(u, v)[c];
        for v in 0..h {
            for u in 0..w {
                let px = out.pixel_mut(u, v);
                for c in 0..3 {
                    let x = at(u, v, c);
                    let du = if w < 2 {
                        0.0
                    } else if u + 1 < w {
                        at(u + 1, v, c) - x
                    } else {
                        x - at(u - 1, v, c)
                    };
                    let dv = if h < 2 {
                        0.0
                    } else if v + 1 < h {
                        at(u, v + 1, c) - x
                    } else {
                        x - at(u, v - 1, c)
                    };
                    let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
                    for y in v.saturating_sub(1)..=(v + 1).min(h - 1) {
                        for xx in u.saturating_sub(1)..=(u + 1).min(w - 1) {
                            let p = at(xx, y, c);
                            s += p;
                            s2 += p * p;
                            n += 1.0;
                        }
                    }
                    let mean = s / n;
                    px[4 * c] = x;
                    px[4 * c + 1] = du.abs();
                    px[4 * c + 2] = dv.abs();
                    px[4 * c + 3] = (s2 / n - mean * mean).max(0.0).sqrt();
                }
            }
        }
        out
    }
}

/// Channel-normalize features of `frame_i`, carry them into `frame_j`
/// through the warp geometry, and take the RMSE against `frame_j`'s
/// normalized features over the validity mask.
pub fn sequential_feature_distance(
    frame_i: &RgbdFrame,
    frame_j: &RgbdFrame,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let (mesh, warp) = warp_frame_with_mesh(frame_i, &frame_j.view(), &MeshClip::default())?;
    let fi = extractor.extract(&frame_i.rgb).channel_normalized();
    let fj = extractor.extract(&frame_j.rgb).channel_normalized();
    let warped = warp.resample(&mesh, &fi)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, &ok) in warp.validity.raster().data().iter().enumerate() {
        if !ok {
            continue;
        }
        for (a, b) in warped.pixel_at(i).iter().zip(fj.pixel_at(i)) {
            acc += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidity);
    }
    Ok((acc / n as f64).sqrt())
}

/// Maximum rotation between two views that still gets a midpoint view.
pub const MAX_EVAL_ANGLE: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalView {
    View(CameraView),
    Rejected { angle: f64 },
}

/// Midpoint position, half-way slerp orientation, averaged intrinsics.
/// Views more than 90 degrees apart are rejected.
pub fn interpolate_eval_views(a: &CameraView, b: &CameraView) -> Result<EvalView> {
    let (ka, kb) = (&a.intrinsics, &b.intrinsics);
    if (ka.width, ka.height) != (kb.width, kb.height) {
        return Err(Error::DimensionMismatch(format!(
            "views {}x{} and {}x{}",
            ka.width, ka.height, kb.width, kb.height
        )));
    }
    let angle = a.pose.rotation_angle_to(&b.pose);
    if angle > MAX_EVAL_ANGLE {
        return Ok(EvalView::Rejected { angle });
    }
    let qa = a.pose.quaternion();
    let mut qb = b.pose.quaternion();
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = nalgebra::UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let q = if angle == 0.0 { qa } else { qa.slerp(&qb, 0.5) };
    let t: Vector3<f64> = (a.pose.translation() + b.pose.translation()) * 0.5;
    let k = Intrinsics::new(
        0.5 * (ka.fx + kb.fx),
        0.5 * (ka.fy + kb.fy),
        0.5 * (ka.cx + kb.cx),
        0.5 * (ka.cy + kb.cy),
        ka.width,
        ka.height,
    )?;
    Ok(EvalView::View(CameraView::new(format!("{}~{}", a.name, b.name), k, Pose::from_quaternion(&q, t))))
}

/// Index of the candidate nearest to `query` by camera position; ties go
/// to the smaller rotation.
pub fn nearest_view(query: &Pose, candidates: &[CameraView]) -> Option<usize> {
    let key = |c: &CameraView| {
        ((c.pose.translation() - query.translation()).norm(), c.pose.rotation_angle_to(query))
    };
    (0..candidates.len()).min_by(|&i, &j| {
        let (a, b) = (key(&candidates[i]), key(&candidates[j]));
        a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
    })
}

/// `cap` items at a uniform stride, always including the first.
pub fn uniform_subsample<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap].clone()).collect()
}

/// Midpoint views between consecutive trajectory views, at most `cap`.
pub fn eval_views_for_trajectory(traj: &Trajectory, cap: usize) -> Result<Vec<CameraView>> {
    let mut views = Vec::new();
    for pair in traj.frames.windows(2) {
        if let EvalView::View(v) = interpolate_eval_views(&pair[0], &pair[1])? {
            views.push(v);
        }
    }
    Ok(uniform_subsample(&views, cap))
}
