//! Splat regularization losses on depth and normal rasters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, ValidityMask};
use crate::geometry::NormalMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tvl1: f64,
    pub normal: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tvl1: 0.05, normal: 0.001, depth: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.tvl1, self.normal, self.depth].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Sum of L1 differences between horizontally and vertically adjacent normals.
pub fn tvl1_normals(n: &NormalMap) -> f64 {
    let (w, h) = n.dims();
    let mut acc = 0.0;
    for v in 0..h {
        for u in 0..w {
            let p = n.get(u, v);
            if u + 1 < w {
                acc += l1(n.get(u + 1, v), p);
            }
            if v + 1 < h {
                acc += l1(n.get(u, v + 1), p);
            }
        }
    }
    acc
}

fn log_ratios(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<Vec<f64>> {
    pred.check_dims(gt, "depth loss pred vs gt")?;
    pred.check_dims(mask.raster(), "depth loss pred vs mask")?;
    let mut d = Vec::new();
    for (u, v, &m) in mask.raster().enumerate() {
        if !m {
            continue;
        }
        let (p, g) = (*pred.get(u, v), *gt.get(u, v));
        for value in [p, g] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositiveDepth { u, v, value });
            }
        }
        d.push(p.ln() - g.ln());
    }
    if d.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(d)
}

/// `mean(d^2) - (mean d)^2` with `d = log pred - log gt` over `mask`.
/// Evaluated as a two-pass variance, so it is exactly invariant in exact
/// arithmetic and never negative.
pub fn scale_invariant_depth_loss(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<f64> {
    let d = log_ratios(pred, gt, mask)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    Ok(d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// `mean(d^2) - lambda (mean d)^2`; `lambda = 1` is the scale-invariant form.
pub fn scale_invariant_depth_loss_lambda(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask, lambda: f64) -> Result<f64> {
    if lambda == 1.0 {
        return scale_invariant_depth_loss(pred, gt, mask);
    }
    let d = log_ratios(pred, gt, mask)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sq = d.iter().map(|x| x * x).sum::<f64>() / n;
    Ok(sq - lambda * mean * mean)
}

/// `-sum(N_gt . N)` over `mask`, or over all pixels without one.
pub fn normal_dot_loss(n: &NormalMap, n_gt: &NormalMap, mask: Option<&ValidityMask>) -> Result<f64> {
    n.check_dims(n_gt, "normal loss")?;
    if let Some(m) = mask {
        n.check_dims(m.raster(), "normal loss mask")?;
    }
    let mut acc = 0.0;
    for (i, (a, b)) in n.data().iter().zip(n_gt.data()).enumerate() {
        if mask.is_some_and(|m| !m.raster().data()[i]) {
            continue;
        }
        acc += a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    }
    Ok(-acc)
}

pub fn total_loss(phot: f64, tvl1: f64, normal: f64, depth: f64, w: &LossWeights) -> f64 {
    phot + w.tvl1 * tvl1 + w.normal * normal + w.depth * depth
}
