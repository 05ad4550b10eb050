//! Depth-guided attention: correspondence heatmaps built from the forward
//! warp, biased concatenated attention, and reference feature injection.
//!
//! Dense heatmaps are stored target-major: row `j` is a target token, column
//! `i` a reference token, so `L[(j, i)]` is the bias applied when target
//! query `j` attends to reference key `i`. With several references the
//! matrices are concatenated along the column (reference-token) axis.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::FlowField;

/// Dense materialization limit, per side, in tokens.
pub const MAX_DENSE_TOKENS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurMode {
    /// Kernel responses of correspondences sharing a target pixel add up.
    Sum,
    /// Overlapping responses take the maximum.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub lambda_self: f64,
    pub l_min: f64,
    /// Kernel radius in pixels.
    pub d_max: f64,
    pub lambda_inject: f64,
    pub temperature: f64,
    pub skip_first_layers: usize,
    pub skip_last_layers: usize,
    pub upper_clamp: bool,
    pub blur: BlurMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            lambda_self: 0.5,
            l_min: 0.5,
            d_max: 100.0,
            lambda_inject: 0.15,
            temperature: 0.001,
            skip_first_layers: 2,
            skip_last_layers: 3,
            upper_clamp: true,
            blur: BlurMode::Sum,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_self > 0.0) {
            return bad("lambda_self must be positive");
        }
        if !(self.l_min > 0.0 && self.l_min <= 1.0) {
            return bad("l_min must be in (0, 1]");
        }
        if !(self.d_max > 0.0) {
            return bad("d_max must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda_inject) {
            return bad("lambda_inject must be in [0, 1]");
        }
        Ok(())
    }

    pub fn heatmap_params(&self) -> HeatmapParams {
        HeatmapParams { d_max: self.d_max, l_min: self.l_min, upper_clamp: self.upper_clamp, blur: self.blur }
    }

    /// Whether feature injection runs at `layer` out of `n_layers`.
    pub fn injects_at(&self, layer: usize, n_layers: usize) -> bool {
        layer >= self.skip_first_layers && layer + self.skip_last_layers < n_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapParams {
    pub d_max: f64,
    pub l_min: f64,
    pub upper_clamp: bool,
    pub blur: BlurMode,
}

impl Default for HeatmapParams {
    fn default() -> Self {
        AttentionConfig::default().heatmap_params()
    }
}

impl HeatmapParams {
    #[inline]
    pub fn kernel(&self, du: f64, dv: f64) -> f64 {
        (1.0 - (du * du + dv * dv).sqrt() / self.d_max).max(0.0)
    }

    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        let x = x.max(self.l_min);
        if self.upper_clamp {
            x.min(1.0)
        } else {
            x
        }
    }
}

/// Reference pixel `reference` forward-warps to target pixel `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub reference: (usize, usize),
    pub target: (usize, usize),
}

/// Token grid size, `(width, height)`.
pub type Resolution = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct DenseHeatmap {
    pub target_res: Resolution,
    pub reference_res: Resolution,
    /// Row-major `(target tokens) x (reference tokens)`.
    pub values: Vec<f64>,
}

impl DenseHeatmap {
    pub fn rows(&self) -> usize {
        self.target_res.0 * self.target_res.1
    }

    pub fn cols(&self) -> usize {
        self.reference_res.0 * self.reference_res.1
    }

    #[inline]
    pub fn get(&self, target_token: usize, reference_token: usize) -> f64 {
        self.values[target_token * self.cols() + reference_token]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.cols(), &self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeatmap {
    /// In reference-pixel row-major order.
    pub correspondences: Vec<Correspondence>,
    pub reference_dims: (usize, usize),
    pub target_dims: (usize, usize),
    pub params: HeatmapParams,
    pub dense: Option<DenseHeatmap>,
}

fn window(full: (usize, usize), res: Resolution, what: &str) -> Result<(usize, usize)> {
    if res.0 == 0 || res.1 == 0 || full.0 % res.0 != 0 || full.1 % res.1 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{what} resolution {}x{} does not tile {}x{}",
            res.0, res.1, full.0, full.1
        )));
    }
    if res.0 * res.1 > MAX_DENSE_TOKENS {
        return Err(Error::DimensionMismatch(format!(
            "{what} resolution {}x{} exceeds {MAX_DENSE_TOKENS} tokens",
            res.0, res.1
        )));
    }
    Ok((full.0 / res.0, full.1 / res.1))
}

impl AttentionHeatmap {
    pub fn from_flow(flow: &FlowField, params: HeatmapParams) -> Self {
        let correspondences = flow
            .entries
            .enumerate()
            .filter_map(|(u, v, e)| e.target_pixel().map(|target| Correspondence { reference: (u, v), target }))
            .collect();
        Self {
            correspondences,
            reference_dims: flow.reference_dims(),
            target_dims: (flow.target_width, flow.target_height),
            params,
            dense: None,
        }
    }

    /// Full-resolution `L(u, v, u', v')` after clamping.
    pub fn value(&self, reference: (usize, usize), target: (usize, usize)) -> f64 {
        let raw = self.blur_at(self.correspondences.iter().filter(|c| c.target == target), reference);
        self.params.clamp(raw)
    }

    fn blur_at<'a>(&self, corrs: impl Iterator<Item = &'a Correspondence>, p: (usize, usize)) -> f64 {
        let mut acc = 0.0;
        for c in corrs {
            let k = self.params.kernel(p.0 as f64 - c.reference.0 as f64, p.1 as f64 - c.reference.1 as f64);
            acc = match self.params.blur {
                BlurMode::Sum => acc + k,
                BlurMode::Max => acc.max(k),
            };
        }
        acc
    }

    /// Max-pooled `L` at the given token resolutions.
    pub fn densify(&self, target_res: Resolution, reference_res: Resolution) -> Result<DenseHeatmap> {
        let (twx, twy) = window(self.target_dims, target_res, "target")?;
        let (rwx, rwy) = window(self.reference_dims, reference_res, "reference")?;
        let (rw, rh) = self.reference_dims;
        let m = reference_res.0 * reference_res.1;

        let mut by_target: Vec<Vec<usize>> = vec![Vec::new(); self.target_dims.0 * self.target_dims.1];
        for (k, c) in self.correspondences.iter().enumerate() {
            by_target[c.target.1 * self.target_dims.0 + c.target.0].push(k);
        }
        let reach = self.params.d_max.floor() as usize;

        let rows: Vec<Vec<f64>> = (0..target_res.0 * target_res.1)
            .into_par_iter()
            .map(|j| {
                let (tj, tk) = (j % target_res.0, j / target_res.0);
                let mut row = vec![0.0f64; m];
                for ty in tk * twy..(tk + 1) * twy {
                    for tx in tj * twx..(tj + 1) * twx {
                        let list = &by_target[ty * self.target_dims.0 + tx];
                        if list.is_empty() {
                            continue;
                        }
                        let corrs: Vec<&Correspondence> = list.iter().map(|&k| &self.correspondences[k]).collect();
                        let u0 = corrs.iter().map(|c| c.reference.0.saturating_sub(reach)).min().unwrap();
                        let u1 = corrs.iter().map(|c| (c.reference.0 + reach).min(rw - 1)).max().unwrap();
                        let v0 = corrs.iter().map(|c| c.reference.1.saturating_sub(reach)).min().unwrap();
                        let v1 = corrs.iter().map(|c| (c.reference.1 + reach).min(rh - 1)).max().unwrap();
                        for v in v0..=v1 {
                            for u in u0..=u1 {
                                let val = self.blur_at(corrs.iter().copied(), (u, v));
                                let i = (v / rwy) * reference_res.0 + u / rwx;
                                if val > row[i] {
                                    row[i] = val;
                                }
                            }
                        }
                    }
                }
                row.iter_mut().for_each(|x| *x = self.params.clamp(*x));
                row
            })
            .collect();
        Ok(DenseHeatmap { target_res, reference_res, values: rows.concat() })
    }
}

/// Correspondences from `flow`, materialized at the given token resolutions.
pub fn build_heatmap(
    flow: &FlowField,
    params: HeatmapParams,
    target_res: Resolution,
    reference_res: Resolution,
) -> Result<AttentionHeatmap> {
    let mut h = AttentionHeatmap::from_flow(flow, params);
    h.dense = Some(h.densify(target_res, reference_res)?);
    Ok(h)
}

/// Concatenate per-reference heatmaps along the reference-token axis.
pub fn stack_heatmaps(maps: &[&DenseHeatmap]) -> Result<DMatrix<f64>> {
    let Some(first) = maps.first() else {
        return Err(Error::DimensionMismatch("no heatmaps to stack".into()));
    };
    let n = first.rows();
    if maps.iter().any(|m| m.rows() != n) {
        return Err(Error::DimensionMismatch("heatmaps disagree on target tokens".into()));
    }
    let total: usize = maps.iter().map(|m| m.cols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut col = 0;
    for m in maps {
        out.view_mut((0, col), (n, m.cols())).copy_from(&m.to_matrix());
        col += m.cols();
    }
    Ok(out)
}

/// Keys, values and heatmap bias of one reference frame.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceKv<'a> {
    pub keys: &'a DMatrix<f64>,
    pub values: &'a DMatrix<f64>,
    /// `n x m` bias, one row per query.
    pub bias: &'a DMatrix<f64>,
}

/// `softmax(Q [K_self, K_ref]^T / sqrt(d) + log Δ) [V_self, V_ref]` with
/// `Δ = lambda_self` on self keys and the heatmap on reference keys.
pub fn biased_attention(
    q: &DMatrix<f64>,
    k_self: &DMatrix<f64>,
    v_self: &DMatrix<f64>,
    refs: &[ReferenceKv<'_>],
    lambda_self: f64,
) -> Result<DMatrix<f64>> {
    let (n, d) = q.shape();
    let dv = v_self.ncols();
    let mismatch = |m: String| Err(Error::DimensionMismatch(m));
    if k_self.ncols() != d || k_self.nrows() != v_self.nrows() {
        return mismatch(format!("self keys {:?} / values {:?} vs queries {:?}", k_self.shape(), v_self.shape(), q.shape()));
    }
    if !(lambda_self > 0.0) {
        return Err(Error::Config(format!("lambda_self {lambda_self} must be positive")));
    }
    for (r, kv) in refs.iter().enumerate() {
        let m = kv.keys.nrows();
        if kv.keys.ncols() != d || kv.values.shape() != (m, dv) || kv.bias.shape() != (n, m) {
            return mismatch(format!(
                "reference {r}: keys {:?}, values {:?}, bias {:?}",
                kv.keys.shape(),
                kv.values.shape(),
                kv.bias.shape()
            ));
        }
        if kv.bias.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Config(format!("reference {r}: bias entries must be positive")));
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let log_self = lambda_self.ln();
    let mut out = DMatrix::zeros(n, dv);
    let mut logits = Vec::new();
    for j in 0..n {
        logits.clear();
        let qj = q.row(j);
        for i in 0..k_self.nrows() {
            logits.push(qj.dot(&k_self.row(i)) * scale + log_self);
        }
        for kv in refs {
            for i in 0..kv.keys.nrows() {
                logits.push(qj.dot(&kv.keys.row(i)) * scale + kv.bias[(j, i)].ln());
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for x in logits.iter_mut() {
            *x = (*x - max).exp();
            denom += *x;
        }
        let mut idx = 0;
        for vals in std::iter::once(v_self).chain(refs.iter().map(|kv| kv.values)) {
            for i in 0..vals.nrows() {
                let p = logits[idx] / denom;
                for c in 0..dv {
                    out[(j, c)] += p * vals[(i, c)];
                }
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Per-row softmax of `L / T` over the reference axis. Below `T = 1e-6`, rows
/// whose top two entries differ by more than 1e-3 become exact one-hots.
pub fn mixing_matrix(l: &DMatrix<f64>, temperature: f64) -> Result<DMatrix<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let (n, m) = l.shape();
    let mut out = DMatrix::zeros(n, m);
    for j in 0..n {
        let row = l.row(j);
        let (mut best, mut best_i, mut second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
        for (i, &x) in row.iter().enumerate() {
            if x > best {
                second = best;
                best = x;
                best_i = i;
            } else if x > second {
                second = x;
            }
        }
        if temperature < 1e-6 && best - second > 1e-3 {
            out[(j, best_i)] = 1.0;
            continue;
        }
        let mut denom = 0.0;
        for i in 0..m {
            let e = ((row[i] - best) / temperature).exp();
            out[(j, i)] = e;
            denom += e;
        }
        for i in 0..m {
            out[(j, i)] /= denom;
        }
    }
    Ok(out)
}

/// `w_j = lambda_inject * max_i L[j, i]`.
pub fn injection_weights(l: &DMatrix<f64>, lambda_inject: f64) -> Vec<f64> {
    l.row_iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * lambda_inject).collect()
}

/// `h'_j = (1 - w_j) h_j + w_j sum_i M[j, i] h_ref_i`.
pub fn inject_features(
    h: &DMatrix<f64>,
    h_ref: &DMatrix<f64>,
    mixing: &DMatrix<f64>,
    weights: &[f64],
) -> Result<DMatrix<f64>> {
    let (n, d) = h.shape();
    if h_ref.ncols() != d || mixing.shape() != (n, h_ref.nrows()) || weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "h {:?}, h_ref {:?}, mixing {:?}, weights {}",
            h.shape(),
            h_ref.shape(),
            mixing.shape(),
            weights.len()
        )));
    }
    if let Some((token, &value)) = weights.iter().enumerate().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
        return Err(Error::WeightOutOfRange { token, value });
    }
    let mut out = h.clone();
    for j in 0..n {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        let mut mixed = vec![0.0; d];
        for i in 0..h_ref.nrows() {
            let mji = mixing[(j, i)];
            if mji != 0.0 {
                for (c, m) in mixed.iter_mut().enumerate() {
                    *m += mji * h_ref[(i, c)];
                }
            }
        }
        for (c, m) in mixed.into_iter().enumerate() {
            out[(j, c)] = (1.0 - w) * h[(j, c)] + w * m;
        }
    }
    Ok(out)
}
