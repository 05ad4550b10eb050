//! Forward warping: z-buffered rasterization of a depth mesh into another
//! camera, plus the per-reference-pixel flow field.
//!
//! Projected vertex positions are snapped to 1/256 px before coverage is
//! evaluated, so edge functions are exact and the top-left fill rule never
//! double-covers or drops a pixel on a shared edge. Attributes use
//! screen-space barycentric interpolation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{CameraView, ColorRaster, DepthMap, FeatureRaster, Raster, RgbdFrame, ValidityMask};
use crate::geometry::{build_mesh, build_mesh_masked, camera_point, DepthMesh, MeshClip};

pub const NO_FACE: u32 = u32::MAX;

const SUBPIXEL: f64 = 256.0;
const NEAR: f64 = 1e-6;
const BAND_ROWS: usize = 16;

#[inline]
fn snap(x: f64) -> f64 {
    (x * SUBPIXEL).round() / SUBPIXEL
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEntry {
    /// Projected target-pixel coordinates `(u', v')`; NaN when behind the camera.
    pub target: (f64, f64),
    /// Target-camera depth of the projected point.
    pub depth: f64,
    pub occluded: bool,
}

impl FlowEntry {
    /// Rounded target pixel, if unoccluded.
    pub fn target_pixel(&self) -> Option<(usize, usize)> {
        if self.occluded {
            None
        } else {
            Some((self.target.0.round() as usize, self.target.1.round() as usize))
        }
    }
}

/// Where each reference pixel lands in the target view.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub entries: Raster<FlowEntry>,
    pub target_width: usize,
    pub target_height: usize,
}

impl FlowField {
    pub fn reference_dims(&self) -> (usize, usize) {
        self.entries.dims()
    }

    pub fn unoccluded(&self) -> usize {
        self.entries.data().iter().filter(|e| !e.occluded).count()
    }

    /// Coarsen to a grid `stride` times smaller on both sides: one sample per
    /// block (the block's center pixel), target coordinates rescaled so that
    /// rounding lands in the coarse block containing the original target.
    pub fn subsample(&self, stride: usize) -> Result<FlowField> {
        let (w, h) = self.reference_dims();
        if stride == 0 || w % stride != 0 || h % stride != 0 {
            return Err(Error::Config(format!("stride {stride} does not divide {w}x{h}")));
        }
        if self.target_width % stride != 0 || self.target_height % stride != 0 {
            return Err(Error::Config(format!(
                "stride {stride} does not divide target {}x{}",
                self.target_width, self.target_height
            )));
        }
        let s = stride as f64;
        let c = stride / 2;
        let (tw, th) = (self.target_width / stride, self.target_height / stride);
        let entries = Raster::from_fn(w / stride, h / stride, |i, j| {
            let e = *self.entries.get(i * stride + c, j * stride + c);
            let coarse = |x: f64| ((x.round() + 0.5) / s - 0.5).round();
            let target = (coarse(e.target.0), coarse(e.target.1));
            let inside = target.0 >= 0.0 && target.1 >= 0.0 && (target.0 as usize) < tw && (target.1 as usize) < th;
            FlowEntry { target, depth: e.depth, occluded: e.occluded || !inside }
        });
        Ok(FlowField { entries, target_width: tw, target_height: th })
    }
}

/// Relative/absolute slack when comparing projected depth against the z-buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEps {
    pub abs: f64,
    pub rel: f64,
}

impl Default for OcclusionEps {
    fn default() -> Self {
        Self { abs: 1e-3, rel: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct WarpResult {
    pub rgb: ColorRaster,
    /// Target-camera depth; 0 where invalid.
    pub depth: DepthMap,
    pub validity: ValidityMask,
    /// Winning triangle per target pixel, `NO_FACE` where invalid.
    pub face: Raster<u32>,
    /// Barycentric weights of the winning fragment, in the triangle's vertex order.
    pub bary: Raster<[f64; 3]>,
    pub flow: Option<FlowField>,
}

impl WarpResult {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    /// Interpolate per-source-pixel features through the winning fragments.
    pub fn resample(&self, mesh: &DepthMesh, features: &FeatureRaster) -> Result<FeatureRaster> {
        if (features.width(), features.height()) != (mesh.width, mesh.height) {
            return Err(Error::DimensionMismatch("features vs mesh source".into()));
        }
        let c = features.channels();
        let (w, h) = (self.width(), self.height());
        let mut out = FeatureRaster::zeros(w, h, c);
        for (i, &f) in self.face.data().iter().enumerate() {
            if f == NO_FACE {
                continue;
            }
            let tri = mesh.triangles[f as usize];
            let b = self.bary.data()[i];
            let dst = out.pixel_mut(i % w, i / w);
            for k in 0..3 {
                let src = features.pixel_at(tri[k] as usize);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += b[k] * s;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
struct Projected {
    x: f64,
    y: f64,
    z: f64,
}

#[inline]
fn edge(a: &Projected, b: &Projected, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

#[inline]
fn top_left(a: &Projected, b: &Projected) -> bool {
    let dy = b.y - a.y;
    (dy == 0.0 && b.x > a.x) || dy < 0.0
}

#[inline]
fn covers(w: f64, a: &Projected, b: &Projected) -> bool {
    w > 0.0 || (w == 0.0 && top_left(a, b))
}

struct Band<'a> {
    row0: usize,
    depth: &'a mut [f64],
    face: &'a mut [u32],
    bary: &'a mut [[f64; 3]],
}

/// Render `mesh` into `target` with a z-buffer. Nearest fragment wins; an
/// exact depth tie keeps the lower triangle index.
pub fn rasterize(mesh: &DepthMesh, target: &CameraView) -> Result<WarpResult> {
    let k = &target.intrinsics;
    k.validate()?;
    let (w, h) = (k.width, k.height);

    let projected: Vec<Option<Projected>> = mesh
        .vertices
        .iter()
        .map(|vtx| {
            let p = target.pose.inverse_transform_point(&vtx.position);
            if !(p.z > NEAR) {
                return None;
            }
            let (x, y) = k.project(&p);
            x.is_finite().then(|| Projected { x: snap(x), y: snap(y), z: p.z })
        })
        .collect();

    let n_bands = h.div_ceil(BAND_ROWS);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); n_bands];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let Some(ys) = tri.iter().map(|&i| projected[i as usize].map(|p| p.y)).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
        if lo > hi {
            continue;
        }
        for band in (lo as usize / BAND_ROWS)..=(hi as usize / BAND_ROWS) {
            bins[band].push(t as u32);
        }
    }

    let mut depth = vec![f64::INFINITY; w * h];
    let mut face = vec![NO_FACE; w * h];
    let mut bary = vec![[0.0; 3]; w * h];
    let bands: Vec<Band> = depth
        .chunks_mut(BAND_ROWS * w)
        .zip(face.chunks_mut(BAND_ROWS * w))
        .zip(bary.chunks_mut(BAND_ROWS * w))
        .enumerate()
        .map(|(b, ((depth, face), bary))| Band { row0: b * BAND_ROWS, depth, face, bary })
        .collect();

    bands.into_par_iter().zip(bins.par_iter()).for_each(|(band, tris)| {
        let rows = band.depth.len() / w;
        for &t in tris {
            let tri = mesh.triangles[t as usize];
            let mut v = tri.map(|i| projected[i as usize].unwrap());
            let mut order = [0usize, 1, 2];
            let area = edge(&v[0], &v[1], v[2].x, v[2].y);
            if area == 0.0 {
                continue;
            }
            let area = if area < 0.0 {
                v.swap(1, 2);
                order.swap(1, 2);
                -area
            } else {
                area
            };
            let x0 = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let x1 = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
            let y0 = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(band.row0 as f64);
            let y1 = v
                .iter()
                .map(|p| p.y)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min((band.row0 + rows) as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for py in y0 as usize..=y1 as usize {
                let fy = py as f64;
                let row = (py - band.row0) * w;
                for px in x0 as usize..=x1 as usize {
                    let fx = px as f64;
                    let w0 = edge(&v[1], &v[2], fx, fy);
                    let w1 = edge(&v[2], &v[0], fx, fy);
                    let w2 = edge(&v[0], &v[1], fx, fy);
                    if !(covers(w0, &v[1], &v[2]) && covers(w1, &v[2], &v[0]) && covers(w2, &v[0], &v[1])) {
                        continue;
                    }
                    let b = [w0 / area, w1 / area, w2 / area];
                    let z = b[0] * v[0].z + b[1] * v[1].z + b[2] * v[2].z;
                    let i = row + px;
                    if z < band.depth[i] {
                        band.depth[i] = z;
                        band.face[i] = t;
                        let mut ordered = [0.0; 3];
                        for k in 0..3 {
                            ordered[order[k]] = b[k];
                        }
                        band.bary[i] = ordered;
                    }
                }
            }
        }
    });

    let mut rgb = vec![[0.0; 3]; w * h];
    let mut valid = vec![false; w * h];
    for i in 0..w * h {
        if face[i] == NO_FACE {
            depth[i] = 0.0;
            continue;
        }
        let tri = mesh.triangles[face[i] as usize];
        let b = bary[i];
        let cols = tri.map(|k| mesh.vertices[k as usize].color);
        let mut c = [0.0; 3];
        for ch in 0..3 {
            for k in 0..3 {
                c[ch] += b[k] * cols[k][ch];
            }
            // barycentrics may sum to 1 + ulp; stay inside the vertex hull
            let lo = cols[0][ch].min(cols[1][ch]).min(cols[2][ch]);
            let hi = cols[0][ch].max(cols[1][ch]).max(cols[2][ch]);
            c[ch] = c[ch].clamp(lo, hi);
        }
        rgb[i] = c;
        valid[i] = true;
    }

    Ok(WarpResult {
        rgb: Raster::from_vec(w, h, rgb)?,
        depth: Raster::from_vec(w, h, depth)?,
        validity: ValidityMask(Raster::from_vec(w, h, valid)?),
        face: Raster::from_vec(w, h, face)?,
        bary: Raster::from_vec(w, h, bary)?,
        flow: None,
    })
}

/// Per reference pixel: its projection into `target` and whether the
/// z-buffer hides it. Uncovered z-buffer pixels never occlude.
pub fn compute_flow(
    reference: &RgbdFrame,
    target: &CameraView,
    zbuffer: &DepthMap,
    validity: &ValidityMask,
    eps: OcclusionEps,
) -> Result<FlowField> {
    let tk = &target.intrinsics;
    if zbuffer.dims() != (tk.width, tk.height) {
        return Err(Error::DimensionMismatch("z-buffer vs target intrinsics".into()));
    }
    zbuffer.check_dims(validity.raster(), "z-buffer vs validity")?;
    let rk = &reference.intrinsics;
    let (tw, th) = (tk.width as f64, tk.height as f64);
    let entries = reference.depth.map_indexed(|u, v, &d| {
        let world = reference.pose.transform_point(&camera_point(rk, u, v, d));
        let p = target.pose.inverse_transform_point(&world);
        if !(p.z > 0.0) {
            return FlowEntry { target: (f64::NAN, f64::NAN), depth: p.z, occluded: true };
        }
        let (x, y) = tk.project(&p);
        let (ru, rv) = (x.round(), y.round());
        let inside = ru >= 0.0 && rv >= 0.0 && ru < tw && rv < th;
        let occluded = if inside {
            let (iu, iv) = (ru as usize, rv as usize);
            validity.get(iu, iv) && {
                let zb = *zbuffer.get(iu, iv);
                p.z > zb + eps.abs.max(eps.rel * zb)
            }
        } else {
            true
        };
        FlowEntry { target: (x, y), depth: p.z, occluded }
    });
    Ok(FlowField { entries, target_width: tk.width, target_height: tk.height })
}

/// Mesh `reference`, render it into `target`, and attach the flow field.
pub fn warp_frame(reference: &RgbdFrame, target: &CameraView, clip: &MeshClip) -> Result<WarpResult> {
    warp_frame_with_mesh(reference, target, clip).map(|(_, w)| w)
}

pub fn warp_frame_with_mesh(
    reference: &RgbdFrame,
    target: &CameraView,
    clip: &MeshClip,
) -> Result<(DepthMesh, WarpResult)> {
    let mesh = build_mesh(reference, clip)?;
    let mut warp = rasterize(&mesh, target)?;
    warp.flow = Some(compute_flow(reference, target, &warp.depth, &warp.validity, OcclusionEps::default())?);
    Ok((mesh, warp))
}

/// Warp a partially valid RGBD raster (no flow).
pub fn warp_masked(
    rgb: &ColorRaster,
    depth: &DepthMap,
    mask: &ValidityMask,
    source: &CameraView,
    target: &CameraView,
    clip: &MeshClip,
) -> Result<WarpResult> {
    let mesh = build_mesh_masked(rgb, depth, Some(mask), &source.intrinsics, &source.pose, clip)?;
    rasterize(&mesh, target)
}
