//! Backprojection, depth meshes and normals from depth.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{look_at_vector, ColorRaster, DepthMap, Intrinsics, Pose, Raster, RgbdFrame, ValidityMask};

/// Unit normals stored as plain triples.
pub type NormalMap = Raster<[f64; 3]>;

const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// World-frame points, one per pixel in row-major order.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

#[inline]
pub fn camera_point(k: &Intrinsics, u: usize, v: usize, depth: f64) -> Vector3<f64> {
    k.ray(u as f64, v as f64) * depth
}

pub fn backproject(frame: &RgbdFrame) -> PointCloud {
    let k = &frame.intrinsics;
    let mut points = Vec::with_capacity(frame.depth.len());
    for (u, v, &z) in frame.depth.enumerate() {
        points.push(frame.pose.transform_point(&camera_point(k, u, v, z)));
    }
    PointCloud { points, colors: frame.rgb.data().to_vec() }
}

/// Project a world point into a camera; `None` when it is not in front of it.
pub fn project(k: &Intrinsics, pose: &Pose, world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let p = pose.inverse_transform_point(world);
    if p.z <= 0.0 {
        return None;
    }
    let (x, y) = k.project(&p);
    Some((x, y, p.z))
}

/// Triangle clipping applied while meshing a depth map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshClip {
    /// Drop triangles with `|cos(normal, look-at)|` below this.
    pub cos_threshold: f64,
    /// Drop triangles whose max/min vertex depth exceeds this; `None` disables.
    pub depth_jump_ratio: Option<f64>,
}

impl Default for MeshClip {
    fn default() -> Self {
        Self { cos_threshold: 0.1, depth_jump_ratio: Some(4.0) }
    }
}

impl MeshClip {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cos_threshold) {
            return Err(Error::Config(format!("cos_threshold {} outside [0, 1)", self.cos_threshold)));
        }
        if let Some(r) = self.depth_jump_ratio {
            if !(r > 1.0) {
                return Err(Error::Config(format!("depth_jump_ratio {r} must exceed 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshVertex {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub pixel: (u32, u32),
}

/// Triangulated depth map. Vertex `i` is source pixel `i` (row-major), so
/// per-pixel attributes of the source can be interpolated with the same
/// indices.
#[derive(Debug, Clone)]
pub struct DepthMesh {
    pub width: usize,
    pub height: usize,
    pub vertices: Vec<MeshVertex>,
    pub triangles: Vec<[u32; 3]>,
    /// Unit world-frame normal per triangle, oriented towards the source camera.
    pub normals: Vec<Vector3<f64>>,
}

impl DepthMesh {
    pub fn max_triangles(&self) -> usize {
        2 * self.width.saturating_sub(1) * self.height.saturating_sub(1)
    }
}

pub fn build_mesh(frame: &RgbdFrame, clip: &MeshClip) -> Result<DepthMesh> {
    build_mesh_masked(&frame.rgb, &frame.depth, None, &frame.intrinsics, &frame.pose, clip)
}

/// Mesh a depth map where only `mask` pixels (if given) carry geometry.
/// Triangles touching an unmasked pixel are skipped.
pub fn build_mesh_masked(
    rgb: &ColorRaster,
    depth: &DepthMap,
    mask: Option<&ValidityMask>,
    k: &Intrinsics,
    pose: &Pose,
    clip: &MeshClip,
) -> Result<DepthMesh> {
    clip.validate()?;
    rgb.check_dims(depth, "mesh rgb vs depth")?;
    if depth.dims() != (k.width, k.height) {
        return Err(Error::DimensionMismatch("mesh depth vs intrinsics".into()));
    }
    if let Some(m) = mask {
        depth.check_dims(m.raster(), "mesh depth vs mask")?;
    }
    let (w, h) = depth.dims();
    let usable = |i: usize| {
        let d = depth.data()[i];
        mask.map_or(true, |m| m.raster().data()[i]) && d.is_finite() && d > 0.0
    };

    let mut vertices = Vec::with_capacity(w * h);
    for (u, v, &z) in depth.enumerate() {
        let i = v * w + u;
        let position = if usable(i) { pose.transform_point(&camera_point(k, u, v, z)) } else { Vector3::zeros() };
        vertices.push(MeshVertex { position, color: *rgb.get(u, v), pixel: (u as u32, v as u32) });
    }

    let look = look_at_vector(pose);
    let center = *pose.translation();
    let mut triangles = Vec::with_capacity(2 * w.saturating_sub(1) * h.saturating_sub(1));
    let mut normals = Vec::with_capacity(triangles.capacity());
    for v in 0..h.saturating_sub(1) {
        for u in 0..w.saturating_sub(1) {
            let i00 = v * w + u;
            let i10 = i00 + 1;
            let i01 = i00 + w;
            let i11 = i01 + 1;
            for tri in [[i00, i10, i01], [i10, i11, i01]] {
                if !tri.iter().all(|&i| usable(i)) {
                    continue;
                }
                if let Some(jump) = clip.depth_jump_ratio {
                    let ds = tri.map(|i| depth.data()[i]);
                    let hi = ds.iter().cloned().fold(f64::MIN, f64::max);
                    let lo = ds.iter().cloned().fold(f64::MAX, f64::min);
                    if hi / lo > jump {
                        continue;
                    }
                }
                let [a, b, c] = tri.map(|i| vertices[i].position);
                let cross = (b - a).cross(&(c - a));
                let norm = cross.norm();
                if !(0.5 * norm > MIN_TRIANGLE_AREA) {
                    continue;
                }
                let mut n = cross / norm;
                if n.dot(&((a + b + c) / 3.0 - center)) > 0.0 {
                    n = -n;
                }
                if n.dot(&look).abs() < clip.cos_threshold {
                    continue;
                }
                triangles.push(tri.map(|i| i as u32));
                normals.push(n);
            }
        }
    }
    Ok(DepthMesh { width: w, height: h, vertices, triangles, normals })
}

/// Camera-frame normals from cross products of depth-map gradients.
/// Central differences inside, one-sided at the border; every normal faces
/// the camera.
pub fn normals_from_depth(frame: &RgbdFrame) -> NormalMap {
    normals_from_depth_map(&frame.depth, &frame.intrinsics)
}

pub fn normals_from_depth_map(depth: &DepthMap, k: &Intrinsics) -> NormalMap {
    let (w, h) = depth.dims();
    let p = |u: usize, v: usize| camera_point(k, u, v, *depth.get(u, v));
    let diff = |lo: Vector3<f64>, hi: Vector3<f64>, span: f64| (hi - lo) / span;
    Raster::from_fn(w, h, |u, v| {
        let du = if w < 2 {
            Vector3::zeros()
        } else if u == 0 {
            diff(p(0, v), p(1, v), 1.0)
        } else if u == w - 1 {
            diff(p(u - 1, v), p(u, v), 1.0)
        } else {
            diff(p(u - 1, v), p(u + 1, v), 2.0)
        };
        let dv = if h < 2 {
            Vector3::zeros()
        } else if v == 0 {
            diff(p(u, 0), p(u, 1), 1.0)
        } else if v == h - 1 {
            diff(p(u, v - 1), p(u, v), 1.0)
        } else {
            diff(p(u, v - 1), p(u, v + 1), 2.0)
        };
        let view = p(u, v);
        let n = match du.cross(&dv).try_normalize(1e-300) {
            Some(n) => n,
            None => -view.normalize(),
        };
        let n = if n.dot(&view) > 0.0 { -n } else { n };
        [n.x, n.y, n.z]
    })
}
