//! Cameras, poses, rasters and RGBD frames.
//!
//! Conventions: pinhole camera with x right, y down, z forward. Pixel centers
//! sit at integer coordinates, so pixel `(u, v)` at depth `z` backprojects to
//! `((u - cx) / fx * z, (v - cy) / fy * z, z)` in the camera frame.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Row-major 2D raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} raster needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    pub fn map_indexed<U>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> Raster<U> {
        let w = self.width;
        let data = self.data.iter().enumerate().map(|(i, x)| f(i % w, i / w, x)).collect();
        Raster { width: self.width, height: self.height, data }
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_dims<U>(&self, other: &Raster<U>, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Iterator over `(u, v, &value)` in row-major order.
    pub fn enumerate(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data.iter().enumerate().map(move |(i, x)| (i % w, i / w, x))
    }
}

/// Linear RGB in `[0, 1]`.
pub type ColorRaster = Raster<[f64; 3]>;
/// Metric depth along the camera z axis.
pub type DepthMap = Raster<f64>;

/// Boolean coverage raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask(pub Raster<bool>);

impl ValidityMask {
    pub fn all(width: usize, height: usize, value: bool) -> Self {
        Self(Raster::filled(width, height, value))
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.0.len() as f64
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        *self.0.get(u, v)
    }

    pub fn raster(&self) -> &Raster<bool> {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }
}

/// Multi-channel raster of per-pixel feature vectors, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRaster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureRaster {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} features need {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_color(rgb: &ColorRaster) -> Self {
        let data = rgb.data().iter().flat_map(|c| c.iter().copied()).collect();
        Self { width: rgb.width(), height: rgb.height(), channels: 3, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        self.pixel_at(v * self.width + u)
    }

    #[inline]
    pub fn pixel_at(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = v * self.width + u;
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Scale every pixel's feature vector to unit L2 norm; zero vectors stay zero.
    pub fn channel_normalized(&self) -> Self {
        let mut out = self.clone();
        for px in out.data.chunks_mut(self.channels.max(1)) {
            let norm = px.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                px.iter_mut().for_each(|x| *x /= norm);
            }
        }
        out
    }
}

/// Inverse depth, in 1/m.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityRaster(pub Raster<f64>);

fn check_positive(depth: &DepthMap) -> Result<()> {
    for (u, v, &d) in depth.enumerate() {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::NonPositiveDepth { u, v, value: d });
        }
    }
    Ok(())
}

pub fn depth_to_disparity(depth: &DepthMap) -> Result<DisparityRaster> {
    check_positive(depth)?;
    Ok(DisparityRaster(depth.map(|d| 1.0 / d)))
}

pub fn disparity_to_depth(disparity: &DisparityRaster) -> Result<DepthMap> {
    check_positive(&disparity.0)?;
    Ok(disparity.0.map(|d| 1.0 / d))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point with equal focal lengths.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidIntrinsics(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty raster {}x{}", self.width, self.height));
        }
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx = {} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy = {} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point. Caller checks `p.z > 0`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-6;

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(err < ORTHO_TOL) {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (|RtR - I| = {err:e})")));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::InvalidPose("rotation determinant must be +1".into()));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let last = m.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidPose(format!("last row must be (0, 0, 0, 1), got {last}")));
        }
        Self::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// From 16 row-major values.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::InvalidPose(format!("expected 16 values, got {}", values.len())));
        }
        Self::from_matrix(&Matrix4::from_row_slice(values))
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite the image y axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::InvalidPose("eye == target".into()))?;
        let x = (-up).cross(&z).try_normalize(1e-12).ok_or_else(|| Error::InvalidPose("up parallel to view".into()))?;
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera-frame point to world frame.
    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World-frame point to camera frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.translation))
    }

    /// Geodesic angle between the two orientations, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.quaternion().angle_to(&other.quaternion())
    }
}

/// World direction of the camera's +z axis.
pub fn look_at_vector(pose: &Pose) -> Vector3<f64> {
    pose.rotation.column(2).normalize()
}

/// Camera intrinsics and pose: everything needed to render into a view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl CameraView {
    pub fn new(name: impl Into<String>, intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { name: name.into(), intrinsics, pose }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub rgb: ColorRaster,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub index: usize,
}

impl RgbdFrame {
    pub fn new(rgb: ColorRaster, depth: DepthMap, intrinsics: Intrinsics, pose: Pose, index: usize) -> Result<Self> {
        let frame = Self { rgb, depth, intrinsics, pose, index };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.rgb.check_dims(&self.depth, "rgb vs depth")?;
        if self.rgb.dims() != (self.intrinsics.width, self.intrinsics.height) {
            return Err(Error::DimensionMismatch(format!(
                "raster {}x{} vs intrinsics {}x{}",
                self.rgb.width(),
                self.rgb.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        check_positive(&self.depth)?;
        for (u, v, c) in self.rgb.enumerate() {
            if !c.iter().all(|x| (0.0..=1.0).contains(x)) {
                return Err(Error::InvalidFrame(format!("rgb {c:?} at ({u}, {v}) outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn view(&self) -> CameraView {
        CameraView::new(format!("frame_{:04}", self.index), self.intrinsics, self.pose)
    }
}

/// Ordered camera path. Frame `i` of the trajectory has index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<CameraView>,
    pub metadata: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(frames: Vec<CameraView>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config("trajectory has no frames".into()));
        }
        Ok(Self { frames, metadata: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
