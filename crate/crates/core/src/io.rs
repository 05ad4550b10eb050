//! File formats.
//!
//! Depth/disparity: `DPF1` magic, then little-endian `u32` width, height and
//! flags (bit 0 set for disparity), then row-major little-endian `f32`s.
//! Color: 8-bit sRGB PNG, linear `[0, 1]` in memory.
//! Trajectories: JSON with row-major 4x4 world-from-camera matrices.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{CameraView, ColorRaster, DepthMap, Intrinsics, Pose, Raster, RgbdFrame, Trajectory, ValidityMask};

pub const DPF_MAGIC: [u8; 4] = *b"DPF1";
pub const DPF_HEADER_LEN: usize = 16;
pub const MAX_DIMENSION: u64 = 16384;
pub const FLAG_DISPARITY: u32 = 1;
pub const CONVENTION: &str = "xr-yd-zf";

#[derive(Debug, Clone, PartialEq)]
pub struct DpfRaster {
    pub raster: Raster<f64>,
    pub flags: u32,
}

impl DpfRaster {
    pub fn is_disparity(&self) -> bool {
        self.flags & FLAG_DISPARITY != 0
    }
}

pub fn encode_dpf(raster: &Raster<f64>, flags: u32) -> Result<Vec<u8>> {
    let (w, h) = raster.dims();
    check_dims(w as u64, h as u64)?;
    let mut out = Vec::with_capacity(DPF_HEADER_LEN + 4 * w * h);
    out.extend_from_slice(&DPF_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for &x in raster.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

fn check_dims(width: u64, height: u64) -> Result<()> {
    if width > MAX_DIMENSION || height > MAX_DIMENSION {
        return Err(Error::DimensionOverflow { width, height, limit: MAX_DIMENSION });
    }
    Ok(())
}

pub fn decode_dpf(bytes: &[u8]) -> Result<DpfRaster> {
    if bytes.len() < DPF_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != DPF_MAGIC {
            return Err(Error::MagicMismatch { expected: DPF_MAGIC, found: bytes[..4].try_into().unwrap() });
        }
        return Err(Error::TruncatedFile { expected: DPF_HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DPF_MAGIC {
        return Err(Error::MagicMismatch { expected: DPF_MAGIC, found: magic });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (w, h, flags) = (word(4) as u64, word(8) as u64, word(12));
    check_dims(w, h)?;
    let expected = DPF_HEADER_LEN + 4 * (w * h) as usize;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile { expected, found: bytes.len() });
    }
    let data = bytes[DPF_HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DpfRaster { raster: Raster::from_vec(w as usize, h as usize, data)?, flags })
}

pub fn write_dpf(path: &Path, raster: &Raster<f64>, flags: u32) -> Result<()> {
    fs::write(path, encode_dpf(raster, flags)?).map_err(|e| Error::io(path, e))
}

pub fn read_dpf(path: &Path) -> Result<DpfRaster> {
    decode_dpf(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Depth in meters; disparity files are inverted.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let f = read_dpf(path)?;
    if !f.is_disparity() {
        return Ok(f.raster);
    }
    crate::frame::disparity_to_depth(&crate::frame::DisparityRaster(f.raster))
}

pub fn srgb_to_linear(x: f64) -> f64 {
    if x <= 0.04045 {
        x / 12.92
    } else {
        ((x + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

pub fn color_to_rgb8(rgb: &ColorRaster) -> image::RgbImage {
    let (w, h) = rgb.dims();
    image::RgbImage::from_fn(w as u32, h as u32, |u, v| {
        let c = rgb.get(u as usize, v as usize);
        image::Rgb(c.map(|x| (linear_to_srgb(x) * 255.0).round() as u8))
    })
}

pub fn rgb8_to_color(img: &image::RgbImage) -> ColorRaster {
    let lut: Vec<f64> = (0..256).map(|i| srgb_to_linear(i as f64 / 255.0)).collect();
    Raster::from_fn(img.width() as usize, img.height() as usize, |u, v| {
        img.get_pixel(u as u32, v as u32).0.map(|b| lut[b as usize])
    })
}

pub fn write_png(path: &Path, rgb: &ColorRaster) -> Result<()> {
    color_to_rgb8(rgb).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ColorRaster> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb8_to_color(&img))
}

pub fn write_mask_png(path: &Path, mask: &ValidityMask) -> Result<()> {
    let (w, h) = (mask.width() as u32, mask.height() as u32);
    let img = image::GrayImage::from_fn(w, h, |u, v| image::Luma([if mask.get(u as usize, v as usize) { 255 } else { 0 }]));
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<ValidityMask> {
    let img = image::open(path)?.to_luma8();
    Ok(ValidityMask(Raster::from_fn(img.width() as usize, img.height() as usize, |u, v| {
        img.get_pixel(u as u32, v as u32).0[0] >= 128
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    name: String,
    intrinsics: Intrinsics,
    world_from_camera: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryFile {
    #[serde(default)]
    convention: Option<String>,
    frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

pub fn trajectory_to_json(t: &Trajectory) -> Result<String> {
    let file = TrajectoryFile {
        convention: Some(CONVENTION.into()),
        frames: t
            .frames
            .iter()
            .map(|f| FrameRecord {
                name: f.name.clone(),
                intrinsics: f.intrinsics,
                world_from_camera: f.pose.to_row_major().to_vec(),
            })
            .collect(),
        metadata: t.metadata.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn trajectory_from_json(s: &str) -> Result<Trajectory> {
    let file: TrajectoryFile = serde_json::from_str(s)?;
    if let Some(c) = &file.convention {
        if c != CONVENTION {
            return Err(Error::Config(format!("unsupported camera convention {c:?}, expected {CONVENTION:?}")));
        }
    }
    let frames = file
        .frames
        .into_iter()
        .map(|r| {
            r.intrinsics.validate()?;
            Ok(CameraView::new(r.name, r.intrinsics, Pose::from_row_major(&r.world_from_camera)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Trajectory::new(frames)?;
    t.metadata = file.metadata;
    Ok(t)
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    fs::write(path, trajectory_to_json(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    trajectory_from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// `<dir>/frame_0007.png` and `<dir>/frame_0007.dpf`.
pub fn frame_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("frame_{index:04}.png")), dir.join(format!("frame_{index:04}.dpf")))
}

pub fn write_frame(dir: &Path, frame: &RgbdFrame) -> Result<()> {
    let (png, dpf) = frame_paths(dir, frame.index);
    write_png(&png, &frame.rgb)?;
    write_dpf(&dpf, &frame.depth, 0)
}

pub fn read_frame(dir: &Path, index: usize, view: &CameraView) -> Result<RgbdFrame> {
    let (png, dpf) = frame_paths(dir, index);
    let rgb = read_png(&png)?;
    let depth = read_depth(&dpf)?;
    RgbdFrame::new(rgb, depth, view.intrinsics, view.pose.clone(), index)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
