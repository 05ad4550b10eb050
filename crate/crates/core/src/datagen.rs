//! Conditioning-pair synthesis.
//!
//! For each input RGBD image: stylize it, warp the stylized result out to a
//! random nearby camera and back, and composite the round-tripped pixels over
//! the unstylized input. The round trip leaves holes exactly where a real
//! autoregressive step would lack warped content.
//!
//! Cameras: translation uniform in a ball of radius
//! `translation_fraction * median depth`, rotation about a uniform random
//! axis by an angle uniform in `[0, max_rotation_deg]`. Each input draws from
//! its own ChaCha8 stream (`seed`, stream = input index).

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composite::{align_composite_depth, composite_valid, CompositeFrame};
use crate::error::{Error, Result};
use crate::frame::{CameraView, ColorRaster, DepthMap, Intrinsics, Pose, RgbdFrame, ValidityMask};
use crate::geometry::{build_mesh, MeshClip};
use crate::pipeline::MockParams;
use crate::schedule::{Scheduler, StyleStrength};
use crate::stylizer::{MockStylizer, StylizeRequest, Stylizer};
use crate::synthetic::random_pose;
use crate::warp::{rasterize, warp_masked, WarpResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub views_per_input: usize,
    pub seed: u64,
    pub strengths: StyleStrength,
    pub translation_fraction: f64,
    pub max_rotation_deg: f64,
    /// Pairs whose round-trip validity falls below this fraction are skipped.
    pub min_validity: f64,
    pub band_px: usize,
    pub clip: MeshClip,
    pub mock: MockParams,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            views_per_input: 6,
            seed: 0,
            strengths: StyleStrength::default(),
            translation_fraction: 0.15,
            max_rotation_deg: 10.0,
            min_validity: 0.2,
            band_px: 3,
            clip: MeshClip::default(),
            mock: MockParams::default(),
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views_per_input == 0 {
            return Err(Error::Config("views_per_input must be at least 1".into()));
        }
        if !(self.translation_fraction >= 0.0) || !(self.max_rotation_deg >= 0.0) {
            return Err(Error::Config("camera offsets must be non-negative".into()));
        }
        self.strengths.validate()?;
        self.clip.validate()
    }

    pub fn stylizer(&self) -> MockStylizer {
        MockStylizer {
            hue_per_unit: self.mock.hue_per_unit,
            jitter: self.mock.jitter,
            depth_amplitude: self.mock.depth_amplitude,
            seed: self.seed,
            token_grid: self.mock.token_grid,
            scheduler: Scheduler::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub input_index: usize,
    pub view_index: usize,
    /// Camera the stylized frame was warped out to.
    pub camera: Pose,
    pub stylized: ColorRaster,
    pub stylized_depth: DepthMap,
    /// The round trip back into the input view.
    pub round_trip: WarpResult,
    pub composite: CompositeFrame,
    /// Equal to the round trip's validity.
    pub mask: ValidityMask,
}

/// Input view convention: identity pose, `fx = fy = max(w, h)`, centered.
pub fn input_frame(rgb: ColorRaster, depth: DepthMap, index: usize) -> Result<RgbdFrame> {
    let (w, h) = rgb.dims();
    let k = Intrinsics::centered(w.max(h) as f64, w, h)?;
    RgbdFrame::new(rgb, depth, k, Pose::identity(), index)
}

pub fn stylize_input(input: &RgbdFrame, cfg: &DatagenConfig, stylizer: &MockStylizer) -> Result<RgbdFrame> {
    let req = StylizeRequest {
        input,
        composite: None,
        references: vec![],
        strengths: cfg.strengths,
        attention: Default::default(),
    };
    let s = stylizer.stylize(&req, None)?;
    RgbdFrame::new(s.rgb, s.depth, input.intrinsics, input.pose.clone(), input.index)
}

/// Round-trip `stylized` through `camera` and composite over `input`.
/// `None` when the round trip covers less than `min_validity`.
pub fn pair_for_camera(
    input: &RgbdFrame,
    stylized: &RgbdFrame,
    camera: &Pose,
    view_index: usize,
    cfg: &DatagenConfig,
) -> Result<Option<TrainingPair>> {
    let out_view = CameraView::new("datagen-out", input.intrinsics, camera.clone());
    let out = rasterize(&build_mesh(stylized, &cfg.clip)?, &out_view)?;
    let back = warp_masked(&out.rgb, &out.depth, &out.validity, &out_view, &input.view(), &cfg.clip)?;
    let frac = back.validity.fraction();
    if frac < cfg.min_validity {
        return Ok(None);
    }
    let scale = align_composite_depth(&back, input, cfg.band_px)?;
    let composite = composite_valid(&back, &input.rgb, &input.depth, scale)?;
    Ok(Some(TrainingPair {
        input_index: input.index,
        view_index,
        camera: camera.clone(),
        stylized: stylized.rgb.clone(),
        stylized_depth: stylized.depth.clone(),
        mask: back.validity.clone(),
        round_trip: back,
        composite,
    }))
}

pub fn random_cameras(depth: &DepthMap, input_index: usize, cfg: &DatagenConfig) -> Vec<Pose> {
    let mut d = depth.data().to_vec();
    let med = crate::composite::median(&mut d).unwrap_or(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(input_index as u64);
    (0..cfg.views_per_input)
        .map(|_| random_pose(&mut rng, cfg.translation_fraction * med, cfg.max_rotation_deg.to_radians()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatagenSummary {
    pub emitted: usize,
    pub skipped: usize,
}

/// Synthesize pairs for every input in parallel; `sink` receives each pair.
pub fn synthesize_pairs_with(
    inputs: &[(ColorRaster, DepthMap)],
    cfg: &DatagenConfig,
    sink: &(dyn Fn(&TrainingPair) -> Result<()> + Sync),
) -> Result<DatagenSummary> {
    cfg.validate()?;
    let stylizer = cfg.stylizer();
    let per_input: Vec<DatagenSummary> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (rgb, depth))| -> Result<DatagenSummary> {
            let run = || -> Result<DatagenSummary> {
                let input = input_frame(rgb.clone(), depth.clone(), i)?;
                let stylized = stylize_input(&input, cfg, &stylizer)?;
                let mut s = DatagenSummary::default();
                for (v, cam) in random_cameras(depth, i, cfg).iter().enumerate() {
                    match pair_for_camera(&input, &stylized, cam, v, cfg)? {
                        Some(p) => {
                            sink(&p)?;
                            s.emitted += 1;
                        }
                        None => {
                            warn!("input {i} view {v}: round-trip validity below {:.0}%, skipped", 100.0 * cfg.min_validity);
                            s.skipped += 1;
                        }
                    }
                }
                Ok(s)
            };
            run().map_err(|e| e.in_frame(i))
        })
        .collect::<Result<_>>()?;
    Ok(per_input.iter().fold(DatagenSummary::default(), |a, s| DatagenSummary {
        emitted: a.emitted + s.emitted,
        skipped: a.skipped + s.skipped,
    }))
}

/// Collecting variant, ordered by input then view.
pub fn synthesize_pairs(inputs: &[(ColorRaster, DepthMap)], cfg: &DatagenConfig) -> Result<Vec<TrainingPair>> {
    let pairs = std::sync::Mutex::new(Vec::new());
    synthesize_pairs_with(inputs, cfg, &|p| {
        pairs.lock().expect("pairs lock").push(p.clone());
        Ok(())
    })?;
    let mut pairs = pairs.into_inner().expect("pairs lock");
    pairs.sort_by_key(|p| (p.input_index, p.view_index));
    Ok(pairs)
}
