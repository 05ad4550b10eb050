//! Autoregressive stylization driver.
//!
//! Frame 0 is stylized unconditioned. Every later frame warps the stylized
//! references chosen by the [`ReferencePolicy`] into its view, builds the
//! conditioning composite and heatmaps, asks the stylizer for the new frame,
//! and rescales the stylized depth onto the input depth.

use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, AttentionHeatmap, DenseHeatmap};
use crate::composite::{build_composite, median_scale, CompositeConfig, WarpedReference};
use crate::error::{Error, Result};
use crate::frame::{RgbdFrame, ValidityMask};
use crate::geometry::MeshClip;
use crate::io;
use crate::metrics::{rmse_over_validity, sequential_rmse};
use crate::schedule::{CacheKey, ChannelGroup, LatentCache, NoiseSchedule, Phase, Scheduler, StyleStrength, TimeGrid};
use crate::stylizer::{MockStylizer, ReferenceInput, StylizeRequest, Stylizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    FirstAndLast,
    First,
    Last,
}

impl ReferencePolicy {
    /// Stylized frames frame `k` conditions on.
    pub fn references(self, k: usize) -> Vec<usize> {
        if k == 0 {
            return vec![];
        }
        match self {
            ReferencePolicy::FirstAndLast if k > 1 => vec![0, k - 1],
            ReferencePolicy::FirstAndLast | ReferencePolicy::First => vec![0],
            ReferencePolicy::Last => vec![k - 1],
        }
    }
}

/// Mock stylizer parameters that are not per-run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockParams {
    pub hue_per_unit: f64,
    pub jitter: f64,
    pub depth_amplitude: f64,
    pub token_grid: usize,
}

impl Default for MockParams {
    fn default() -> Self {
        let m = MockStylizer::default();
        Self { hue_per_unit: m.hue_per_unit, jitter: m.jitter, depth_amplitude: m.depth_amplitude, token_grid: m.token_grid }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub trajectory: Option<PathBuf>,
    pub frames_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub strengths: StyleStrength,
    pub attention: AttentionConfig,
    pub composite: CompositeConfig,
    pub clip: MeshClip,
    pub reference_policy: ReferencePolicy,
    pub seed: u64,
    /// `[width, height]`.
    pub resolution: [usize; 2],
    /// Off: every frame is stylized on its own.
    pub propagate: bool,
    pub grid_steps: usize,
    pub mock: MockParams,
}

/// Composite threshold used by the pipeline. Same-surface pixels score
/// about `|sin θ| - 3 + 0.02 gap`, so anything above -3.5 keeps them and
/// still rejects warped pixels lying well behind the target surface.
pub const PIPELINE_COMPOSITE_THRESHOLD: f64 = -3.5;

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trajectory: None,
            frames_dir: None,
            out_dir: None,
            strengths: StyleStrength::default(),
            attention: AttentionConfig::default(),
            composite: CompositeConfig { threshold: PIPELINE_COMPOSITE_THRESHOLD, ..CompositeConfig::default() },
            clip: MeshClip::default(),
            reference_policy: ReferencePolicy::FirstAndLast,
            seed: 0,
            resolution: [512, 512],
            propagate: true,
            grid_steps: 50,
            mock: MockParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.strengths.validate()?;
        self.attention.validate()?;
        self.clip.validate()?;
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.grid_steps == 0 {
            return Err(Error::Config("grid_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn stylizer(&self) -> Result<MockStylizer> {
        Ok(MockStylizer {
            hue_per_unit: self.mock.hue_per_unit,
            jitter: self.mock.jitter,
            depth_amplitude: self.mock.depth_amplitude,
            seed: self.seed,
            token_grid: self.mock.token_grid,
            scheduler: Scheduler::new(NoiseSchedule::default(), TimeGrid::uniform(self.grid_steps)?),
        })
    }

    /// SHA-256 of the canonical JSON form, paths excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.trajectory = None;
        c.frames_dir = None;
        c.out_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub references: Vec<usize>,
    /// Fraction of pixels taken from warped references.
    pub composite_fraction: f64,
    pub depth_scale: f64,
    /// RMSE of frame `index - 1` warped onto this frame.
    pub sequential_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub output_hash: String,
    pub propagate: bool,
    pub frames: Vec<FrameRecord>,
    pub mean_sequential_rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub frames: Vec<RgbdFrame>,
    pub manifest: Manifest,
}

/// SHA-256 over every frame's color then depth, as little-endian f64.
pub fn output_hash(frames: &[RgbdFrame]) -> String {
    let mut h = Sha256::new();
    for f in frames {
        for c in f.rgb.data() {
            for x in c {
                h.update(x.to_le_bytes());
            }
        }
        for d in f.depth.data() {
            h.update(d.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn frame_heatmap(warped: &WarpedReference, attention: &AttentionConfig, tokens: (usize, usize)) -> Result<Option<DenseHeatmap>> {
    let Some(flow) = &warped.warp.flow else { return Ok(None) };
    let (w, h) = flow.reference_dims();
    let (sx, sy) = (w / tokens.0, h / tokens.1);
    if sx != sy || flow.target_width / tokens.0 != sx || flow.target_height / tokens.1 != sy {
        debug!("non-square token windows, skipping heatmap");
        return Ok(None);
    }
    let coarse = flow.subsample(sx)?;
    let mut params = attention.heatmap_params();
    params.d_max /= sx as f64;
    Ok(Some(AttentionHeatmap::from_flow(&coarse, params).densify(tokens, tokens)?))
}

/// Run over in-memory inputs; `sink` sees each stylized frame as soon as it
/// is final. Input frames are renumbered by position.
pub fn run_pipeline_with<S: Stylizer>(
    inputs: &[RgbdFrame],
    cfg: &PipelineConfig,
    stylizer: &S,
    tokens: (usize, usize),
    sink: &mut dyn FnMut(&RgbdFrame) -> Result<()>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Config("trajectory has no frames".into()));
    }
    let inputs: Vec<RgbdFrame> = inputs.iter().enumerate().map(|(i, f)| RgbdFrame { index: i, ..f.clone() }).collect();
    if let Some(f) = inputs.iter().find(|f| [f.width(), f.height()] != cfg.resolution) {
        return Err(Error::DimensionMismatch(format!(
            "frame {} is {}x{}, configured resolution {}x{}",
            f.index,
            f.width(),
            f.height(),
            cfg.resolution[0],
            cfg.resolution[1]
        )));
    }
    let cache = LatentCache::new();
    let mut out: Vec<RgbdFrame> = Vec::with_capacity(inputs.len());
    let mut records = Vec::with_capacity(inputs.len());

    for (k, input) in inputs.iter().enumerate() {
        let step = || -> Result<(RgbdFrame, FrameRecord)> {
            let refs = if cfg.propagate { cfg.reference_policy.references(k) } else { vec![] };
            let warped = refs
                .iter()
                .map(|&r| WarpedReference::new(&out[r], &input.view(), &cfg.clip))
                .collect::<Result<Vec<_>>>()?;
            let composite = if warped.is_empty() { None } else { Some(build_composite(&warped, input, &cfg.composite)?) };
            let heatmaps = warped.iter().map(|w| frame_heatmap(w, &cfg.attention, tokens)).collect::<Result<Vec<_>>>()?;
            let references = refs
                .iter()
                .zip(&heatmaps)
                .map(|(&r, hm)| ReferenceInput {
                    index: r,
                    frame: &out[r],
                    heatmap: hm.as_ref(),
                    latent: cache.get(&CacheKey::new(r, Phase::Denoise, 0.0)),
                })
                .collect();
            let req = StylizeRequest {
                input,
                composite: composite.as_ref(),
                references,
                strengths: cfg.strengths,
                attention: cfg.attention,
            };
            let styl = stylizer.stylize(&req, Some(&cache))?;

            let mut depth_scale = 1.0;
            let depth = if k > 0 && cfg.strengths.active(ChannelGroup::Depth) {
                let all = ValidityMask::all(input.width(), input.height(), true);
                depth_scale = median_scale(&styl.depth, &input.depth, &all)?;
                styl.depth.map(|d| d * depth_scale)
            } else {
                styl.depth
            };
            let frame = RgbdFrame::new(styl.rgb, depth, input.intrinsics, input.pose.clone(), k)?;

            let seq = if k == 0 {
                None
            } else if let Some(w) = refs.iter().position(|&r| r == k - 1) {
                Some(rmse_over_validity(&warped[w].warp, &frame.rgb)?)
            } else {
                Some(sequential_rmse(&out[k - 1], &frame)?)
            };
            let composite_fraction = composite.as_ref().map_or(0.0, |c| c.source_mask.fraction());
            Ok((frame, FrameRecord { index: k, references: refs, composite_fraction, depth_scale, sequential_rmse: seq }))
        };
        let (frame, record) = step().map_err(|e| e.in_frame(k))?;
        info!(
            "frame {k}: composite {:.1}%, seq rmse {}",
            100.0 * record.composite_fraction,
            record.sequential_rmse.map_or("-".to_string(), |x| format!("{x:.5}"))
        );
        sink(&frame)?;
        out.push(frame);
        records.push(record);

        let keep = cfg.reference_policy.references(k + 1);
        for f in 0..=k {
            if !keep.contains(&f) {
                cache.evict_frame(f);
            }
        }
    }

    let seqs: Vec<f64> = records.iter().filter_map(|r| r.sequential_rmse).collect();
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        output_hash: output_hash(&out),
        propagate: cfg.propagate,
        mean_sequential_rmse: (!seqs.is_empty()).then(|| seqs.iter().sum::<f64>() / seqs.len() as f64),
        frames: records,
    };
    Ok(PipelineOutput { frames: out, manifest })
}

/// Run with the mock stylizer configured by `cfg`.
pub fn run_pipeline(inputs: &[RgbdFrame], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let stylizer = cfg.stylizer()?;
    let first = inputs.first().ok_or_else(|| Error::Config("trajectory has no frames".into()))?;
    let tokens = stylizer.token_resolution(first.width(), first.height());
    run_pipeline_with(inputs, cfg, &stylizer, tokens, &mut |_| Ok(()))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{what} path is required")))
}

/// Read trajectory and frames, stylize, write frames and `manifest.json`.
/// Frames finished before a failure stay on disk.
pub fn run_pipeline_files(cfg: &PipelineConfig) -> Result<Manifest> {
    let traj_path = required(&cfg.trajectory, "trajectory")?;
    let frames_dir = required(&cfg.frames_dir, "frames")?;
    let out_dir = required(&cfg.out_dir, "output")?;
    for p in [traj_path, frames_dir] {
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
    }
    let traj = io::read_trajectory(traj_path)?;
    let inputs = traj
        .frames
        .iter()
        .enumerate()
        .map(|(i, v)| io::read_frame(frames_dir, i, v).map_err(|e| e.in_frame(i)))
        .collect::<Result<Vec<_>>>()?;
    io::create_dir(out_dir)?;
    let stylizer = cfg.stylizer()?;
    let tokens = stylizer.token_resolution(cfg.resolution[0], cfg.resolution[1]);
    let result = run_pipeline_with(&inputs, cfg, &stylizer, tokens, &mut |f| io::write_frame(out_dir, f))?;
    io::write_trajectory(&out_dir.join("trajectory.json"), &traj)?;
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&result.manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(result.manifest)
}
