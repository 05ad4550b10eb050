use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use viewstyle::attention::AttentionHeatmap;
use viewstyle::composite::{build_composite, CompositeConfig, WarpedReference};
use viewstyle::datagen::{synthesize_pairs_with, DatagenConfig};
use viewstyle::frame::{DepthMap, Intrinsics, RgbdFrame, Trajectory, ValidityMask};
use viewstyle::geometry::{normals_from_depth_map, MeshClip};
use viewstyle::io;
use viewstyle::losses::{normal_dot_loss, scale_invariant_depth_loss, total_loss, tvl1_normals, LossWeights};
use viewstyle::metrics::{eval_views_for_trajectory, sequential_feature_distance, sequential_rmse, GradientPatchExtractor};
use viewstyle::pipeline::{run_pipeline_files, PipelineConfig};
use viewstyle::schedule::StyleStrength;
use viewstyle::synthetic::{orbit_trajectory, BoxScene};
use viewstyle::warp::warp_frame;
use viewstyle::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser)]
#[command(name = "viewstyle", version, about = "Consistent RGBD novel-view stylization tools")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration (pipeline or datagen settings)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (file for eval-views)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; VIEWSTYLE_THREADS takes precedence
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    strength_rgb: Option<f64>,
    #[arg(long, global = true)]
    strength_depth: Option<f64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct Scene {
    /// Trajectory JSON
    #[arg(long)]
    trajectory: PathBuf,
    /// Directory with frame_NNNN.png / frame_NNNN.dpf
    #[arg(long)]
    frames: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic orbit (trajectory + frames) into --out
    Synth {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        /// Orbit arc in degrees
        #[arg(long, default_value_t = 40.0)]
        arc: f64,
    },
    /// Forward-warp one frame into another view
    Warp {
        #[command(flatten)]
        scene: Scene,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
    },
    /// Build the conditioning composite for a target frame
    Composite {
        #[command(flatten)]
        scene: Scene,
        /// Stylized reference frames (defaults to --frames)
        #[arg(long)]
        stylized: Option<PathBuf>,
        #[arg(long)]
        target: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        refs: Vec<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Dense attention heatmap between two frames
    Heatmap {
        #[command(flatten)]
        scene: Scene,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        /// Tokens per side
        #[arg(long, default_value_t = 32)]
        tokens: usize,
    },
    /// Autoregressive stylization with the mock stylizer
    Pipeline {
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Stylize every frame on its own
        #[arg(long)]
        independent: bool,
        #[arg(long)]
        t_noise: Option<f64>,
    },
    /// Synthesize conditioning training pairs
    Datagen {
        /// Directory with frame_NNNN.png / frame_NNNN.dpf inputs
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        views: Option<usize>,
    },
    /// Sequential consistency of a stylized frame set
    Metrics {
        #[command(flatten)]
        scene: Scene,
    },
    /// Regularization losses of a depth map against ground truth
    Losses {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Photometric term, computed elsewhere
        #[arg(long, default_value_t = 0.0)]
        phot: f64,
        /// Focal length in pixels (default max(width, height))
        #[arg(long)]
        focal: Option<f64>,
    },
    /// Midpoint evaluation views between consecutive trajectory views
    EvalViews {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value_t = 100)]
        cap: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_DATA),
            }
        }
    }
}

fn threads(g: &Global) -> Result<Option<usize>> {
    match std::env::var("VIEWSTYLE_THREADS") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Error::Config(format!("VIEWSTYLE_THREADS={s:?} is not a count"))),
        Err(_) => Ok(g.threads),
    }
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn apply_strengths(s: &mut StyleStrength, g: &Global) -> Result<()> {
    if let Some(x) = g.strength_rgb {
        s.t_rgb_max = x;
    }
    if let Some(x) = g.strength_depth {
        s.t_depth_max = x;
    }
    s.t_noise = s.t_noise.min(match (s.t_rgb_max > 0.0, s.t_depth_max > 0.0) {
        (true, true) => s.t_rgb_max.min(s.t_depth_max),
        _ => s.t_high(),
    });
    s.validate().map_err(|e| Error::Config(e.to_string()))
}

fn load_scene(scene: &Scene) -> Result<(Trajectory, Vec<RgbdFrame>)> {
    let traj = io::read_trajectory(&scene.trajectory)?;
    let frames = traj
        .frames
        .iter()
        .enumerate()
        .map(|(i, v)| io::read_frame(&scene.frames, i, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((traj, frames))
}

fn frame_at<T>(frames: &[T], i: usize) -> Result<&T> {
    frames.get(i).ok_or_else(|| Error::Config(format!("frame {i} out of range (trajectory has {})", frames.len())))
}

fn print_json(v: &serde_json::Value) {
    print_out(&serde_json::to_string_pretty(v).expect("json"));
}

// A closed pipe (`| head`) is not an error worth a panic.
fn print_out(s: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = threads(g)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { count, width, height, radius, arc } => {
            let out = out_dir(g)?;
            io::create_dir(out)?;
            let traj = orbit_trajectory(count, width, height, radius, arc)?;
            let scene = BoxScene::default();
            for (i, v) in traj.frames.iter().enumerate() {
                io::write_frame(out, &scene.render(v, i)?)?;
            }
            io::write_trajectory(&out.join("trajectory.json"), &traj)?;
            info!("wrote {count} frames to {}", out.display());
        }
        Command::Warp { scene, source, target } => {
            let out = out_dir(g)?;
            let (traj, frames) = load_scene(&scene)?;
            let w = warp_frame(frame_at(&frames, source)?, frame_at(&traj.frames, target)?, &MeshClip::default())?;
            io::create_dir(out)?;
            io::write_png(&out.join("warped.png"), &w.rgb)?;
            io::write_dpf(&out.join("warped.dpf"), &w.depth, 0)?;
            io::write_mask_png(&out.join("validity.png"), &w.validity)?;
            let unoccluded = w.flow.as_ref().map_or(0, |f| f.unoccluded());
            print_json(&json!({"source": source, "target": target, "validity": w.validity.fraction(), "unoccluded": unoccluded}));
        }
        Command::Composite { scene, stylized, target, refs, threshold } => {
            let out = out_dir(g)?;
            let (traj, frames) = load_scene(&scene)?;
            let sdir = stylized.unwrap_or(scene.frames.clone());
            let tgt = frame_at(&frames, target)?;
            let warped = refs
                .iter()
                .map(|&r| {
                    let view = frame_at(&traj.frames, r)?;
                    let f = io::read_frame(&sdir, r, view)?;
                    WarpedReference::new(&f, &tgt.view(), &MeshClip::default())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut cfg = CompositeConfig::default();
            if let Some(t) = threshold {
                cfg.threshold = t;
            } else {
                cfg.threshold = viewstyle::pipeline::PIPELINE_COMPOSITE_THRESHOLD;
            }
            let c = build_composite(&warped, tgt, &cfg)?;
            io::create_dir(out)?;
            io::write_png(&out.join("composite.png"), &c.rgb)?;
            io::write_dpf(&out.join("composite.dpf"), &c.depth, 0)?;
            io::write_mask_png(&out.join("source_mask.png"), &c.source_mask)?;
            print_json(&json!({"target": target, "refs": refs, "warped_fraction": c.source_mask.fraction()}));
        }
        Command::Heatmap { scene, source, target, tokens } => {
            let out = out_dir(g)?;
            let (traj, frames) = load_scene(&scene)?;
            let w = warp_frame(frame_at(&frames, source)?, frame_at(&traj.frames, target)?, &MeshClip::default())?;
            let flow = w.flow.expect("warp_frame attaches flow");
            let (fw, fh) = flow.reference_dims();
            if tokens == 0 || fw % tokens != 0 || fh % tokens != 0 || fw != fh {
                return Err(Error::Config(format!("--tokens {tokens} must divide the square frame size {fw}x{fh}")));
            }
            let stride = fw / tokens;
            let mut params = viewstyle::attention::AttentionConfig::default().heatmap_params();
            params.d_max /= stride as f64;
            let coarse = flow.subsample(stride)?;
            let dense = AttentionHeatmap::from_flow(&coarse, params).densify((tokens, tokens), (tokens, tokens))?;
            io::create_dir(out)?;
            let raster = viewstyle::frame::Raster::from_vec(dense.cols(), dense.rows(), dense.values.clone())?;
            io::write_dpf(&out.join("heatmap.dpf"), &raster, 0)?;
            let above = dense.values.iter().filter(|&&x| x > params.l_min).count();
            print_json(&json!({
                "target_tokens": dense.rows(),
                "reference_tokens": dense.cols(),
                "correspondences": flow.unoccluded(),
                "entries_above_floor": above,
            }));
        }
        Command::Pipeline { trajectory, frames, independent, t_noise } => {
            let mut cfg: PipelineConfig = match &g.config {
                Some(p) => read_json(p)?,
                None => PipelineConfig::default(),
            };
            if trajectory.is_some() {
                cfg.trajectory = trajectory;
            }
            if frames.is_some() {
                cfg.frames_dir = frames;
            }
            if g.out.is_some() {
                cfg.out_dir = g.out.clone();
            }
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(t) = t_noise {
                cfg.strengths.t_noise = t;
            }
            if independent {
                cfg.propagate = false;
            }
            apply_strengths(&mut cfg.strengths, g)?;
            if let Some(p) = &cfg.trajectory {
                let t = io::read_trajectory(p)?;
                let k = &t.frames[0].intrinsics;
                cfg.resolution = [k.width, k.height];
            }
            let m = run_pipeline_files(&cfg)?;
            print_json(&json!({
                "frames": m.frames.len(),
                "output_hash": m.output_hash,
                "config_hash": m.config_hash,
                "mean_sequential_rmse": m.mean_sequential_rmse,
            }));
        }
        Command::Datagen { inputs, views } => {
            let out = out_dir(g)?;
            let mut cfg: DatagenConfig = match &g.config {
                Some(p) => read_json(p)?,
                None => DatagenConfig::default(),
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(v) = views {
                cfg.views_per_input = v;
            }
            apply_strengths(&mut cfg.strengths, g)?;
            let data = read_inputs(&inputs)?;
            io::create_dir(out)?;
            let summary = synthesize_pairs_with(&data, &cfg, &|p| {
                let dir = out.join(format!("pair_{:04}_{:02}", p.input_index, p.view_index));
                io::create_dir(&dir)?;
                io::write_png(&dir.join("stylized.png"), &p.stylized)?;
                io::write_dpf(&dir.join("stylized.dpf"), &p.stylized_depth, 0)?;
                io::write_png(&dir.join("composite.png"), &p.composite.rgb)?;
                io::write_dpf(&dir.join("composite.dpf"), &p.composite.depth, 0)?;
                io::write_mask_png(&dir.join("mask.png"), &p.mask)
            })?;
            print_json(&json!({"emitted": summary.emitted, "skipped": summary.skipped}));
        }
        Command::Metrics { scene } => {
            let (_, frames) = load_scene(&scene)?;
            let mut pairs = Vec::new();
            for w in frames.windows(2) {
                let rmse = sequential_rmse(&w[0], &w[1])?;
                let feat = sequential_feature_distance(&w[0], &w[1], &GradientPatchExtractor)?;
                pairs.push(json!({"from": w[0].index, "to": w[1].index, "rmse": rmse, "feature_distance": feat}));
            }
            let mean = |key: &str| {
                let v: Vec<f64> = pairs.iter().map(|p| p[key].as_f64().unwrap()).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            print_json(&json!({"pairs": pairs, "mean_rmse": mean("rmse"), "mean_feature_distance": mean("feature_distance")}));
        }
        Command::Losses { depth, gt, phot, focal } => {
            let d = io::read_depth(&depth)?;
            let t = io::read_depth(&gt)?;
            let k = intrinsics_for(&d, focal)?;
            let n = normals_from_depth_map(&d, &k);
            let n_gt = normals_from_depth_map(&t, &k);
            let all = ValidityMask::all(d.width(), d.height(), true);
            let w = LossWeights::default();
            let tv = tvl1_normals(&n);
            let ln = normal_dot_loss(&n, &n_gt, None)?;
            let ld = scale_invariant_depth_loss(&d, &t, &all)?;
            print_json(&json!({
                "tvl1": tv,
                "normal": ln,
                "depth": ld,
                "photometric": phot,
                "total": total_loss(phot, tv, ln, ld, &w),
            }));
        }
        Command::EvalViews { trajectory, cap } => {
            let traj = io::read_trajectory(&trajectory)?;
            let views = eval_views_for_trajectory(&traj, cap)?;
            let n = views.len();
            let out_traj = Trajectory::new(views).map_err(|_| Error::Config("no evaluation views within 90 degrees".into()))?;
            match &g.out {
                Some(p) => io::write_trajectory(p, &out_traj)?,
                None => print_out(&io::trajectory_to_json(&out_traj)?),
            }
            info!("{n} evaluation views");
        }
    }
    Ok(())
}

fn intrinsics_for(d: &DepthMap, focal: Option<f64>) -> Result<Intrinsics> {
    let (w, h) = d.dims();
    Intrinsics::centered(focal.unwrap_or(w.max(h) as f64), w, h)
}

/// Every `frame_NNNN.png` with its `.dpf` in `dir`, in name order.
fn read_inputs(dir: &Path) -> Result<Vec<(viewstyle::frame::ColorRaster, DepthMap)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no PNG inputs in {}", dir.display())));
    }
    names
        .iter()
        .map(|png| {
            let rgb = io::read_png(png)?;
            let depth = io::read_depth(&png.with_extension("dpf"))?;
            Ok((rgb, depth))
        })
        .collect()
}
