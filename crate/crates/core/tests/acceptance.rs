//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances are the constants below.

mod common;

use std::f64::consts::FRAC_PI_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{attention_oracle, heatmap_oracle, inject_oracle, max_abs, point_splat, random_case, random_flow, random_matrix, rmse, rng};
use nalgebra::DMatrix;
use rand::Rng;
use viewstyle::attention::*;
use viewstyle::composite::{compositing_score, CompositeWeights};
use viewstyle::datagen::*;
use viewstyle::frame::{ColorRaster, DepthMap, Pose, Raster, ValidityMask};
use viewstyle::geometry::{MeshClip, NormalMap};
use viewstyle::losses::*;
use viewstyle::pipeline::{run_pipeline, PipelineConfig};
use viewstyle::rng::NoiseKey;
use viewstyle::schedule::*;
use viewstyle::stylizer::{MockStylizer, StylizeRequest, Stylizer, TargetDenoiser};
use viewstyle::synthetic::{orbit_trajectory, random_frame, render_trajectory, BoxScene};
use viewstyle::warp::warp_frame;

const WARP_CASES: u64 = 50;
const WARP_RGB_RMSE: f64 = 2e-2;
const WARP_DEPTH_ABS: f64 = 1e-3;
const WARP_DEPTH_REL: f64 = 0.01;
const WARP_BUDGET: Duration = Duration::from_secs(30);

const IDENTITY_SIZE: usize = 512;
const IDENTITY_RMSE: f64 = 1e-3;
const IDENTITY_VALIDITY: f64 = 0.99;
const IDENTITY_BUDGET: Duration = Duration::from_secs(1);

const HEATMAP_CASES: u64 = 20;

const ATTN_CONST_BIAS: f64 = 1e-6;
const ATTN_HAND: f64 = 1e-9;
const ATTN_INJECT: f64 = 1e-6;
const ATTN_INJECT_CASES: u64 = 100;

const LOSS_SCALE_REL: f64 = 1e-9;
const LOSS_LOOP: f64 = 1e-9;

const ROUND_TRIP: f32 = 1e-4;

const E2E_FRAMES: usize = 20;
const E2E_SIZE: usize = 512;
const E2E_BUDGET: Duration = Duration::from_secs(60);

const DATAGEN_PAIRS: usize = 100;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

fn warp_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..WARP_CASES {
        let (f, view) = random_case(seed, 32);
        let warp = warp_frame(&f, &view, &MeshClip::default()).map_err(|e| e.to_string())?;
        let splat = point_splat(&f, &view, 8, 0.1);
        let mut pairs = Vec::new();
        for (i, s) in splat.px.iter().enumerate() {
            let Some((d, c)) = s else { continue };
            if !warp.validity.raster().data()[i] {
                continue;
            }
            let wd = warp.depth.data()[i];
            ensure((wd - d).abs() <= WARP_DEPTH_ABS.max(WARP_DEPTH_REL * d), || format!("seed {seed} pixel {i}: depth {wd} vs {d}"))?;
            pairs.extend((0..3).map(|ch| (warp.rgb.data()[i][ch], c[ch])));
        }
        ensure(!pairs.is_empty(), || format!("seed {seed}: no mutually valid pixels"))?;
        let e = rmse(pairs.into_iter());
        ensure(e < WARP_RGB_RMSE, || format!("seed {seed}: rgb rmse {e:.3e}"))?;
        worst = worst.max(e);
    }
    let t = start.elapsed();
    ensure(t < WARP_BUDGET, || format!("took {t:?}"))?;
    Ok(format!("{WARP_CASES} cases, worst rgb rmse {worst:.2e}, {t:.2?}"))
}

fn identity_warp() -> Outcome {
    let f = random_frame(7, IDENTITY_SIZE, IDENTITY_SIZE, Pose::identity()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let warp = warp_frame(&f, &f.view(), &MeshClip::default()).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let n = IDENTITY_SIZE;
    let (mut pairs, mut valid, mut total) = (Vec::new(), 0usize, 0usize);
    for v in 1..n - 1 {
        for u in 1..n - 1 {
            total += 1;
            if warp.validity.get(u, v) {
                valid += 1;
                pairs.extend((0..3).map(|c| (warp.rgb.get(u, v)[c], f.rgb.get(u, v)[c])));
            }
        }
    }
    let e = rmse(pairs.into_iter());
    let frac = valid as f64 / total as f64;
    ensure(e < IDENTITY_RMSE, || format!("interior rmse {e:.3e}"))?;
    ensure(frac >= IDENTITY_VALIDITY, || format!("interior validity {frac:.4}"))?;
    ensure(t < IDENTITY_BUDGET, || format!("warp took {t:?}"))?;
    Ok(format!("rmse {e:.2e}, validity {:.2}%, {t:.2?}", 100.0 * frac))
}

fn heatmap() -> Outcome {
    let mut r = rng(1);
    for case in 0..HEATMAP_CASES {
        let flow = random_flow(&mut r, 8, 8);
        let (d_max, l_min) = (r.random_range(1.0..6.0), r.random_range(0.05..0.9));
        let p = HeatmapParams { d_max, l_min, ..Default::default() };
        let full = build_heatmap(&flow, p, (8, 8), (8, 8)).map_err(|e| e.to_string())?.dense.unwrap();
        let want = heatmap_oracle(&flow, d_max, l_min, p.upper_clamp, p.blur == BlurMode::Sum, (8, 8), (8, 8));
        ensure(full.values == want, || format!("case {case}: dense map differs from loop oracle"))?;
        let pooled = build_heatmap(&flow, p, (4, 4), (4, 4)).map_err(|e| e.to_string())?.dense.unwrap();
        for tj in 0..16 {
            for ri in 0..16 {
                let mut m = f64::NEG_INFINITY;
                for (a, b, c, d) in (0..16).map(|k| (k & 1, (k >> 1) & 1, (k >> 2) & 1, (k >> 3) & 1)) {
                    let t = (2 * (tj / 4) + b) * 8 + 2 * (tj % 4) + a;
                    let s = (2 * (ri / 4) + d) * 8 + 2 * (ri % 4) + c;
                    m = m.max(full.get(t, s));
                }
                ensure(pooled.get(tj, ri) == m, || format!("case {case}: pooled ({tj},{ri}) is not the window max"))?;
            }
        }
    }
    Ok(format!("{HEATMAP_CASES} flows bit-exact, max-pool exact"))
}

fn attention() -> Outcome {
    let mut r = rng(4);
    let mut worst_a = 0.0f64;
    for _ in 0..100 {
        let lam = r.random_range(0.05..2.0);
        let (q, ks, vs) = (random_matrix(&mut r, 3, 4, 1.0), random_matrix(&mut r, 2, 4, 1.0), random_matrix(&mut r, 2, 3, 1.0));
        let (kr, vr) = (random_matrix(&mut r, 5, 4, 1.0), random_matrix(&mut r, 5, 3, 1.0));
        let l = DMatrix::from_element(3, 5, lam);
        let biased = biased_attention(&q, &ks, &vs, &[ReferenceKv { keys: &kr, values: &vr, bias: &l }], lam).map_err(|e| e.to_string())?;
        let k_all = DMatrix::from_fn(7, 4, |i, c| if i < 2 { ks[(i, c)] } else { kr[(i - 2, c)] });
        let v_all = DMatrix::from_fn(7, 3, |i, c| if i < 2 { vs[(i, c)] } else { vr[(i - 2, c)] });
        worst_a = worst_a.max(max_abs(&biased, &attention_oracle(&q, &k_all, &v_all, &DMatrix::zeros(3, 7))));
    }
    ensure(worst_a < ATTN_CONST_BIAS, || format!("(a) constant bias deviates {worst_a:.2e}"))?;

    let q = DMatrix::from_row_slice(1, 1, &[1.0]);
    let vs = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let kr = DMatrix::from_row_slice(1, 1, &[0.0]);
    let vr = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    let l = DMatrix::from_row_slice(1, 1, &[0.8]);
    let mut worst_b = 0.0f64;
    for (k_self, lam) in [(2.0, 0.5), (0.0, 0.2), (-1.0, 1.0)] {
        let ks = DMatrix::from_row_slice(1, 1, &[k_self]);
        let out = biased_attention(&q, &ks, &vs, &[ReferenceKv { keys: &kr, values: &vr, bias: &l }], lam).map_err(|e| e.to_string())?;
        let (a, b) = (lam * f64::exp(k_self), 0.8);
        worst_b = worst_b.max((out[(0, 0)] - a / (a + b)).abs()).max((out[(0, 1)] - b / (a + b)).abs());
    }
    ensure(worst_b < ATTN_HAND, || format!("(b) hand cases deviate {worst_b:.2e}"))?;

    let mut worst_c = 0.0f64;
    for _ in 0..ATTN_INJECT_CASES {
        let (n, m, d) = (r.random_range(1..6), r.random_range(1..8), r.random_range(1..5));
        let h = random_matrix(&mut r, n, d, 3.0);
        let h_ref = random_matrix(&mut r, m, d, 3.0);
        let l = DMatrix::from_fn(n, m, |_, _| r.random_range(0.5..1.0));
        let mix = mixing_matrix(&l, 0.05).map_err(|e| e.to_string())?;
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
        let out = inject_features(&h, &h_ref, &mix, &w).map_err(|e| e.to_string())?;
        worst_c = worst_c.max(max_abs(&out, &inject_oracle(&h, &h_ref, &mix, &w)));
    }
    ensure(worst_c < ATTN_INJECT, || format!("(c) inject deviates {worst_c:.2e}"))?;
    Ok(format!("(a) {worst_a:.1e} (b) {worst_b:.1e} (c) {worst_c:.1e}"))
}

fn composite_score() -> Outcome {
    let w = CompositeWeights::default();
    let s = compositing_score(FRAC_PI_2, 1.0, 1.0, 1, 0, &w).map_err(|e| e.to_string())?;
    ensure(s == -1.98, || format!("S = {s}"))?;
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 / 40.0).collect();
    for &x in &grid {
        let by_angle: Vec<f64> = grid.iter().map(|&a| w.score(a, 2.0 * x, 2.0)).collect();
        let by_ratio: Vec<f64> = grid.iter().map(|&r| w.score(x, 3.0 * r, 1.0)).collect();
        let by_gap: Vec<f64> = (1..30).map(|g| w.score(x, 0.5, g as f64)).collect();
        ensure(by_angle.windows(2).all(|p| p[1] > p[0]), || "not increasing in |sin θ|".into())?;
        ensure(by_ratio.windows(2).all(|p| p[1] < p[0]), || "not decreasing in depth ratio".into())?;
        ensure(by_gap.windows(2).all(|p| p[1] > p[0]), || "not increasing in gap".into())?;
    }
    Ok("S = -1.98, sweeps monotone".into())
}

fn unit_normals(r: &mut impl Rng, w: usize, h: usize) -> NormalMap {
    Raster::from_fn(w, h, |_, _| {
        let n: [f64; 3] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(0.1..1.0)];
        let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        n.map(|x| x / l)
    })
}

fn losses() -> Outcome {
    let mut r = rng(6);
    let mut worst_scale = 0.0f64;
    let mut worst_loop = 0.0f64;
    for _ in 0..100 {
        let (w, h) = (r.random_range(2..10), r.random_range(2..10));
        let p: DepthMap = Raster::from_fn(w, h, |_, _| r.random_range(0.5..8.0));
        let g: DepthMap = Raster::from_fn(w, h, |_, _| r.random_range(0.5..8.0));
        let mut m = Raster::from_fn(w, h, |_, _| r.random_bool(0.7));
        m.set(0, 0, true);
        let m = ValidityMask(m);
        let base = scale_invariant_depth_loss(&p, &g, &m).map_err(|e| e.to_string())?;
        for c in [0.1, 10.0, 1e3] {
            let l = scale_invariant_depth_loss(&p.map(|x| c * x), &g, &m).map_err(|e| e.to_string())?;
            worst_scale = worst_scale.max((l - base).abs() / base.abs().max(1e-300));
        }
        let (n, ngt) = (unit_normals(&mut r, w, h), unit_normals(&mut r, w, h));
        let mut tv = 0.0;
        for v in 0..h {
            for u in 0..w {
                for (du, dv) in [(1, 0), (0, 1)] {
                    if u + du < w && v + dv < h {
                        tv += (0..3).map(|c| (n.get(u + du, v + dv)[c] - n.get(u, v)[c]).abs()).sum::<f64>();
                    }
                }
            }
        }
        let mut dot = 0.0;
        for i in 0..w * h {
            if m.raster().data()[i] {
                dot -= (0..3).map(|c| n.data()[i][c] * ngt.data()[i][c]).sum::<f64>();
            }
        }
        worst_loop = worst_loop.max((tvl1_normals(&n) - tv).abs());
        worst_loop = worst_loop.max((normal_dot_loss(&n, &ngt, Some(&m)).map_err(|e| e.to_string())? - dot).abs());
    }
    ensure(worst_scale <= LOSS_SCALE_REL, || format!("scale invariance off by {worst_scale:.2e} relative"))?;
    ensure(worst_loop < LOSS_LOOP, || format!("kernels off loop oracle by {worst_loop:.2e}"))?;
    let total = total_loss(1.0, 1.0, 1.0, 1.0, &LossWeights::default());
    ensure((total - 1.551).abs() < 1e-12, || format!("unit total {total}"))?;
    Ok(format!("scale {worst_scale:.1e}, loops {worst_loop:.1e}, total {total}"))
}

struct Wobble;

impl Denoiser for Wobble {
    type Cond = ();
    fn predict_noise(&self, x: &Latent, t: f64, _: &()) -> viewstyle::Result<Latent> {
        let data = x.data().iter().enumerate().map(|(i, v)| (3.0 * v + t as f32 + i as f32 * 0.01).sin()).collect();
        Latent::from_vec(x.width(), x.height(), data)
    }
}

fn latent(seed: u64, w: usize, h: usize) -> Latent {
    let mut l = Latent::noise(w, h, NoiseKey::new(seed, 7, 7));
    for c in 0..4 {
        l.plane_mut(c).iter_mut().for_each(|x| *x = 0.5 + 0.2 * *x);
    }
    l
}

fn schedule() -> Outcome {
    let sch = Scheduler::default();
    let zero = StyleStrength::new(0.0, 0.0, 0.0).map_err(|e| e.to_string())?;
    let x = latent(1, 9, 7);
    let inv = sch.partial_invert(&x, &Wobble, &zero, &(), NoiseKey::new(0, 0, 0), None).map_err(|e| e.to_string())?;
    let out = sch.denoise(&inv, &Wobble, &zero, &(), None).map_err(|e| e.to_string())?;
    ensure(out == x, || "zero strengths changed the latent".into())?;
    let f = random_frame(2, 16, 12, Pose::identity()).map_err(|e| e.to_string())?;
    let req = StylizeRequest { input: &f, composite: None, references: vec![], strengths: zero, attention: Default::default() };
    let o = MockStylizer::default().stylize(&req, None).map_err(|e| e.to_string())?;
    ensure(o.rgb == f.rgb && o.depth == f.depth, || "zero strengths changed the frame".into())?;

    for (s, low) in [((0.8, 0.3), ChannelGroup::Depth), ((0.25, 0.9), ChannelGroup::Rgb)] {
        let s = StyleStrength::new(s.0, s.1, 0.0).map_err(|e| e.to_string())?;
        let lo = s.t_rgb_max.min(s.t_depth_max);
        let cache = LatentCache::new();
        let inv = sch.partial_invert(&x, &Wobble, &s, &(), NoiseKey::new(3, 0, 0), Some((&cache, 0))).map_err(|e| e.to_string())?;
        let at_lo = cache.get(&CacheKey::new(0, Phase::Invert, lo)).ok_or("no cache entry at the lower threshold")?;
        for &t in sch.inversion_knots(&s).map_err(|e| e.to_string())?.iter().filter(|&&t| t > lo) {
            let e = cache.get(&CacheKey::new(0, Phase::Invert, t)).ok_or("missing inversion entry")?;
            ensure(e.group(low) == at_lo.group(low), || format!("{low:?} moved at t = {t}"))?;
        }
        ensure(inv.group(low) == at_lo.group(low), || format!("{low:?} moved before denoising"))?;
        sch.denoise(&inv, &Wobble, &s, &(), Some((&cache, 0))).map_err(|e| e.to_string())?;
        for &t in sch.denoise_knots(&s).iter().skip(1).filter(|&&t| t >= lo) {
            let e = cache.get(&CacheKey::new(0, Phase::Denoise, t)).ok_or("missing denoise entry")?;
            ensure(e.group(low) == at_lo.group(low), || format!("{low:?} moved at t = {t} while denoising"))?;
        }
    }

    ensure(sch.grid.steps() == 50, || format!("{} steps", sch.grid.steps()))?;
    let mut worst = 0.0f32;
    for (seed, s) in [(1, (1.0, 1.0, 0.0)), (2, (0.8, 0.8, 0.1)), (3, (0.9, 0.35, 0.2)), (4, (0.3, 0.7, 0.05))] {
        let s = StyleStrength::new(s.0, s.1, s.2).map_err(|e| e.to_string())?;
        let x = latent(seed, 12, 10);
        let den = TargetDenoiser { target: &x, scheduler: &sch };
        let inv = sch.partial_invert(&x, &den, &s, &(), NoiseKey::new(seed, 0, 0), None).map_err(|e| e.to_string())?;
        let back = sch.denoise(&inv, &den, &s, &(), None).map_err(|e| e.to_string())?;
        for g in ChannelGroup::ALL {
            worst = back.group(g).iter().zip(x.group(g)).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
        }
    }
    ensure(worst < ROUND_TRIP, || format!("round trip error {worst:.2e}"))?;
    Ok(format!("passthrough exact, gating exact, round trip {worst:.1e}"))
}

fn end_to_end() -> Outcome {
    let traj = orbit_trajectory(E2E_FRAMES, E2E_SIZE, E2E_SIZE, 3.0, 40.0).map_err(|e| e.to_string())?;
    let frames = render_trajectory(&BoxScene::default(), &traj).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig { resolution: [E2E_SIZE, E2E_SIZE], ..Default::default() };
    let timed = |cfg: &PipelineConfig| -> Result<_, String> {
        let start = Instant::now();
        let out = run_pipeline(&frames, cfg).map_err(|e| e.to_string())?;
        Ok((out.manifest, start.elapsed()))
    };
    let (a, ta) = timed(&cfg)?;
    ensure(ta < E2E_BUDGET, || format!("propagated run took {ta:?}"))?;
    let (b, _) = timed(&cfg)?;
    ensure(a.output_hash == b.output_hash, || "two runs differ".into())?;
    let (ind, _) = timed(&PipelineConfig { propagate: false, ..cfg })?;
    let (p, i) = (a.mean_sequential_rmse.unwrap_or(f64::NAN), ind.mean_sequential_rmse.unwrap_or(f64::NAN));
    ensure(p < i, || format!("propagated {p:.4} not below independent {i:.4}"))?;
    Ok(format!("{ta:.1?}, hash {}, seq rmse {p:.4} vs independent {i:.4}", &a.output_hash[..12]))
}

fn datagen() -> Outcome {
    let inputs: Vec<(ColorRaster, DepthMap)> = (0..20)
        .map(|i| random_frame(500 + i, 48, 48, Pose::identity()).map(|f| (f.rgb, f.depth)))
        .collect::<viewstyle::Result<_>>()
        .map_err(|e| e.to_string())?;
    let cfg = DatagenConfig::default();
    let pairs = synthesize_pairs(&inputs, &cfg).map_err(|e| e.to_string())?;
    ensure(pairs.len() >= DATAGEN_PAIRS, || format!("only {} pairs", pairs.len()))?;
    for p in &pairs {
        let tag = format!("pair {}/{}", p.input_index, p.view_index);
        ensure(p.mask == p.round_trip.validity, || format!("{tag}: mask differs from validity"))?;
        let rgb = &inputs[p.input_index].0;
        for i in 0..rgb.len() {
            let want = if p.mask.raster().data()[i] { p.round_trip.rgb.data()[i] } else { rgb.data()[i] };
            ensure(p.composite.rgb.data()[i] == want, || format!("{tag}: pixel {i} has the wrong source"))?;
        }
    }
    let stylizer = cfg.stylizer();
    let mut checked = 0;
    for (i, (rgb, depth)) in inputs.iter().enumerate().take(5) {
        let input = input_frame(rgb.clone(), depth.clone(), i).map_err(|e| e.to_string())?;
        let stylized = stylize_input(&input, &cfg, &stylizer).map_err(|e| e.to_string())?;
        let p = pair_for_camera(&input, &stylized, &Pose::identity(), 0, &cfg).map_err(|e| e.to_string())?.ok_or("zero offset skipped")?;
        for (k, &ok) in p.mask.raster().data().iter().enumerate() {
            if ok {
                checked += 1;
                ensure(p.composite.rgb.data()[k] == stylized.rgb.data()[k], || format!("input {i}: zero offset pixel {k} differs"))?;
            }
        }
    }
    Ok(format!("{} pairs, zero offset exact on {checked} pixels", pairs.len()))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("warp oracle equivalence", warp_oracle),
        ("identity warp", identity_warp),
        ("heatmap oracle", heatmap),
        ("attention algebra", attention),
        ("compositing score", composite_score),
        ("loss kernels", losses),
        ("schedule gating", schedule),
        ("end-to-end pipeline", end_to_end),
        ("datagen pairs", datagen),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match res {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS }
}
