mod common;

use common::{fragment_bounds, point_splat, random_case, rmse};
use nalgebra::Vector3;
use proptest::prelude::*;
use viewstyle::frame::{CameraView, Intrinsics, Pose, Raster, RgbdFrame};
use viewstyle::geometry::{build_mesh, MeshClip};
use viewstyle::warp::{rasterize, warp_frame};

fn plane(w: usize, h: usize, z: f64, color: [f64; 3]) -> RgbdFrame {
    let k = Intrinsics::centered(w as f64, w, h).unwrap();
    RgbdFrame::new(Raster::filled(w, h, color), Raster::filled(w, h, z), k, Pose::identity(), 0).unwrap()
}

#[test]
fn rasterizer_matches_dense_splat() {
    for seed in 0..12 {
        let (f, view) = random_case(seed, 32);
        let warp = warp_frame(&f, &view, &MeshClip::default()).unwrap();
        let splat = point_splat(&f, &view, 8, 0.1);
        let mut pairs = Vec::new();
        for (i, s) in splat.px.iter().enumerate() {
            let Some((d, c)) = s else { continue };
            if !warp.validity.raster().data()[i] {
                continue;
            }
            let wd = warp.depth.data()[i];
            assert!((wd - d).abs() <= 1e-3f64.max(0.01 * d), "seed {seed} px {i}: {wd} vs {d}");
            for ch in 0..3 {
                pairs.push((warp.rgb.data()[i][ch], c[ch]));
            }
        }
        assert!(pairs.len() > 3 * 500, "seed {seed}: only {} common pixels", pairs.len() / 3);
        let e = rmse(pairs.into_iter());
        assert!(e < 2e-2, "seed {seed}: rgb rmse {e}");
    }
}

#[test]
fn plain_point_splat_agrees_in_color() {
    let (f, view) = random_case(99, 32);
    let warp = warp_frame(&f, &view, &MeshClip::default()).unwrap();
    let splat = point_splat(&f, &view, 1, 0.5);
    let mut pairs = Vec::new();
    for (i, s) in splat.px.iter().enumerate() {
        if let (Some((_, c)), true) = (s, warp.validity.raster().data()[i]) {
            pairs.extend((0..3).map(|ch| (warp.rgb.data()[i][ch], c[ch])));
        }
    }
    let e = rmse(pairs.into_iter());
    assert!(e < 2e-2, "{e}");
}

#[test]
fn zbuffer_depth_is_minimum_fragment() {
    for seed in [3u64, 17, 40] {
        let (f, view) = random_case(seed, 24);
        let mesh = build_mesh(&f, &MeshClip::default()).unwrap();
        let warp = rasterize(&mesh, &view).unwrap();
        let b = fragment_bounds(&mesh, &view, 1e-9);
        for i in 0..b.loose.len() {
            let valid = warp.validity.raster().data()[i];
            match (b.loose[i], b.strict[i]) {
                (None, _) => assert!(!valid, "seed {seed} px {i}: covered without any fragment"),
                (Some(lo), strict) => {
                    if strict.is_some() {
                        assert!(valid, "seed {seed} px {i}: interior pixel left empty");
                    }
                    if valid {
                        let d = warp.depth.data()[i];
                        let hi = strict.unwrap_or(f64::INFINITY);
                        assert!(d >= lo - 1e-9 * lo && d <= hi + 1e-9 * hi, "seed {seed} px {i}: {d} not in [{lo}, {hi}]");
                    }
                }
            }
        }
    }
}

#[test]
fn nearer_quad_wins() {
    // far plane behind a near plane that covers only the left half
    let (w, h) = (20, 10);
    let k = Intrinsics::centered(w as f64, w, h).unwrap();
    let rgb = Raster::from_fn(w, h, |u, _| if u < 10 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
    let depth = Raster::from_fn(w, h, |u, _| if u < 10 { 1.0 } else { 2.0 });
    let front = RgbdFrame::new(rgb, depth, k, Pose::identity(), 0).unwrap();
    let back = plane(w, h, 2.0, [0.0, 1.0, 0.0]);
    let clip = MeshClip { depth_jump_ratio: Some(1.5), ..Default::default() };
    let mut mesh = build_mesh(&back, &clip).unwrap();
    let fm = build_mesh(&front, &clip).unwrap();
    let off = mesh.vertices.len() as u32;
    mesh.vertices.extend(fm.vertices);
    mesh.triangles.extend(fm.triangles.iter().map(|t| t.map(|i| i + off)));
    mesh.normals.extend(fm.normals);
    let warp = rasterize(&mesh, &back.view()).unwrap();
    for v in 0..h - 1 {
        for u in 0..9 {
            assert_eq!(*warp.rgb.get(u, v), [1.0, 0.0, 0.0]);
            assert_eq!(*warp.depth.get(u, v), 1.0);
        }
    }
}

#[test]
fn translation_flow_is_analytic_disparity() {
    let (w, h, z, t) = (16, 12, 4.0, 0.25);
    let f = plane(w, h, z, [0.5; 3]);
    let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(t, 0.0, 0.0)).unwrap();
    let view = CameraView::new("shifted", f.intrinsics, pose);
    let warp = warp_frame(&f, &view, &MeshClip::default()).unwrap();
    let fx = f.intrinsics.fx;
    for (u, v, e) in warp.flow.unwrap().entries.enumerate() {
        assert!((e.target.0 - (u as f64 - fx * t / z)).abs() < 1e-9);
        assert!((e.target.1 - v as f64).abs() < 1e-9);
    }
}

#[test]
fn occluded_count_matches_visibility_oracle() {
    // 1 m occluder block in the middle of a 5 m wall, seen from the side
    let (w, h) = (24, 16);
    let k = Intrinsics::centered(w as f64, w, h).unwrap();
    let near = |u: usize, v: usize| (8..16).contains(&u) && (5..11).contains(&v);
    let depth = Raster::from_fn(w, h, |u, v| if near(u, v) { 1.0 } else { 5.0 });
    let f = RgbdFrame::new(Raster::filled(w, h, [0.3; 3]), depth, k, Pose::identity(), 0).unwrap();
    let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.6, 0.0, 0.0)).unwrap();
    let view = CameraView::new("side", k, pose);
    let warp = warp_frame(&f, &view, &MeshClip::default()).unwrap();
    let flow = warp.flow.unwrap();

    // oracle: a wall pixel is hidden iff its projection lands inside the
    // occluder's projected footprint (built from the occluder's own pixels)
    let mut foot = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            if near(u, v) {
                let e = flow.entries.get(u, v);
                let (x, y) = (e.target.0.round(), e.target.1.round());
                if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                    foot[y as usize * w + x as usize] = true;
                }
            }
        }
    }
    let mut expected = 0;
    let mut got = 0;
    for v in 0..h {
        for u in 0..w {
            let e = flow.entries.get(u, v);
            let (x, y) = (e.target.0.round(), e.target.1.round());
            let inside = x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h;
            if !inside {
                assert!(e.occluded);
                continue;
            }
            if near(u, v) {
                assert!(!e.occluded, "occluder pixel ({u},{v}) hidden");
                continue;
            }
            let hidden = foot[y as usize * w + x as usize];
            expected += hidden as usize;
            got += e.occluded as usize;
        }
    }
    assert!(expected > 0);
    // the footprint from rounded centers misses at most its one-pixel rim
    assert!((got as i64 - expected as i64).abs() <= 2 * 8, "{got} vs {expected}");
}

#[test]
fn identity_warp_interior_exact() {
    let (f, _) = random_case(7, 48);
    let warp = warp_frame(&f, &f.view(), &MeshClip::default()).unwrap();
    let (w, h) = (48, 48);
    let mut pairs = Vec::new();
    let mut depth_err = 0.0f64;
    let mut valid = 0;
    for v in 2..h - 2 {
        for u in 2..w - 2 {
            valid += warp.validity.get(u, v) as usize;
            for c in 0..3 {
                pairs.push((warp.rgb.get(u, v)[c], f.rgb.get(u, v)[c]));
            }
            depth_err = depth_err.max((warp.depth.get(u, v) - f.depth.get(u, v)).abs());
        }
    }
    assert_eq!(valid, (w - 4) * (h - 4));
    assert!(rmse(pairs.into_iter()) < 1e-12);
    assert!(depth_err < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn validity_implies_positive_depth_and_flow_inside(seed in 0u64..10_000) {
        let (f, view) = random_case(seed, 16);
        let warp = warp_frame(&f, &view, &MeshClip::default()).unwrap();
        for (i, &ok) in warp.validity.raster().data().iter().enumerate() {
            if ok {
                let d = warp.depth.data()[i];
                prop_assert!(d > 0.0 && d.is_finite());
            }
        }
        let flow = warp.flow.unwrap();
        for e in flow.entries.data() {
            if let Some((x, y)) = e.target_pixel() {
                prop_assert!(x < 16 && y < 16);
            }
        }
    }

    #[test]
    fn warp_is_deterministic_across_thread_counts(seed in 0u64..10_000) {
        let (f, view) = random_case(seed, 20);
        let a = warp_frame(&f, &view, &MeshClip::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| warp_frame(&f, &view, &MeshClip::default()).unwrap());
        prop_assert_eq!(&a.rgb, &b.rgb);
        prop_assert_eq!(&a.depth, &b.depth);
        prop_assert_eq!(&a.face, &b.face);
        prop_assert_eq!(a.flow, b.flow);
    }
}
