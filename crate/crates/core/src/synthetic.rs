//! Procedural test content: a textured box inside a room, ray-cast to RGBD,
//! and random smooth frames.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::frame::{CameraView, Intrinsics, Pose, Raster, RgbdFrame, Trajectory};

/// Axis-aligned box `center +- half`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub center: Vector3<f64>,
    pub half: Vector3<f64>,
}

impl Aabb {
    /// Entry and exit distances along `o + t d`.
    fn slab(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let lo = self.center[a] - self.half[a];
            let hi = self.center[a] + self.half[a];
            if d[a] == 0.0 {
                if o[a] < lo || o[a] > hi {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// A room with a box standing in it. All rays from inside the room hit
/// something, so rendered depth is valid everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxScene {
    pub room: Aabb,
    pub object: Aabb,
}

impl Default for BoxScene {
    fn default() -> Self {
        Self {
            room: Aabb { center: Vector3::new(0.0, -1.0, 0.0), half: Vector3::new(5.0, 3.0, 5.0) },
            object: Aabb { center: Vector3::new(0.0, 0.5, 0.0), half: Vector3::new(0.7, 1.5, 0.7) },
        }
    }
}

fn texture(p: &Vector3<f64>, tint: [f64; 3]) -> [f64; 3] {
    let s = (3.1 * p.x).sin() * (2.3 * p.y).cos() + (2.7 * p.z + 0.5 * p.x).sin();
    let checker = if ((p.x * 2.0).floor() + (p.y * 2.0).floor() + (p.z * 2.0).floor()) as i64 % 2 == 0 { 0.08 } else { -0.08 };
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = (tint[k] + 0.18 * s + checker).clamp(0.0, 1.0);
    }
    c
}

impl BoxScene {
    /// Depth along the camera z axis and color for pixel `(u, v)`.
    pub fn shade(&self, view: &CameraView, u: f64, v: f64) -> (f64, [f64; 3]) {
        let ray_cam = view.intrinsics.ray(u, v);
        let o = *view.pose.translation();
        let d = view.pose.rotation() * ray_cam;
        let obj = self.object.slab(&o, &d).filter(|&(t0, _)| t0 > 1e-9).map(|(t0, _)| t0);
        let (t, tint) = match obj {
            Some(t) => (t, [0.75, 0.35, 0.2]),
            None => {
                let (_, t1) = self.room.slab(&o, &d).expect("camera inside the room");
                (t1, [0.35, 0.5, 0.7])
            }
        };
        let p = o + d * t;
        (t * ray_cam.z, texture(&p, tint))
    }

    pub fn render(&self, view: &CameraView, index: usize) -> Result<RgbdFrame> {
        let k = &view.intrinsics;
        let (w, h) = (k.width, k.height);
        let px: Vec<(f64, [f64; 3])> =
            (0..w * h).into_par_iter().map(|i| self.shade(view, (i % w) as f64, (i / w) as f64)).collect();
        let depth = Raster::from_vec(w, h, px.iter().map(|p| p.0).collect())?;
        let rgb = Raster::from_vec(w, h, px.iter().map(|p| p.1).collect())?;
        RgbdFrame::new(rgb, depth, *k, view.pose.clone(), index)
    }
}

/// `n` views on a circle around the origin spanning `arc_deg`, all looking
/// at the box.
pub fn orbit_trajectory(n: usize, width: usize, height: usize, radius: f64, arc_deg: f64) -> Result<Trajectory> {
    let k = Intrinsics::centered(width.max(height) as f64, width, height)?;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let a = if n > 1 { (-0.5 + i as f64 / (n - 1) as f64) * arc_deg.to_radians() } else { 0.0 };
        let eye = Vector3::new(radius * a.sin(), -0.6, -radius * a.cos());
        let pose = Pose::look_at(eye, Vector3::new(0.0, 0.2, 0.0), Vector3::new(0.0, -1.0, 0.0))?;
        frames.push(CameraView::new(format!("orbit_{i:04}"), k, pose));
    }
    let mut t = Trajectory::new(frames)?;
    t.metadata.insert("source".into(), "orbit".into());
    Ok(t)
}

/// Render every view of `traj`.
pub fn render_trajectory(scene: &BoxScene, traj: &Trajectory) -> Result<Vec<RgbdFrame>> {
    traj.frames.iter().enumerate().map(|(i, v)| scene.render(v, i)).collect()
}

/// A smooth random RGBD frame: depth is a positive sum of low-frequency
/// waves, color a blend of random gradients.
pub fn random_frame(seed: u64, width: usize, height: usize, pose: Pose) -> Result<RgbdFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.random_range(2.0..5.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.1) * base,
                rng.random_range(0.3..1.5),
                rng.random_range(0.3..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let grads: Vec<[f64; 4]> = (0..3).map(|_| [rng.random(), rng.random(), rng.random(), rng.random()]).collect();
    let (wf, hf) = (width as f64, height as f64);
    let depth = Raster::from_fn(width, height, |u, v| {
        let (x, y) = (u as f64 / wf, v as f64 / hf);
        base + waves.iter().map(|&(a, fx, fy, ph)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin()).sum::<f64>()
    });
    let rgb = Raster::from_fn(width, height, |u, v| {
        let (x, y) = (u as f64 / wf, v as f64 / hf);
        let mut c = [0.0; 3];
        for k in 0..3 {
            let g = grads[k];
            c[k] = (g[0] * 0.5 + 0.5 * (g[1] * x + g[2] * y) + 0.15 * (std::f64::consts::TAU * (x * (1.0 + 2.0 * g[3]))).sin())
                .clamp(0.0, 1.0);
        }
        c
    });
    let k = Intrinsics::centered(width.max(height) as f64, width, height)?;
    RgbdFrame::new(rgb, depth, k, pose, 0)
}

/// Random rigid motion: translation up to `max_t`, rotation up to `max_angle` rad.
pub fn random_pose<R: Rng>(rng: &mut R, max_t: f64, max_angle: f64) -> Pose {
    let axis = loop {
        let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = a.norm();
        if n > 1e-3 && n <= 1.0 {
            break a / n;
        }
    };
    let angle = rng.random_range(0.0..=max_angle);
    let q = nalgebra::UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), angle);
    let t = loop {
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if t.norm() <= 1.0 {
            break t * max_t;
        }
    };
    Pose::from_quaternion(&q, t)
}
