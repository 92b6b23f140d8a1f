//! Ray-cast textured height fields with exact depth and ego-motion.
//!
//! The world frame is the camera frame of the middle frame `I_t`. The
//! surface is `z = S(x, y)`: a tilted base plane plus Gaussian bumps, with
//! a procedural value-noise texture attached to its lateral coordinates.
//! Shading is constant, so every view of a point has the same intensity.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camgeom::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    DayClear,
    Night,
    Rain,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::DayClear => "day-clear",
            Condition::Night => "night",
            Condition::Rain => "rain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "day-clear" | "day" => Ok(Condition::DayClear),
            "night" => Ok(Condition::Night),
            "rain" => Ok(Condition::Rain),
            other => Err(Error::Invalid(format!("unknown condition tag {other:?}"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ranges the scene generator draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Depth of the base plane on the optical axis (metres).
    pub base_depth: (f64, f64),
    /// `dz/dy` of the base plane; negative tilts the top of the view away.
    pub tilt: (f64, f64),
    pub bumps: usize,
    /// Largest absolute bump height (metres).
    pub bump_amplitude: f64,
    pub bump_radius: (f64, f64),
    /// Lattice spacing of the coarsest texture octave (metres per texel).
    pub texture_scale: f64,
    pub octaves: usize,
    pub z_near: f64,
    pub z_far: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            base_depth: (5.0, 7.0),
            tilt: (-0.5, -0.3),
            bumps: 6,
            bump_amplitude: 0.6,
            bump_radius: (0.8, 1.6),
            texture_scale: 1.8,
            octaves: 3,
            z_near: 0.5,
            z_far: 80.0,
        }
    }
}

impl SceneConfig {
    /// Fronto-parallel plane at depth `z`.
    pub fn flat(z: f64) -> Self {
        SceneConfig {
            base_depth: (z, z),
            tilt: (0.0, 0.0),
            bumps: 0,
            bump_amplitude: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        let ok = range(self.base_depth)
            && range(self.tilt)
            && range(self.bump_radius)
            && self.z_near >= 0.5
            && self.z_near < self.z_far
            && self.base_depth.0 - self.bump_amplitude >= self.z_near
            && self.base_depth.1 + self.bump_amplitude <= self.z_far
            && self.bump_amplitude >= 0.0
            && self.bump_radius.0 > 0.0
            && self.texture_scale > 0.0
            && self.octaves >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid scene config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub base_depth: f64,
    pub tilt: f64,
    pub bumps: Vec<Bump>,
    pub texture_scale: f64,
    pub octaves: usize,
    pub texture_seed: u64,
    pub z_near: f64,
    pub z_far: f64,
    /// Upper bound on `|grad S|` of the bump sum.
    bump_slope: f64,
}

/// Deterministic scene for `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw =
        |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| if a == b { a } else { rng.gen_range(a..b) };
    let base_depth = draw(&mut rng, config.base_depth);
    let tilt = draw(&mut rng, config.tilt);
    let bumps: Vec<Bump> = (0..config.bumps)
        .map(|_| Bump {
            x: rng.gen_range(-0.6..0.6) * base_depth,
            y: rng.gen_range(-0.45..0.45) * base_depth,
            amplitude: rng.gen_range(-1.0..1.0) * config.bump_amplitude,
            radius: draw(&mut rng, config.bump_radius),
        })
        .collect();
    let bump_slope = bumps
        .iter()
        .map(|b| b.amplitude.abs() / (b.radius * std::f64::consts::E.sqrt()))
        .sum();
    Ok(Scene {
        base_depth,
        tilt,
        bumps,
        texture_scale: config.texture_scale,
        octaves: config.octaves,
        texture_seed: rng.gen(),
        z_near: config.z_near,
        z_far: config.z_far,
        bump_slope,
    })
}

fn hash3(a: i64, b: i64, c: u64) -> f64 {
    // splitmix64 over the packed lattice key
    let mut z = (a as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(c.wrapping_mul(0x1656_67B1_9E37_79F9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn catmull_rom(p: [f64; 4], t: f64) -> f64 {
    let a = -0.5 * p[0] + 1.5 * p[1] - 1.5 * p[2] + 0.5 * p[3];
    let b = p[0] - 2.5 * p[1] + 2.0 * p[2] - 0.5 * p[3];
    let c = 0.5 * (p[2] - p[0]);
    ((a * t + b) * t + c) * t + p[1]
}

/// Bicubic value noise. Catmull-Rom keeps a nonzero slope at lattice
/// points, so the field has no flat spots there.
fn value_noise(x: f64, y: f64, key: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let mut rows = [0.0; 4];
    for (j, r) in rows.iter_mut().enumerate() {
        let yy = iy + j as i64 - 1;
        let p = [0, 1, 2, 3].map(|i| hash3(ix + i - 1, yy, key));
        *r = catmull_rom(p, tx);
    }
    catmull_rom(rows, ty)
}

impl Scene {
    pub fn surface(&self, x: f64, y: f64) -> f64 {
        let mut z = self.base_depth + self.tilt * y;
        for b in &self.bumps {
            let r2 = ((x - b.x).powi(2) + (y - b.y).powi(2)) / (b.radius * b.radius);
            z += b.amplitude * (-0.5 * r2).exp();
        }
        z
    }

    fn surface_grad(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, self.tilt);
        for b in &self.bumps {
            let s2 = b.radius * b.radius;
            let e = b.amplitude * (-0.5 * ((x - b.x).powi(2) + (y - b.y).powi(2)) / s2).exp();
            gx -= e * (x - b.x) / s2;
            gy -= e * (y - b.y) / s2;
        }
        (gx, gy)
    }

    fn noise(&self, x: f64, y: f64, stream: u64) -> f64 {
        let (mut acc, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0 / self.texture_scale);
        for o in 0..self.octaves as u64 {
            let key = self.texture_seed ^ (stream << 8 | o).wrapping_mul(0xA24B_AED4_963E_E407);
            acc += amp * value_noise(x * freq, y * freq, key);
            norm += amp;
            amp *= 0.7;
            freq *= 2.0;
        }
        acc / norm
    }

    /// RGB albedo at lateral position `(x, y)`, in `[0, 1]`.
    pub fn texture(&self, x: f64, y: f64) -> [f64; 3] {
        let luma = self.noise(x, y, 0);
        let mut rgb = [0.0; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let chroma = self.noise(x, y, 1 + c as u64);
            let n = 0.5 * (luma + chroma);
            *v = (0.5 + 2.0 * (n - 0.5)).clamp(0.0, 1.0);
        }
        rgb
    }

    /// First intersection of `centre + s * dir` with the surface, as the
    /// ray parameter `s`. `None` when the ray leaves `[z_near, z_far]`.
    pub fn cast(&self, centre: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let f = |s: f64| {
            let p = [
                centre[0] + s * dir[0],
                centre[1] + s * dir[1],
                centre[2] + s * dir[2],
            ];
            p[2] - self.surface(p[0], p[1])
        };
        let lateral = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        // |d/ds S(ray(s))| never exceeds this, so stepping -f / bound
        // cannot jump over the first root.
        let bound = dir[2].abs() + self.tilt.abs() * dir[1].abs() + self.bump_slope * lateral;
        let mut s = 0.0;
        let mut fs = f(s);
        if fs >= 0.0 {
            return None;
        }
        for _ in 0..10_000 {
            if fs > -1e-12 {
                break;
            }
            s -= fs / bound;
            fs = f(s);
            if centre[2] + s * dir[2] > self.z_far {
                return None;
            }
        }
        for _ in 0..4 {
            let p = [centre[0] + s * dir[0], centre[1] + s * dir[1]];
            let (gx, gy) = self.surface_grad(p[0], p[1]);
            let df = dir[2] - gx * dir[0] - gy * dir[1];
            if df <= 0.0 {
                break;
            }
            let step = fs / df;
            if step.abs() < 1e-15 {
                break;
            }
            s -= step;
            fs = f(s);
        }
        Some(s)
    }
}

/// One rendered view: image plus z-depth in that view's camera frame.
#[derive(Clone, Debug)]
pub struct View {
    pub image: Image,
    pub depth: DepthMap,
}

/// Renders the scene from the camera whose frame is reached from the world
/// frame by `pose` (`pose` maps world points into that camera).
pub fn render_view(scene: &Scene, pose: &Pose, k: &Intrinsics) -> Result<View> {
    let inv = pose.inverse();
    let centre = inv.translation;
    let r = inv.rotation;
    let (h, w) = (k.height, k.width);
    let mut img = vec![0.0; h * w * 3];
    let mut depth = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let ray = k.ray(u as f64, v as f64);
            let dir = [
                r[0][0] * ray[0] + r[0][1] * ray[1] + r[0][2] * ray[2],
                r[1][0] * ray[0] + r[1][1] * ray[1] + r[1][2] * ray[2],
                r[2][0] * ray[0] + r[2][1] * ray[1] + r[2][2] * ray[2],
            ];
            let s = scene.cast(centre, dir).ok_or_else(|| {
                Error::Invalid(format!("ray through pixel ({u}, {v}) misses the surface"))
            })?;
            let p = [
                centre[0] + s * dir[0],
                centre[1] + s * dir[1],
                centre[2] + s * dir[2],
            ];
            let i = v * w + u;
            // z-depth in this camera: the ray has unit z in camera coordinates
            depth[i] = s;
            let rgb = scene.texture(p[0], p[1]);
            img[i * 3..i * 3 + 3].copy_from_slice(&rgb);
        }
    }
    Ok(View {
        image: Image::new(h, w, 3, img)?,
        depth: DepthMap::new(h, w, depth)?,
    })
}

/// Consecutive frames `I_{t-1}, I_t, I_{t+1}` with ground truth for `I_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriplet {
    pub prev: Image,
    pub curr: Image,
    pub next: Image,
    pub intrinsics: Intrinsics,
    pub gt_depth: DepthMap,
    /// `P_{t->t-1}`
    pub pose_prev: Pose,
    /// `P_{t->t+1}`
    pub pose_next: Pose,
    pub condition: Condition,
    pub id: String,
    pub seed: u64,
}

impl SampleTriplet {
    pub fn adjacent(&self) -> [(&Image, &Pose); 2] {
        [(&self.prev, &self.pose_prev), (&self.next, &self.pose_next)]
    }

    /// Rounds frames to 8-bit levels and depth to `f32`, matching what the
    /// on-disk format stores.
    pub fn quantized(mut self) -> Self {
        for img in [&mut self.prev, &mut self.curr, &mut self.next] {
            for v in img.data_mut() {
                *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
        for d in self.gt_depth.data_mut() {
            *d = *d as f32 as f64;
        }
        self
    }
}

/// Camera motion ranges between consecutive frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Sideways camera travel per frame (metres, either direction).
    pub lateral: (f64, f64),
    pub forward: (f64, f64),
    pub vertical: f64,
    /// Largest rotation angle per axis (radians).
    pub rotation: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            lateral: (0.15, 0.35),
            forward: (0.0, 0.3),
            vertical: 0.03,
            rotation: 0.01,
        }
    }
}

/// Motion that moves the camera centre by `c` and rotates it by `w`.
pub fn camera_motion(c: [f64; 3], w: [f64; 3]) -> Pose {
    // camera-to-world rotation R_c; world-to-camera is (R_c^T, -R_c^T c)
    Pose::from_axis_angle(w, [0.0; 3])
        .inverse()
        .compose(&Pose::from_axis_angle([0.0; 3], [-c[0], -c[1], -c[2]]))
}

/// Draws a motion pair `(P_{t->t-1}, P_{t->t+1})`.
pub fn sample_motion(cfg: &MotionConfig, rng: &mut impl Rng) -> (Pose, Pose) {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let mut step = |dir: f64| {
        let lat = if cfg.lateral.0 == cfg.lateral.1 {
            cfg.lateral.0
        } else {
            rng.gen_range(cfg.lateral.0..cfg.lateral.1)
        };
        let fwd = if cfg.forward.0 == cfg.forward.1 {
            cfg.forward.0
        } else {
            rng.gen_range(cfg.forward.0..cfg.forward.1)
        };
        let vert = if cfg.vertical > 0.0 {
            rng.gen_range(-cfg.vertical..cfg.vertical)
        } else {
            0.0
        };
        let mut w = [0.0; 3];
        if cfg.rotation > 0.0 {
            for v in &mut w {
                *v = rng.gen_range(-cfg.rotation..cfg.rotation);
            }
        }
        camera_motion([dir * sign * lat, vert, dir * fwd], w)
    };
    let prev = step(-1.0);
    let next = step(1.0);
    (prev, next)
}

/// Fraction of `I_t` pixels that land inside the frame under `pose`, and
/// the fraction of those whose depth disagrees with the other view's
/// rendered depth by more than 1% (occluded).
fn visibility(gt: &DepthMap, other: &DepthMap, pose: &Pose, k: &Intrinsics) -> (f64, f64) {
    let (h, w) = (k.height, k.width);
    let (mut inside, mut occluded) = (0usize, 0usize);
    for v in 0..h {
        for u in 0..w {
            let z = gt.get(v, u);
            let r = k.ray(u as f64, v as f64);
            let p = pose.transform([r[0] * z, r[1] * z, r[2] * z]);
            if p[2] <= 0.0 {
                continue;
            }
            let (pu, pv) = k.project(p);
            if !k.in_bounds(pu, pv) {
                continue;
            }
            inside += 1;
            let (x0, y0) = (
                (pu.floor() as usize).min(w - 2),
                (pv.floor() as usize).min(h - 2),
            );
            let (fx, fy) = (pu - x0 as f64, pv - y0 as f64);
            let d = (1.0 - fy) * ((1.0 - fx) * other.get(y0, x0) + fx * other.get(y0, x0 + 1))
                + fy * ((1.0 - fx) * other.get(y0 + 1, x0) + fx * other.get(y0 + 1, x0 + 1));
            if (d - p[2]).abs() > 0.01 * p[2] {
                occluded += 1;
            }
        }
    }
    let n = (h * w) as f64;
    (
        inside as f64 / n,
        if inside == 0 {
            1.0
        } else {
            occluded as f64 / inside as f64
        },
    )
}

pub const MIN_VISIBLE: f64 = 0.8;
pub const MAX_OCCLUDED: f64 = 0.02;

/// Renders the three frames of `scene` for the given motion pair.
pub fn render_triplet(
    scene: &Scene,
    motion: (Pose, Pose),
    k: &Intrinsics,
) -> Result<SampleTriplet> {
    k.validate()?;
    let (pose_prev, pose_next) = motion;
    let curr = render_view(scene, &Pose::identity(), k)?;
    let prev = render_view(scene, &pose_prev, k)?;
    let next = render_view(scene, &pose_next, k)?;
    for (view, pose) in [(&prev, &pose_prev), (&next, &pose_next)] {
        let (vis, occ) = visibility(&curr.depth, &view.depth, pose, k);
        if vis < MIN_VISIBLE {
            return Err(Error::Invalid(format!(
                "only {:.1}% of pixels stay in view",
                vis * 100.0
            )));
        }
        if occ > MAX_OCCLUDED {
            return Err(Error::Invalid(format!(
                "{:.1}% of visible pixels are occluded",
                occ * 100.0
            )));
        }
    }
    Ok(SampleTriplet {
        prev: prev.image,
        curr: curr.image,
        next: next.image,
        intrinsics: *k,
        gt_depth: curr.depth,
        pose_prev,
        pose_next,
        condition: Condition::DayClear,
        id: String::new(),
        seed: 0,
    })
}

/// Intrinsics of the default 64x48 desk camera.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 48.0,
        fy: 48.0,
        cx: 31.5,
        cy: 23.5,
        width: 64,
        height: 48,
    }
}

/// Generates a scene and motion from `seed` and renders it, retrying with
/// derived seeds when a draw violates the visibility constraints.
pub fn sample_triplet(
    scene_cfg: &SceneConfig,
    motion_cfg: &MotionConfig,
    k: &Intrinsics,
    seed: u64,
) -> Result<SampleTriplet> {
    let mut last = None;
    for attempt in 0..16u64 {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x5851_F42D_4C95_7F2D));
        let scene = generate_scene(scene_cfg, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x6D6F_7469_6F6E);
        let motion = sample_motion(motion_cfg, &mut rng);
        match render_triplet(&scene, motion, k) {
            Ok(mut t) => {
                t.seed = seed;
                t.id = format!("{seed:08}");
                return Ok(t);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
