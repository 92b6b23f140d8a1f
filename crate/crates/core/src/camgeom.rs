//! Pinhole geometry and differentiable inverse warping.
//!
//! Pixel `(u, v)` is column `u`, row `v`, with integer coordinates at pixel
//! centres. Depth is z-depth along the optical axis, not ray length.

use serde::{Deserialize, Serialize};

use crate::diffcore::{axis_angle_matrix, Graph, Var};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image, Mask};
use crate::tensor::Tensor;

/// Points closer than this to the camera plane are treated as not visible.
pub const DEFAULT_Z_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    /// `K^-1 (u, v, 1)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }

    /// Inside `[0, W-1] x [0, H-1]`, allowing `1e-9` px of rounding slack.
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        const SLACK: f64 = 1e-9;
        u >= -SLACK
            && v >= -SLACK
            && u <= (self.width - 1) as f64 + SLACK
            && v <= (self.height - 1) as f64 + SLACK
    }

    /// Unit-depth rays for every pixel as a `[3, H, W]` tensor.
    fn ray_field(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.ray((p % w) as f64, (p / w) as f64)[c]
        })
    }
}

/// Rigid transform `p' = R p + t` (the motion `P_{t->t'}` maps points
/// expressed in the target frame into the source frame).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_axis_angle(w: [f64; 3], t: [f64; 3]) -> Self {
        Pose {
            rotation: axis_angle_matrix(w),
            translation: t,
        }
    }

    /// Six optimisation parameters: axis-angle then translation.
    pub fn from_params(p: [f64; 6]) -> Self {
        Self::from_axis_angle([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn params(&self) -> [f64; 6] {
        let w = self.axis_angle();
        let t = self.translation;
        [w[0], w[1], w[2], t[0], t[1], t[2]]
    }

    /// Logarithm of the rotation (valid away from a half turn).
    pub fn axis_angle(&self) -> [f64; 3] {
        let r = &self.rotation;
        let tr = r[0][0] + r[1][1] + r[2][2];
        let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
        let scale = if theta < 1e-6 {
            0.5 + theta * theta / 12.0
        } else {
            theta / (2.0 * theta.sin())
        };
        [v[0] * scale, v[1] * scale, v[2] * scale]
    }

    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose {
            rotation: rt,
            translation: ti,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3)
                    .map(|k| self.rotation[i][k] * other.rotation[k][j])
                    .sum();
            }
        }
        Pose {
            rotation: r,
            translation: self.transform(other.translation),
        }
    }

    /// Camera centre of the destination frame, expressed in the source frame.
    pub fn centre(&self) -> [f64; 3] {
        self.inverse().translation
    }

    /// `R^T R = I` and `det R = 1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                if (dot - if i == j { 1.0 } else { 0.0 }).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }
}

/// A pose living inside a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct PoseVar {
    /// `[3, 3]`
    pub rotation: Var,
    /// `[3, 1]`
    pub translation: Var,
}

impl PoseVar {
    /// From a `[6]` parameter vector (axis-angle, translation).
    pub fn from_params(g: &mut Graph, params: Var) -> Result<Self> {
        if g.shape(params) != [6] {
            return Err(Error::shape("pose_params", &[g.shape(params)]));
        }
        let w = g.slice(params, 0, 0, 3)?;
        let t = g.slice(params, 0, 3, 6)?;
        let rotation = g.axis_angle(w)?;
        let translation = g.reshape(t, &[3, 1])?;
        Ok(PoseVar {
            rotation,
            translation,
        })
    }

    pub fn constant(g: &mut Graph, pose: &Pose) -> Self {
        let r = Tensor::new(&[3, 3], pose.rotation.iter().flatten().copied().collect())
            .expect("3x3 rotation");
        let t = Tensor::new(&[3, 1], pose.translation.to_vec()).expect("3-vector");
        PoseVar {
            rotation: g.constant(r),
            translation: g.constant(t),
        }
    }

    pub fn value(&self, g: &Graph) -> Pose {
        let r = g.value(self.rotation).data();
        let t = g.value(self.translation).data();
        Pose {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: [t[0], t[1], t[2]],
        }
    }
}

/// Continuous sampling coordinates with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    /// `[H, W, 2]` of `(u, v)`.
    pub coords: Tensor,
    pub valid: Mask,
}

fn check_depth_positive(depth: &Tensor) -> Result<()> {
    if let Some(i) = depth.data().iter().position(|&d| d.is_nan() || d <= 0.0) {
        let w = depth.shape()[1];
        return Err(Error::Domain {
            op: "backproject",
            msg: format!(
                "non-positive depth {} at pixel ({}, {})",
                depth.data()[i],
                i % w,
                i / w
            ),
        });
    }
    Ok(())
}

/// Camera-frame points `D(p) K^-1 (u, v, 1)` as a `[3, H*W]` node.
pub fn backproject_var(g: &mut Graph, depth: Var, k: &Intrinsics) -> Result<Var> {
    let s = g.shape(depth).to_vec();
    if s != [k.height, k.width] {
        return Err(Error::shape("backproject", &[&s, &[k.height, k.width]]));
    }
    check_depth_positive(g.value(depth))?;
    let rays = g.constant(k.ray_field());
    let pts = g.mul(rays, depth)?;
    g.reshape(pts, &[3, k.height * k.width])
}

/// Transforms `[3, N]` points by `pose` and projects them, returning a
/// `[H, W, 2]` coordinate node plus the validity mask.
pub fn project_var(
    g: &mut Graph,
    points: Var,
    pose: &PoseVar,
    k: &Intrinsics,
    z_min: f64,
) -> Result<(Var, Mask)> {
    let n = k.height * k.width;
    if g.shape(points) != [3, n] {
        return Err(Error::shape("project", &[g.shape(points), &[3, n]]));
    }
    let rotated = g.matmul(pose.rotation, points)?;
    let ones = g.constant(Tensor::full(&[1, n], 1.0));
    let t = g.matmul(pose.translation, ones)?;
    let moved = g.add(rotated, t)?;
    let x = g.slice(moved, 0, 0, 1)?;
    let y = g.slice(moved, 0, 1, 2)?;
    let z = g.slice(moved, 0, 2, 3)?;
    let zs = g.clamp(z, z_min, f64::INFINITY)?;
    let xn = g.div(x, zs)?;
    let yn = g.div(y, zs)?;
    let u0 = g.mul_scalar(xn, k.fx)?;
    let u = g.add_scalar(u0, k.cx)?;
    let v0 = g.mul_scalar(yn, k.fy)?;
    let v = g.add_scalar(v0, k.cy)?;
    let uv = g.concat(&[u, v], 0)?;
    let uv_t = g.transpose(uv)?;
    let coords = g.reshape(uv_t, &[k.height, k.width, 2])?;

    let (zd, ud, vd) = (g.value(z).data(), g.value(u).data(), g.value(v).data());
    let valid = (0..n)
        .map(|i| zd[i] > z_min && k.in_bounds(ud[i], vd[i]))
        .collect();
    Ok((coords, Mask::new(k.height, k.width, valid)?))
}

/// Inverse warp of a `[C, H, W]` source into the target view:
/// `src < Proj(depth, pose, K) >`. Invalid pixels hold edge-clamped samples.
pub fn warp_var(
    g: &mut Graph,
    src: Var,
    depth: Var,
    pose: &PoseVar,
    k: &Intrinsics,
    z_min: f64,
) -> Result<(Var, Mask)> {
    let s = g.shape(src).to_vec();
    if s.len() != 3 || s[1] != k.height || s[2] != k.width {
        return Err(Error::shape("synthesize_view", &[&s, &[k.height, k.width]]));
    }
    let pts = backproject_var(g, depth, k)?;
    let (coords, valid) = project_var(g, pts, pose, k, z_min)?;
    let out = g.bilinear_sample(src, coords)?;
    Ok((out, valid))
}

/// Point field `[H, W, 3]` (camera frame, metres).
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Result<Tensor> {
    let mut g = Graph::new();
    let d = g.constant(depth.to_tensor());
    let p = backproject_var(&mut g, d, k)?;
    let pt = g.transpose(p)?;
    g.value(pt).clone().reshaped(&[k.height, k.width, 3])
}

/// Projects a `[H, W, 3]` point field through `pose` and `k`.
pub fn project(points: &Tensor, pose: &Pose, k: &Intrinsics, z_min: f64) -> Result<SampleGrid> {
    if points.shape() != [k.height, k.width, 3] {
        return Err(Error::shape(
            "project",
            &[points.shape(), &[k.height, k.width, 3]],
        ));
    }
    let mut g = Graph::new();
    let p = g.constant(points.clone().reshaped(&[k.height * k.width, 3])?);
    let p = g.transpose(p)?;
    let pv = PoseVar::constant(&mut g, pose);
    let (coords, valid) = project_var(&mut g, p, &pv, k, z_min)?;
    Ok(SampleGrid {
        coords: g.value(coords).clone(),
        valid,
    })
}

/// Reconstructs the target view from `src` using target depth and the
/// target-to-source motion.
pub fn synthesize_view(
    src: &Image,
    depth: &DepthMap,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<(Image, Mask)> {
    if src.height() != k.height
        || src.width() != k.width
        || depth.height() != k.height
        || depth.width() != k.width
    {
        return Err(Error::Shape {
            op: "synthesize_view",
            shapes: vec![
                vec![src.height(), src.width()],
                vec![depth.height(), depth.width()],
                vec![k.height, k.width],
            ],
        });
    }
    let mut g = Graph::new();
    let s = g.constant(src.to_chw());
    let d = g.constant(depth.to_tensor());
    let pv = PoseVar::constant(&mut g, pose);
    let (out, valid) = warp_var(&mut g, s, d, &pv, k, DEFAULT_Z_MIN)?;
    Ok((Image::from_chw(g.value(out))?, valid))
}
