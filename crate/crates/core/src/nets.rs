//! Desk-scale depth and pose networks.
//!
//! Parameters live in a [`ParamSet`] (ordered, named tensors) and are bound
//! into a [`Graph`] per forward pass, as trainable leaves or as constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camgeom::{Pose, PoseVar};
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::tensor::Tensor;

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Binds every tensor into `g`; constants when `trainable` is false.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Keeps the entries whose names start with `prefix`, in order.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::default();
        for (n, t) in self.iter() {
            if n.starts_with(prefix) {
                out.push(n, t.clone());
            }
        }
        out
    }
}

/// Kaiming-uniform kernel `[cout, cin, k, k]` for a ReLU successor.
fn kaiming(cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (cin * k * k) as f64).sqrt();
    Tensor::from_fn(&[cout, cin, k, k], |_| rng.gen_range(-bound..bound))
}

fn push_conv(p: &mut ParamSet, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    p.push(format!("{name}.w"), kaiming(cout, cin, k, rng));
    p.push(format!("{name}.b"), Tensor::zeros(&[cout]));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    pub encoder: [usize; 4],
    /// Output channels of the four decoder stages, deepest first.
    pub decoder: [usize; 4],
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        DepthNetConfig {
            encoder: [16, 32, 64, 128],
            decoder: [32, 16, 16, 8],
            d_min: 0.1,
            d_max: 80.0,
        }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite())
            || self.encoder.iter().chain(&self.decoder).any(|&c| c == 0)
        {
            return Err(Error::Config(format!(
                "invalid depth network config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Maps a sigmoid output to depth: `1 / (s (1/d_min - 1/d_max) + 1/d_max)`.
pub fn sigmoid_to_depth(s: f64, d_min: f64, d_max: f64) -> f64 {
    1.0 / (s * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max)
}

pub struct DepthOutput {
    /// `[H, W]`
    pub depth: Var,
    /// `[H, W]`, in `(0, 1)`
    pub sigmoid: Var,
    /// `[H, W]` inverse depth.
    pub disparity: Var,
    /// Deepest encoder features `[C, H/16, W/16]`.
    pub features: Var,
}

/// Four stride-2 encoder stages and a mirrored decoder that upsamples and
/// concatenates the matching skip (the input image at full resolution).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet {
    pub config: DepthNetConfig,
    pub params: ParamSet,
}

impl DepthNet {
    pub fn init(config: DepthNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::default();
        let mut cin = 3;
        for (i, &c) in config.encoder.iter().enumerate() {
            push_conv(&mut p, &format!("enc{i}"), c, cin, 3, rng);
            cin = c;
        }
        // skip channels for decoder stage j (deepest first): enc2, enc1, enc0, image
        let skips = [config.encoder[2], config.encoder[1], config.encoder[0], 3];
        for (j, (&c, &s)) in config.decoder.iter().zip(&skips).enumerate() {
            push_conv(&mut p, &format!("dec{j}"), c, cin + s, 3, rng);
            cin = c;
        }
        push_conv(&mut p, "head", 1, cin, 3, rng);
        Ok(DepthNet { config, params: p })
    }

    /// Number of leading parameters that belong to the encoder.
    pub fn encoder_len(&self) -> usize {
        2 * self.config.encoder.len()
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
            return Err(Error::Invalid(format!(
                "depth network needs dims divisible by 16, got {w}x{h}"
            )));
        }
        Ok(())
    }

    /// Encoder stages only; `p` may hold just the encoder prefix.
    pub fn encode(g: &mut Graph, p: &[Var], image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("depth_forward", &[&s]));
        }
        Self::check_input(s[1], s[2])?;
        let mut x = image;
        let mut feats = Vec::with_capacity(4);
        for i in 0..4 {
            let y = g.conv2d(x, p[2 * i], Some(p[2 * i + 1]), 2, 1)?;
            x = g.relu(y);
            feats.push(x);
        }
        Ok(feats)
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], image: Var) -> Result<DepthOutput> {
        if p.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        let feats = Self::encode(g, p, image)?;
        let skips = [feats[2], feats[1], feats[0], image];
        let mut x = feats[3];
        for (j, &skip) in skips.iter().enumerate() {
            let up = g.upsample2(x)?;
            let cat = g.concat(&[up, skip], 0)?;
            let base = 8 + 2 * j;
            let y = g.conv2d(cat, p[base], Some(p[base + 1]), 1, 1)?;
            x = g.relu(y);
        }
        let logits = g.conv2d(x, p[16], Some(p[17]), 1, 1)?;
        let s = g.sigmoid(logits);
        let hw = g.shape(image)[1..].to_vec();
        let sigmoid = g.reshape(s, &hw)?;
        let (lo, hi) = (1.0 / self.config.d_max, 1.0 / self.config.d_min);
        let inv = g.mul_scalar(sigmoid, hi - lo)?;
        let inv = g.add_scalar(inv, lo)?;
        let one = g.scalar(1.0);
        let depth = g.div(one, inv)?;
        Ok(DepthOutput {
            depth,
            sigmoid,
            disparity: inv,
            features: feats[3],
        })
    }

    /// Inference without gradients: depth map and deepest features.
    pub fn predict(&self, image: &Image) -> Result<(DepthMap, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.to_chw());
        let out = self.forward(&mut g, &p, x)?;
        Ok((
            DepthMap::from_tensor(g.value(out.depth))?,
            g.value(out.features).clone(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNetConfig {
    pub channels: [usize; 4],
    /// Applied to the raw head output before the exponential map.
    pub scale: f64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            channels: [16, 32, 64, 64],
            scale: 0.1,
        }
    }
}

/// Stride-2 trunk over the concatenated frame pair, zero-initialized 1x1
/// head, global average to six values (axis-angle, translation).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    pub config: PoseNetConfig,
    pub params: ParamSet,
}

impl PoseNet {
    pub fn init(config: PoseNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.channels.contains(&0) || config.scale.is_nan() || config.scale <= 0.0 {
            return Err(Error::Config(format!(
                "invalid pose network config {config:?}"
            )));
        }
        let mut p = ParamSet::default();
        let mut cin = 6;
        for (i, &c) in config.channels.iter().enumerate() {
            push_conv(&mut p, &format!("pose{i}"), c, cin, 3, rng);
            cin = c;
        }
        p.push("pose_head.w", Tensor::zeros(&[6, cin, 1, 1]));
        p.push("pose_head.b", Tensor::zeros(&[6]));
        Ok(PoseNet { config, params: p })
    }

    /// Motion `P_{a->b}` from images `[3, H, W]` of frames `a` and `b`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], a: Var, b: Var) -> Result<PoseVar> {
        if p.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        if g.shape(a) != g.shape(b) {
            return Err(Error::shape("pose_forward", &[g.shape(a), g.shape(b)]));
        }
        let mut x = g.concat(&[a, b], 0)?;
        for i in 0..4 {
            let y = g.conv2d(x, p[2 * i], Some(p[2 * i + 1]), 2, 1)?;
            x = g.relu(y);
        }
        let head = g.conv2d(x, p[8], Some(p[9]), 1, 0)?;
        let s = g.shape(head).to_vec();
        let flat = g.reshape(head, &[6, s[1] * s[2]])?;
        let cols = g.transpose(flat)?;
        let mean = g.mean_axis0(cols)?;
        let params = g.mul_scalar(mean, self.config.scale)?;
        PoseVar::from_params(g, params)
    }

    pub fn predict(&self, a: &Image, b: &Image) -> Result<Pose> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (va, vb) = (g.constant(a.to_chw()), g.constant(b.to_chw()));
        let pose = self.forward(&mut g, &p, va, vb)?;
        Ok(pose.value(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradient_check, GradCheckConfig};
    use crate::rng;

    fn image(seed: u64) -> Image {
        let mut r = rng::stream(seed, "img");
        Image::from_fn(16, 32, 3, |_, _, _| r.gen_range(0.0..1.0))
    }

    #[test]
    fn depth_is_inside_bounds() {
        let net = DepthNet::init(DepthNetConfig::default(), &mut rng::stream(0, "init")).unwrap();
        let (d, f) = net.predict(&image(1)).unwrap();
        assert!(d.data().iter().all(|&v| v > 0.1 && v < 80.0));
        assert_eq!(f.shape(), &[128, 1, 2]);
        assert_eq!((d.height(), d.width()), (16, 32));
    }

    #[test]
    fn depth_map_endpoints_and_monotone() {
        assert!((sigmoid_to_depth(1.0, 0.1, 80.0) - 0.1).abs() < 1e-12);
        assert!((sigmoid_to_depth(0.0, 0.1, 80.0) - 80.0).abs() < 1e-9);
        let sweep: Vec<f64> = (0..=100)
            .map(|i| sigmoid_to_depth(i as f64 / 100.0, 0.1, 80.0))
            .collect();
        assert!(sweep.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = DepthNet::init(DepthNetConfig::default(), &mut rng::stream(3, "init")).unwrap();
        let b = DepthNet::init(DepthNetConfig::default(), &mut rng::stream(3, "init")).unwrap();
        assert_eq!(a, b);
        let img = image(2);
        let (da, fa) = a.predict(&img).unwrap();
        let (db, fb) = b.predict(&img).unwrap();
        assert_eq!(da, db);
        assert_eq!(fa, fb);
    }

    #[test]
    fn bad_dims_rejected() {
        let net = DepthNet::init(DepthNetConfig::default(), &mut rng::stream(0, "init")).unwrap();
        let img = Image::filled(20, 32, 3, 0.5);
        assert!(net.predict(&img).is_err());
    }

    #[test]
    fn zero_head_gives_identity_pose() {
        let net = PoseNet::init(PoseNetConfig::default(), &mut rng::stream(0, "init")).unwrap();
        let p = net.predict(&image(4), &image(5)).unwrap();
        assert_eq!(p, Pose::identity());
    }

    #[test]
    fn nonzero_pose_head_is_orthonormal() {
        let mut net = PoseNet::init(PoseNetConfig::default(), &mut rng::stream(0, "init")).unwrap();
        let mut r = rng::stream(1, "head");
        for t in net.params.tensors_mut().iter_mut().rev().take(2) {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.gen_range(-5.0..5.0));
        }
        let p = net.predict(&image(6), &image(7)).unwrap();
        assert_ne!(p, Pose::identity());
        assert!(p.is_valid(1e-9));
    }

    #[test]
    fn pose_gradient_checks() {
        let mut net = PoseNet::init(
            PoseNetConfig {
                channels: [4, 4, 4, 4],
                scale: 0.01,
            },
            &mut rng::stream(0, "init"),
        )
        .unwrap();
        let mut r = rng::stream(2, "head");
        for t in net.params.tensors_mut().iter_mut().rev().take(2) {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.gen_range(-20.0..20.0));
        }
        let (a, b) = (image(8).to_chw(), image(9).to_chw());
        let mut leaves = net.params.tensors().to_vec();
        leaves.push(a);
        leaves.push(b);
        let n = net.params.len();
        let report = gradient_check(
            |g, v| {
                let pose = net.forward(g, &v[..n], v[n], v[n + 1])?;
                let pt = g.constant(Tensor::new(&[3, 1], vec![0.3, -0.2, 5.0])?);
                let rp = g.matmul(pose.rotation, pt)?;
                let moved = g.add(rp, pose.translation)?;
                let sq = g.mul(moved, moved)?;
                Ok(g.sum(sq))
            },
            &leaves,
            &GradCheckConfig {
                coords: 120,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn encoder_prefix_matches_full_forward() {
        let net = DepthNet::init(DepthNetConfig::default(), &mut rng::stream(0, "init")).unwrap();
        let enc = net.params.filter_prefix("enc");
        assert_eq!(enc.len(), net.encoder_len());
        let img = image(10);
        let mut g = Graph::new();
        let p = enc.bind(&mut g, false);
        let x = g.constant(img.to_chw());
        let feats = DepthNet::encode(&mut g, &p, x).unwrap();
        let (_, f) = net.predict(&img).unwrap();
        assert_eq!(g.value(feats[3]), &f);
    }
}
