//! Photometric, distillation, teacher-mask and semantic losses.
//!
//! Every loss has a graph form (`*_var`) used during training and a plain
//! form over images and depth maps built on top of it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::camgeom::{synthesize_view, Intrinsics, Pose};
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image, Mask};
use crate::tensor::Tensor;

/// SSIM / L1 blend weight of the photometric error.
pub const ALPHA: f64 = 0.85;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Added to the photometric error of invalid warp pixels so they never win
/// the per-pixel minimum.
const INVALID_PENALTY: f64 = 10.0;

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, &[g.shape(a), g.shape(b)]));
    }
    Ok(())
}

/// Windowed SSIM of two `[C, H, W]` images (3x3 mean window, replicate
/// padding). Returns a `[C, H, W]` map.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "ssim", a, b)?;
    let mu_a = g.avgpool3(a)?;
    let mu_b = g.avgpool3(b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.avgpool3(aa)?;
    let e_bb = g.avgpool3(bb)?;
    let e_ab = g.avgpool3(ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let n1 = g.mul_scalar(mu_ab, 2.0)?;
    let n1 = g.add_scalar(n1, SSIM_C1)?;
    let n2 = g.mul_scalar(cov, 2.0)?;
    let n2 = g.add_scalar(n2, SSIM_C2)?;
    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.add_scalar(d1, SSIM_C1)?;
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.add_scalar(d2, SSIM_C2)?;
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    g.div(num, den)
}

/// `(alpha/2)(1 - SSIM) + (1 - alpha)|a - b|`, averaged over channels to a
/// `[H, W]` map.
pub fn photometric_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "photometric_error", a, b)?;
    let s = ssim_var(g, a, b)?;
    let one_minus = g.neg(s);
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let ssim_term = g.mul_scalar(one_minus, ALPHA / 2.0)?;
    let diff = g.sub(a, b)?;
    let l1 = g.abs(diff);
    let l1_term = g.mul_scalar(l1, 1.0 - ALPHA)?;
    let pe = g.add(ssim_term, l1_term)?;
    g.mean_axis0(pe)
}

/// Per-pixel minimum photometric error over several warped views.
#[derive(Clone, Copy, Debug)]
pub struct Reprojection {
    /// Mean of `map` over covered pixels.
    pub loss: Var,
    /// `[H, W]`; zero where no warp is valid.
    pub map: Var,
}

/// Minimum-reprojection loss of `target` against `(warp, valid)` pairs.
/// Pixels valid in no warp are excluded; it is an error if none remain.
pub fn reprojection_var(
    g: &mut Graph,
    target: Var,
    warps: &[(Var, Mask)],
) -> Result<(Reprojection, Mask)> {
    let Some((_, first_mask)) = warps.first() else {
        return Err(Error::Invalid(
            "reprojection loss needs at least one warp".into(),
        ));
    };
    let mut covered = Mask::filled(first_mask.height(), first_mask.width(), false);
    let mut best: Option<Var> = None;
    for (warp, valid) in warps {
        let pe = photometric_var(g, target, *warp)?;
        if g.shape(pe) != [valid.height(), valid.width()] {
            return Err(Error::shape(
                "reprojection_loss",
                &[g.shape(pe), &[valid.height(), valid.width()]],
            ));
        }
        let penalty = Tensor::new(
            g.shape(pe),
            valid
                .data()
                .iter()
                .map(|&v| if v { 0.0 } else { INVALID_PENALTY })
                .collect(),
        )?;
        let penalty = g.constant(penalty);
        let pen = g.add(pe, penalty)?;
        best = Some(match best {
            None => pen,
            Some(b) => g.minimum(b, pen)?,
        });
        covered = covered.or(valid);
    }
    let n = covered.count();
    if n == 0 {
        return Err(Error::Invalid(
            "reprojection loss: every pixel is invalid in every warp".into(),
        ));
    }
    let cov = g.constant(covered.to_tensor());
    let map = g.mul(best.expect("at least one warp"), cov)?;
    let total = g.sum(map);
    let loss = g.mul_scalar(total, 1.0 / n as f64)?;
    Ok((Reprojection { loss, map }, covered))
}

/// `|D_s - D_t| / D_t` per pixel.
pub fn distillation_var(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    same_shape(g, "distillation_loss", student, teacher)?;
    if let Some(v) = g
        .value(teacher)
        .data()
        .iter()
        .find(|&&v| v.is_nan() || v <= 0.0)
    {
        return Err(Error::Domain {
            op: "distillation_loss",
            msg: format!("non-positive teacher depth {v}"),
        });
    }
    let d = g.sub(student, teacher)?;
    let a = g.abs(d);
    g.div(a, teacher)
}

/// Which side of the teacher/student comparison the mask keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskConvention {
    /// Keep pixels where the teacher's warp is at least as good: `T-pe <= S-pe`.
    #[default]
    KeepTeacherReasonable,
    /// Keep pixels where the student's warp is strictly better: `T-pe > S-pe`.
    KeepStudentBetter,
}

impl MaskConvention {
    pub fn name(self) -> &'static str {
        match self {
            MaskConvention::KeepTeacherReasonable => "keep-teacher-reasonable",
            MaskConvention::KeepStudentBetter => "eq5-literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "keep-teacher-reasonable" => Ok(MaskConvention::KeepTeacherReasonable),
            "eq5-literal" => Ok(MaskConvention::KeepStudentBetter),
            other => Err(Error::Config(format!("unknown mask convention {other:?}"))),
        }
    }

    /// Decides one pixel. Missing warps count as an infinite error.
    pub fn keep(self, teacher_pe: f64, student_pe: f64) -> bool {
        match self {
            MaskConvention::KeepTeacherReasonable => teacher_pe <= student_pe,
            MaskConvention::KeepStudentBetter => teacher_pe > student_pe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherMask {
    pub mask: Mask,
}

/// Minimum photometric error per pixel, `+inf` where no warp is valid.
pub fn min_reprojection_map(target: &Image, warps: &[(Image, Mask)]) -> Result<Vec<f64>> {
    let n = target.height() * target.width();
    let mut best = vec![f64::INFINITY; n];
    for (w, valid) in warps {
        let pe = photometric_error(target, w)?;
        for ((b, &e), &v) in best.iter_mut().zip(pe.data()).zip(valid.data()) {
            if v && e < *b {
                *b = e;
            }
        }
    }
    Ok(best)
}

/// Compares the per-pixel photometric errors obtained by warping the
/// original adjacent frames with student and teacher depth, both through
/// the teacher's poses.
#[allow(clippy::too_many_arguments)]
pub fn teacher_mask(
    target: &Image,
    adjacent: &[Image],
    student: &DepthMap,
    teacher: &DepthMap,
    poses: &[Pose],
    k: &Intrinsics,
    convention: MaskConvention,
) -> Result<TeacherMask> {
    if adjacent.len() != poses.len() || adjacent.is_empty() {
        return Err(Error::Invalid(format!(
            "teacher mask needs one pose per adjacent frame ({} frames, {} poses)",
            adjacent.len(),
            poses.len()
        )));
    }
    let warp_all = |d: &DepthMap| -> Result<Vec<(Image, Mask)>> {
        adjacent
            .iter()
            .zip(poses)
            .map(|(src, p)| synthesize_view(src, d, p, k))
            .collect()
    };
    let s_pe = min_reprojection_map(target, &warp_all(student)?)?;
    let t_pe = min_reprojection_map(target, &warp_all(teacher)?)?;
    let data = t_pe
        .iter()
        .zip(&s_pe)
        .map(|(&t, &s)| convention.keep(t, s))
        .collect();
    Ok(TeacherMask {
        mask: Mask::new(target.height(), target.width(), data)?,
    })
}

/// Mean of `L_d` over pixels where the mask is set; 0 for an empty mask.
pub fn teacher_loss_var(g: &mut Graph, mask: &TeacherMask, ld: Var) -> Result<Var> {
    let m = &mask.mask;
    if g.shape(ld) != [m.height(), m.width()] {
        return Err(Error::shape(
            "teacher_loss",
            &[g.shape(ld), &[m.height(), m.width()]],
        ));
    }
    let n = m.count();
    if n == 0 {
        return Ok(g.scalar(0.0));
    }
    let mv = g.constant(m.to_tensor());
    let masked = g.mul(ld, mv)?;
    let s = g.sum(masked);
    g.mul_scalar(s, 1.0 / n as f64)
}

/// `1 - mean_i cos(f_i, f'_i)` over `[D, H', W']` feature fields.
pub fn semantic_var(g: &mut Graph, student: Var, reference: Var) -> Result<Var> {
    let c = g.cosine(student, reference)?;
    let m = g.mean(c);
    let n = g.neg(m);
    g.add_scalar(n, 1.0)
}

/// Edge-aware smoothness of mean-normalised disparity (`[H, W]`) against a
/// `[C, H, W]` image.
pub fn smoothness_var(g: &mut Graph, disparity: Var, image: Var) -> Result<Var> {
    let s = g.shape(disparity).to_vec();
    let si = g.shape(image).to_vec();
    if s.len() != 2 || si.len() != 3 || si[1..] != s[..] {
        return Err(Error::shape("smoothness", &[&s, &si]));
    }
    let (h, w) = (s[0], s[1]);
    let mean = g.mean(disparity);
    let norm = g.div(disparity, mean)?;
    let mut total: Option<Var> = None;
    for axis in [0usize, 1] {
        let len = if axis == 0 { h } else { w };
        if len < 2 {
            continue;
        }
        let d1 = g.slice(norm, axis, 1, len)?;
        let d0 = g.slice(norm, axis, 0, len - 1)?;
        let dd = g.sub(d1, d0)?;
        let dd = g.abs(dd);
        let i1 = g.slice(image, axis + 1, 1, len)?;
        let i0 = g.slice(image, axis + 1, 0, len - 1)?;
        let di = g.sub(i1, i0)?;
        let di = g.abs(di);
        let di = g.mean_axis0(di)?;
        let wgt = g.neg(di);
        let wgt = g.exp(wgt);
        let term = g.mul(dd, wgt)?;
        let term = g.mean(term);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.scalar(0.0)))
}

// ---- plain forms -----------------------------------------------------------

fn check_images(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape {
            op,
            shapes: vec![
                vec![a.height(), a.width(), a.channels()],
                vec![b.height(), b.width(), b.channels()],
            ],
        });
    }
    Ok(())
}

/// `[C, H, W]` SSIM map.
pub fn ssim(a: &Image, b: &Image) -> Result<Tensor> {
    check_images("ssim", a, b)?;
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.to_chw()), g.constant(b.to_chw()));
    let s = ssim_var(&mut g, va, vb)?;
    Ok(g.value(s).clone())
}

/// `[H, W]` photometric error map.
pub fn photometric_error(a: &Image, b: &Image) -> Result<Tensor> {
    check_images("photometric_error", a, b)?;
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.to_chw()), g.constant(b.to_chw()));
    let pe = photometric_var(&mut g, va, vb)?;
    Ok(g.value(pe).clone())
}

/// Scalar minimum-reprojection loss and its `[H, W]` map.
pub fn reprojection_loss(target: &Image, warps: &[(Image, Mask)]) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let t = g.constant(target.to_chw());
    let mut ws = Vec::with_capacity(warps.len());
    for (w, m) in warps {
        check_images("reprojection_loss", target, w)?;
        ws.push((g.constant(w.to_chw()), m.clone()));
    }
    let (r, _) = reprojection_var(&mut g, t, &ws)?;
    Ok((g.value(r.loss).item(), g.value(r.map).clone()))
}

pub fn distillation_loss(student: &DepthMap, teacher: &DepthMap) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.constant(student.to_tensor());
    let t = g.constant(teacher.to_tensor());
    let l = distillation_var(&mut g, s, t)?;
    Ok(g.value(l).clone())
}

pub fn teacher_loss(mask: &TeacherMask, ld: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(ld.clone());
    let v = teacher_loss_var(&mut g, mask, l)?;
    Ok(g.value(v).item())
}

pub fn semantic_loss(student: &Tensor, reference: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let r = g.constant(reference.clone());
    let v = semantic_var(&mut g, s, r)?;
    Ok(g.value(v).item())
}

/// Weighted loss terms of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_term: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn from_terms(terms: &[(&str, f64, f64)]) -> Self {
        let mut r = LossReport::default();
        for &(name, weight, value) in terms {
            r.per_term.insert(name.to_string(), value);
            r.weights.insert(name.to_string(), weight);
            r.total += weight * value;
        }
        r
    }

    pub fn term(&self, name: &str) -> f64 {
        self.per_term.get(name).copied().unwrap_or(0.0)
    }

    /// `|total - sum w_i term_i|`.
    pub fn decomposition_error(&self) -> f64 {
        let s: f64 = self
            .per_term
            .iter()
            .map(|(k, v)| self.weights.get(k).copied().unwrap_or(0.0) * v)
            .sum();
        (self.total - s).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen())
    }

    #[test]
    fn ssim_self_is_one() {
        let a = random_image(9, 11, 3, 0);
        let s = ssim(&a, &a).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn ssim_constant_closed_form() {
        let a = Image::filled(6, 7, 1, 0.3);
        let b = Image::filled(6, 7, 1, 0.7);
        let expect = ((2.0 * 0.3 * 0.7 + SSIM_C1) * SSIM_C2) / ((0.09 + 0.49 + SSIM_C1) * SSIM_C2);
        let s = ssim(&a, &b).unwrap();
        assert!(s.data().iter().all(|v| (v - expect).abs() < 1e-9));
        let pe = photometric_error(&a, &b).unwrap();
        let pe_expect = 0.425 * (1.0 - expect) + 0.15 * 0.4;
        assert!(pe.data().iter().all(|v| (v - pe_expect).abs() < 1e-9));
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let a = Image::from_fn(8, 8, 1, |y, x, _| ((x + y) % 2) as f64);
        let b = Image::from_fn(8, 8, 1, |y, x, _| 1.0 - ((x + y) % 2) as f64);
        assert!(ssim(&a, &b).unwrap().mean() < 0.0);
    }

    #[test]
    fn pe_identity_and_range() {
        let a = random_image(8, 10, 3, 1);
        assert!(photometric_error(&a, &a)
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() < 1e-9));
        let b = random_image(8, 10, 3, 2);
        let pe = photometric_error(&a, &b).unwrap();
        assert!(pe.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = random_image(8, 10, 3, 1);
        let b = random_image(8, 9, 3, 1);
        assert!(ssim(&a, &b).is_err());
        assert!(photometric_error(&a, &b).is_err());
    }

    #[test]
    fn reprojection_with_perfect_warp_is_zero() {
        let t = random_image(8, 10, 3, 3);
        let full = Mask::filled(8, 10, true);
        let (l, map) = reprojection_loss(
            &t,
            &[(t.clone(), full.clone()), (random_image(8, 10, 3, 4), full)],
        )
        .unwrap();
        assert!(l.abs() < 1e-9);
        assert!(map.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn reprojection_single_warp_equals_pe() {
        let t = random_image(8, 10, 3, 5);
        let w = random_image(8, 10, 3, 6);
        let (l, map) = reprojection_loss(&t, &[(w.clone(), Mask::filled(8, 10, true))]).unwrap();
        let pe = photometric_error(&t, &w).unwrap();
        assert_eq!(map, pe);
        assert!((l - pe.mean()).abs() < 1e-12);
    }

    #[test]
    fn reprojection_all_invalid_errors() {
        let t = random_image(4, 4, 1, 7);
        assert!(reprojection_loss(&t, &[(t.clone(), Mask::filled(4, 4, false))]).is_err());
        assert!(reprojection_loss(&t, &[]).is_err());
    }

    #[test]
    fn distillation_values() {
        let t = DepthMap::new(2, 2, vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        assert!(distillation_loss(&t, &t)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let l = distillation_loss(&t.scaled(1.1), &t).unwrap();
        assert!(l.data().iter().all(|v| (v - 0.1).abs() < 1e-12));
        let bad = DepthMap::new(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(distillation_loss(&t, &bad).is_err());
    }

    #[test]
    fn teacher_loss_support() {
        let ld = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let none = TeacherMask {
            mask: Mask::filled(3, 4, false),
        };
        assert_eq!(teacher_loss(&none, &ld).unwrap(), 0.0);
        let all = TeacherMask {
            mask: Mask::filled(3, 4, true),
        };
        assert!((teacher_loss(&all, &ld).unwrap() - ld.mean()).abs() < 1e-12);
    }

    #[test]
    fn semantic_endpoints() {
        let f = Tensor::from_fn(&[4, 2, 3], |i| (i as f64 * 0.7).sin() + 0.1);
        assert!(semantic_loss(&f, &f).unwrap().abs() < 1e-12);
        let neg = Tensor::new(f.shape(), f.data().iter().map(|v| -v).collect()).unwrap();
        assert!((semantic_loss(&f, &neg).unwrap() - 2.0).abs() < 1e-12);
        // e_0 against e_1 at every pixel
        let a = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 0.0 } else { 3.0 });
        assert_eq!(semantic_loss(&a, &b).unwrap(), 1.0);
        // zero vectors count as cosine 0
        assert_eq!(semantic_loss(&Tensor::zeros(&[2, 2, 2]), &b).unwrap(), 1.0);
        assert!(semantic_loss(&a, &Tensor::zeros(&[2, 2, 3])).is_err());
    }

    #[test]
    fn mask_conventions_on_ties() {
        assert!(MaskConvention::KeepTeacherReasonable.keep(0.2, 0.2));
        assert!(!MaskConvention::KeepStudentBetter.keep(0.2, 0.2));
        assert!(MaskConvention::KeepTeacherReasonable.keep(0.1, f64::INFINITY));
        assert_eq!(
            MaskConvention::parse("eq5-literal").unwrap(),
            MaskConvention::KeepStudentBetter
        );
        assert!(MaskConvention::parse("other").is_err());
    }

    #[test]
    fn loss_report_decomposes() {
        let r = LossReport::from_terms(&[("photometric", 1.0, 0.3), ("smoothness", 1e-3, 0.7)]);
        assert!(r.decomposition_error() < 1e-15);
        assert!((r.total - 0.3007).abs() < 1e-15);
    }
}
