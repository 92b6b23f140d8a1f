//! Finite-difference checks of every differentiable op and every loss.
//!
//! Each case builds a scalar from random leaves; ops whose output is not a
//! scalar are reduced with a fixed random weighting so every output element
//! contributes a distinct coefficient. Inputs of non-smooth ops stay a safe
//! distance from their kinks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camgeom::{warp_var, Intrinsics, PoseVar};
use crate::diffcore::{gradient_check, GradCheckConfig, GradCheckReport, Graph, OpKind, Var};
use crate::error::Result;
use crate::image::Mask;
use crate::losses::{
    distillation_var, photometric_var, reprojection_var, semantic_var, smoothness_var, ssim_var,
    teacher_loss_var, TeacherMask,
};
use crate::tensor::Tensor;

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub leaves: Vec<Tensor>,
    pub f: CaseFn,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.0.gen_range(lo..hi))
    }

    /// Magnitudes in `[lo, hi]` with random sign.
    fn signed(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let m = self.0.gen_range(lo..hi);
            if self.0.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    fn mask(&mut self, h: usize, w: usize, p: f64) -> Mask {
        Mask::new(h, w, (0..h * w).map(|_| self.0.gen_bool(p)).collect()).expect("dims")
    }
}

/// `sum(x * c)` for a fixed random `c` shaped like `x`.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0x9E37)).uniform(&shape, -1.0, 1.0);
    let c = g.constant(c);
    let y = g.mul(x, c)?;
    Ok(g.sum(y))
}

fn case(
    name: &'static str,
    leaves: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        leaves,
        f: Box::new(f),
    }
}

fn unary(
    name: &'static str,
    x: Tensor,
    op: impl Fn(&mut Graph, Var) -> Result<Var> + 'static,
) -> GradCase {
    case(name, vec![x], move |g, v| {
        let y = op(g, v[0])?;
        probe(g, y, 1)
    })
}

fn binary(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    op: impl Fn(&mut Graph, Var, Var) -> Result<Var> + 'static,
) -> GradCase {
    case(name, vec![a, b], move |g, v| {
        let y = op(g, v[0], v[1])?;
        probe(g, y, 2)
    })
}

/// Camera for the small warp cases.
pub fn suite_intrinsics() -> Intrinsics {
    Intrinsics::new(10.0, 10.0, 5.5, 4.5, 12, 10).expect("valid intrinsics")
}

/// All cases; op cases are named after the op they exercise.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut r = Gen(ChaCha8Rng::seed_from_u64(seed));
    let s = [3, 6, 7];
    let mut cases = vec![
        binary(
            "add",
            r.uniform(&s, -1.0, 1.0),
            r.uniform(&s, -1.0, 1.0),
            |g, a, b| g.add(a, b),
        ),
        binary(
            "sub",
            r.uniform(&s, -1.0, 1.0),
            r.uniform(&[7], -1.0, 1.0),
            |g, a, b| g.sub(a, b),
        ),
        binary(
            "mul",
            r.uniform(&s, -1.0, 1.0),
            r.uniform(&s, -1.0, 1.0),
            |g, a, b| g.mul(a, b),
        ),
        binary(
            "div",
            r.uniform(&s, -1.0, 1.0),
            r.uniform(&s, 0.5, 1.5),
            |g, a, b| g.div(a, b),
        ),
        unary("neg", r.uniform(&s, -1.0, 1.0), |g, x| Ok(g.neg(x))),
        unary("exp", r.uniform(&s, -1.0, 1.0), |g, x| Ok(g.exp(x))),
        unary("log", r.uniform(&s, 0.5, 2.0), |g, x| g.log(x)),
        unary("sqrt", r.uniform(&s, 0.5, 2.0), |g, x| g.sqrt(x)),
        unary("abs", r.signed(&s, 0.1, 1.0), |g, x| Ok(g.abs(x))),
        unary("pow", r.uniform(&s, 0.5, 2.0), |g, x| g.pow(x, 2.5)),
        unary("sigmoid", r.uniform(&s, -3.0, 3.0), |g, x| Ok(g.sigmoid(x))),
        unary("relu", r.signed(&s, 0.1, 1.0), |g, x| Ok(g.relu(x))),
    ];

    let a = r.uniform(&s, -1.0, 1.0);
    let gap = r.signed(&s, 0.1, 0.5);
    let b = Tensor::from_fn(&s, |i| a.data()[i] + gap.data()[i]);
    cases.push(binary("minimum", a, b, |g, a, b| g.minimum(a, b)));
    // away from the clamp bounds at +-0.5
    let x = Tensor::from_fn(&s, |i| {
        let v = gap.data()[i];
        if v.abs() < 0.3 {
            v
        } else {
            v.signum() * (0.6 + v.abs())
        }
    });
    cases.push(unary("clamp", x, |g, x| g.clamp(x, -0.5, 0.5)));

    cases.push(case("sum", vec![r.uniform(&s, -1.0, 1.0)], |g, v| {
        let t = g.sum(v[0]);
        g.mul(t, t)
    }));
    cases.push(case("mean", vec![r.uniform(&s, -1.0, 1.0)], |g, v| {
        let t = g.mean(v[0]);
        let e = g.exp(t);
        g.mul(e, t)
    }));
    cases.push(unary(
        "mean_axis0",
        r.uniform(&[5, 4, 6], -1.0, 1.0),
        |g, x| g.mean_axis0(x),
    ));
    cases.push(binary(
        "matmul",
        r.uniform(&[10, 12], -1.0, 1.0),
        r.uniform(&[12, 9], -1.0, 1.0),
        |g, a, b| g.matmul(a, b),
    ));
    cases.push(unary(
        "transpose",
        r.uniform(&[10, 12], -1.0, 1.0),
        |g, x| g.transpose(x),
    ));
    cases.push(case(
        "conv2d",
        vec![
            r.uniform(&[3, 8, 8], -1.0, 1.0),
            r.uniform(&[4, 3, 3, 3], -0.5, 0.5),
            r.uniform(&[4], -0.5, 0.5),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            probe(g, y, 3)
        },
    ));
    cases.push(case(
        "conv2d_stride2",
        vec![
            r.uniform(&[3, 9, 8], -1.0, 1.0),
            r.uniform(&[5, 3, 3, 3], -0.5, 0.5),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            probe(g, y, 4)
        },
    ));
    cases.push(unary(
        "avgpool3",
        r.uniform(&[2, 8, 8], -1.0, 1.0),
        |g, x| g.avgpool3(x),
    ));
    cases.push(unary(
        "upsample2",
        r.uniform(&[4, 5, 6], -1.0, 1.0),
        |g, x| g.upsample2(x),
    ));

    // interior coordinates with fractional parts in [0.1, 0.9]
    let grid = Tensor::from_fn(&[7, 7, 2], |i| {
        let hi = if i % 2 == 0 { 6 } else { 5 };
        r.0.gen_range(0..hi) as f64 + r.0.gen_range(0.1..0.9)
    });
    cases.push(binary(
        "bilinear_sample",
        r.uniform(&[2, 6, 7], 0.0, 1.0),
        grid,
        |g, img, grid| g.bilinear_sample(img, grid),
    ));
    cases.push(binary(
        "concat",
        r.uniform(&[2, 5, 6], -1.0, 1.0),
        r.uniform(&[2, 4, 6], -1.0, 1.0),
        |g, a, b| g.concat(&[a, b], 1),
    ));
    cases.push(unary("slice", r.uniform(&[4, 6, 7], -1.0, 1.0), |g, x| {
        g.slice(x, 1, 1, 5)
    }));
    cases.push(unary("reshape", r.uniform(&[120], -1.0, 1.0), |g, x| {
        g.reshape(x, &[10, 12])
    }));
    cases.push(unary(
        "broadcast",
        r.uniform(&[6, 20], -1.0, 1.0),
        |g, x| g.broadcast_to(x, &[3, 6, 20]),
    ));
    cases.push(binary(
        "cosine",
        r.uniform(&[8, 4, 4], -1.0, 1.0),
        r.uniform(&[8, 4, 4], -1.0, 1.0),
        |g, a, b| g.cosine(a, b),
    ));

    // 34 rotations, a few in the small-angle branch
    let mut ws: Vec<Tensor> = (0..30).map(|_| r.uniform(&[3], -1.0, 1.0)).collect();
    for i in 0..4 {
        let mut t = r.uniform(&[3], -1.0, 1.0);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v *= 10f64.powi(-2 - i));
        ws.push(t);
    }
    cases.push(case("axis_angle", ws, |g, v| {
        let mut total: Option<Var> = None;
        for (i, &w) in v.iter().enumerate() {
            let rot = g.axis_angle(w)?;
            let p = probe(g, rot, 10 + i as u64)?;
            total = Some(match total {
                None => p,
                Some(t) => g.add(t, p)?,
            });
        }
        Ok(total.expect("non-empty"))
    }));

    // ---- losses --------------------------------------------------------
    let k = suite_intrinsics();
    let (h, w) = (k.height, k.width);
    let img = |r: &mut Gen| r.uniform(&[3, h, w], 0.05, 0.95);

    cases.push(binary("ssim", img(&mut r), img(&mut r), ssim_var));
    let a = img(&mut r);
    let offset = r.uniform(&[3, h, w], 0.05, 0.3);
    let b = Tensor::from_fn(&[3, h, w], |i| {
        (a.data()[i] + offset.data()[i]).clamp(0.0, 1.0)
    });
    cases.push(case("photometric", vec![a, b], |g, v| {
        let pe = photometric_var(g, v[0], v[1])?;
        Ok(g.mean(pe))
    }));

    // Warp cases sample a source that is linear in (u, v), where bilinear
    // interpolation is smooth across cells, and use poses that pull every
    // sample at least half a pixel inside the border so the validity mask
    // is constant under perturbation.
    let linear_src = |r: &mut Gen, base: f64| {
        let c: Vec<f64> = (0..9).map(|_| r.0.gen_range(0.01..0.03)).collect();
        Tensor::from_fn(&[3, h, w], |i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            base + c[3 * ch] * x as f64 + c[3 * ch + 1] * y as f64 + c[3 * ch + 2]
        })
    };
    let warp_leaves = vec![
        linear_src(&mut r, 0.4),
        r.uniform(&[h, w], 2.0, 4.0),
        Tensor::new(&[6], vec![0.02, -0.015, 0.01, 0.03, 0.02, 0.5]).expect("6-vector"),
    ];
    cases.push(case("warp", warp_leaves.clone(), move |g, v| {
        let pose = PoseVar::from_params(g, v[2])?;
        let (out, _) = warp_var(g, v[0], v[1], &pose, &k, 1e-3)?;
        probe(g, out, 5)
    }));

    let (m1, m2) = (r.mask(h, w, 0.8), r.mask(h, w, 0.8));
    // the second warp loses the per-pixel minimum everywhere by a margin and
    // neither warp crosses the target
    let target = img(&mut r);
    let offset = |r: &mut Gen, lo: f64, hi: f64| {
        let d = r.uniform(&[3, h, w], lo, hi);
        Tensor::from_fn(&[3, h, w], |i| target.data()[i] + d.data()[i])
    };
    let (warp1, warp2) = (offset(&mut r, 0.05, 0.15), offset(&mut r, 0.35, 0.5));
    cases.push(case(
        "reprojection",
        vec![target, warp1, warp2],
        move |g, v| {
            Ok(
                reprojection_var(g, v[0], &[(v[1], m1.clone()), (v[2], m2.clone())])?
                    .0
                    .loss,
            )
        },
    ));

    let mut leaves = warp_leaves;
    // brighter, so the first warp wins the minimum everywhere by a margin
    leaves.push(linear_src(&mut r, 1.0));
    leaves.push(Tensor::new(&[6], vec![-0.01, 0.02, -0.01, -0.02, 0.03, 0.4]).expect("6-vector"));
    // the target stays darker than both warps, away from the L1 kink
    let target = r.uniform(&[3, h, w], 0.0, 0.2);
    cases.push(case("reprojection_through_warp", leaves, move |g, v| {
        let target = g.constant(target.clone());
        let p1 = PoseVar::from_params(g, v[2])?;
        let p2 = PoseVar::from_params(g, v[4])?;
        let w1 = warp_var(g, v[0], v[1], &p1, &k, 1e-3)?;
        let w2 = warp_var(g, v[3], v[1], &p2, &k, 1e-3)?;
        Ok(reprojection_var(g, target, &[w1, w2])?.0.loss)
    }));

    // relative gaps of at least 10% keep |D_s - D_t| off its kink
    let d_student = r.uniform(&[h, w], 1.0, 8.0);
    let gap = r.signed(&[h, w], 0.1, 0.4);
    let d_teacher = Tensor::from_fn(&[h, w], |i| d_student.data()[i] * (1.0 + gap.data()[i]));
    cases.push(binary(
        "distillation",
        d_student,
        d_teacher,
        distillation_var,
    ));
    let mask = TeacherMask {
        mask: r.mask(h, w, 0.6),
    };
    let ld_student = r.uniform(&[h, w], 1.0, 8.0);
    let ld_teacher = Tensor::from_fn(&[h, w], |i| {
        let s = ld_student.data()[i];
        s * if i % 2 == 0 { 1.3 } else { 0.7 }
    });
    cases.push(case(
        "teacher_loss",
        vec![ld_student, ld_teacher],
        move |g, v| {
            let ld = distillation_var(g, v[0], v[1])?;
            teacher_loss_var(g, &mask, ld)
        },
    ));
    cases.push(binary(
        "semantic",
        r.uniform(&[8, 3, 4], -1.0, 1.0),
        r.uniform(&[8, 3, 4], -1.0, 1.0),
        semantic_var,
    ));
    // checkerboards keep every neighbour difference clear of the |.| kink
    let checker = |i: usize| {
        if (i / w + i % w).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    };
    let steps = r.uniform(&[h, w], 0.05, 0.3);
    let disp = Tensor::from_fn(&[h, w], |i| 1.0 + steps.data()[i] * checker(i));
    let steps = r.uniform(&[3, h, w], 0.05, 0.2);
    let image = Tensor::from_fn(&[3, h, w], |i| 0.5 + steps.data()[i] * checker(i % (h * w)));
    cases.push(binary("smoothness", disp, image, smoothness_var));
    cases
}

pub fn run_case(c: &GradCase, cfg: &GradCheckConfig) -> Result<CaseResult> {
    Ok(CaseResult {
        name: c.name,
        report: gradient_check(&*c.f, &c.leaves, cfg)?,
    })
}

pub fn run_gradient_suite(cfg: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    gradient_suite(cfg.seed)
        .iter()
        .map(|c| run_case(c, cfg))
        .collect()
}

/// Op names with no dedicated case; empty when coverage is complete.
pub fn uncovered_ops() -> Vec<&'static str> {
    let names: Vec<&str> = gradient_suite(0).iter().map(|c| c.name).collect();
    OpKind::ALL
        .iter()
        .map(|k| k.name())
        .filter(|n| !names.contains(n))
        .collect()
}
