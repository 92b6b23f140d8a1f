//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step `h`; the estimate uses the five-point stencil
    /// at `x ± h` and `x ± 2h`, whose truncation error is `O(h^4)`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Coordinates to probe; every coordinate is probed when there are fewer.
    pub coords: usize,
    pub seed: u64,
    /// Corrupt this op's backward pass (negative testing).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tol: 1e-4,
            coords: 100,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub worst: Option<Mismatch>,
    /// Set when a non-finite value was met; names the location.
    pub failure: Option<String>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, leaves: &[Tensor], fault: Option<OpKind>) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences at sampled coordinates of `leaves`.
pub fn gradient_check<F>(f: F, leaves: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, leaves, cfg.fault)?;
    let fail = |msg: String| GradCheckReport {
        max_rel_err: f64::INFINITY,
        pass: false,
        checked: 0,
        worst: None,
        failure: Some(msg),
    };
    if !g.value(out).all_finite() {
        return Ok(fail("non-finite function value at the base point".into()));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(g);

    let offsets: Vec<usize> = leaves
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = leaves.iter().map(Tensor::numel).sum();
    let picks: Vec<usize> = if total <= cfg.coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = sample(&mut rng, total, cfg.coords).into_vec();
        p.sort_unstable();
        p
    };

    let scalar_at = |leaf: usize, index: usize, delta: f64| -> Result<f64> {
        let mut perturbed = leaves.to_vec();
        perturbed[leaf].data_mut()[index] += delta;
        let (g, _, out) = evaluate(&f, &perturbed, None)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        worst: None,
        failure: None,
    };
    for flat in picks {
        let leaf = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[leaf];
        let a = analytic[leaf].data()[index];
        let h = cfg.step;
        let p1 = scalar_at(leaf, index, h)?;
        let m1 = scalar_at(leaf, index, -h)?;
        let p2 = scalar_at(leaf, index, 2.0 * h)?;
        let m2 = scalar_at(leaf, index, -2.0 * h)?;
        let n = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        if !a.is_finite() || !n.is_finite() {
            return Ok(fail(format!(
                "non-finite gradient at leaf {leaf} index {index} (analytic {a}, numeric {n})"
            )));
        }
        let e = relative_error(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some(Mismatch {
                leaf,
                index,
                analytic: a,
                numeric: n,
            });
        }
    }
    report.pass = report.max_rel_err < cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn sum_exp_passes() {
        let x = random(&[8], -1.0, 1.0, 1);
        let r = gradient_check(
            |g, v| {
                let e = g.exp(v[0]);
                Ok(g.sum(e))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn constant_function_passes() {
        let x = random(&[5], -1.0, 1.0, 2);
        let r =
            gradient_check(|g, _| Ok(g.scalar(4.0)), &[x], &GradCheckConfig::default()).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = random(&[8], -1.0, 1.0, 3);
        let cfg = GradCheckConfig {
            fault: Some(OpKind::Exp),
            ..Default::default()
        };
        let r = gradient_check(
            |g, v| {
                let e = g.exp(v[0]);
                Ok(g.sum(e))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_err - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(&[1], vec![800.0]).unwrap();
        let r = gradient_check(
            |g, v| {
                let e = g.exp(v[0]);
                Ok(g.sum(e))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.pass);
        assert!(r.failure.is_some());
    }
}
