//! Central finite-difference verification of [`Graph::backward`].

use std::ops::Range;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{lora_forward, LoraRuntime};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub pass: bool,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let out = f(&mut g, v)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(f64::from(t.item()))
}

/// Compares the gradient of the scalar function `f` at `x`, as computed by
/// the graph, against central differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
///
/// The denominator is floored at 1, so for small gradients the tolerance
/// acts as an absolute bound.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Input(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        pass: true,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let (hi, lo) = (x0 + h, x0 - h);
        probe.data_mut()[i] = hi;
        let f_hi = eval(&f, &probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = eval(&f, &probe)?;
        probe.data_mut()[i] = x0;

        // Divide by the step actually taken after f32 rounding.
        let numeric = (f_hi - f_lo) / (f64::from(hi) - f64::from(lo));
        let a = f64::from(analytic.data()[i]);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1.0);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}

type Loss = Box<dyn Fn(&mut Graph<'_>, Var) -> Result<Var>>;

/// `Σ out ⊙ w` with fixed random `w`, so every output element contributes
/// with a distinct weight and the scalar stays small.
fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n = shape.iter().product::<usize>().max(1);
    let w = Tensor::randn(
        &shape,
        0.1 / (n as f32).sqrt(),
        &mut Rng::stream(seed, "gradcheck/project"),
    );
    let w = g.leaf(w, false);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Wraps a kernel application into a projected scalar loss.
fn proj(seed: u64, f: impl Fn(&mut Graph<'_>, Var) -> Result<Var> + 'static) -> Loss {
    Box::new(move |g, x| {
        let out = f(g, x)?;
        project(g, out, seed)
    })
}

/// Binary kernel with `x` in the first or second operand slot.
fn binary(seed: u64, other: Tensor, x_first: bool, op: fn(&mut Graph<'_>, Var, Var) -> Result<Var>) -> Loss {
    proj(seed, move |g, x| {
        let c = g.leaf(other.clone(), false);
        if x_first {
            op(g, x, c)
        } else {
            op(g, c, x)
        }
    })
}

fn toy_geom() -> ConvGeom {
    ConvGeom {
        height: 4,
        width: 4,
        channels: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
    }
}

/// One randomized instance of a kernel check: the input and the loss.
fn case(name: &str, seed: u64) -> (Tensor, Loss) {
    let mut rng = Rng::stream(seed, &format!("gradcheck/{name}"));
    let r = &mut rng;
    match name {
        "matmul/a" => (
            randn(&[3, 4], r),
            binary(seed, randn(&[4, 5], r), true, |g, a, b| g.matmul(a, b)),
        ),
        "matmul/b" => (
            randn(&[4, 5], r),
            binary(seed, randn(&[3, 4], r), false, |g, a, b| g.matmul(a, b)),
        ),
        "matmul_t/a" => (
            randn(&[3, 4], r),
            binary(seed, randn(&[5, 4], r), true, |g, a, b| g.matmul_t(a, b)),
        ),
        "matmul_t/b" => (
            randn(&[5, 4], r),
            binary(seed, randn(&[3, 4], r), false, |g, a, b| g.matmul_t(a, b)),
        ),
        "add" => (
            randn(&[3, 4], r),
            binary(seed, randn(&[3, 4], r), true, |g, a, b| g.add(a, b)),
        ),
        "mul" => (
            randn(&[3, 4], r),
            binary(seed, randn(&[3, 4], r), true, |g, a, b| g.mul(a, b)),
        ),
        "mul/square" => (randn(&[3, 4], r), proj(seed, |g, x| g.mul(x, x))),
        "scale" => {
            let s = r.uniform_range(-2.0, 2.0);
            (randn(&[3, 4], r), proj(seed, move |g, x| Ok(g.scale(x, s))))
        }
        "add_row/x" => (
            randn(&[3, 4], r),
            binary(seed, randn(&[4], r), true, |g, a, b| g.add_row(a, b)),
        ),
        "add_row/bias" => (
            randn(&[4], r),
            binary(seed, randn(&[3, 4], r), false, |g, a, b| g.add_row(a, b)),
        ),
        "mul_const" => {
            let mask: Vec<f32> = (0..12)
                .map(|_| if r.uniform() < 0.7 { 1.0 / 0.7 } else { 0.0 })
                .collect();
            (randn(&[3, 4], r), proj(seed, move |g, x| g.mul_const(x, mask.clone())))
        }
        "map/tanh" => (
            randn(&[3, 4], r),
            proj(seed, |g, x| Ok(g.map(x, f32::tanh, |v| 1.0 - v.tanh() * v.tanh()))),
        ),
        "gelu" => (randn(&[3, 4], r).scale(2.0), proj(seed, |g, x| Ok(g.gelu(x)))),
        "layer_norm/x" => {
            let (gamma, beta) = (randn(&[5], r), randn(&[5], r));
            (
                randn(&[3, 5], r),
                proj(seed, move |g, x| {
                    let (gv, bv) = (g.leaf(gamma.clone(), false), g.leaf(beta.clone(), false));
                    g.layer_norm(x, gv, bv)
                }),
            )
        }
        "layer_norm/gamma" => {
            let (xin, beta) = (randn(&[3, 5], r), randn(&[5], r));
            (
                randn(&[5], r),
                proj(seed, move |g, gamma| {
                    let (xv, bv) = (g.leaf(xin.clone(), false), g.leaf(beta.clone(), false));
                    g.layer_norm(xv, gamma, bv)
                }),
            )
        }
        "layer_norm/beta" => {
            let (xin, gamma) = (randn(&[3, 5], r), randn(&[5], r));
            (
                randn(&[5], r),
                proj(seed, move |g, beta| {
                    let (xv, gv) = (g.leaf(xin.clone(), false), g.leaf(gamma.clone(), false));
                    g.layer_norm(xv, gv, beta)
                }),
            )
        }
        "softmax_rows" => (randn(&[3, 4], r), proj(seed, |g, x| g.softmax_rows(x, false))),
        "softmax_rows/causal" => (randn(&[4, 4], r), proj(seed, |g, x| g.softmax_rows(x, true))),
        "slice_cols" => (randn(&[3, 5], r), proj(seed, |g, x| g.slice_cols(x, 1, 3))),
        "slice_rows" => (randn(&[5, 3], r), proj(seed, |g, x| g.slice_rows(x, 2, 2))),
        "concat_cols" => (
            randn(&[3, 4], r),
            proj(seed, |g, x| {
                let a = g.slice_cols(x, 0, 1)?;
                let b = g.slice_cols(x, 1, 3)?;
                g.concat_cols(&[b, x, a])
            }),
        ),
        "concat_rows" => (
            randn(&[4, 3], r),
            proj(seed, |g, x| {
                let a = g.slice_rows(x, 0, 1)?;
                g.concat_rows(&[x, a, x])
            }),
        ),
        "mean_rows" => (randn(&[4, 3], r), proj(seed, |g, x| g.mean_rows(x))),
        "sum" => (
            randn(&[3, 4], r),
            Box::new(|g: &mut Graph<'_>, x| {
                let s = g.sum(x);
                Ok(g.scale(s, 0.1))
            }),
        ),
        "gather_rows" => {
            let ids: Vec<usize> = (0..6).map(|_| r.below(4)).collect();
            (randn(&[4, 3], r), proj(seed, move |g, x| g.gather_rows(x, &ids)))
        }
        "cross_entropy" => {
            // Id 4 is out of range on purpose: it is the ignored position.
            let mut targets: Vec<usize> = (0..4).map(|_| r.below(4)).collect();
            targets[2] = 4;
            (
                randn(&[4, 4], r).scale(0.5),
                Box::new(move |g: &mut Graph<'_>, x| g.cross_entropy(x, &targets, 4)),
            )
        }
        "bce_with_logits" => {
            let target = if r.uniform() < 0.5 { 0.0 } else { 1.0 };
            (
                Tensor::new(&[1, 1], vec![r.uniform_range(-1.5, 1.5)]).expect("shape"),
                Box::new(move |g: &mut Graph<'_>, x| g.bce_with_logits(x, target)),
            )
        }
        "im2col" => {
            let geom = toy_geom();
            (randn(&[16, 2], r), proj(seed, move |g, x| g.im2col(x, geom)))
        }
        other => lora_case(other, seed, r),
    }
}

/// `lora_forward` with the checked input in the x, A or B slot, in train
/// mode with a dropout mask drawn from a fixed stream on every call.
fn lora_case(name: &str, seed: u64, r: &mut Rng) -> (Tensor, Loss) {
    let (n, d_in, d_out, rank) = (3, 5, 4, 2);
    let rt = LoraRuntime {
        scale: 16.0 / rank as f32,
        dropout: 0.25,
    };
    let mut t = [
        randn(&[n, d_in], r),
        randn(&[d_out, d_in], r).scale(0.3),
        randn(&[rank, d_in], r).scale(0.3),
        randn(&[d_out, rank], r).scale(0.3),
    ];
    let slot = match name {
        "lora_forward/x" => 0,
        "lora_forward/a" => 2,
        "lora_forward/b" => 3,
        _ => panic!("unknown kernel case `{name}`"),
    };
    let x = std::mem::replace(&mut t[slot], Tensor::zeros(&[0]));
    let loss = proj(seed, move |g, v| {
        let vars: Vec<Var> = (0..4)
            .map(|i| if i == slot { v } else { g.leaf(t[i].clone(), false) })
            .collect();
        let mut drop = Rng::stream(seed, "gradcheck/lora-dropout");
        lora_forward(g, vars[0], vars[1], vars[2], vars[3], rt, Some(&mut drop))
    });
    (x, loss)
}

/// Every kernel case [`check_kernels`] runs.
pub const KERNEL_CASES: &[&str] = &[
    "matmul/a",
    "matmul/b",
    "matmul_t/a",
    "matmul_t/b",
    "add",
    "mul",
    "mul/square",
    "scale",
    "add_row/x",
    "add_row/bias",
    "mul_const",
    "map/tanh",
    "gelu",
    "layer_norm/x",
    "layer_norm/gamma",
    "layer_norm/beta",
    "softmax_rows",
    "softmax_rows/causal",
    "slice_cols",
    "slice_rows",
    "concat_cols",
    "concat_rows",
    "mean_rows",
    "sum",
    "gather_rows",
    "cross_entropy",
    "bce_with_logits",
    "im2col",
    "lora_forward/x",
    "lora_forward/a",
    "lora_forward/b",
];

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub pass: bool,
}

/// Runs every case of [`KERNEL_CASES`] once per seed.
pub fn check_kernels(seeds: Range<u64>, h: f32, tol: f64) -> Result<Vec<KernelCheck>> {
    KERNEL_CASES
        .iter()
        .map(|&name| {
            let mut out = KernelCheck {
                name,
                seeds: 0,
                max_rel_err: 0.0,
                worst_seed: seeds.start,
                pass: true,
            };
            for seed in seeds.clone() {
                let (x, loss) = case(name, seed);
                let r = finite_diff_check(loss, &x, h, tol)?;
                out.seeds += 1;
                if r.max_rel_err >= out.max_rel_err {
                    out.max_rel_err = r.max_rel_err;
                    out.worst_seed = seed;
                }
                out.pass &= r.pass;
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 0.25]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::ones(&[4]);
        let r = finite_diff_check(|g, _| Ok(g.leaf(Tensor::scalar(3.0), false)), &x, 1e-3, 1e-4).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn wrong_gradient_hook_fails() {
        let x = Tensor::new(&[2], vec![0.7, -0.3]).unwrap();
        // d/dx x² is 2x; the hook claims x.
        let r = finite_diff_check(
            |g, x| {
                let y = g.map(x, |v| v * v, |v| v);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let calls = AtomicU32::new(0);
        let x = Tensor::ones(&[1]);
        let err = finite_diff_check(
            |g, _| {
                let n = calls.fetch_add(1, Ordering::SeqCst);
                Ok(g.leaf(Tensor::scalar(n as f32), false))
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::ones(&[1]);
        assert!(finite_diff_check(|g, x| Ok(g.sum(x)), &x, 0.0, 1e-4).is_err());
    }

    #[test]
    fn every_kernel_case_builds_and_passes_once() {
        let checks = check_kernels(0..1, 1e-3, 1e-4).unwrap();
        assert_eq!(checks.len(), KERNEL_CASES.len());
        for c in checks {
            assert!(c.pass, "{c:?}");
        }
    }
}
