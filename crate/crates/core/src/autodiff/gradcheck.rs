//! Central finite-difference verification of tape gradients.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `eps`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs)?;
        t.value(o).item()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*v) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(inputs[k].shape())?;
                &zeros
            }
        };
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[e] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at input {k} element {e}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report = GradCheck {
                    max_rel_err: rel,
                    worst: (k, e),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued `v` to a scalar through a fixed random weighting,
/// so a single scalar check exercises every output element.
pub fn project(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Like [`random_tensor`] but every entry satisfies `|x| >= margin`, keeping
/// samples away from kinks at zero.
pub fn random_tensor_away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], hi: f64, margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}
