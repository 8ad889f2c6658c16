//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle for every differentiable op: it
//! only ever calls the function under test twice per coordinate and compares
//! the quotient against the autodiff gradient. It never inspects how the
//! gradient was produced.

use crate::rng::Rng;
use crate::tensor::{Result, Tensor};

/// Outcome of a gradient check: worst relative error seen across all
/// checked coordinates.
#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely in f32.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks d loss / d inputs[i] for a scalar-valued `f` by central
/// differences at `points` random coordinates of each input.
///
/// Inputs are cloned into fresh leaf parameters, so `f` must read them
/// positionally. `h` is the probe step (inputs are expected to be O(1),
/// e.g. drawn from [-2, 2]).
pub fn check_gradients(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    points: usize,
    h: f32,
    rng: &mut Rng,
) -> Result<GradReport> {
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.data().to_vec(), t.shape().to_vec()))
        .collect();
    let loss = f(&params)?;
    loss.backward()?;
    let grads: Vec<Option<Vec<f32>>> = params.iter().map(|p| p.grad()).collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        if n == 0 {
            continue;
        }
        for _ in 0..points.min(n) {
            let ci = rng.below(n);
            let fd = {
                let mut plus = p.data().to_vec();
                plus[ci] += h;
                let mut minus = p.data().to_vec();
                minus[ci] -= h;
                let lp = eval_at(f, &params, pi, plus)?;
                let lm = eval_at(f, &params, pi, minus)?;
                (lp as f64 - lm as f64) / (2.0 * h as f64)
            };
            let ad = grads[pi].as_ref().map_or(0.0, |g| g[ci] as f64);
            report.max_rel_err = report.max_rel_err.max(rel_err(ad, fd));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn eval_at(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    params: &[Tensor],
    replace: usize,
    data: Vec<f32>,
) -> Result<f32> {
    let probe: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == replace {
                Tensor::new(data.clone(), p.shape().to_vec())
            } else {
                Tensor::new(p.data().to_vec(), p.shape().to_vec())
            }
        })
        .collect();
    Ok(crate::tensor::no_grad(|| f(&probe))?.item())
}

/// Random tensor with entries uniform in [-2, 2], the range gradient checks
/// are calibrated for.
pub fn rand_input(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.next_f32() * 4.0 - 2.0).collect();
    Tensor::new(data, shape.to_vec())
}

/// Fixed pseudo-random projection to a scalar, so gradients are informative
/// in every coordinate.
pub fn weighted_sum(t: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let w: Vec<f32> = (0..t.numel()).map(|_| rng.next_f32() * 2.0 - 1.0).collect();
    let flat = t.reshape(vec![t.numel()])?;
    flat.mul(&Tensor::new(w, vec![t.numel()]))?.sum_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient() {
        let mut rng = Rng::new(0, 0);
        let x = rand_input(&[3, 4], &mut rng);
        let wrng = Rng::new(1, 0);
        let f = move |ins: &[Tensor]| {
            let mut r = wrng.clone();
            let y = ins[0].gelu()?;
            weighted_sum(&y, &mut r)
        };
        let rep = check_gradients(&f, &[x], 10, 1e-2, &mut rng).unwrap();
        assert!(rep.max_rel_err < 1e-3, "rel err {}", rep.max_rel_err);
        assert!(rep.checked > 0);
    }

    #[test]
    fn flags_wrong_gradient() {
        // scale() claims slope a, but we lie about the forward value by
        // composing a detached doubling, so FD sees slope 2a.
        let mut rng = Rng::new(2, 0);
        let x = rand_input(&[5], &mut rng);
        let f = |ins: &[Tensor]| {
            let doubled = Tensor::new(
                ins[0].data().iter().map(|v| v * 2.0).collect(),
                ins[0].shape().to_vec(),
            );
            // Gradient flows through the single-scale path only.
            ins[0].sub(&ins[0].detach())?.add(&doubled)?.sum_all()
        };
        let rep = check_gradients(&f, &[x], 5, 1e-2, &mut rng).unwrap();
        assert!(rep.max_rel_err > 0.3, "should flag mismatch, got {}", rep.max_rel_err);
    }
}
