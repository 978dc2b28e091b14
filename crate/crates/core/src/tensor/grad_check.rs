//! Central-difference gradient verification.
//!
//! The numeric side never touches the tape's backward pass, so it serves as
//! an independent oracle for every layer built on top of the tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Max relative error between analytic and central-difference gradients of a
/// scalar function of one tensor. `step` is the half-width of the stencil.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

/// Multi-input variant: `f` receives one leaf per entry of `points` and the
/// error is maximized over every coordinate of every input.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "step must be positive");

    // analytic gradients via the tape
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::NotScalarLoss(tape.value(loss).shape.clone()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(&p.shape)))
        .collect();

    // numeric evaluation helper: plain forward pass, nothing tracked
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(y))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for c in 0..point.numel() {
            let orig = point.data[c];
            work[pi].data[c] = orig + step;
            let up = eval(&work)?;
            work[pi].data[c] = orig - step;
            let down = eval(&work)?;
            work[pi].data[c] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteValue { op: "grad_check" });
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data[c];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &Tensor::vector(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "error {err}");
    }

    #[test]
    fn tanh_sum() {
        let err = grad_check(
            |tape, x| {
                let t = tape.tanh(x)?;
                tape.sum_all(t)
            },
            &Tensor::vector(&[0.3]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |tape, _x| {
                let c = tape.constant(Tensor::scalar(4.0));
                // depend on nothing: grad is zero on both routes
                Ok(c)
            },
            &Tensor::vector(&[1.0, -1.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn covers_every_tape_op() {
        // one composite touching most differentiable ops at once
        let err = grad_check_multi(
            |tape, vars| {
                let (x, w, b) = (vars[0], vars[1], vars[2]);
                let h = tape.matmul(x, w)?;
                let h = tape.add_bias(h, b)?;
                let s = tape.sigmoid(h)?;
                let t = tape.tanh(h)?;
                let m = tape.mul(s, t)?;
                let r = tape.relu(m)?;
                let sm = tape.softmax(r)?;
                let ls = tape.log_softmax(h)?;
                let joined = tape.concat(&[sm, ls], 1)?;
                let part = tape.narrow(joined, 1, 1, 3)?;
                let tr = tape.transpose(part)?;
                let flat = tape.reshape(tr, vec![1, 6])?;
                let scaled = tape.scale(flat, 1.5)?;
                let v = tape.var_all(scaled)?;
                let mn = tape.mean_all(flat)?;
                let sum = tape.sum_all(scaled)?;
                let a = tape.add(v, mn)?;
                let a = tape.add(a, sum)?;
                let five = tape.constant(Tensor::scalar(5.0));
                let shifted = tape.add(a, five)?;
                tape.sqrt(shifted)
            },
            &[
                Tensor::matrix(&[vec![0.2, -0.4, 0.6], vec![0.1, 0.3, -0.5]]).unwrap(),
                Tensor::matrix(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.3], vec![-0.6, 0.2, 0.1]])
                    .unwrap(),
                Tensor::vector(&[0.05, -0.1, 0.2]),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "error {err}");
    }
}
