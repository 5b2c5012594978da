//! Central finite-difference validation of tape gradients.

use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor added to the finite-difference magnitude in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / (|numeric_i| + 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinate that attained the maximum.
    pub worst_index: usize,
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences of step `h` (in `[1e-4, 1e-2]`).
///
/// The difference quotient divides by the step actually realised in the
/// element type, `(x+h) − (x−h)`, not by the nominal `2h`.
pub fn grad_check<F, G>(f: G, x: &Tensor<F>, h: f64) -> Result<GradCheck>
where
    F: Float,
    G: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::invalid(format!("grad_check step {h} outside [1e-4, 1e-2]")));
    }
    let eval = |t: Tensor<F>, with_grad: bool| -> Result<(f64, Option<Tensor<F>>)> {
        let mut tape = Tape::new();
        let v = tape.input(t);
        let out = f(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::shape("grad_check", "function must return a scalar"));
        }
        let y = tape.value(out).item().f64();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check probe"));
        }
        if !with_grad {
            return Ok((y, None));
        }
        tape.backward(out)?;
        let g = tape
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
        Ok((y, Some(g)))
    };

    let (_, analytic) = eval(x.detach(), true)?;
    let analytic = analytic.expect("gradient requested");
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..x.numel() {
        let mut plus = x.detach();
        let mut minus = x.detach();
        let xi = x.data()[i];
        plus.data_mut()[i] = xi + F::of(h);
        minus.data_mut()[i] = xi - F::of(h);
        let step = (plus.data()[i] - minus.data()[i]).f64();
        let (fp, _) = eval(plus, false)?;
        let (fm, _) = eval(minus, false)?;
        let numeric = (fp - fm) / step;
        let a = analytic.data()[i].f64();
        let rel = (a - numeric).abs() / (numeric.abs() + REL_FLOOR);
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // stop_gradient hides one factor: analytic = x, true derivative = 2x.
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.stop_gradient(v);
                let p = t.mul(s, v)?;
                t.sum(p)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert!(grad_check(|t, v| t.sum(v), &x, 0.5).is_err());
    }

    #[test]
    fn rejects_non_finite_probe() {
        let x = Tensor::<f64>::new(&[1], vec![f64::MAX / 2.0]).unwrap();
        assert!(grad_check(|t, v| t.scale(v, 1e300), &x, 1e-3).is_err());
    }
}
