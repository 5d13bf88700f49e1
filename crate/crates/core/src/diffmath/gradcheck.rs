use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences with step [`FD_STEP`]. Inputs are standard normal draws
/// seeded by `seed`. Returns the worst relative error over all elements.
pub fn grad_check<F>(f: F, input_shapes: &[Vec<usize>], seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = input_shapes
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng))
        .collect();
    grad_check_at(f, &inputs)
}

/// [`grad_check`] at explicit input values.
pub fn grad_check_at<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape("grad_check", format!("function returned {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check forward value".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for e in 0..grads.len() {
            let orig = probe[which].data()[e];
            probe[which].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[which].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !numeric.is_finite() || !grads[e].is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of input {which} element {e}"
                )));
            }
            worst = worst.max(relative_error(grads[e], numeric));
        }
    }
    Ok(worst)
}
