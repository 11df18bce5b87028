//! Dense numeric kernel: matrices, a gradient tape, Adam, dropout and a
//! finite-difference gradient checker. Everything runs in `f64`.

mod adam;
mod gradcheck;
mod matrix;
mod tape;

use rand::Rng;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use matrix::{dot, norm, Matrix};
pub use tape::{cosine, sigmoid, Gradients, Segments, Tape, Var, COSINE_EPS, PROB_CLAMP};

use crate::error::{Error, Result};

/// Inverted dropout. In training mode each entry is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; otherwise the input is
/// returned untouched.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} must be in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let scale = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.dropout_with_scale(x, scale)
}
