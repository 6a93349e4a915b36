//! Forget-set objectives built on the pooled next-token loss.
//!
//! Each function returns `(objective, ntp)` so callers can log the underlying
//! next-token loss next to the value being optimized.

use rand_chacha::ChaCha8Rng;

use super::ForgetLoss;
use crate::error::{Error, Result};
use crate::model::{BoundParams, EncodedExample, ModelState};
use crate::tensor::{Tape, Var};

fn check(alpha: f64, epsilon: f64) -> Result<()> {
    if !(alpha > 0.0 && epsilon > 0.0) {
        return Err(Error::Config(format!(
            "alpha and epsilon must be positive, got {alpha} and {epsilon}"
        )));
    }
    Ok(())
}

/// `α / (L_ntp + ε)` recorded on the tape.
pub fn eul_from_ntp(tape: &mut Tape, ntp: Var, alpha: f64, epsilon: f64) -> Result<Var> {
    check(alpha, epsilon)?;
    let shifted = tape.add_scalar(ntp, epsilon)?;
    let inv = tape.recip(shifted)?;
    tape.scale(inv, alpha)
}

/// Reciprocal unlearning loss: large while the model still reproduces the
/// forget outputs, small once it does not. Its gradient is the next-token
/// gradient times `−α / (L_ntp + ε)²`.
pub fn eul_loss(
    model: &ModelState,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &[EncodedExample],
    alpha: f64,
    epsilon: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    check(alpha, epsilon)?;
    let ntp = model.ntp_loss(tape, bound, batch, dropout_rng)?;
    Ok((eul_from_ntp(tape, ntp, alpha, epsilon)?, ntp))
}

/// The reciprocal loss squared, `α` included inside the square.
pub fn eul_squared_loss(
    model: &ModelState,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &[EncodedExample],
    alpha: f64,
    epsilon: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let (eul, ntp) = eul_loss(model, tape, bound, batch, alpha, epsilon, dropout_rng)?;
    Ok((tape.square(eul)?, ntp))
}

/// Gradient-ascent baseline: `−L_ntp`.
pub fn grad_ascent_loss(
    model: &ModelState,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &[EncodedExample],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let ntp = model.ntp_loss(tape, bound, batch, dropout_rng)?;
    Ok((tape.scale(ntp, -1.0)?, ntp))
}

/// Dispatches on the configured forget objective.
#[allow(clippy::too_many_arguments)]
pub fn forget_objective(
    kind: ForgetLoss,
    model: &ModelState,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &[EncodedExample],
    alpha: f64,
    epsilon: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    match kind {
        ForgetLoss::Eul => eul_loss(model, tape, bound, batch, alpha, epsilon, dropout_rng),
        ForgetLoss::EulSquared => {
            eul_squared_loss(model, tape, bound, batch, alpha, epsilon, dropout_rng)
        }
        ForgetLoss::GradAscent => grad_ascent_loss(model, tape, bound, batch, dropout_rng),
        ForgetLoss::Ntp => {
            let ntp = model.ntp_loss(tape, bound, batch, dropout_rng)?;
            Ok((ntp, ntp))
        }
    }
}

/// Factor `|d L_EUL / d L_ntp| = α / (L + ε)²` that scales the next-token gradient.
pub fn eul_gradient_multiplier(ntp: f64, alpha: f64, epsilon: f64) -> f64 {
    alpha / ((ntp + epsilon) * (ntp + epsilon))
}
