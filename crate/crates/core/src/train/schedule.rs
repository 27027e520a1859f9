use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Linear warm-up to `peak` over `warmup` steps, then inverse square-root
/// decay. Steps are 1-based.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("lr_schedule", "steps are counted from 1"));
    }
    if warmup == 0 {
        return Err(Error::invalid(
            "lr_schedule",
            "warmup_steps must be at least 1",
        ));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(if step <= warmup {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    })
}

fn check_weight(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(
            "multitask_loss",
            format!("enhancement weight {lambda} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// `(1 − λ)·MSE(fused, clean) + λ·MSE(enh, enh_target)` recorded on the tape.
///
/// The first term stands in for the recognition objective and the second for
/// the enhancement objective; both are reconstruction losses here.
pub fn multitask_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fused: Var,
    clean: Var,
    enh: Var,
    enh_target: Var,
    lambda: f64,
) -> Result<Var> {
    check_weight(lambda)?;
    let main = tape.mse(fused, clean)?;
    let aux = tape.mse(enh, enh_target)?;
    let main = tape.scale(main, T::from_f64_lossy(1.0 - lambda));
    let aux = tape.scale(aux, T::from_f64_lossy(lambda));
    tape.add(main, aux)
}

/// Scalar form of [`multitask_loss`] given the two term values.
pub fn combine_losses(fused_term: f64, enh_term: f64, lambda: f64) -> Result<f64> {
    check_weight(lambda)?;
    Ok((1.0 - lambda) * fused_term + lambda * enh_term)
}
