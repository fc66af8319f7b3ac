use thiserror::Error;

use super::{AutodiffError, NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function is not finite at coordinate {coord} (offset {offset:e})")]
    NonFinite { coord: usize, offset: f64 },
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the leaf holding `x` and returns the scalar
/// output node. The result is the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, AutodiffError>,
{
    if !(step > 0.0) {
        return Err(GradCheckError::BadStep(step));
    }
    let eval = |point: &Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point.clone());
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(GradCheckError::NonFinite { coord: 0, offset: 0.0 });
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(leaf, x);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(&plus)?;
        if !fp.is_finite() {
            return Err(GradCheckError::NonFinite { coord: i, offset: step });
        }
        let fm = eval(&minus)?;
        if !fm.is_finite() {
            return Err(GradCheckError::NonFinite { coord: i, offset: -step });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
