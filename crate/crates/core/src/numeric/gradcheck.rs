//! Central finite differences, used as the independent oracle for analytic
//! gradients.

use super::Tensor;
use crate::error::Result;

/// Norms below this are compared absolutely rather than relatively.
pub const NORM_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` with respect to `inputs[which]`.
pub fn numerical_gradient<F>(inputs: &[Tensor], which: usize, step: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut grad = vec![0.0; n];
    for (k, slot) in grad.iter_mut().enumerate() {
        let orig = work[which].data()[k];
        work[which].data_mut()[k] = orig + step;
        let plus = f(&work)?;
        work[which].data_mut()[k] = orig - step;
        let minus = f(&work)?;
        work[which].data_mut()[k] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    Tensor::new(inputs[which].shape().to_vec(), grad)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / analytic.l2_norm().max(numeric.l2_norm()).max(NORM_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub count: usize,
    pub relative_error: f64,
    /// Elements left out because the step straddles a non-differentiable point.
    pub excluded: usize,
    pub passed: bool,
}
