//! Central finite-difference gradient checks for layer stacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerStack, Tensor};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Coordinates checked per parameter tensor; larger tensors are strided.
const MAX_COORDS_PER_TENSOR: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Name of the parameter (or `input`) where the maximum occurred.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn strided(len: usize) -> impl Iterator<Item = usize> {
    let step = len.div_ceil(MAX_COORDS_PER_TENSOR).max(1);
    (0..len).step_by(step)
}

/// Compares analytic gradients of `sum(output * r)` for a fixed random `r`
/// against central finite differences, for every parameter and the input.
pub fn finite_diff_check(stack: &mut LayerStack, input: &Tensor, tolerance: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
        tolerance,
    };
    let Ok(out) = stack.forward(input) else {
        report.max_relative_error = f64::INFINITY;
        report.worst = "forward failed".into();
        return report;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream = Tensor::from_vec(out.shape(), weights.clone()).expect("same shape");
    let base_pattern = stack.relu_pattern();

    stack.zero_grad();
    let input_grad = match stack.backward(&upstream) {
        Ok(g) => g,
        Err(_) => {
            report.max_relative_error = f64::INFINITY;
            report.worst = "backward failed".into();
            return report;
        }
    };
    let analytic: Vec<Vec<f64>> = stack.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let names: Vec<String> = stack.params().iter().map(|p| p.name.clone()).collect();

    let objective = |stack: &mut LayerStack, x: &Tensor| -> Option<(f64, Vec<bool>)> {
        let y = stack.forward(x).ok()?;
        let value = y.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Some((value, stack.relu_pattern()))
    };
    let record = |report: &mut GradCheckReport, name: &str, a: f64, n: f64| {
        let err = relative_error(a, n);
        report.checked += 1;
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = name.to_string();
        }
    };

    for (pi, name) in names.iter().enumerate() {
        for i in strided(analytic[pi].len()) {
            let original = stack.params()[pi].value.data()[i];
            stack.params_mut()[pi].value.data_mut()[i] = original + FD_STEP;
            let plus = objective(stack, input);
            stack.params_mut()[pi].value.data_mut()[i] = original - FD_STEP;
            let minus = objective(stack, input);
            stack.params_mut()[pi].value.data_mut()[i] = original;
            match (plus, minus) {
                (Some((lp, pp)), Some((lm, pm))) if pp == base_pattern && pm == base_pattern => {
                    let numeric = (lp - lm) / (2.0 * FD_STEP);
                    record(&mut report, name, analytic[pi][i], numeric);
                }
                _ => report.skipped += 1,
            }
        }
    }

    let mut x = input.clone();
    for i in strided(x.len()) {
        let original = x.data()[i];
        x.data_mut()[i] = original + FD_STEP;
        let plus = objective(stack, &x);
        x.data_mut()[i] = original - FD_STEP;
        let minus = objective(stack, &x);
        x.data_mut()[i] = original;
        match (plus, minus) {
            (Some((lp, pp)), Some((lm, pm))) if pp == base_pattern && pm == base_pattern => {
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                record(&mut report, "input", input_grad.data()[i], numeric);
            }
            _ => report.skipped += 1,
        }
    }

    // Leave the caches consistent with the unperturbed input.
    let _ = stack.forward(input);
    stack.zero_grad();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LayerSpec;

    #[test]
    fn relative_error_uses_floor_for_tiny_gradients() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / RELATIVE_FLOOR);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn affine_stack_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stack = LayerStack::new(
            &[5],
            vec![
                LayerSpec::Affine { inputs: 5, outputs: 4 },
                LayerSpec::Affine { inputs: 4, outputs: 3 },
            ],
            &mut rng,
        )
        .unwrap();
        let x = Tensor::from_vec(&[2, 5], (0..10).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let report = finite_diff_check(&mut stack, &x, 1e-6);
        assert!(report.passed(), "{report:?}");
    }
}
