//! Finite-difference check of the full loss gradient against a
//! differentiable surrogate in which quantization choices are frozen.

use super::model::{from_cells, to_cells, DvqaeModel};
use crate::numerics::{relative_error, GradCheckReport, Parameter, Tensor, FD_STEP};
use crate::quantizer::{CodebookMode, QuantizeResult};

const MAX_COORDS_PER_TENSOR: usize = 64;

struct Frozen {
    result: QuantizeResult,
    n0: Vec<f64>,
    zq0: Vec<f64>,
    ids: Vec<usize>,
    sizes: Vec<usize>,
}

fn all_params_mut(model: &mut DvqaeModel, with_atoms: bool) -> Vec<&mut Parameter> {
    let mut out = model.encoder.params_mut();
    out.extend(model.norm.params_mut());
    out.extend(model.decoder.params_mut());
    if with_atoms {
        out.push(&mut model.codebook.atoms);
    }
    out
}

/// Surrogate loss: indices and blend weights frozen, stop-gradients replaced
/// by the frozen values, straight-through written as `n + (z_q0 - n0)`.
fn surrogate(model: &mut DvqaeModel, x: &Tensor, f: &Frozen) -> Option<(f64, Vec<bool>)> {
    let h = model.encoder.forward(x).ok()?;
    let n = model.norm.infer(&h).ok()?;
    let (m, hw, b) = (model.latent_dim(), model.cells_per_sample(), x.batch());
    let (h_cells, n_cells) = (to_cells(&h), to_cells(&n));
    let zq = f.result.requantize(&model.codebook);

    let mut private = vec![vec![0.0; m]; f.sizes.len()];
    for s in 0..b {
        for p in 0..hw {
            let row = (s * hw + p) * m;
            for c in 0..m {
                private[f.ids[s]][c] += h_cells[row + c] - f.zq0[row + c];
            }
        }
    }
    for (acc, &size) in private.iter_mut().zip(&f.sizes) {
        acc.iter_mut().for_each(|v| *v /= (size * hw) as f64);
    }
    let mut dec = vec![0.0; n_cells.len()];
    for s in 0..b {
        for p in 0..hw {
            let row = (s * hw + p) * m;
            for c in 0..m {
                dec[row + c] = n_cells[row + c] + (f.zq0[row + c] - f.n0[row + c]) + private[f.ids[s]][c];
            }
        }
    }
    let (gh, gw) = model.grid();
    let xhat = model.decoder.forward(&from_cells(&dec, b, m, gh, gw).ok()?).ok()?;
    let recon = xhat.data().iter().zip(x.data()).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / x.len() as f64;
    let cells = f.result.cells as f64;
    let sq = |a: &[f64], q: &[f64]| a.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / cells;
    let w = model.config.weights;
    let codebook = if model.codebook.mode() == CodebookMode::Gradient { w.alpha * sq(&f.n0, &zq) } else { 0.0 };
    let value = recon + codebook + w.beta * sq(&n_cells, &f.zq0) + w.lambda * sq(&n_cells, &zq);
    let mut pattern = model.encoder.relu_pattern();
    pattern.extend(model.decoder.relu_pattern());
    Some((value, pattern))
}

/// Compares the analytic gradient of the total loss with central finite
/// differences of the surrogate for every network parameter and, when the
/// codebook trains by gradient, the atoms. Coordinates whose perturbation
/// flips a ReLU are skipped.
pub fn total_loss_gradcheck(model: &mut DvqaeModel, x: &Tensor, groups: &[usize], tolerance: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
        tolerance,
    };
    let fail = |mut r: GradCheckReport, why: &str| {
        r.max_relative_error = f64::INFINITY;
        r.worst = why.to_string();
        r
    };
    let with_atoms = model.codebook.mode() == CodebookMode::Gradient;
    model.zero_grad();
    let stage = match model.loss_and_backward(x, groups) {
        Ok((_, stage)) => stage,
        Err(e) => return fail(report, &format!("backward failed: {e}")),
    };
    let analytic: Vec<(String, Vec<f64>)> = all_params_mut(model, with_atoms)
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    model.zero_grad();
    let frozen = Frozen {
        zq0: stage.result.quantized.clone(),
        n0: stage.n_cells,
        result: stage.result,
        ids: stage.ids,
        sizes: stage.sizes,
    };
    let Some((_, base_pattern)) = surrogate(model, x, &frozen) else {
        return fail(report, "surrogate failed");
    };

    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let stride = grad.len().div_ceil(MAX_COORDS_PER_TENSOR).max(1);
        for i in (0..grad.len()).step_by(stride) {
            let original = all_params_mut(model, with_atoms)[pi].value.data()[i];
            all_params_mut(model, with_atoms)[pi].value.data_mut()[i] = original + FD_STEP;
            let plus = surrogate(model, x, &frozen);
            all_params_mut(model, with_atoms)[pi].value.data_mut()[i] = original - FD_STEP;
            let minus = surrogate(model, x, &frozen);
            all_params_mut(model, with_atoms)[pi].value.data_mut()[i] = original;
            match (plus, minus) {
                (Some((lp, pp)), Some((lm, pm))) if pp == base_pattern && pm == base_pattern => {
                    let numeric = (lp - lm) / (2.0 * FD_STEP);
                    let err = relative_error(grad[i], numeric);
                    report.checked += 1;
                    if err > report.max_relative_error || err.is_nan() {
                        report.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
                        report.worst = format!("{name}[{i}]");
                    }
                }
                _ => report.skipped += 1,
            }
        }
    }
    model.encoder.clear_cache();
    model.decoder.clear_cache();
    model.norm.clear_cache();
    report
}
