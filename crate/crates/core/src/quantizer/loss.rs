use super::vq::QuantizeResult;
use crate::error::{Error, Result};

/// Default weight of the codebook term.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Default weight of the commitment term.
pub const DEFAULT_BETA: f64 = 0.25;

/// The two VQ penalty terms, already scaled by their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLoss {
    pub codebook: f64,
    pub commitment: f64,
}

impl VqLoss {
    pub fn total(&self) -> f64 {
        self.codebook + self.commitment
    }
}

fn check(z_e: &[f64], result: &QuantizeResult) -> Result<()> {
    if z_e.len() != result.quantized.len() {
        return Err(Error::shape("vq loss input", &[result.cells, result.dim], &[z_e.len()]));
    }
    if result.cells == 0 {
        return Err(Error::Empty("vq loss grid"));
    }
    Ok(())
}

/// Mean over cells of the squared distance between `z_e` and its quantization.
pub fn mean_sq_distance(z_e: &[f64], result: &QuantizeResult) -> Result<f64> {
    check(z_e, result)?;
    let s: f64 = z_e
        .iter()
        .zip(&result.quantized)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / result.cells as f64)
}

pub fn vq_loss(z_e: &[f64], result: &QuantizeResult, alpha: f64, beta: f64) -> Result<VqLoss> {
    let d = mean_sq_distance(z_e, result)?;
    Ok(VqLoss {
        codebook: alpha * d,
        commitment: beta * d,
    })
}

/// Gradients of [`vq_loss`] under the stop-gradient contract: the returned
/// vector is the commitment gradient w.r.t. `z_e`; the codebook gradient is
/// added into `atom_grad` (`K x M`).
pub fn vq_loss_grads(
    z_e: &[f64],
    result: &QuantizeResult,
    alpha: f64,
    beta: f64,
    atom_grad: &mut [f64],
) -> Result<Vec<f64>> {
    check(z_e, result)?;
    let scale = 2.0 / result.cells as f64;
    let diff: Vec<f64> = z_e.iter().zip(&result.quantized).map(|(a, b)| a - b).collect();
    if alpha != 0.0 {
        let to_atoms: Vec<f64> = diff.iter().map(|d| -alpha * scale * d).collect();
        result.scatter_to_atoms(&to_atoms, atom_grad);
    }
    Ok(diff.iter().map(|d| beta * scale * d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{slice_quantize, Codebook, CodebookConfig};

    fn one_cell() -> (Codebook, QuantizeResult) {
        let cb = Codebook::from_atoms(CodebookConfig::new(1, 2), vec![0.0, 0.0]).unwrap();
        let r = slice_quantize(&[1.0, 0.0], &cb).unwrap();
        (cb, r)
    }

    #[test]
    fn unit_offset_gives_unit_losses() {
        let (_, r) = one_cell();
        let l = vq_loss(&[1.0, 0.0], &r, 1.0, 1.0).unwrap();
        assert_eq!((l.codebook, l.commitment), (1.0, 1.0));
    }

    #[test]
    fn exact_quantization_has_zero_loss() {
        let cb = Codebook::from_atoms(CodebookConfig::new(2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let z = [2.0, 3.0, 0.0, 1.0];
        let r = slice_quantize(&z, &cb).unwrap();
        assert_eq!(vq_loss(&z, &r, 1.0, 0.25).unwrap().total(), 0.0);
    }

    #[test]
    fn alpha_scales_only_codebook_term() {
        let (_, r) = one_cell();
        let a = vq_loss(&[1.0, 0.0], &r, 0.7, 0.3).unwrap();
        let b = vq_loss(&[1.0, 0.0], &r, 1.4, 0.3).unwrap();
        assert_eq!(b.codebook, 2.0 * a.codebook);
        assert_eq!(b.commitment, a.commitment);
    }

    #[test]
    fn stop_gradient_contract() {
        let (_, r) = one_cell();
        let mut atoms = vec![0.0; 2];
        let g = vq_loss_grads(&[1.0, 0.0], &r, 1.0, 0.0, &mut atoms).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert_eq!(atoms, vec![-2.0, 0.0]);

        let mut atoms = vec![0.0; 2];
        let g = vq_loss_grads(&[1.0, 0.0], &r, 0.0, 1.0, &mut atoms).unwrap();
        assert_eq!(g, vec![2.0, 0.0]);
        assert_eq!(atoms, vec![0.0, 0.0]);
    }

    #[test]
    fn atom_gradient_matches_finite_difference() {
        let cfg = CodebookConfig::new(3, 2);
        let atoms = vec![0.1, -0.2, 0.9, 0.4, -0.5, 0.7];
        let z = [0.3, 0.1, 0.8, 0.8, -0.6, 0.2, 0.0, 0.0];
        let cb = Codebook::from_atoms(cfg, atoms.clone()).unwrap();
        let r = slice_quantize(&z, &cb).unwrap();
        let mut grad = vec![0.0; 6];
        vq_loss_grads(&z, &r, 1.3, 0.0, &mut grad).unwrap();
        for i in 0..6 {
            let eval = |delta: f64| {
                let mut a = atoms.clone();
                a[i] += delta;
                let cb = Codebook::from_atoms(cfg, a).unwrap();
                let mut fixed = r.clone();
                fixed.quantized = (0..r.cells)
                    .flat_map(|c| cb.atom(r.index(c, 0) as usize).to_vec())
                    .collect();
                vq_loss(&z, &fixed, 1.3, 0.0).unwrap().codebook
            };
            let h = 1e-5;
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((numeric - grad[i]).abs() < 1e-8, "atom coord {i}: {numeric} vs {}", grad[i]);
        }
    }
}
