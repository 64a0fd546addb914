//! Closed-form communication costs for federated learning, split learning
//! and the latent-code protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cost-model inputs, in abstract units (bytes or parameter counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelParams {
    /// Clients.
    pub n_c: f64,
    /// Model size.
    pub n_m: f64,
    /// Dataset size (samples).
    pub n_d: f64,
    /// Epochs / communication rounds.
    pub n_e: f64,
    /// Latent size per sample.
    pub n_z: f64,
    /// Smashed-layer size per sample.
    pub n_s: f64,
    /// Share of the model held by clients in split learning.
    pub eta: f64,
    /// Codebook synchronizations.
    pub pi: f64,
    /// Codebook traffic per synchronization.
    pub n_b: f64,
    /// Downloaded trained-model size.
    pub n_a: f64,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("N_C", self.n_c),
            ("N_M", self.n_m),
            ("N_D", self.n_d),
            ("N_E", self.n_e),
            ("N_Z", self.n_z),
            ("N_S", self.n_s),
            ("eta", self.eta),
            ("pi", self.pi),
            ("N_B", self.n_b),
            ("N_A", self.n_a),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("cost parameter {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `2 * N_C * N_M * N_E`
pub fn cost_fl(p: &CostModelParams) -> Result<f64> {
    p.validate()?;
    Ok(2.0 * p.n_c * p.n_m * p.n_e)
}

/// `(2 * N_S * N_D + eta * N_C * N_M) * N_E`
pub fn cost_split(p: &CostModelParams) -> Result<f64> {
    p.validate()?;
    Ok((2.0 * p.n_s * p.n_d + p.eta * p.n_c * p.n_m) * p.n_e)
}

/// `N_D * N_Z + N_M + pi * N_B + N_A`
pub fn cost_octopus(p: &CostModelParams) -> Result<f64> {
    p.validate()?;
    Ok(p.n_d * p.n_z + p.n_m + p.pi * p.n_b + p.n_a)
}

/// `rho = cost_fl / cost_split`.
pub fn efficiency_ratio(p: &CostModelParams) -> Result<f64> {
    let split = cost_split(p)?;
    if split == 0.0 {
        return Err(Error::Config("efficiency ratio undefined: split-learning cost is zero".into()));
    }
    Ok(cost_fl(p)? / split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let p = CostModelParams { n_c: 2.0, n_m: 10.0, n_e: 3.0, ..Default::default() };
        assert_eq!(cost_fl(&p).unwrap(), 120.0);
        let p = CostModelParams { n_s: 1.0, n_d: 5.0, eta: 0.5, n_c: 2.0, n_m: 10.0, n_e: 2.0, ..Default::default() };
        assert_eq!(cost_split(&p).unwrap(), 40.0);
        let p = CostModelParams { n_d: 100.0, n_z: 2.0, n_m: 10.0, pi: 3.0, n_b: 4.0, n_a: 10.0, ..Default::default() };
        assert_eq!(cost_octopus(&p).unwrap(), 232.0);
    }

    #[test]
    fn ratio_needs_a_nonzero_split_cost() {
        assert!(efficiency_ratio(&CostModelParams { n_c: 1.0, n_m: 1.0, n_e: 1.0, ..Default::default() }).is_err());
        let p = CostModelParams { n_s: 1.0, n_d: 5.0, eta: 0.5, n_c: 2.0, n_m: 10.0, n_e: 2.0, ..Default::default() };
        assert_eq!(efficiency_ratio(&p).unwrap(), 80.0 / 40.0);
    }

    #[test]
    fn negative_parameters_are_rejected() {
        assert!(cost_fl(&CostModelParams { n_c: -1.0, ..Default::default() }).is_err());
        assert!(cost_octopus(&CostModelParams { n_a: f64::NAN, ..Default::default() }).is_err());
    }
}
