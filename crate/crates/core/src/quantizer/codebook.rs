use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tensor};

/// Shape and structure of a codebook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    /// Number of atoms, `K`.
    #[serde(rename = "K")]
    pub size: usize,
    /// Atom dimension, `M`.
    #[serde(rename = "M")]
    pub dim: usize,
    /// Number of atom groups, `G`; 1 disables group quantization.
    #[serde(rename = "G", default = "one")]
    pub groups: usize,
    /// Number of slices each atom is cut into along `M`, `n_c`.
    #[serde(rename = "n_c", default = "one")]
    pub slices: usize,
    /// EMA decay for codebook statistics.
    #[serde(rename = "gamma_ema", default = "default_decay")]
    pub ema_decay: f64,
}

fn one() -> usize {
    1
}

fn default_decay() -> f64 {
    0.99
}

impl CodebookConfig {
    pub fn new(size: usize, dim: usize) -> Self {
        CodebookConfig {
            size,
            dim,
            groups: 1,
            slices: 1,
            ema_decay: default_decay(),
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_slices(mut self, slices: usize) -> Self {
        self.slices = slices;
        self
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.ema_decay = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("codebook needs at least one atom".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("atom dimension must be >= 1".into()));
        }
        if self.groups == 0 || self.size % self.groups != 0 {
            return Err(Error::Config(format!(
                "group count G={} must divide K={}",
                self.groups, self.size
            )));
        }
        if self.slices == 0 || self.dim % self.slices != 0 {
            return Err(Error::Config(format!(
                "slice count n_c={} must divide M={}",
                self.slices, self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "EMA decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        Ok(())
    }

    /// Atoms per group, `N_g = K / G`.
    pub fn group_size(&self) -> usize {
        self.size / self.groups
    }

    /// Width of one slice, `M / n_c`.
    pub fn slice_dim(&self) -> usize {
        self.dim / self.slices
    }

    /// Bits needed per transmitted index, `ceil(log2 K)`.
    pub fn bits_per_index(&self) -> u32 {
        bits_for(self.size)
    }
}

pub(crate) fn bits_for(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// How atoms are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookMode {
    /// Atoms move by the codebook term of the VQ loss.
    Gradient,
    /// Atoms follow exponential moving averages of their assigned vectors.
    Ema,
}

/// Running EMA statistics: per-atom counts `N` (one row per slice) and sums `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    /// `n_c x K`, slice-major.
    pub counts: Vec<f64>,
    /// `K x M`, same layout as the atoms.
    pub sums: Vec<f64>,
    pub decay: f64,
}

/// The shared `K x M` feature dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    config: CodebookConfig,
    pub atoms: Parameter,
    pub ema: EmaState,
    mode: CodebookMode,
}

impl Codebook {
    /// Builds a codebook from explicit atoms (row-major `K x M`).
    pub fn from_atoms(config: CodebookConfig, atoms: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if atoms.len() != config.size * config.dim {
            return Err(Error::shape(
                "codebook atoms",
                &[config.size, config.dim],
                &[atoms.len()],
            ));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook atoms must be finite".into()));
        }
        let value = Tensor::from_vec(&[config.size, config.dim], atoms)?;
        Ok(Codebook {
            ema: EmaState {
                counts: vec![0.0; config.slices * config.size],
                sums: vec![0.0; config.size * config.dim],
                decay: config.ema_decay,
            },
            atoms: Parameter::new("codebook.atoms", value),
            config,
            mode: CodebookMode::Gradient,
        })
    }

    /// Samples `K` distinct seed vectors as the initial atoms.
    pub fn init_from_seeds(config: CodebookConfig, seeds: &[Vec<f64>], rng_seed: u64) -> Result<Self> {
        config.validate()?;
        if seeds.len() < config.size {
            return Err(Error::Config(format!(
                "need at least K={} seed vectors, got {}",
                config.size,
                seeds.len()
            )));
        }
        if let Some(bad) = seeds.iter().find(|s| s.len() != config.dim) {
            return Err(Error::shape("codebook seed vector", &[config.dim], &[bad.len()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let picks = rand::seq::index::sample(&mut rng, seeds.len(), config.size);
        let atoms = picks.iter().flat_map(|i| seeds[i].iter().copied()).collect();
        Codebook::from_atoms(config, atoms)
    }

    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn mode(&self) -> CodebookMode {
        self.mode
    }

    /// Switches the trainer. Entering EMA mode starts from empty statistics.
    pub fn set_mode(&mut self, mode: CodebookMode) {
        if mode == CodebookMode::Ema && self.mode != CodebookMode::Ema {
            self.reset_ema();
        }
        self.mode = mode;
    }

    pub fn reset_ema(&mut self) {
        self.ema.counts.fill(0.0);
        self.ema.sums.fill(0.0);
    }

    pub fn atom(&self, index: usize) -> &[f64] {
        let m = self.config.dim;
        &self.atoms.value.data()[index * m..(index + 1) * m]
    }

    /// Slice `slice` of atom `index`.
    pub fn sub_atom(&self, index: usize, slice: usize) -> &[f64] {
        let (m, d) = (self.config.dim, self.config.slice_dim());
        let start = index * m + slice * d;
        &self.atoms.value.data()[start..start + d]
    }

    /// Order-sensitive FNV-1a digest of the atom bits, for freeze checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.atoms.value.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_per_index_is_ceil_log2() {
        let bits: Vec<u32> = [1, 2, 3, 4, 10, 16, 17, 256, 257, 512]
            .iter()
            .map(|&k| bits_for(k))
            .collect();
        assert_eq!(bits, vec![0, 1, 2, 2, 4, 4, 5, 8, 9, 9]);
    }

    #[test]
    fn config_rejects_non_dividing_groups_and_slices() {
        assert!(CodebookConfig::new(10, 4).with_groups(3).validate().is_err());
        assert!(CodebookConfig::new(10, 4).with_slices(3).validate().is_err());
        assert!(CodebookConfig::new(10, 4).with_groups(5).with_slices(2).validate().is_ok());
    }

    #[test]
    fn init_with_all_seeds_is_a_permutation() {
        let seeds: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
        let cb = Codebook::init_from_seeds(CodebookConfig::new(6, 2), &seeds, 9).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| cb.atom(i).to_vec()).collect();
        rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(rows, seeds);
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let seeds: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 * 0.1; 64]).collect();
        let a = Codebook::init_from_seeds(CodebookConfig::new(10, 64), &seeds, 5).unwrap();
        let b = Codebook::init_from_seeds(CodebookConfig::new(10, 64), &seeds, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.atoms.value.shape(), &[10, 64]);
    }

    #[test]
    fn init_requires_enough_seeds() {
        let seeds = vec![vec![0.0; 2]; 3];
        assert!(Codebook::init_from_seeds(CodebookConfig::new(4, 2), &seeds, 0).is_err());
    }
}
