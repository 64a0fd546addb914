use std::collections::BTreeMap;

use super::codebook::{Codebook, CodebookConfig, CodebookMode};
use super::vq::QuantizeResult;
use crate::error::{Error, Result};

/// Per-batch assignment statistics: how many sub-vectors each atom slice
/// received and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaAssignments {
    config: CodebookConfig,
    /// `n_c x K`.
    pub counts: Vec<f64>,
    /// `K x M`.
    pub sums: Vec<f64>,
}

impl EmaAssignments {
    pub fn new(config: &CodebookConfig) -> Self {
        EmaAssignments {
            config: *config,
            counts: vec![0.0; config.slices * config.size],
            sums: vec![0.0; config.size * config.dim],
        }
    }

    /// Whole-vector assignments, keyed by atom index.
    pub fn from_map(config: &CodebookConfig, map: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<Self> {
        let mut out = EmaAssignments::new(config);
        for (&atom, vectors) in map {
            if atom >= config.size {
                return Err(Error::Config(format!("atom index {atom} out of range")));
            }
            for v in vectors {
                if v.len() != config.dim {
                    return Err(Error::shape("EMA assigned vector", &[config.dim], &[v.len()]));
                }
                for s in 0..config.slices {
                    out.add(atom, s, &v[s * config.slice_dim()..(s + 1) * config.slice_dim()]);
                }
            }
        }
        Ok(out)
    }

    /// Adds one sub-vector to atom `atom`, slice `slice`.
    pub fn add(&mut self, atom: usize, slice: usize, sub: &[f64]) {
        let (m, d) = (self.config.dim, self.config.slice_dim());
        self.counts[slice * self.config.size + atom] += 1.0;
        let row = &mut self.sums[atom * m + slice * d..atom * m + (slice + 1) * d];
        row.iter_mut().zip(sub).for_each(|(r, v)| *r += v);
    }

    /// Accumulates the pre-quantization grid under the transmitted indices.
    pub fn accumulate(&mut self, grid: &[f64], result: &QuantizeResult) -> Result<()> {
        if grid.len() != result.cells * self.config.dim || result.slices != self.config.slices {
            return Err(Error::shape(
                "EMA grid",
                &[result.cells, self.config.dim],
                &[grid.len()],
            ));
        }
        let (m, d) = (self.config.dim, self.config.slice_dim());
        for c in 0..result.cells {
            for s in 0..result.slices {
                let idx = result.index(c, s) as usize;
                self.add(idx, s, &grid[c * m + s * d..c * m + (s + 1) * d]);
            }
        }
        Ok(())
    }
}

/// One EMA step: `N <- gN + (1-g)n`, `m <- gm + (1-g)sum`, atom = `m / N` where `N > 0`.
pub fn ema_update(codebook: &mut Codebook, assignments: &EmaAssignments) -> Result<()> {
    if codebook.mode() != CodebookMode::Ema {
        return Err(Error::State("EMA update requires EMA codebook mode".into()));
    }
    let cfg = *codebook.config();
    if assignments.config != cfg {
        return Err(Error::Config("EMA assignments built for a different codebook".into()));
    }
    let gamma = codebook.ema.decay;
    let (k, m, d) = (cfg.size, cfg.dim, cfg.slice_dim());
    for s in 0..cfg.slices {
        for i in 0..k {
            let ci = s * k + i;
            let n = gamma * codebook.ema.counts[ci] + (1.0 - gamma) * assignments.counts[ci];
            codebook.ema.counts[ci] = n;
            let range = i * m + s * d..i * m + (s + 1) * d;
            for j in range.clone() {
                codebook.ema.sums[j] = gamma * codebook.ema.sums[j] + (1.0 - gamma) * assignments.sums[j];
            }
            if n > 0.0 {
                for j in range {
                    codebook.atoms.value.data_mut()[j] = codebook.ema.sums[j] / n;
                }
            }
        }
    }
    Ok(())
}

impl Codebook {
    pub fn ema_update(&mut self, assignments: &EmaAssignments) -> Result<()> {
        ema_update(self, assignments)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::slice_quantize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ema_book(atoms: Vec<f64>, k: usize, m: usize, decay: f64) -> Codebook {
        let mut cb = Codebook::from_atoms(CodebookConfig::new(k, m).with_decay(decay), atoms).unwrap();
        cb.set_mode(CodebookMode::Ema);
        cb
    }

    #[test]
    fn requires_ema_mode() {
        let mut cb = Codebook::from_atoms(CodebookConfig::new(1, 1), vec![0.0]).unwrap();
        let a = EmaAssignments::new(cb.config());
        assert!(matches!(cb.ema_update(&a), Err(Error::State(_))));
    }

    #[test]
    fn zero_decay_gives_assignment_mean() {
        let mut cb = ema_book(vec![0.0, 0.0, 5.0, 5.0], 2, 2, 0.0);
        let map = BTreeMap::from([(1, vec![vec![1.0, 2.0], vec![3.0, 6.0]])]);
        cb.ema_update(&EmaAssignments::from_map(cb.config(), &map).unwrap()).unwrap();
        assert_eq!(cb.atom(1), &[2.0, 4.0]);
        assert_eq!(cb.atom(0), &[0.0, 0.0]);
    }

    #[test]
    fn unassigned_atom_with_history_is_unchanged() {
        let mut cb = ema_book(vec![0.0, 0.0], 1, 2, 0.9);
        let first = BTreeMap::from([(0, vec![vec![1.0, 3.0]])]);
        cb.ema_update(&EmaAssignments::from_map(cb.config(), &first).unwrap()).unwrap();
        let before = cb.atom(0).to_vec();
        cb.ema_update(&EmaAssignments::new(cb.config())).unwrap();
        let after = cb.atom(0);
        assert!(before.iter().zip(after).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn two_steps_follow_the_recurrence() {
        // Unrolled by hand with g = 0.5, assignments {[2], [4]} each step:
        // N1 = 0.5*0 + 0.5*2 = 1,   m1 = 0.5*6 = 3,        atom = 3
        // N2 = 0.5*1 + 0.5*2 = 1.5, m2 = 0.5*3 + 0.5*6 = 4.5, atom = 3
        // A second set {[10]} on step two instead: N2 = 0.5 + 0.5 = 1, m2 = 1.5 + 5 = 6.5
        let mut cb = ema_book(vec![0.0], 1, 1, 0.5);
        let a = EmaAssignments::from_map(cb.config(), &BTreeMap::from([(0, vec![vec![2.0], vec![4.0]])])).unwrap();
        cb.ema_update(&a).unwrap();
        assert_eq!((cb.ema.counts[0], cb.ema.sums[0], cb.atom(0)[0]), (1.0, 3.0, 3.0));
        let mut twice = cb.clone();
        twice.ema_update(&a).unwrap();
        assert_eq!((twice.ema.counts[0], twice.ema.sums[0], twice.atom(0)[0]), (1.5, 4.5, 3.0));
        let b = EmaAssignments::from_map(cb.config(), &BTreeMap::from([(0, vec![vec![10.0]])])).unwrap();
        cb.ema_update(&b).unwrap();
        assert_eq!((cb.ema.counts[0], cb.ema.sums[0], cb.atom(0)[0]), (1.0, 6.5, 6.5));
    }

    #[test]
    fn atoms_equal_sums_over_counts() {
        let mut cb = ema_book(vec![0.0, 0.0, 1.0, 1.0, 4.0, 4.0], 3, 2, 0.8);
        let grid = [0.1, 0.2, 0.9, 1.2, 1.1, 0.8, 3.0, 5.0, 0.0, -0.1];
        for _ in 0..5 {
            let r = slice_quantize(&grid, &cb).unwrap();
            let mut a = EmaAssignments::new(cb.config());
            a.accumulate(&grid, &r).unwrap();
            cb.ema_update(&a).unwrap();
            for i in 0..3 {
                let n = cb.ema.counts[i];
                if n > 0.0 {
                    for j in 0..2 {
                        assert!((cb.atom(i)[j] - cb.ema.sums[i * 2 + j] / n).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn entering_ema_mode_resets_statistics() {
        let mut cb = ema_book(vec![0.0], 1, 1, 0.5);
        cb.ema.counts[0] = 3.0;
        cb.set_mode(CodebookMode::Gradient);
        cb.set_mode(CodebookMode::Ema);
        assert_eq!(cb.ema.counts[0], 0.0);
    }

    fn lloyd(points: &[[f64; 2]], init: &[[f64; 2]], iters: usize) -> Vec<[f64; 2]> {
        let mut c = init.to_vec();
        for _ in 0..iters {
            let mut sum = vec![[0.0; 2]; c.len()];
            let mut n = vec![0usize; c.len()];
            for p in points {
                let best = (0..c.len())
                    .min_by(|&a, &b| {
                        let da = (p[0] - c[a][0]).powi(2) + (p[1] - c[a][1]).powi(2);
                        let db = (p[0] - c[b][0]).powi(2) + (p[1] - c[b][1]).powi(2);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                sum[best][0] += p[0];
                sum[best][1] += p[1];
                n[best] += 1;
            }
            for i in 0..c.len() {
                if n[i] > 0 {
                    c[i] = [sum[i][0] / n[i] as f64, sum[i][1] / n[i] as f64];
                }
            }
        }
        c
    }

    #[test]
    fn full_batch_ema_converges_to_kmeans() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centers = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]];
        let points: Vec<[f64; 2]> = (0..300)
            .map(|i| {
                let c = centers[i % 3];
                [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
            })
            .collect();
        let init = [points[0], points[1], points[2]];
        let oracle = lloyd(&points, &init, 100);

        let mut cb = ema_book(init.iter().flatten().copied().collect(), 3, 2, 0.99);
        let grid: Vec<f64> = points.iter().flatten().copied().collect();
        for _ in 0..500 {
            let r = slice_quantize(&grid, &cb).unwrap();
            let mut a = EmaAssignments::new(cb.config());
            a.accumulate(&grid, &r).unwrap();
            cb.ema_update(&a).unwrap();
        }
        for i in 0..3 {
            for j in 0..2 {
                assert!((cb.atom(i)[j] - oracle[i][j]).abs() < 1e-2, "atom {i}: {:?} vs {:?}", cb.atom(i), oracle[i]);
            }
        }
    }
}
