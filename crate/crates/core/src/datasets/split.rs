use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grouped::GroupedDataset;
use crate::error::{Error, Result};

/// Fractions of the three-way split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Held-out test share of the whole dataset.
    pub test: f64,
    /// Share of the training part reserved for global initialization.
    pub atd: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test: 0.2, atd: 0.15 }
    }
}

/// Minimum dataset size accepted by [`split`].
pub const MIN_SPLIT_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// Training data distributed over the nodes.
    pub nodes: GroupedDataset,
    /// Data used to train the initial global model.
    pub atd: GroupedDataset,
    pub test: GroupedDataset,
    /// Indices into the source dataset of `nodes`, `atd` and `test`.
    pub indices: [Vec<usize>; 3],
}

/// Stratified (by content label) test / ATD / node split.
pub fn split(dataset: &GroupedDataset, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    if dataset.len() < MIN_SPLIT_SIZE {
        return Err(Error::Config(format!(
            "dataset of {} samples is below the minimum of {MIN_SPLIT_SIZE}",
            dataset.len()
        )));
    }
    if !(0.0..1.0).contains(&spec.test) || !(0.0..1.0).contains(&spec.atd) {
        return Err(Error::Config("split fractions must lie in [0, 1)".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in dataset.content_labels().iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut nodes, mut atd, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_test = (spec.test * idx.len() as f64).round() as usize;
        let rest = idx.len() - n_test;
        let n_atd = (spec.atd * rest as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        atd.extend_from_slice(&idx[n_test..n_test + n_atd]);
        nodes.extend_from_slice(&idx[n_test + n_atd..]);
    }
    for part in [&mut nodes, &mut atd, &mut test] {
        part.sort_unstable();
    }
    if nodes.is_empty() || atd.is_empty() || test.is_empty() {
        return Err(Error::Config("split produced an empty part".into()));
    }
    Ok(Splits {
        nodes: dataset.subset(&nodes)?,
        atd: dataset.subset(&atd)?,
        test: dataset.subset(&test)?,
        indices: [nodes, atd, test],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn data(n: usize) -> GroupedDataset {
        let x = Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        GroupedDataset::new(x, (0..n).map(|i| i % 2).collect(), (0..n).map(|i| i % 5).collect()).unwrap()
    }

    #[test]
    fn thousand_samples_split_200_120_680() {
        let s = split(&data(1000), &SplitSpec::default(), 1).unwrap();
        assert_eq!((s.test.len(), s.atd.len(), s.nodes.len()), (200, 120, 680));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let d = data(537);
        let a = split(&d, &SplitSpec::default(), 9).unwrap();
        let b = split(&d, &SplitSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.indices.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..537).collect::<Vec<_>>());
        for (part, idx) in [(&a.nodes, &a.indices[0]), (&a.atd, &a.indices[1]), (&a.test, &a.indices[2])] {
            for (k, &i) in idx.iter().enumerate() {
                assert_eq!(part.sample(k), d.sample(i));
            }
        }
    }

    #[test]
    fn stratification_within_one_sample_per_class() {
        let d = data(1001);
        let s = split(&d, &SplitSpec::default(), 2).unwrap();
        for c in 0..2 {
            let total = d.content_labels().iter().filter(|&&l| l == c).count() as f64;
            let te = s.test.content_labels().iter().filter(|&&l| l == c).count() as f64;
            assert!((te - 0.2 * total).abs() <= 1.0);
        }
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(split(&data(99), &SplitSpec::default(), 0).is_err());
    }
}
