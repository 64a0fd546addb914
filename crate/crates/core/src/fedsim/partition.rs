//! Splitting a dataset across nodes: IID, single-class, or partly sorted.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::GroupedDataset;
use crate::error::{Error, Result};

pub const DEFAULT_MODERATE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    /// One class per shard; with fewer nodes than classes, classes are dealt
    /// round-robin.
    NoniidWorst,
    /// `fraction` of the data is dealt out sorted by label, the rest uniformly.
    NoniidModerate { fraction: f64 },
}

impl PartitionScheme {
    pub fn moderate() -> Self {
        PartitionScheme::NoniidModerate { fraction: DEFAULT_MODERATE_FRACTION }
    }
}

/// Sample indices per node, plus how many were dealt in label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub label_sorted: usize,
}

/// Splits `0..labels.len()` into `nodes` disjoint shards.
pub fn partition_labels(labels: &[usize], scheme: PartitionScheme, nodes: usize, seed: u64) -> Result<Partition> {
    if nodes == 0 {
        return Err(Error::Config("partition needs at least one node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..labels.len()).collect();
    all.shuffle(&mut rng);
    let mut shards = vec![Vec::new(); nodes];
    let mut label_sorted = 0;
    match scheme {
        PartitionScheme::Iid => deal_uniform(&all, &mut shards, 0),
        PartitionScheme::NoniidWorst => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &all {
                by_class.entry(labels[i]).or_default().push(i);
            }
            label_sorted = labels.len();
            let classes: Vec<Vec<usize>> = by_class.into_values().collect();
            if nodes <= classes.len() || classes.is_empty() {
                for (c, members) in classes.into_iter().enumerate() {
                    shards[c % nodes].extend(members);
                }
            } else {
                // Spare nodes go to whichever class currently has the most samples per node.
                let mut owners = vec![1usize; classes.len()];
                for _ in classes.len()..nodes {
                    let c = (0..classes.len())
                        .max_by(|&a, &b| {
                            let ra = classes[a].len() as f64 / owners[a] as f64;
                            let rb = classes[b].len() as f64 / owners[b] as f64;
                            ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
                        })
                        .unwrap();
                    owners[c] += 1;
                }
                let mut next = 0;
                for (members, n) in classes.iter().zip(owners) {
                    for (j, chunk) in even_chunks(members, n).into_iter().enumerate() {
                        shards[next + j].extend_from_slice(chunk);
                    }
                    next += n;
                }
            }
        }
        PartitionScheme::NoniidModerate { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!("moderate non-IID fraction must lie in [0, 1], got {fraction}")));
            }
            let k = (fraction * labels.len() as f64).round() as usize;
            let (sorted, rest) = all.split_at(k);
            let mut sorted = sorted.to_vec();
            sorted.sort_by_key(|&i| (labels[i], i));
            for (node, chunk) in even_chunks(&sorted, nodes).into_iter().enumerate() {
                shards[node].extend_from_slice(chunk);
            }
            deal_uniform(rest, &mut shards, 0);
            label_sorted = k;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition { shards, label_sorted })
}

fn deal_uniform(items: &[usize], shards: &mut [Vec<usize>], start: usize) {
    let n = shards.len();
    for (j, &i) in items.iter().enumerate() {
        shards[(start + j) % n].push(i);
    }
}

/// `n` contiguous chunks whose sizes differ by at most one.
fn even_chunks(items: &[usize], n: usize) -> Vec<&[usize]> {
    let (base, extra) = (items.len() / n, items.len() % n);
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for j in 0..n {
        let len = base + usize::from(j < extra);
        out.push(&items[at..at + len]);
        at += len;
    }
    out
}

/// Partitions by private label and materializes the shards.
pub fn partition(dataset: &GroupedDataset, scheme: PartitionScheme, nodes: usize, seed: u64) -> Result<Vec<GroupedDataset>> {
    partition_labels(dataset.private_labels(), scheme, nodes, seed)?
        .shards
        .iter()
        .map(|s| dataset.subset(s))
        .collect()
}
