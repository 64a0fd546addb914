//! Federated averaging baseline on raw samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::partition::{partition_labels, PartitionScheme};
use super::sim::PartitionLabel;
use crate::datasets::GroupedDataset;
use crate::downstream::{gather_rows, Activation, Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedAvgConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub partition: PartitionScheme,
    pub partition_label: PartitionLabel,
    pub seed: u64,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        FedAvgConfig {
            clients: 10,
            rounds: 20,
            local_epochs: 1,
            batch_size: 50,
            lr: 0.1,
            hidden: vec![128],
            activation: Activation::Relu,
            partition: PartitionScheme::Iid,
            partition_label: PartitionLabel::Content,
            seed: 0,
        }
    }
}

impl FedAvgConfig {
    fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            hidden: self.hidden.clone(),
            activation: self.activation,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        self.classifier().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgReport {
    /// Test accuracy after every round.
    pub accuracy: Vec<f64>,
    pub model_bytes: u64,
    pub model_params: u64,
    /// Measured traffic: every client downloads and uploads the model once per round.
    pub communication_bytes: u64,
    /// The same traffic in parameter units, `2 * N_C * N_M * N_E`.
    pub communication_params: u64,
}

impl FedAvgReport {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(0.0)
    }
}

fn flat(data: &GroupedDataset) -> Result<Tensor> {
    let d = data.samples().item_len();
    data.samples().clone().reshape(&[data.len(), d])
}

/// Plain SGD over one shard. The batch order depends on `(seed, round,
/// epoch)` and not on the client.
fn local_update(
    model: &mut Classifier,
    x: &Tensor,
    labels: &[usize],
    config: &FedAvgConfig,
    round: usize,
) -> Result<()> {
    let bs = config.batch_size.min(labels.len());
    for epoch in 0..config.local_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ ((round as u64) << 20) ^ epoch as u64);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(bs) {
            let y = vec![idx.iter().map(|&i| labels[i]).collect::<Vec<_>>()];
            model.zero_grad();
            let loss = model.backward_batch(&gather_rows(x, idx)?, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: round, loss });
            }
            sgd_step(&mut model.params_mut(), config.lr)?;
        }
    }
    model.clear_cache();
    Ok(())
}

/// Runs federated averaging of a content classifier over `clients` shards
/// of `train`, evaluating on `test` after every round.
pub fn run_fedavg(train: &GroupedDataset, test: &GroupedDataset, config: &FedAvgConfig) -> Result<(Classifier, FedAvgReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("fedavg training data"));
    }
    let parts = partition_labels(config.partition_label.labels(train), config.partition, config.clients, config.seed)?;
    let shards: Vec<GroupedDataset> =
        parts.shards.iter().filter(|s| !s.is_empty()).map(|s| train.subset(s)).collect::<Result<_>>()?;
    run_fedavg_shards(&shards, test, config)
}

/// FedAvg over explicit client shards; `config.clients` and the partition
/// settings are ignored.
pub fn run_fedavg_shards(
    clients: &[GroupedDataset],
    test: &GroupedDataset,
    config: &FedAvgConfig,
) -> Result<(Classifier, FedAvgReport)> {
    config.validate()?;
    let first = clients.first().ok_or(Error::Empty("fedavg clients"))?;
    if test.is_empty() {
        return Err(Error::Empty("fedavg test data"));
    }
    let shards: Vec<(Tensor, Vec<usize>)> =
        clients.iter().map(|d| Ok((flat(d)?, d.content_labels().to_vec()))).collect::<Result<_>>()?;
    let total: usize = shards.iter().map(|s| s.1.len()).sum();
    let classes = clients.iter().map(|d| d.content_classes()).max().unwrap_or(0).max(test.content_classes());
    let mut global = Classifier::new(first.samples().item_len(), &[classes], &config.classifier())?;
    let model_bytes = global.to_bytes().len() as u64;
    let model_params = global.parameter_count() as u64;
    let x_test = flat(test)?;
    let mut accuracy = Vec::with_capacity(config.rounds);
    let mut communication_bytes = 0;
    let mut communication_params = 0;
    for round in 0..config.rounds {
        let mut avg: Vec<Vec<f64>> = global.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        for (x, y) in &shards {
            let mut local = global.clone();
            local_update(&mut local, x, y, config, round)?;
            let w = y.len() as f64 / total as f64;
            for (a, p) in avg.iter_mut().zip(local.params()) {
                a.iter_mut().zip(p.value.data()).for_each(|(a, v)| *a += w * v);
            }
            communication_bytes += 2 * model_bytes;
            communication_params += 2 * model_params;
        }
        for (p, a) in global.params_mut().into_iter().zip(avg) {
            p.value.data_mut().copy_from_slice(&a);
        }
        accuracy.push(global.accuracy(&x_test, test.content_labels(), 0)?);
    }
    Ok((global, FedAvgReport { accuracy, model_bytes, model_params, communication_bytes, communication_params }))
}
