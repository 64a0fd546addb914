use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{from_cells, to_cells, DvqaeModel};
use crate::datasets::{GroupedDataset, SampleGroup};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, Parameter, Tensor};
use crate::quantizer::{init_codebook, slice_quantize, CodebookMode, EmaAssignments, QuantizeResult};

/// Loss broken into its terms (already weighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reconstruction: f64,
    /// Zero unless the codebook is trained by gradient.
    pub codebook: f64,
    pub commitment: f64,
    pub latent: f64,
    pub total: f64,
}

/// Dense group id per sample and the size of each group.
pub(crate) fn group_ids(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen: Vec<usize> = Vec::new();
    let mut ids = Vec::with_capacity(labels.len());
    let mut sizes = Vec::new();
    for &l in labels {
        let id = match seen.iter().position(|&s| s == l) {
            Some(i) => i,
            None => {
                seen.push(l);
                sizes.push(0);
                seen.len() - 1
            }
        };
        sizes[id] += 1;
        ids.push(id);
    }
    (ids, sizes)
}

/// Latent-stage values shared by the loss and its gradient.
pub(crate) struct LatentStage {
    pub n_cells: Vec<f64>,
    pub result: QuantizeResult,
    pub dec_in: Tensor,
    pub ids: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl DvqaeModel {
    /// Quantizes `n`, forms the per-group private vectors from `h` and the
    /// decoder input `z_q + Z∘`.
    pub(crate) fn latent_stage(&self, h: &Tensor, n: &Tensor, groups: &[usize]) -> Result<LatentStage> {
        let b = h.batch();
        if groups.len() != b {
            return Err(Error::shape("group labels", &[b], &[groups.len()]));
        }
        let (m, hw) = (self.latent_dim(), self.cells_per_sample());
        let n_cells = to_cells(n);
        let h_cells = to_cells(h);
        let result = slice_quantize(&n_cells, &self.codebook)?;
        let (ids, sizes) = group_ids(groups);
        let mut private = vec![vec![0.0; m]; sizes.len()];
        for s in 0..b {
            let acc = &mut private[ids[s]];
            for p in 0..hw {
                let row = (s * hw + p) * m;
                for c in 0..m {
                    acc[c] += h_cells[row + c] - result.quantized[row + c];
                }
            }
        }
        for (acc, &size) in private.iter_mut().zip(&sizes) {
            acc.iter_mut().for_each(|v| *v /= (size * hw) as f64);
        }
        let mut dec = result.quantized.clone();
        for s in 0..b {
            for p in 0..hw {
                let row = (s * hw + p) * m;
                dec[row..row + m].iter_mut().zip(&private[ids[s]]).for_each(|(d, v)| *d += v);
            }
        }
        let (gh, gw) = self.grid();
        Ok(LatentStage {
            dec_in: from_cells(&dec, b, m, gh, gw)?,
            n_cells,
            result,
            ids,
            sizes,
        })
    }

    fn components(&self, x: &Tensor, xhat: &Tensor, stage: &LatentStage) -> LossComponents {
        let recon = xhat.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
        let cells = stage.result.cells as f64;
        let dist = stage
            .n_cells
            .iter()
            .zip(&stage.result.quantized)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / cells;
        let w = self.config.weights;
        let codebook = if self.codebook.mode() == CodebookMode::Gradient { w.alpha * dist } else { 0.0 };
        let commitment = w.beta * dist;
        let latent = w.lambda * dist;
        LossComponents {
            reconstruction: recon,
            codebook,
            commitment,
            latent,
            total: recon + codebook + commitment + latent,
        }
    }

    /// Loss of a batch whose samples are grouped by `groups` (private labels).
    pub fn batch_loss(&self, x: &Tensor, groups: &[usize]) -> Result<LossComponents> {
        let h = self.encode_raw(x)?;
        let n = self.norm.infer(&h)?;
        let stage = self.latent_stage(&h, &n, groups)?;
        let xhat = self.decoder.infer(&stage.dec_in)?;
        Ok(self.components(x, &xhat, &stage))
    }

    /// Loss of one same-private-class group.
    pub fn total_loss(&self, group: &SampleGroup) -> Result<LossComponents> {
        if group.is_empty() {
            return Err(Error::Empty("sample group"));
        }
        self.batch_loss(&group.samples, &vec![group.private_class; group.len()])
    }

    /// Forward and backward pass. Gradients are accumulated into the network
    /// parameters and, when the codebook trains by gradient, into the atoms.
    pub(crate) fn loss_and_backward(&mut self, x: &Tensor, groups: &[usize]) -> Result<(LossComponents, LatentStage)> {
        let h = self.encoder.forward(x)?;
        let n = self.norm.forward(&h)?;
        let stage = self.latent_stage(&h, &n, groups)?;
        let xhat = self.decoder.forward(&stage.dec_in)?;
        let comps = self.components(x, &xhat, &stage);

        let scale = 2.0 / x.len() as f64;
        let g_xhat = Tensor::from_vec(
            xhat.shape(),
            xhat.data().iter().zip(x.data()).map(|(a, b)| scale * (a - b)).collect(),
        )?;
        let g_dec = to_cells(&self.decoder.backward(&g_xhat)?);

        let (m, hw, b) = (self.latent_dim(), self.cells_per_sample(), x.batch());
        let cells = stage.result.cells as f64;
        let w = self.config.weights;
        let diff: Vec<f64> = stage.n_cells.iter().zip(&stage.result.quantized).map(|(a, q)| a - q).collect();
        // Straight-through copy plus the commitment and latent pulls on IN(h).
        let pull = 2.0 * (w.beta + w.lambda) / cells;
        let g_n: Vec<f64> = g_dec.iter().zip(&diff).map(|(g, d)| g + pull * d).collect();

        // The private vector is a group mean of h, so each cell of h in a
        // group receives the group's summed decoder gradient over its size.
        let mut group_sum = vec![vec![0.0; m]; stage.sizes.len()];
        for s in 0..b {
            for p in 0..hw {
                let row = (s * hw + p) * m;
                group_sum[stage.ids[s]].iter_mut().zip(&g_dec[row..row + m]).for_each(|(a, g)| *a += g);
            }
        }
        let mut g_h_private = vec![0.0; g_dec.len()];
        for s in 0..b {
            let denom = (stage.sizes[stage.ids[s]] * hw) as f64;
            for p in 0..hw {
                let row = (s * hw + p) * m;
                for c in 0..m {
                    g_h_private[row + c] = group_sum[stage.ids[s]][c] / denom;
                }
            }
        }
        let (gh, gw) = self.grid();
        let mut g_h = self.norm.backward(&from_cells(&g_n, b, m, gh, gw)?)?;
        g_h.add_assign(&from_cells(&g_h_private, b, m, gh, gw)?)?;
        self.encoder.backward(&g_h)?;

        if self.codebook.mode() == CodebookMode::Gradient {
            let coef = -2.0 * (w.alpha + w.lambda) / cells;
            let to_atoms: Vec<f64> = diff.iter().map(|d| coef * d).collect();
            stage.result.scatter_to_atoms(&to_atoms, self.codebook.atoms.grad.data_mut());
        }
        Ok((comps, stage))
    }

    /// Seeds the atoms with distinct normalized encoder cells from `data`.
    pub fn init_codebook_from_data(&mut self, data: &GroupedDataset, max_samples: usize, seed: u64) -> Result<()> {
        let take: Vec<usize> = (0..data.len().min(max_samples.max(1))).collect();
        let n = self.encode(&data.batch(&take)?)?;
        let cells = to_cells(&n);
        let seeds: Vec<Vec<f64>> = cells.chunks(self.latent_dim()).map(|c| c.to_vec()).collect();
        let mode = self.codebook.mode();
        self.codebook = init_codebook(&seeds, self.config.codebook, seed)?;
        self.codebook.set_mode(mode);
        Ok(())
    }
}

/// Minibatch training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Re-seed the atoms from encoded training cells before the first step.
    pub init_codebook_from_data: bool,
    /// Samples used to measure the loss before and after training.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 100,
            lr: 0.001,
            seed: 0,
            init_codebook_from_data: true,
            eval_samples: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Per-step minibatch losses.
    pub losses: Vec<LossComponents>,
    /// Loss on the evaluation samples before the first step.
    pub initial_loss: f64,
    /// Loss on the same samples after the last step.
    pub final_loss: f64,
}

/// Which parts move during local fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    /// Codebook frozen; encoder, norm and decoder train.
    EncoderDecoderOnly,
    /// Only the codebook moves, by EMA.
    CodebookEmaOnly,
    /// Network by gradient, codebook by EMA.
    Both,
}

/// Endless shuffled minibatches over a dataset.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    size: usize,
}

impl Batches {
    fn new(len: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Batches { order, pos: 0, rng, size: size.min(len) }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

fn eval_loss(model: &DvqaeModel, data: &GroupedDataset, limit: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len().min(limit.max(1))).collect();
    let x = data.batch(&idx)?;
    let groups: Vec<usize> = idx.iter().map(|&i| data.private_labels()[i]).collect();
    Ok(model.batch_loss(&x, &groups)?.total)
}

fn ema_step(model: &mut DvqaeModel, stage: &LatentStage) -> Result<()> {
    let mut a = EmaAssignments::new(model.codebook.config());
    a.accumulate(&stage.n_cells, &stage.result)?;
    model.codebook.ema_update(&a)
}

/// One optimization step on a minibatch.
fn step(model: &mut DvqaeModel, x: &Tensor, groups: &[usize], lr: f64, network: bool, codebook: bool) -> Result<LossComponents> {
    model.zero_grad();
    let (comps, stage) = model.loss_and_backward(x, groups)?;
    if network {
        let mut params = model.network_params_mut();
        adam_step(&mut params, lr)?;
    }
    if codebook {
        match model.codebook.mode() {
            CodebookMode::Gradient => {
                let mut p: [&mut Parameter; 1] = [&mut model.codebook.atoms];
                adam_step(&mut p, lr)?;
            }
            CodebookMode::Ema => ema_step(model, &stage)?,
        }
    }
    model.zero_grad();
    Ok(comps)
}

/// Trains the initial global model on `data` with Adam, grouping each
/// minibatch by private label.
pub fn train_global(model: &mut DvqaeModel, data: &GroupedDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("global training data"));
    }
    if data.item_shape() != model.input_shape() {
        return Err(Error::shape("training samples", model.input_shape(), data.item_shape()));
    }
    if config.steps == 0 {
        let loss = eval_loss(model, data, config.eval_samples)?;
        return Ok(TrainReport { steps: 0, losses: vec![], initial_loss: loss, final_loss: loss });
    }
    if config.init_codebook_from_data {
        model.init_codebook_from_data(data, 1000, config.seed ^ 0xC0DE)?;
    }
    let initial_loss = eval_loss(model, data, config.eval_samples)?;
    let mut batches = Batches::new(data.len(), config.batch_size, config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for s in 0..config.steps {
        let idx = batches.next_batch();
        let x = data.batch(&idx)?;
        let groups: Vec<usize> = idx.iter().map(|&i| data.private_labels()[i]).collect();
        let comps = step(model, &x, &groups, config.lr, true, true)?;
        if !comps.total.is_finite() {
            return Err(Error::Diverged { step: s, loss: comps.total });
        }
        losses.push(comps);
    }
    model.encoder.clear_cache();
    model.decoder.clear_cache();
    model.norm.clear_cache();
    let final_loss = eval_loss(model, data, config.eval_samples)?;
    Ok(TrainReport { steps: config.steps, losses, initial_loss, final_loss })
}

/// Local fine-tuning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { epochs: 1, batch_size: 100, lr: 0.001, seed: 0 }
    }
}

/// One-shot local fine-tuning over `epochs` passes of the local shard.
pub fn fine_tune_local(
    model: &mut DvqaeModel,
    data: &GroupedDataset,
    mode: FineTuneMode,
    config: &FineTuneConfig,
) -> Result<TrainReport> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("local fine-tuning data"));
    }
    if data.item_shape() != model.input_shape() {
        return Err(Error::shape("fine-tuning samples", model.input_shape(), data.item_shape()));
    }
    let initial_loss = eval_loss(model, data, 500)?;
    let (network, codebook) = match mode {
        FineTuneMode::EncoderDecoderOnly => (true, false),
        FineTuneMode::CodebookEmaOnly => (false, true),
        FineTuneMode::Both => (true, true),
    };
    if codebook {
        model.codebook.set_mode(CodebookMode::Ema);
    }
    let size = config.batch_size.min(data.len());
    let per_epoch = data.len().div_ceil(size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(size).take(per_epoch) {
            let x = data.batch(chunk)?;
            let groups: Vec<usize> = chunk.iter().map(|&i| data.private_labels()[i]).collect();
            let comps = if network {
                step(model, &x, &groups, config.lr, true, codebook)?
            } else {
                let h = model.encode_raw(&x)?;
                let n = model.norm.infer(&h)?;
                let stage = model.latent_stage(&h, &n, &groups)?;
                ema_step(model, &stage)?;
                LossComponents::default()
            };
            if !comps.total.is_finite() {
                return Err(Error::Diverged { step: losses.len(), loss: comps.total });
            }
            losses.push(comps);
        }
    }
    model.encoder.clear_cache();
    model.decoder.clear_cache();
    model.norm.clear_cache();
    let final_loss = eval_loss(model, data, 500)?;
    Ok(TrainReport { steps: losses.len(), losses, initial_loss, final_loss })
}
