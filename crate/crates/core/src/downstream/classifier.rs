//! Dense multi-head classifiers trained with softmax cross-entropy and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, put_u16, put_u32, Reader};
use crate::datasets::GroupedDataset;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, LayerSpec, LayerStack, Parameter, Tensor};
use crate::quantizer::Codebook;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Widths of the shared trunk; empty means each head is a single affine map.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![128],
            activation: Activation::Relu,
            steps: 500,
            batch_size: 100,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("classifier batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("classifier lr must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("classifier hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Shared trunk feeding one softmax head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    trunk: LayerStack,
    heads: Vec<LayerStack>,
    classes: Vec<usize>,
    hidden: Vec<usize>,
    activation: Activation,
}

pub const CLASSIFIER_MAGIC: &[u8; 4] = b"OCTC";
pub const CLASSIFIER_VERSION: u16 = 1;

/// Mean cross-entropy in nats and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.batch(), logits.item_len());
    if labels.len() != b {
        return Err(Error::shape("cross-entropy labels", &[b], &[labels.len()]));
    }
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Config(format!("label {y} outside {c} classes")));
        }
        let row = logits.item(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() - (row[y] - max);
        for (j, v) in row.iter().enumerate() {
            grad[i * c + j] = ((v - max).exp() / z - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::from_vec(&[b, c], grad)?))
}

/// Lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Classifier {
    pub fn new(inputs: usize, classes: &[usize], config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        if inputs == 0 || classes.is_empty() || classes.contains(&0) {
            return Err(Error::Config("classifier needs inputs and at least one non-empty head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut specs = vec![];
        let mut width = inputs;
        for &h in &config.hidden {
            specs.push(LayerSpec::Affine { inputs: width, outputs: h });
            specs.push(match config.activation {
                Activation::Relu => LayerSpec::Relu,
                Activation::Sigmoid => LayerSpec::Sigmoid,
            });
            width = h;
        }
        let trunk = LayerStack::with_prefix("trunk.", &[inputs], specs, &mut rng)?;
        let heads = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                LayerStack::with_prefix(&format!("head{i}."), &[width], vec![LayerSpec::Affine { inputs: width, outputs: c }], &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Classifier {
            trunk,
            heads,
            classes: classes.to_vec(),
            hidden: config.hidden.clone(),
            activation: config.activation,
        })
    }

    /// Magic, version, layout (inputs, hidden widths, activation, head
    /// sizes) as little-endian u32s, then every parameter value as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLASSIFIER_MAGIC);
        put_u16(&mut out, CLASSIFIER_VERSION);
        put_u32(&mut out, self.inputs() as u32);
        put_u32(&mut out, self.hidden.len() as u32);
        for &h in &self.hidden {
            put_u32(&mut out, h as u32);
        }
        put_u32(&mut out, match self.activation {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
        });
        put_u32(&mut out, self.classes.len() as u32);
        for &c in &self.classes {
            put_u32(&mut out, c as u32);
        }
        for p in self.params() {
            put_f64s(&mut out, p.value.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CLASSIFIER_MAGIC)?;
        let at = r.offset();
        let version = r.u16("classifier version")?;
        if version != CLASSIFIER_VERSION {
            return Err(Error::format(at, format!("unsupported classifier version {version}")));
        }
        let at = r.offset();
        let inputs = r.u32("classifier inputs")? as usize;
        let hidden = (0..r.u32("hidden count")?).map(|_| r.u32("hidden width").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let activation = match r.u32("activation")? {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            other => return Err(Error::format(r.offset() - 4, format!("unknown activation {other}"))),
        };
        let classes = (0..r.u32("head count")?).map(|_| r.u32("head size").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let config = ClassifierConfig { hidden, activation, ..Default::default() };
        let mut clf = Classifier::new(inputs, &classes, &config).map_err(|e| Error::format(at, e.to_string()))?;
        for p in clf.params_mut() {
            let values = r.f64s(p.len(), "classifier parameters")?;
            p.value.data_mut().copy_from_slice(&values);
        }
        r.finish("classifier")?;
        Ok(clf)
    }

    pub fn inputs(&self) -> usize {
        self.trunk.input_shape()[0]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.trunk.parameter_count() + self.heads.iter().map(|h| h.parameter_count()).sum::<usize>()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.trunk.params();
        for h in &self.heads {
            out.extend(h.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.trunk.params_mut();
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    /// Trunk output for a `[B, inputs]` batch.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.trunk.infer(x)
    }

    /// One head applied to its own input, which is normally the trunk output.
    pub fn head_logits(&self, head: usize, features: &Tensor) -> Result<Tensor> {
        self.heads
            .get(head)
            .ok_or_else(|| Error::Config(format!("no head {head}")))?
            .infer(features)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let f = self.embed(x)?;
        (0..self.heads.len()).map(|h| self.head_logits(h, &f)).collect()
    }

    pub fn predict(&self, x: &Tensor, head: usize) -> Result<Vec<usize>> {
        let f = self.embed(x)?;
        let logits = self.head_logits(head, &f)?;
        Ok((0..logits.batch()).map(|i| argmax(logits.item(i))).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize], head: usize) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let pred = self.predict(x, head)?;
        if pred.len() != labels.len() {
            return Err(Error::shape("accuracy labels", &[pred.len()], &[labels.len()]));
        }
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    /// Summed per-head mean cross-entropy (nats) without touching gradients.
    pub fn loss(&self, x: &Tensor, labels: &[Vec<usize>]) -> Result<f64> {
        let logits = self.logits(x)?;
        let mut total = 0.0;
        for (l, y) in logits.iter().zip(labels) {
            total += softmax_cross_entropy(l, y)?.0;
        }
        Ok(total)
    }

    /// Accumulates the gradient of the summed head losses on one batch and
    /// returns that loss.
    pub fn backward_batch(&mut self, x: &Tensor, labels: &[Vec<usize>]) -> Result<f64> {
        let f = self.trunk.forward(x)?;
        let mut g_trunk = Tensor::zeros(f.shape());
        let mut total = 0.0;
        for (head, y) in self.heads.iter_mut().zip(labels) {
            let logits = head.forward(&f)?;
            let (loss, g) = softmax_cross_entropy(&logits, y)?;
            total += loss;
            g_trunk.add_assign(&head.backward(&g)?)?;
        }
        self.trunk.backward(&g_trunk)?;
        Ok(total)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn clear_cache(&mut self) {
        self.trunk.clear_cache();
        self.heads.iter_mut().for_each(|h| h.clear_cache());
    }

    fn train_step(&mut self, x: &Tensor, labels: &[Vec<usize>], lr: f64) -> Result<f64> {
        let total = self.backward_batch(x, labels)?;
        adam_step(&mut self.params_mut(), lr)?;
        Ok(total)
    }

    /// Minibatch training over `n` samples whose features come from `batch`.
    /// `labels[h][i]` is the label of sample `i` for head `h`. Returns the
    /// loss at every step.
    pub fn fit<F>(&mut self, n: usize, batch: F, labels: &[Vec<usize>], config: &ClassifierConfig) -> Result<Vec<f64>>
    where
        F: Fn(&[usize]) -> Result<Tensor>,
    {
        config.validate()?;
        if n == 0 {
            return Err(Error::Empty("training set"));
        }
        if labels.len() != self.heads.len() {
            return Err(Error::shape("label sets", &[self.heads.len()], &[labels.len()]));
        }
        for (y, &c) in labels.iter().zip(&self.classes) {
            if y.len() != n {
                return Err(Error::shape("labels", &[n], &[y.len()]));
            }
            if let Some(bad) = y.iter().find(|&&v| v >= c) {
                return Err(Error::Config(format!("label {bad} outside {c} classes")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c1a5);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let bs = config.batch_size.min(n);
        let mut losses = Vec::with_capacity(config.steps);
        for step in 0..config.steps {
            if cursor + bs > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let x = batch(idx)?;
            let y: Vec<Vec<usize>> = labels.iter().map(|l| idx.iter().map(|&i| l[i]).collect()).collect();
            let loss = self.train_step(&x, &y, config.lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            losses.push(loss);
        }
        self.clear_cache();
        Ok(losses)
    }
}

/// Rows of a `[N, D]` tensor gathered into a new batch.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = x.item_len();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= x.batch() {
            return Err(Error::shape("row index", &[x.batch()], &[i]));
        }
        out.extend_from_slice(x.item(i));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, out)
}

/// Trains a classifier on an in-memory `[N, D]` feature matrix.
pub fn train_classifier(
    features: &Tensor,
    labels: &[Vec<usize>],
    classes: &[usize],
    config: &ClassifierConfig,
) -> Result<Classifier> {
    if features.is_empty() || features.batch() == 0 {
        return Err(Error::Empty("training set"));
    }
    let flat = features.clone().reshape(&[features.batch(), features.item_len()])?;
    let mut clf = Classifier::new(flat.item_len(), classes, config)?;
    clf.fit(flat.batch(), |idx| gather_rows(&flat, idx), labels, config)?;
    Ok(clf)
}

/// How transmitted indices become classifier inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentEncoding {
    /// Each index replaced by its (sub-)atom, concatenated.
    #[default]
    AtomLookup,
    /// One `K`-wide indicator per index.
    OneHot,
}

/// Index matrix of one sample as gathered by the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub node: usize,
    pub content_label: usize,
    /// `H * W * n_c` indices, cell-major.
    pub indices: Vec<u32>,
}

/// Everything the server has gathered.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentStore {
    pub records: Vec<LatentRecord>,
}

impl LatentStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn content_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.content_label).collect()
    }
}

/// Width of the feature vector for `indices` indices per sample.
pub fn latent_feature_len(codebook: &Codebook, indices: usize, encoding: LatentEncoding) -> usize {
    let cfg = codebook.config();
    match encoding {
        LatentEncoding::AtomLookup => indices * cfg.slice_dim(),
        LatentEncoding::OneHot => indices * cfg.size,
    }
}

/// Feature matrix for a set of index vectors.
pub fn latent_features(codebook: &Codebook, rows: &[&[u32]], encoding: LatentEncoding) -> Result<Tensor> {
    let cfg = codebook.config();
    let per = rows.first().map(|r| r.len()).ok_or(Error::Empty("latent rows"))?;
    if per == 0 || per % cfg.slices != 0 {
        return Err(Error::shape("latent row", &[cfg.slices], &[per]));
    }
    let d = latent_feature_len(codebook, per, encoding);
    let mut out = vec![0.0; rows.len() * d];
    for (r, row) in rows.iter().enumerate() {
        if row.len() != per {
            return Err(Error::shape("latent row", &[per], &[row.len()]));
        }
        let dst = &mut out[r * d..(r + 1) * d];
        for (k, &i) in row.iter().enumerate() {
            let i = i as usize;
            if i >= cfg.size {
                return Err(Error::Protocol(format!("index {i} outside codebook of {}", cfg.size)));
            }
            match encoding {
                LatentEncoding::AtomLookup => {
                    let sd = cfg.slice_dim();
                    dst[k * sd..(k + 1) * sd].copy_from_slice(codebook.sub_atom(i, k % cfg.slices));
                }
                LatentEncoding::OneHot => dst[k * cfg.size + i] = 1.0,
            }
        }
    }
    Tensor::from_vec(&[rows.len(), d], out)
}

/// Features of selected store records.
pub fn store_features(store: &LatentStore, codebook: &Codebook, idx: &[usize], encoding: LatentEncoding) -> Result<Tensor> {
    let rows: Vec<&[u32]> = idx
        .iter()
        .map(|&i| store.records.get(i).map(|r| r.indices.as_slice()).ok_or(Error::Empty("latent record")))
        .collect::<Result<_>>()?;
    latent_features(codebook, &rows, encoding)
}

/// Multi-task classifier over gathered index matrices. Features are built
/// per batch, so the store is never expanded in full.
pub fn train_latent_classifier(
    store: &LatentStore,
    codebook: &Codebook,
    encoding: LatentEncoding,
    labels: &[Vec<usize>],
    classes: &[usize],
    config: &ClassifierConfig,
) -> Result<Classifier> {
    let first = store.records.first().ok_or(Error::Empty("latent store"))?;
    let d = latent_feature_len(codebook, first.indices.len(), encoding);
    let mut clf = Classifier::new(d, classes, config)?;
    clf.fit(store.len(), |idx| store_features(store, codebook, idx, encoding), labels, config)?;
    Ok(clf)
}

/// Accuracy of head `head` on store records, evaluated in chunks.
pub fn latent_accuracy(
    clf: &Classifier,
    store: &LatentStore,
    codebook: &Codebook,
    encoding: LatentEncoding,
    labels: &[usize],
    head: usize,
) -> Result<f64> {
    if store.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..store.len()).collect();
    for chunk in all.chunks(256) {
        let x = store_features(store, codebook, chunk, encoding)?;
        let pred = clf.predict(&x, head)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| labels[i] == *p).count();
    }
    Ok(correct as f64 / store.len() as f64)
}

/// Centralized baseline: the same classifier on flattened raw samples with
/// content labels as the single task.
pub fn train_raw_baseline(dataset: &GroupedDataset, config: &ClassifierConfig) -> Result<Classifier> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let d = dataset.samples().item_len();
    let x = dataset.samples().clone().reshape(&[dataset.len(), d])?;
    train_classifier(&x, &[dataset.content_labels().to_vec()], &[dataset.content_classes()], config)
}

/// Content accuracy of a raw-data classifier.
pub fn raw_accuracy(clf: &Classifier, dataset: &GroupedDataset) -> Result<f64> {
    let d = dataset.samples().item_len();
    let x = dataset.samples().clone().reshape(&[dataset.len(), d])?;
    clf.accuracy(&x, dataset.content_labels(), 0)
}
