//! In-process simulation of the protocol: global init, distribution, local
//! fine-tuning, codebook synchronization, latent collection, downstream
//! training and model download.

use serde::{Deserialize, Serialize};

use super::cost::CostModelParams;
use super::ledger::OverheadLedger;
use super::partition::{partition_labels, PartitionScheme};
use super::wire::{decode_records, encode_record, record_len, Endpoint, MessageKind, WireMessage};
use crate::datasets::GroupedDataset;
use crate::downstream::{
    latent_accuracy, train_latent_classifier, Classifier, ClassifierConfig, LatentEncoding, LatentRecord, LatentStore,
};
use crate::dvqae::{fine_tune_local, train_global, DvqaeConfig, DvqaeModel, FineTuneConfig, FineTuneMode, TrainConfig};
use crate::error::{Error, Result};
use crate::quantizer::{Codebook, CodebookMode};

/// Samples per LATENT_BATCH message.
pub const UPLOAD_BATCH: usize = 100;

/// Which label drives non-IID partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionLabel {
    #[default]
    Private,
    Content,
}

impl PartitionLabel {
    pub fn labels(self, data: &GroupedDataset) -> &[usize] {
        match self {
            PartitionLabel::Private => data.private_labels(),
            PartitionLabel::Content => data.content_labels(),
        }
    }
}

/// Assumptions used only for the FL and split-learning predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineCosts {
    /// Training rounds for FL and split learning.
    pub epochs: f64,
    /// Client share of the model in split learning.
    pub eta: f64,
}

impl Default for BaselineCosts {
    fn default() -> Self {
        BaselineCosts { epochs: 100.0, eta: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OctopusConfig {
    pub nodes: usize,
    pub partition: PartitionScheme,
    pub partition_label: PartitionLabel,
    pub global: TrainConfig,
    pub fine_tune_mode: FineTuneMode,
    pub fine_tune: FineTuneConfig,
    /// Codebook synchronization rounds (`pi`); 0 disables the phase.
    pub sync_period: usize,
    pub classifier: ClassifierConfig,
    pub encoding: LatentEncoding,
    pub download_model: bool,
    pub baseline_costs: BaselineCosts,
    pub seed: u64,
}

impl Default for OctopusConfig {
    fn default() -> Self {
        OctopusConfig {
            nodes: 4,
            partition: PartitionScheme::Iid,
            partition_label: PartitionLabel::Private,
            global: TrainConfig::default(),
            fine_tune_mode: FineTuneMode::Both,
            fine_tune: FineTuneConfig::default(),
            sync_period: 1,
            classifier: ClassifierConfig::default(),
            encoding: LatentEncoding::AtomLookup,
            download_model: true,
            baseline_costs: BaselineCosts::default(),
            seed: 0,
        }
    }
}

impl OctopusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Config("nodes must be >= 1".into()));
        }
        self.global.validate()?;
        self.classifier.validate()?;
        if self.fine_tune.batch_size == 0 {
            return Err(Error::Config("fine_tune.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Byte counters of one endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub uploaded: u64,
    pub downloaded: u64,
}

/// An edge node. It can only emit latent batches and codebook deltas.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    pub shard: GroupedDataset,
    pub model: DvqaeModel,
    outbox: Vec<WireMessage>,
    pub traffic: Traffic,
}

impl NodeState {
    pub fn new(id: usize, shard: GroupedDataset, model: DvqaeModel) -> Self {
        NodeState { id, shard, model, outbox: Vec::new(), traffic: Traffic::default() }
    }

    pub fn outbox(&self) -> &[WireMessage] {
        &self.outbox
    }

    fn emit(&mut self, kind: MessageKind, payload: Vec<u8>) -> WireMessage {
        let msg = WireMessage::new(kind, Endpoint::Node(self.id), Endpoint::Server, payload);
        self.traffic.uploaded += msg.size() as u64;
        self.outbox.push(msg.clone());
        msg
    }

    fn receive(&mut self, msg: &WireMessage) {
        self.traffic.downloaded += msg.size() as u64;
    }

    /// Encodes the whole shard into LATENT_BATCH payloads of packed indices.
    pub fn encode_shard(&self) -> Result<Vec<Vec<u8>>> {
        encode_payloads(&self.model, &self.shard)
    }

    pub fn upload(&mut self, payloads: Vec<Vec<u8>>) -> Vec<WireMessage> {
        payloads.into_iter().map(|p| self.emit(MessageKind::LatentBatch, p)).collect()
    }
}

/// LATENT_BATCH payloads of `data` under `model`, [`UPLOAD_BATCH`] samples each.
pub fn encode_payloads(model: &DvqaeModel, data: &GroupedDataset) -> Result<Vec<Vec<u8>>> {
    let k = model.codebook.size();
    let per = model.indices_per_sample();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    for chunk in all.chunks(UPLOAD_BATCH) {
        let q = model.quantize(&model.encode(&data.batch(chunk)?)?)?;
        let mut payload = Vec::with_capacity(chunk.len() * record_len(per, k));
        for (s, &i) in chunk.iter().enumerate() {
            encode_record(&mut payload, data.content_labels()[i], &q.indices[s * per..(s + 1) * per], k)?;
        }
        out.push(payload);
    }
    Ok(out)
}

/// The records the server would gather if `node` uploaded `data`.
pub fn encode_store(model: &DvqaeModel, data: &GroupedDataset, node: usize) -> Result<LatentStore> {
    let (per, k) = (model.indices_per_sample(), model.codebook.size());
    let mut store = LatentStore::default();
    for payload in encode_payloads(model, data)? {
        for (content_label, indices) in decode_records(&payload, per, k)? {
            store.records.push(LatentRecord { node, content_label, indices });
        }
    }
    Ok(store)
}

/// Holds the global model and index matrices only.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: DvqaeModel,
    pub store: LatentStore,
    pub codebook_version: u64,
    pub traffic: Traffic,
    pending: Vec<Codebook>,
}

impl ServerState {
    pub fn new(model: DvqaeModel) -> Self {
        ServerState { model, store: LatentStore::default(), codebook_version: 0, traffic: Traffic::default(), pending: vec![] }
    }

    /// Unpacks a latent batch into the store.
    pub fn gather(&mut self, msg: &WireMessage) -> Result<usize> {
        let Endpoint::Node(node) = msg.from() else {
            return Err(Error::Protocol("latent batch not sent by a node".into()));
        };
        if msg.kind() != MessageKind::LatentBatch {
            return Err(Error::Protocol(format!("expected LATENT_BATCH, got {}", msg.kind().name())));
        }
        self.traffic.downloaded += msg.size() as u64;
        let recs = decode_records(msg.payload(), self.model.indices_per_sample(), self.model.codebook.size())?;
        let n = recs.len();
        self.store
            .records
            .extend(recs.into_iter().map(|(content_label, indices)| LatentRecord { node, content_label, indices }));
        Ok(n)
    }

    /// Accepts one node's codebook; merged by [`ServerState::merge_codebooks`].
    pub fn accept_codebook(&mut self, msg: &WireMessage) -> Result<()> {
        if msg.kind() != MessageKind::CodebookDelta {
            return Err(Error::Protocol(format!("expected CODEBOOK_DELTA, got {}", msg.kind().name())));
        }
        let cb = Codebook::from_bytes(msg.payload())?;
        let mine = self.model.codebook.config();
        if cb.size() != mine.size || cb.dim() != mine.dim || cb.config().slices != mine.slices {
            return Err(Error::Protocol(format!(
                "codebook {}x{} does not match server {}x{}",
                cb.size(),
                cb.dim(),
                mine.size,
                mine.dim
            )));
        }
        self.traffic.downloaded += msg.size() as u64;
        self.pending.push(cb);
        Ok(())
    }

    /// Count-weighted average of every (sub-)atom across pending node
    /// codebooks; atoms no node used keep their server value. Bumps the
    /// version and returns the merged codebook.
    pub fn merge_codebooks(&mut self) -> Result<&Codebook> {
        if self.pending.is_empty() {
            return Err(Error::State("no codebooks to merge".into()));
        }
        let cfg = *self.model.codebook.config();
        let (k, m, d) = (cfg.size, cfg.dim, cfg.slice_dim());
        let mut atoms = self.model.codebook.atoms.value.data().to_vec();
        let mut counts = vec![0.0; cfg.slices * k];
        for s in 0..cfg.slices {
            for a in 0..k {
                let total: f64 = self.pending.iter().map(|cb| cb.ema.counts[s * k + a]).sum();
                counts[s * k + a] = total;
                if total <= 0.0 {
                    continue;
                }
                let dst = &mut atoms[a * m + s * d..a * m + (s + 1) * d];
                dst.fill(0.0);
                for cb in &self.pending {
                    let w = cb.ema.counts[s * k + a] / total;
                    dst.iter_mut().zip(cb.sub_atom(a, s)).for_each(|(v, x)| *v += w * x);
                }
            }
        }
        self.pending.clear();
        let cb = &mut self.model.codebook;
        cb.atoms.value.data_mut().copy_from_slice(&atoms);
        cb.ema.counts = counts;
        for a in 0..k {
            for s in 0..cfg.slices {
                let n = cb.ema.counts[s * k + a];
                for j in s * d..(s + 1) * d {
                    cb.ema.sums[a * m + j] = n * atoms[a * m + j];
                }
            }
        }
        self.codebook_version += 1;
        Ok(&self.model.codebook)
    }

    fn broadcast(&mut self, kind: MessageKind, payload: Vec<u8>) -> WireMessage {
        let msg = WireMessage::new(kind, Endpoint::Server, Endpoint::Broadcast, payload);
        self.traffic.uploaded += msg.size() as u64;
        msg
    }
}

/// One node's codebook goes to the server as a CODEBOOK_DELTA.
pub fn codebook_sync(node: &mut NodeState, server: &mut ServerState) -> Result<WireMessage> {
    if node.model.codebook.mode() != CodebookMode::Ema {
        return Err(Error::State(format!("node {} codebook is not in EMA mode", node.id)));
    }
    let msg = node.emit(MessageKind::CodebookDelta, node.model.codebook.to_bytes());
    server.accept_codebook(&msg)?;
    Ok(msg)
}

/// Nodes adopt merged atoms; their EMA statistics are rebuilt from the
/// merged counts so the next update continues from the merged state.
fn adopt_codebook(node: &mut NodeState, merged: &Codebook) {
    let cb = &mut node.model.codebook;
    cb.atoms.value.data_mut().copy_from_slice(merged.atoms.value.data());
    cb.ema.counts.copy_from_slice(&merged.ema.counts);
    cb.ema.sums.copy_from_slice(&merged.ema.sums);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OctopusMetrics {
    pub downstream_accuracy: f64,
    pub store_size: usize,
    pub codebook_version: u64,
    pub global_initial_loss: f64,
    pub global_final_loss: f64,
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct OctopusRun {
    pub server: ServerState,
    pub nodes: Vec<NodeState>,
    pub ledger: OverheadLedger,
    pub metrics: OctopusMetrics,
    pub classifier: Classifier,
    /// Every message in emission order.
    pub messages: Vec<WireMessage>,
}

/// Datasets a run consumes.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub atd: &'a GroupedDataset,
    pub nodes: &'a GroupedDataset,
    pub test: &'a GroupedDataset,
}

fn phase<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_phase(name))
}

/// Runs the protocol end to end. `initial` skips global training and starts
/// from an existing model.
pub fn run_octopus(
    model_config: &DvqaeConfig,
    data: RunData<'_>,
    config: &OctopusConfig,
    initial: Option<DvqaeModel>,
) -> Result<OctopusRun> {
    phase("config", config.validate())?;
    let mut messages = Vec::new();

    // Step 1: initial global model on the additional data.
    let (model, init_loss, final_loss) = phase("global_init", (|| match initial {
        Some(m) => Ok((m, f64::NAN, f64::NAN)),
        None => {
            let mut m = DvqaeModel::new(model_config.clone(), config.seed)?;
            let g = TrainConfig { seed: config.seed ^ config.global.seed, ..config.global };
            let report = train_global(&mut m, data.atd, &g)?;
            Ok((m, report.initial_loss, report.final_loss))
        }
    })())?;
    let mut server = ServerState::new(model);

    // Distribution of the global model to every node.
    let dist = server.broadcast(MessageKind::ModelDistribution, server.model.to_bytes());
    let received = phase("distribution", DvqaeModel::from_bytes(dist.payload()))?;
    let labels = config.partition_label.labels(data.nodes);
    let shards = phase("partition", partition_labels(labels, config.partition, config.nodes, config.seed))?;
    let mut nodes: Vec<NodeState> = phase(
        "partition",
        shards
            .shards
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.is_empty() {
                    return Err(Error::Config(format!("node {i} receives no samples; use fewer nodes")));
                }
                Ok(NodeState::new(i, data.nodes.subset(s)?, received.clone()))
            })
            .collect::<Result<_>>(),
    )?;
    for n in &mut nodes {
        n.receive(&dist);
    }
    messages.push(dist);

    // Step 2: one-shot local fine-tuning.
    for n in &mut nodes {
        let ft = FineTuneConfig { seed: config.fine_tune.seed ^ config.seed ^ (n.id as u64 + 1), ..config.fine_tune };
        phase("fine_tune", fine_tune_local(&mut n.model, &n.shard, config.fine_tune_mode, &ft))?;
    }

    // Step 5: codebook synchronization rounds.
    if config.sync_period > 0 {
        server.model.codebook.set_mode(CodebookMode::Ema);
    }
    for round in 0..config.sync_period {
        for n in &mut nodes {
            let ft = FineTuneConfig { epochs: 1, seed: config.seed ^ ((round as u64) << 32) ^ n.id as u64, ..config.fine_tune };
            phase("codebook_sync", fine_tune_local(&mut n.model, &n.shard, FineTuneMode::CodebookEmaOnly, &ft))?;
            messages.push(phase("codebook_sync", codebook_sync(n, &mut server))?);
        }
        let merged = phase("codebook_sync", server.merge_codebooks())?.clone();
        let back = server.broadcast(MessageKind::CodebookDelta, merged.to_bytes());
        let check = phase("codebook_sync", Codebook::from_bytes(back.payload()))?;
        for n in &mut nodes {
            n.receive(&back);
            adopt_codebook(n, &check);
        }
        messages.push(back);
    }

    // Steps 3-4: nodes encode concurrently and upload index matrices.
    let encoded: Vec<Result<Vec<Vec<u8>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = nodes.iter().map(|n| s.spawn(move || n.encode_shard())).collect();
        handles.into_iter().map(|h| h.join().expect("encoder thread panicked")).collect()
    });
    for (n, payloads) in nodes.iter_mut().zip(encoded) {
        let payloads = phase("collection", payloads)?;
        for msg in n.upload(payloads) {
            phase("collection", server.gather(&msg))?;
            messages.push(msg);
        }
    }

    // Step 6: downstream training on gathered codes.
    let codebook = server.model.codebook.clone();
    let content = server.store.content_labels();
    let classes = data.nodes.content_classes().max(data.test.content_classes());
    let classifier = phase(
        "downstream",
        train_latent_classifier(&server.store, &codebook, config.encoding, &[content], &[classes], &config.classifier),
    )?;
    let accuracy = phase("downstream", evaluate_test(&nodes, &codebook, &classifier, data.test, config))?;

    if config.download_model {
        let msg = server.broadcast(MessageKind::ModelDownload, classifier.to_bytes());
        phase("model_download", Classifier::from_bytes(msg.payload()))?;
        for n in &mut nodes {
            n.receive(&msg);
        }
        messages.push(msg);
    }

    let per = server.model.indices_per_sample();
    let k = server.model.codebook.size();
    let dist_len = messages[0].size() as f64;
    let cb_len = Codebook::encoded_len(server.model.codebook.config()) as f64;
    let params = CostModelParams {
        n_c: config.nodes as f64,
        n_m: dist_len,
        n_d: server.store.len() as f64,
        n_e: config.baseline_costs.epochs,
        n_z: record_len(per, k) as f64,
        n_s: (8 * server.model.cells_per_sample() * server.model.latent_dim()) as f64,
        eta: config.baseline_costs.eta,
        pi: config.sync_period as f64,
        n_b: (config.nodes as f64 + 1.0) * cb_len,
        n_a: if config.download_model { classifier.to_bytes().len() as f64 } else { 0.0 },
    };
    let mut ledger = OverheadLedger::from_messages(&messages, params)?;
    ledger.set_metrics(Some(accuracy), None);
    let metrics = OctopusMetrics {
        downstream_accuracy: accuracy,
        store_size: server.store.len(),
        codebook_version: server.codebook_version,
        global_initial_loss: init_loss,
        global_final_loss: final_loss,
    };
    Ok(OctopusRun { server, nodes, ledger, metrics, classifier, messages })
}

/// Test samples are dealt round-robin to the nodes, encoded there and
/// classified by the server model. Nothing here enters the ledger.
fn evaluate_test(
    nodes: &[NodeState],
    codebook: &Codebook,
    clf: &Classifier,
    test: &GroupedDataset,
    config: &OctopusConfig,
) -> Result<f64> {
    let mut store = LatentStore::default();
    for (j, n) in nodes.iter().enumerate() {
        let idx: Vec<usize> = (j..test.len()).step_by(nodes.len()).collect();
        if !idx.is_empty() {
            store.records.extend(encode_store(&n.model, &test.subset(&idx)?, n.id)?.records);
        }
    }
    let labels = store.content_labels();
    latent_accuracy(clf, &store, codebook, config.encoding, &labels, 0)
}
