//! One function per subcommand. Each writes its artifacts plus a
//! `<command>.json` file holding the resolved config and the results.

use std::path::{Path, PathBuf};

use anyhow::Context;
use octopus_core::downstream::{
    evaluate_privacy, latent_accuracy, raw_accuracy, train_latent_classifier, train_raw_baseline, uniform_report,
    write_metrics_csv, write_metrics_json, AdversaryView, MetricsRow, PrivacyReport,
};
use octopus_core::dvqae::{fine_tune_local, train_global, DvqaeModel, LossComponents};
use octopus_core::fedsim::{
    cost_fl, cost_octopus, cost_split, efficiency_ratio, encode_store, fingerprints, forbidden_vectors, run_fedavg,
    run_octopus, scan_messages, CostModelParams, FedAvgReport, OctopusConfig, OctopusMetrics, PrivacyScan, RunData,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Command};

/// Version of the `<command>.json` layout.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

pub const MODEL_FILE: &str = "model.octm";
pub const FINE_TUNED_FILE: &str = "model_finetuned.octm";
pub const CLASSIFIER_FILE: &str = "classifier.octc";

#[derive(Serialize)]
struct Output<'a, T: Serialize> {
    schema_version: u32,
    command: &'static str,
    config: &'a RunConfig,
    results: T,
}

fn write_output<T: Serialize>(cfg: &RunConfig, command: Command, results: T) -> Result<PathBuf, CliError> {
    let path = cfg.out_dir.join(format!("{}.json", command.name()));
    let body = serde_json::to_vec_pretty(&Output { schema_version: OUTPUT_SCHEMA_VERSION, command: command.name(), config: cfg, results })
        .context("serializing results")?;
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    match command {
        Command::TrainGlobal => cmd_train_global(cfg),
        Command::FineTune => cmd_fine_tune(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::TrainDownstream => cmd_train_downstream(cfg),
        Command::EvalPrivacy => cmd_eval_privacy(cfg),
        Command::CostReport => cmd_cost_report(cfg),
    }
}

fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.model.clone().unwrap_or_else(|| cfg.out_dir.join(MODEL_FILE))
}

fn load_model(cfg: &RunConfig, input: &[usize]) -> Result<DvqaeModel, CliError> {
    let path = model_path(cfg);
    if !path.exists() {
        return Err(CliError::config("paths.model", format!("{} does not exist; run train-global first", path.display())));
    }
    let model = DvqaeModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if model.input_shape() != input {
        return Err(CliError::config(
            "paths.model",
            format!("model expects samples of shape {:?}, dataset has {input:?}", model.input_shape()),
        ));
    }
    Ok(model)
}

fn write_loss_curve(path: &Path, losses: &[LossComponents]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "reconstruction", "codebook", "commitment", "latent", "total"]).context("loss curve")?;
    for (i, l) in losses.iter().enumerate() {
        w.serialize((i, l.reconstruction, l.codebook, l.commitment, l.latent, l.total)).context("loss curve")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainResults {
    samples: usize,
    parameters: usize,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    model: PathBuf,
}

pub fn cmd_train_global(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let model_cfg = cfg.model.build(splits.atd.item_shape())?;
    let mut model = DvqaeModel::new(model_cfg, cfg.seed)?;
    let report = train_global(&mut model, &splits.atd, &cfg.train_config()).map_err(|e| CliError::Runtime(e.into()))?;
    let path = cfg.out_dir.join(MODEL_FILE);
    model.save(&path)?;
    write_loss_curve(&cfg.out_dir.join("train_loss.csv"), &report.losses)?;
    write_output(
        cfg,
        Command::TrainGlobal,
        TrainResults {
            samples: splits.atd.len(),
            parameters: model.parameter_count(),
            steps: report.steps,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            model: path,
        },
    )?;
    Ok(())
}

pub fn cmd_fine_tune(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let mut model = load_model(cfg, splits.nodes.item_shape())?;
    let report = fine_tune_local(&mut model, &splits.nodes, cfg.fine_tune.mode, &cfg.fine_tune_config())
        .map_err(|e| CliError::Runtime(e.into()))?;
    let path = cfg.out_dir.join(FINE_TUNED_FILE);
    model.save(&path)?;
    write_loss_curve(&cfg.out_dir.join("fine_tune_loss.csv"), &report.losses)?;
    write_output(
        cfg,
        Command::FineTune,
        TrainResults {
            samples: splits.nodes.len(),
            parameters: model.parameter_count(),
            steps: report.steps,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            model: path,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateResults {
    metrics: OctopusMetrics,
    messages: usize,
    ledger_exact: bool,
    privacy_scan: PrivacyScan,
    fedavg: Option<FedAvgReport>,
}

pub fn octopus_config(cfg: &RunConfig) -> OctopusConfig {
    let s = &cfg.simulate;
    OctopusConfig {
        nodes: s.nodes,
        partition: s.partition,
        partition_label: s.partition_label,
        global: cfg.train_config(),
        fine_tune_mode: cfg.fine_tune.mode,
        fine_tune: cfg.fine_tune_config(),
        sync_period: s.sync_period,
        classifier: cfg.classifier_config(),
        encoding: cfg.downstream.encoding,
        download_model: s.download_model,
        baseline_costs: s.baseline_costs,
        seed: cfg.seed,
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let model_cfg = cfg.model.build(splits.atd.item_shape())?;
    let initial = match &cfg.paths.model {
        Some(_) => Some(load_model(cfg, splits.atd.item_shape())?),
        None => None,
    };
    let data = RunData { atd: &splits.atd, nodes: &splits.nodes, test: &splits.test };
    let run = run_octopus(&model_cfg, data, &octopus_config(cfg), initial).map_err(|e| CliError::Runtime(e.into()))?;

    let mut forbidden = Vec::new();
    for n in &run.nodes {
        forbidden.extend(forbidden_vectors(&n.model, &n.shard)?);
    }
    let scan = scan_messages(
        &run.messages,
        &fingerprints(&forbidden),
        run.server.model.indices_per_sample(),
        run.server.model.codebook.size(),
    );
    if !scan.is_clean() {
        return Err(CliError::Runtime(anyhow::anyhow!("privacy phase failed: {:?}", scan.violations)));
    }

    run.ledger.write_json(&cfg.out_dir.join("ledger.json"))?;
    run.ledger.write_csv(&cfg.out_dir.join("ledger.csv"))?;
    std::fs::write(cfg.out_dir.join(CLASSIFIER_FILE), run.classifier.to_bytes())?;
    if cfg.simulate.dump_messages {
        let dir = cfg.out_dir.join("messages");
        std::fs::create_dir_all(&dir)?;
        for (i, m) in run.messages.iter().enumerate() {
            m.dump(&dir, i)?;
        }
    }
    let fedavg = match &cfg.simulate.fedavg {
        Some(f) => {
            let f = octopus_core::fedsim::FedAvgConfig { seed: f.seed ^ cfg.seed, ..f.clone() };
            Some(run_fedavg(&splits.nodes, &splits.test, &f).map_err(|e| CliError::Runtime(e.into()))?.1)
        }
        None => None,
    };
    write_output(
        cfg,
        Command::Simulate,
        SimulateResults {
            metrics: run.metrics.clone(),
            messages: run.messages.len(),
            ledger_exact: run.ledger.is_exact(),
            privacy_scan: scan,
            fedavg,
        },
    )?;
    Ok(())
}

fn row(cfg: &RunConfig, task: &str, view: &str, accuracy: f64, entropy_bits: Option<f64>) -> MetricsRow {
    MetricsRow {
        task: task.into(),
        view: view.into(),
        accuracy,
        entropy_bits,
        k: cfg.model.k,
        g: cfg.model.g,
        n_c: cfg.model.n_c,
        seed: cfg.seed,
    }
}

pub fn cmd_train_downstream(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let model = load_model(cfg, splits.nodes.item_shape())?;
    let clf_cfg = cfg.classifier_config();
    let train = encode_store(&model, &splits.nodes, 0)?;
    let test = encode_store(&model, &splits.test, 0)?;
    let classes = splits.nodes.content_classes();
    let enc = cfg.downstream.encoding;
    let run = || -> octopus_core::Result<Vec<MetricsRow>> {
        let clf = train_latent_classifier(&train, &model.codebook, enc, &[train.content_labels()], &[classes], &clf_cfg)?;
        std::fs::write(cfg.out_dir.join(CLASSIFIER_FILE), clf.to_bytes())?;
        let acc = latent_accuracy(&clf, &test, &model.codebook, enc, &test.content_labels(), 0)?;
        let mut rows = vec![row(cfg, "content", "public", acc, None)];
        if cfg.downstream.raw_baseline {
            let raw = train_raw_baseline(&splits.nodes, &clf_cfg)?;
            rows.push(row(cfg, "content", "raw", raw_accuracy(&raw, &splits.test)?, None));
        }
        Ok(rows)
    };
    let rows = run().map_err(|e| CliError::Runtime(e.into()))?;
    write_metrics_csv(&cfg.out_dir.join("downstream.csv"), &rows)?;
    write_metrics_json(&cfg.out_dir.join("downstream_metrics.json"), &rows)?;
    write_output(cfg, Command::TrainDownstream, &rows)?;
    Ok(())
}

/// Reports for the three views followed by the uniform control.
pub fn privacy_reports(cfg: &RunConfig, model: &DvqaeModel, data: &octopus_core::datasets::GroupedDataset) -> octopus_core::Result<Vec<PrivacyReport>> {
    let adv = cfg.adversary_config();
    let mut reports = AdversaryView::ALL.iter().map(|&v| evaluate_privacy(model, data, v, &adv)).collect::<octopus_core::Result<Vec<_>>>()?;
    reports.push(uniform_report(data.private_classes(), data.private_labels())?);
    Ok(reports)
}

pub fn cmd_eval_privacy(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let model = load_model(cfg, splits.nodes.item_shape())?;
    let reports = privacy_reports(cfg, &model, &splits.nodes).map_err(|e| CliError::Runtime(e.into()))?;
    let rows: Vec<MetricsRow> = reports.iter().map(|r| row(cfg, "identity", &r.view, r.accuracy, Some(r.entropy_bits))).collect();
    write_metrics_csv(&cfg.out_dir.join("privacy.csv"), &rows)?;
    write_output(cfg, Command::EvalPrivacy, &reports)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    #[serde(flatten)]
    pub params: CostModelParams,
    pub fl: f64,
    pub split: f64,
    pub octopus: f64,
    pub rho: Option<f64>,
}

/// Every point of the sweep grid, last parameter varying fastest.
pub fn cost_rows(cfg: &RunConfig) -> Result<Vec<CostRow>, CliError> {
    let fields = cfg.cost.fields();
    let total: usize = fields.iter().map(|(_, v)| v.len()).product();
    let mut rows = Vec::with_capacity(total);
    for mut i in 0..total {
        let mut x = [0.0; 10];
        for (slot, (_, values)) in x.iter_mut().zip(fields.iter()).rev() {
            *slot = values[i % values.len()];
            i /= values.len();
        }
        let params = CostModelParams {
            n_c: x[0],
            n_m: x[1],
            n_d: x[2],
            n_e: x[3],
            n_z: x[4],
            n_s: x[5],
            eta: x[6],
            pi: x[7],
            n_b: x[8],
            n_a: x[9],
        };
        rows.push(CostRow {
            params,
            fl: cost_fl(&params)?,
            split: cost_split(&params)?,
            octopus: cost_octopus(&params)?,
            rho: efficiency_ratio(&params).ok(),
        });
    }
    Ok(rows)
}

pub fn cmd_cost_report(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = cost_rows(cfg)?;
    let path = cfg.out_dir.join("cost_report.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["n_c", "n_m", "n_d", "n_e", "n_z", "n_s", "eta", "pi", "n_b", "n_a", "fl", "split", "octopus", "rho"])
        .context("cost report")?;
    for r in &rows {
        let p = &r.params;
        let mut rec: Vec<String> =
            [p.n_c, p.n_m, p.n_d, p.n_e, p.n_z, p.n_s, p.eta, p.pi, p.n_b, p.n_a, r.fl, r.split, r.octopus].iter().map(f64::to_string).collect();
        rec.push(r.rho.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec).context("cost report")?;
    }
    w.flush()?;
    write_output(cfg, Command::CostReport, &rows)?;
    Ok(())
}
