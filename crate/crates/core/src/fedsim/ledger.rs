//! Per-phase byte accounting checked against the closed-form cost models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cost::{cost_fl, cost_octopus, cost_split, efficiency_ratio, CostModelParams};
use super::wire::{MessageKind, WireMessage};
use crate::error::{Error, Result};

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

/// Phase names in protocol order.
pub const PHASES: [&str; 4] = ["model_distribution", "collection", "codebook_sync", "model_download"];

pub fn phase_of(kind: MessageKind) -> &'static str {
    match kind {
        MessageKind::ModelDistribution => PHASES[0],
        MessageKind::LatentBatch => PHASES[1],
        MessageKind::CodebookDelta => PHASES[2],
        MessageKind::ModelDownload => PHASES[3],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub phase: String,
    pub bytes: u64,
    pub analytic_bytes: f64,
    pub accuracy: Option<f64>,
    pub entropy_bits: Option<f64>,
}

/// Analytic totals of the three cost models for the same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub fl: f64,
    pub split: f64,
    pub octopus: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadLedger {
    pub schema_version: u32,
    pub params: CostModelParams,
    pub rows: Vec<PhaseRow>,
    pub predictions: Predictions,
}

impl OverheadLedger {
    /// Sums message sizes per phase and pairs each phase with its term of
    /// the protocol cost formula.
    pub fn from_messages(messages: &[WireMessage], params: CostModelParams) -> Result<Self> {
        let mut measured = [0u64; 4];
        for m in messages {
            let i = PHASES.iter().position(|p| *p == phase_of(m.kind())).unwrap();
            measured[i] += m.size() as u64;
        }
        let analytic = [params.n_m, params.n_d * params.n_z, params.pi * params.n_b, params.n_a];
        let mut rows: Vec<PhaseRow> = PHASES
            .iter()
            .zip(measured.iter().zip(analytic))
            .map(|(p, (&b, a))| PhaseRow { phase: p.to_string(), bytes: b, analytic_bytes: a, accuracy: None, entropy_bits: None })
            .collect();
        rows.push(PhaseRow {
            phase: "total".into(),
            bytes: measured.iter().sum(),
            analytic_bytes: cost_octopus(&params)?,
            accuracy: None,
            entropy_bits: None,
        });
        let predictions = Predictions {
            fl: cost_fl(&params)?,
            split: cost_split(&params)?,
            octopus: cost_octopus(&params)?,
            rho: efficiency_ratio(&params).ok(),
        };
        Ok(OverheadLedger { schema_version: LEDGER_SCHEMA_VERSION, params, rows, predictions })
    }

    pub fn phase(&self, name: &str) -> Option<&PhaseRow> {
        self.rows.iter().find(|r| r.phase == name)
    }

    pub fn total(&self) -> &PhaseRow {
        self.rows.last().expect("ledger has a total row")
    }

    /// Every phase's measured bytes equal its analytic term.
    pub fn is_exact(&self) -> bool {
        self.rows.iter().all(|r| r.bytes as f64 == r.analytic_bytes)
    }

    pub fn set_metrics(&mut self, accuracy: Option<f64>, entropy_bits: Option<f64>) {
        let total = self.rows.last_mut().expect("ledger has a total row");
        total.accuracy = accuracy;
        total.entropy_bits = entropy_bits;
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self).map_err(|e| Error::State(e.to_string()))?;
        std::fs::write(path, body)?;
        Ok(())
    }

    /// Columns: phase, bytes, analytic_bytes, accuracy, entropy_bits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(crate::downstream::csv_error)?;
        for r in &self.rows {
            w.serialize(r).map_err(crate::downstream::csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}
