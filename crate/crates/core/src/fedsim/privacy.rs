//! Checks that node uploads carry only index matrices and codebooks.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::wire::{decode_records, Endpoint, MessageKind, WireMessage};
use crate::datasets::GroupedDataset;
use crate::downstream::gather_rows;
use crate::dvqae::DvqaeModel;
use crate::error::Result;
use crate::quantizer::Codebook;

/// f64 values per fingerprint window.
pub const WINDOW_VALUES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub message: usize,
    pub kind: MessageKind,
    /// Payload offset of a matched window.
    pub offset: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyScan {
    pub messages_checked: usize,
    pub bytes_scanned: u64,
    pub fingerprints: usize,
    pub violations: Vec<Violation>,
}

impl PrivacyScan {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Byte fingerprints of vectors that must never leave a node.
#[derive(Debug, Clone, Default)]
pub struct Fingerprints {
    windows: HashSet<Vec<u8>>,
    lengths: Vec<usize>,
}

impl Fingerprints {
    /// Adds the little-endian bytes of up to [`WINDOW_VALUES`] consecutive
    /// values starting at the first nonzero one. All-zero vectors are skipped.
    pub fn insert(&mut self, v: &[f64]) {
        let Some(first) = v.iter().position(|&x| x != 0.0) else {
            return;
        };
        let len = v.len().min(WINDOW_VALUES);
        let start = first.min(v.len() - len);
        let bytes: Vec<u8> = v[start..start + len].iter().flat_map(|x| x.to_le_bytes()).collect();
        if !self.lengths.contains(&bytes.len()) {
            self.lengths.push(bytes.len());
        }
        self.windows.insert(bytes);
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// First payload offset where a fingerprint appears.
    pub fn find_in(&self, payload: &[u8]) -> Option<usize> {
        for &len in &self.lengths {
            if let Some(o) = payload.windows(len).position(|w| self.windows.contains(w)) {
                return Some(o);
            }
        }
        None
    }
}

/// Raw samples and the per-sample private residuals of `data` under `model`.
pub fn forbidden_vectors(model: &DvqaeModel, data: &GroupedDataset) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = (0..data.len()).map(|i| data.sample(i).to_vec()).collect();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(200) {
        let split = model.split_batch(&gather_rows(data.samples(), chunk)?)?;
        out.extend(split.sample_private);
    }
    Ok(out)
}

pub fn fingerprints(vectors: &[Vec<f64>]) -> Fingerprints {
    let mut f = Fingerprints::default();
    vectors.iter().for_each(|v| f.insert(v));
    f
}

/// Structural and byte-level scan of every node-originated message.
///
/// Node messages must be LATENT_BATCH payloads that decode as whole records,
/// or CODEBOOK_DELTA payloads that parse as a codebook. No payload may
/// contain a fingerprint window at any byte offset.
pub fn scan_messages(messages: &[WireMessage], forbidden: &Fingerprints, indices_per_sample: usize, k: usize) -> PrivacyScan {
    let mut scan = PrivacyScan { fingerprints: forbidden.len(), ..Default::default() };
    for (i, m) in messages.iter().enumerate() {
        if !matches!(m.from(), Endpoint::Node(_)) {
            continue;
        }
        scan.messages_checked += 1;
        scan.bytes_scanned += m.size() as u64;
        let mut flag = |offset, reason: String| scan.violations.push(Violation { message: i, kind: m.kind(), offset, reason });
        match m.kind() {
            MessageKind::LatentBatch => {
                if let Err(e) = decode_records(m.payload(), indices_per_sample, k) {
                    flag(None, format!("latent batch does not decode: {e}"));
                }
            }
            MessageKind::CodebookDelta => {
                if let Err(e) = Codebook::from_bytes(m.payload()) {
                    flag(None, format!("codebook delta does not parse: {e}"));
                }
            }
            other => flag(None, format!("nodes may not send {}", other.name())),
        }
        if let Some(o) = forbidden.find_in(m.payload()) {
            flag(Some(o), "payload contains raw or private latent values".into());
        }
    }
    scan
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_at_first_nonzero() {
        let f = fingerprints(&[vec![0.0, 0.0, 1.5, 2.5, 3.5, 4.5, 5.5]]);
        let mut payload = vec![9u8; 3];
        for x in [1.5f64, 2.5, 3.5, 4.5] {
            payload.extend(x.to_le_bytes());
        }
        assert_eq!(f.find_in(&payload), Some(3));
        assert_eq!(f.find_in(&payload[4..]), None);
    }

    #[test]
    fn zero_vectors_are_ignored() {
        assert!(fingerprints(&[vec![0.0; 8]]).is_empty());
    }

    #[test]
    fn node_model_upload_is_flagged() {
        let bad = WireMessage::new(MessageKind::ModelDownload, Endpoint::Node(1), Endpoint::Server, vec![]);
        let scan = scan_messages(&[bad], &Fingerprints::default(), 4, 16);
        assert_eq!(scan.violations.len(), 1);
    }

    #[test]
    fn server_messages_are_not_scanned() {
        let payload: Vec<u8> = [1.0f64, 2.0, 3.0, 4.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        let f = fingerprints(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let from_server = WireMessage::new(MessageKind::ModelDistribution, Endpoint::Server, Endpoint::Broadcast, payload.clone());
        assert!(scan_messages(&[from_server], &f, 4, 16).is_clean());
        let smuggled = WireMessage::new(MessageKind::CodebookDelta, Endpoint::Node(0), Endpoint::Server, payload);
        let scan = scan_messages(&[smuggled], &f, 4, 16);
        assert_eq!(scan.violations.len(), 2);
        assert_eq!(scan.violations[1].offset, Some(0));
    }

    #[test]
    fn malformed_latent_batch_is_flagged() {
        let m = WireMessage::new(MessageKind::LatentBatch, Endpoint::Node(0), Endpoint::Server, vec![0; 5]);
        assert!(!scan_messages(&[m], &Fingerprints::default(), 4, 16).is_clean());
    }
}
