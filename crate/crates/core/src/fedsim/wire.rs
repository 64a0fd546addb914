//! Byte-exact wire payloads: packed index matrices and message envelopes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::bits_for;

/// Bytes of per-sample header in a latent record (u16 LE content label).
pub const RECORD_HEADER_LEN: usize = 2;

/// Packs indices at `ceil(log2 K)` bits each, most significant bit first,
/// zero-padding the final byte.
pub fn pack_indices(indices: &[u32], k: usize) -> Result<Vec<u8>> {
    let bits = bits_for(k) as usize;
    let mut out = vec![0u8; (indices.len() * bits).div_ceil(8)];
    let mut pos = 0usize;
    for &i in indices {
        if i as usize >= k {
            return Err(Error::Protocol(format!("index {i} outside codebook of {k}")));
        }
        for b in (0..bits).rev() {
            if (i >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_indices`] for `count` indices.
pub fn unpack_count(bytes: &[u8], count: usize, k: usize) -> Result<Vec<u32>> {
    let bits = bits_for(k) as usize;
    let need = (count * bits).div_ceil(8);
    if bytes.len() != need {
        return Err(Error::format(bytes.len().min(need) as u64, format!("packed indices need {need} bytes, got {}", bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for n in 0..count {
        let mut v = 0u32;
        for _ in 0..bits {
            v = (v << 1) | u32::from((bytes[pos / 8] >> (7 - pos % 8)) & 1);
            pos += 1;
        }
        if v as usize >= k {
            return Err(Error::format((n * bits / 8) as u64, format!("index {v} outside codebook of {k}")));
        }
        out.push(v);
    }
    Ok(out)
}

/// Unpacks an `h x w` index matrix.
pub fn unpack_indices(bytes: &[u8], h: usize, w: usize, k: usize) -> Result<Vec<u32>> {
    unpack_count(bytes, h * w, k)
}

/// Packed payload bytes for `count` indices.
pub fn packed_len(count: usize, k: usize) -> usize {
    (count * bits_for(k) as usize).div_ceil(8)
}

/// Size of one latent record: header plus packed indices.
pub fn record_len(indices_per_sample: usize, k: usize) -> usize {
    RECORD_HEADER_LEN + packed_len(indices_per_sample, k)
}

/// Appends one `(content label, indices)` record.
pub fn encode_record(out: &mut Vec<u8>, content_label: usize, indices: &[u32], k: usize) -> Result<()> {
    let label = u16::try_from(content_label).map_err(|_| Error::Protocol(format!("content label {content_label} exceeds u16")))?;
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&pack_indices(indices, k)?);
    Ok(())
}

/// Splits a latent-batch payload back into records.
pub fn decode_records(payload: &[u8], indices_per_sample: usize, k: usize) -> Result<Vec<(usize, Vec<u32>)>> {
    let len = record_len(indices_per_sample, k);
    if len == 0 || payload.len() % len != 0 {
        return Err(Error::format(payload.len() as u64, format!("latent batch is not a whole number of {len}-byte records")));
    }
    payload
        .chunks(len)
        .enumerate()
        .map(|(r, rec)| {
            let label = u16::from_le_bytes([rec[0], rec[1]]) as usize;
            let idx = unpack_count(&rec[RECORD_HEADER_LEN..], indices_per_sample, k).map_err(|e| match e {
                Error::Format { offset, message } => Error::format((r * len + RECORD_HEADER_LEN) as u64 + offset, message),
                other => other,
            })?;
            Ok((label, idx))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    /// Server to nodes: the initial global model.
    ModelDistribution,
    /// Node to server: packed index records.
    LatentBatch,
    /// Node to server, and the merged result back: a serialized codebook.
    CodebookDelta,
    /// Server to nodes: the trained downstream model.
    ModelDownload,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::ModelDistribution => "MODEL_DISTRIBUTION",
            MessageKind::LatentBatch => "LATENT_BATCH",
            MessageKind::CodebookDelta => "CODEBOOK_DELTA",
            MessageKind::ModelDownload => "MODEL_DOWNLOAD",
        }
    }
}

/// Sender or receiver of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    Node(usize),
    /// Every node; counted once.
    Broadcast,
}

/// An immutable message. Its logical size is the payload length.
#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    kind: MessageKind,
    from: Endpoint,
    to: Endpoint,
    payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(kind: MessageKind, from: Endpoint, to: Endpoint, payload: Vec<u8>) -> Self {
        WireMessage { kind, from, to, payload }
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn from(&self) -> Endpoint {
        self.from
    }

    pub fn to(&self) -> Endpoint {
        self.to
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn size(&self) -> usize {
        self.payload.len()
    }

    /// Writes the payload to `dir/<seq>_<KIND>.bin`.
    pub fn dump(&self, dir: &Path, seq: usize) -> Result<()> {
        std::fs::write(dir.join(format!("{seq:05}_{}.bin", self.kind.name())), &self.payload)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k256_on_32x32_is_1024_bytes() {
        let idx: Vec<u32> = (0..1024).map(|i| (i * 37 % 256) as u32).collect();
        let bytes = pack_indices(&idx, 256).unwrap();
        assert_eq!(bytes.len(), 1024);
        assert_eq!(unpack_indices(&bytes, 32, 32, 256).unwrap(), idx);
    }

    #[test]
    fn k10_on_8x8_is_32_bytes() {
        let idx: Vec<u32> = (0..64).map(|i| (i % 10) as u32).collect();
        let bytes = pack_indices(&idx, 10).unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(unpack_indices(&bytes, 8, 8, 10).unwrap(), idx);
    }

    #[test]
    fn bit_order_is_msb_first() {
        assert_eq!(pack_indices(&[1, 2, 3], 4).unwrap(), vec![0b0110_1100]);
        assert_eq!(pack_indices(&[5], 8).unwrap(), vec![0b1010_0000]);
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        assert!(matches!(pack_indices(&[10], 10), Err(Error::Protocol(_))));
        // 4-bit field holding 15 with K = 10.
        assert!(unpack_count(&[0xF0], 1, 10).is_err());
        assert!(unpack_count(&[0, 0], 1, 10).is_err());
    }

    #[test]
    fn records_round_trip() {
        let mut buf = vec![];
        encode_record(&mut buf, 1, &[3, 0, 7], 8).unwrap();
        encode_record(&mut buf, 300, &[1, 1, 1], 8).unwrap();
        assert_eq!(buf.len(), 2 * record_len(3, 8));
        assert_eq!(record_len(3, 8), 4);
        let recs = decode_records(&buf, 3, 8).unwrap();
        assert_eq!(recs, vec![(1, vec![3, 0, 7]), (300, vec![1, 1, 1])]);
        assert!(decode_records(&buf[..5], 3, 8).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_is_identity(k in 1usize..2000, raw in prop::collection::vec(any::<u32>(), 0..300)) {
            let idx: Vec<u32> = raw.iter().map(|v| v % k as u32).collect();
            let bytes = pack_indices(&idx, k).unwrap();
            prop_assert_eq!(bytes.len(), packed_len(idx.len(), k));
            prop_assert_eq!(unpack_count(&bytes, idx.len(), k).unwrap(), idx);
        }
    }
}
