use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DvqaeConfig, DvqaeModel};
use crate::binio::{put_f64s, put_u16, put_u64, Reader};
use crate::error::{Error, Result};
use crate::numerics::{InstanceNorm, LayerSpec, LayerStack};
use crate::quantizer::{Codebook, CodebookMode};

pub const MODEL_MAGIC: &[u8; 4] = b"OCTM";
pub const MODEL_VERSION: u16 = 1;

const ARCH: [u8; 4] = *b"ARCH";
const ENCODER: [u8; 4] = *b"ENCP";
const NORM: [u8; 4] = *b"NORM";
const CODEBOOK: [u8; 4] = *b"CODE";
const DECODER: [u8; 4] = *b"DECP";
const WEIGHTS: [u8; 4] = *b"LOSS";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchSection {
    config: DvqaeConfig,
    input_shape: Vec<usize>,
    encoder: Vec<LayerSpec>,
    decoder: Vec<LayerSpec>,
    codebook_mode: CodebookMode,
}

fn stack_values(stack: &LayerStack) -> Vec<f64> {
    stack.params().iter().flat_map(|p| p.value.data().iter().copied()).collect()
}

fn load_values(stack: &mut LayerStack, values: &[f64], at: u64) -> Result<()> {
    if values.len() != stack.parameter_count() {
        return Err(Error::format(
            at,
            format!("section holds {} values, layers need {}", values.len(), stack.parameter_count()),
        ));
    }
    let mut pos = 0;
    for p in stack.params_mut() {
        let n = p.len();
        p.value.data_mut().copy_from_slice(&values[pos..pos + n]);
        pos += n;
    }
    Ok(())
}

impl DvqaeModel {
    /// Binary container: magic, version, section table (tag, offset, length),
    /// then the architecture (JSON), encoder values, norm values, codebook,
    /// decoder values and loss weights, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = ArchSection {
            config: self.config.clone(),
            input_shape: self.encoder.input_shape().to_vec(),
            encoder: self.encoder.specs(),
            decoder: self.decoder.specs(),
            codebook_mode: self.codebook.mode(),
        };
        let mut norm = vec![];
        put_f64s(&mut norm, &[self.norm.eps]);
        put_f64s(&mut norm, self.norm.scale.value.data());
        put_f64s(&mut norm, self.norm.shift.value.data());
        let mut enc = vec![];
        put_f64s(&mut enc, &stack_values(&self.encoder));
        let mut dec = vec![];
        put_f64s(&mut dec, &stack_values(&self.decoder));
        let w = self.config.weights;
        let mut weights = vec![];
        put_f64s(&mut weights, &[w.alpha, w.beta, w.lambda]);
        let sections: [([u8; 4], Vec<u8>); 6] = [
            (ARCH, serde_json::to_vec(&arch).expect("architecture serializes")),
            (ENCODER, enc),
            (NORM, norm),
            (CODEBOOK, self.codebook.to_bytes()),
            (DECODER, dec),
            (WEIGHTS, weights),
        ];
        let header = 4 + 2 + 2 + sections.len() * 20;
        let mut out = Vec::with_capacity(header + sections.iter().map(|s| s.1.len()).sum::<usize>());
        out.extend_from_slice(MODEL_MAGIC);
        put_u16(&mut out, MODEL_VERSION);
        put_u16(&mut out, sections.len() as u16);
        let mut offset = header as u64;
        for (tag, body) in &sections {
            out.extend_from_slice(tag);
            put_u64(&mut out, offset);
            put_u64(&mut out, body.len() as u64);
            offset += body.len() as u64;
        }
        for (_, body) in &sections {
            out.extend_from_slice(body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let at = r.offset();
        let version = r.u16("model version")?;
        if version != MODEL_VERSION {
            return Err(Error::format(at, format!("unsupported model version {version}")));
        }
        let count = r.u16("section count")? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let entry_at = r.offset();
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
            let offset = r.u64("section offset")?;
            let len = r.u64("section length")?;
            let end = offset.checked_add(len).filter(|&e| e <= bytes.len() as u64);
            if end.is_none() {
                return Err(Error::format(entry_at, "section extends past end of file"));
            }
            table.push((tag, offset, len));
        }
        let section = |tag: [u8; 4]| -> Result<(&[u8], u64)> {
            let (_, off, len) = table
                .iter()
                .find(|(t, _, _)| *t == tag)
                .ok_or_else(|| Error::format(8, format!("missing section {}", String::from_utf8_lossy(&tag))))?;
            Ok((&bytes[*off as usize..(*off + *len) as usize], *off))
        };
        let f64s = |tag: [u8; 4]| -> Result<(Vec<f64>, u64)> {
            let (body, off) = section(tag)?;
            if body.len() % 8 != 0 {
                return Err(Error::format(off, "section length not a multiple of 8"));
            }
            Ok((Reader::new(body).f64s(body.len() / 8, "values")?, off))
        };

        let (arch_bytes, arch_off) = section(ARCH)?;
        let arch: ArchSection =
            serde_json::from_slice(arch_bytes).map_err(|e| Error::format(arch_off, format!("bad architecture: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut encoder = LayerStack::with_prefix("encoder.", &arch.input_shape, arch.encoder, &mut rng)
            .map_err(|e| Error::format(arch_off, e.to_string()))?;
        let mut decoder = LayerStack::with_prefix("decoder.", encoder.output_shape(), arch.decoder, &mut rng)
            .map_err(|e| Error::format(arch_off, e.to_string()))?;
        let (enc, off) = f64s(ENCODER)?;
        load_values(&mut encoder, &enc, off)?;
        let (dec, off) = f64s(DECODER)?;
        load_values(&mut decoder, &dec, off)?;

        let m = arch.config.codebook.dim;
        let (nv, off) = f64s(NORM)?;
        if nv.len() != 1 + 2 * m || !(nv[0] > 0.0) {
            return Err(Error::format(off, "bad instance-norm section"));
        }
        let mut norm = InstanceNorm::with_prefix("in", m, nv[0]);
        norm.scale.value.data_mut().copy_from_slice(&nv[1..1 + m]);
        norm.shift.value.data_mut().copy_from_slice(&nv[1 + m..]);

        let (cb_bytes, off) = section(CODEBOOK)?;
        let mut codebook = Codebook::from_bytes(cb_bytes).map_err(|e| match e {
            Error::Format { offset, message } => Error::format(off + offset, message),
            other => other,
        })?;
        let ema = codebook.ema.clone();
        codebook.set_mode(arch.codebook_mode);
        codebook.ema = ema;

        let (wv, off) = f64s(WEIGHTS)?;
        if wv.len() != 3 {
            return Err(Error::format(off, "bad loss-weight section"));
        }
        let mut config = arch.config;
        config.weights.alpha = wv[0];
        config.weights.beta = wv[1];
        config.weights.lambda = wv[2];
        DvqaeModel::from_parts(config, encoder, norm, codebook, decoder).map_err(|e| Error::format(arch_off, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        DvqaeModel::from_bytes(&std::fs::read(path)?)
    }
}
