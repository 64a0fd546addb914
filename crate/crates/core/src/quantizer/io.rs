use std::path::Path;

use super::codebook::{Codebook, CodebookConfig};
use crate::binio::{put_f64s, put_u16, put_u32, Reader};
use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"OCTB";
pub const CODEBOOK_VERSION: u16 = 1;
/// Magic, version, four u32 dimensions and the decay.
pub const CODEBOOK_HEADER_LEN: usize = 4 + 2 + 4 * 4 + 8;

impl Codebook {
    /// Serialized size: header, atoms, EMA counts (`n_c x K`) and sums.
    pub fn encoded_len(config: &CodebookConfig) -> usize {
        CODEBOOK_HEADER_LEN + 8 * (2 * config.size * config.dim + config.slices * config.size)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let mut out = Vec::with_capacity(Codebook::encoded_len(cfg));
        out.extend_from_slice(CODEBOOK_MAGIC);
        put_u16(&mut out, CODEBOOK_VERSION);
        for v in [cfg.size, cfg.dim, cfg.groups, cfg.slices] {
            put_u32(&mut out, v as u32);
        }
        put_f64s(&mut out, &[self.ema.decay]);
        put_f64s(&mut out, self.atoms.value.data());
        put_f64s(&mut out, &self.ema.counts);
        put_f64s(&mut out, &self.ema.sums);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let cb = Codebook::read_from(&mut r)?;
        r.finish("codebook")?;
        Ok(cb)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(CODEBOOK_MAGIC)?;
        let at = r.offset();
        let version = r.u16("codebook version")?;
        if version != CODEBOOK_VERSION {
            return Err(Error::format(at, format!("unsupported codebook version {version}")));
        }
        let at = r.offset();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("codebook header")? as usize;
        }
        let decay = r.f64("codebook decay")?;
        let config = CodebookConfig {
            size: dims[0],
            dim: dims[1],
            groups: dims[2],
            slices: dims[3],
            ema_decay: decay,
        };
        config
            .validate()
            .map_err(|e| Error::format(at, format!("invalid codebook header: {e}")))?;
        let at = r.offset();
        let atoms = r.f64s(config.size * config.dim, "codebook atoms")?;
        let counts = r.f64s(config.slices * config.size, "codebook EMA counts")?;
        let sums = r.f64s(config.size * config.dim, "codebook EMA sums")?;
        let mut cb = Codebook::from_atoms(config, atoms).map_err(|e| Error::format(at, e.to_string()))?;
        cb.ema.counts = counts;
        cb.ema.sums = sums;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Codebook::from_bytes(&std::fs::read(path)?)
    }
}
