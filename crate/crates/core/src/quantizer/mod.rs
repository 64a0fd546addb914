//! Codebook, plain/group/sliced vector quantization, VQ loss terms and EMA
//! codebook updates.

mod codebook;
mod ema;
mod io;
mod loss;
mod vq;

pub(crate) use codebook::bits_for;
pub use codebook::{Codebook, CodebookConfig, CodebookMode, EmaState};
pub use ema::{ema_update, EmaAssignments};
pub use io::{CODEBOOK_HEADER_LEN, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use loss::{mean_sq_distance, vq_loss, vq_loss_grads, VqLoss, DEFAULT_ALPHA, DEFAULT_BETA};
pub use vq::{group_quantize, nearest_atom, slice_quantize, straight_through, GroupQuantized, QuantizeResult, EXACT_MATCH};

/// Samples `K` distinct seed vectors as initial atoms (see [`Codebook::init_from_seeds`]).
pub fn init_codebook(seeds: &[Vec<f64>], config: CodebookConfig, rng_seed: u64) -> crate::Result<Codebook> {
    Codebook::init_from_seeds(config, seeds, rng_seed)
}
