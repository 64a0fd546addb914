//! Distributed vector-quantized autoencoders with disentangled latent codes.
//!
//! Edge nodes compress samples into codebook index matrices, a server trains
//! downstream classifiers on the gathered codes, and instance normalization
//! plus quantization separate a public component from a private residual
//! that never leaves the node.
//!
//! Modules, bottom-up:
//!
//! * [`numerics`]: tensors, layers with hand-written backward passes, Adam.
//! * [`quantizer`]: codebook, plain/group/sliced VQ, EMA updates.
//! * [`dvqae`]: the autoencoder, latent split, training loops.
//! * [`datasets`]: IDX loading, synthetic content/style data, splits.
//! * [`fedsim`]: protocol simulator, wire format, cost models, FedAvg.
//! * [`downstream`]: latent classifiers, adversaries, conditional entropy.

mod binio;
pub mod datasets;
pub mod downstream;
pub mod dvqae;
pub mod error;
pub mod fedsim;
pub mod numerics;
pub mod quantizer;

pub use error::{Error, Result};
pub use numerics::{LayerSpec, LayerStack, Parameter, Tensor};
pub use quantizer::{Codebook, CodebookConfig, QuantizeResult};
