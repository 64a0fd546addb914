//! The autoencoder with instance-norm disentanglement: encoder, quantized
//! public codes, private residual, decoder, and the training loops.

mod gradcheck;
mod model;
mod serialize;
mod train;


pub use gradcheck::total_loss_gradcheck;
pub use model::{
    from_cells, to_cells, Architecture, DvqaeConfig, DvqaeModel, LatentSplit, LossWeights, PrivateVariant,
    DEFAULT_IN_EPS, DEFAULT_LAMBDA,
};
pub use serialize::{MODEL_MAGIC, MODEL_VERSION};
pub use train::{fine_tune_local, train_global, FineTuneConfig, FineTuneMode, LossComponents, TrainConfig, TrainReport};

pub use crate::datasets::SampleGroup;
pub use crate::numerics::InstanceNorm;
