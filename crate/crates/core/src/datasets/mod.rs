//! Grouped datasets, IDX digit loading, the synthetic content/style
//! generator and stratified splits.

mod grouped;
mod idx;
mod split;
mod synth;

pub use grouped::{GroupedDataset, SampleGroup};
pub use idx::{
    encode_idx_images, encode_idx_labels, is_circle_digit, load_idx_images, load_idx_labels, load_mnist,
    mnist_dataset, parse_idx_images, parse_idx_labels, to_idx_images, write_idx, IdxImages, CIRCLE_DIGITS,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, PADDED_SIZE,
};
pub use split::{split, SplitSpec, Splits, MIN_SPLIT_SIZE};
pub use synth::{content_prototypes, style_offsets, synth_content_style, SynthConfig};
