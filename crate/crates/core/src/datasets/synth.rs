use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grouped::GroupedDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of the synthetic content/style generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub content_classes: usize,
    pub style_classes: usize,
    pub samples_per_cell: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub channels: usize,
    /// Side length; `size * size` must be a power of two.
    pub size: usize,
    /// Amplitude of the content patterns.
    pub content_scale: f64,
    /// Standard deviation the per-channel style shifts are drawn with.
    pub style_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            content_classes: 4,
            style_classes: 4,
            samples_per_cell: 50,
            noise: 0.05,
            channels: 3,
            size: 16,
            content_scale: 1.0,
            style_scale: 1.0,
            seed: 0,
        }
    }
}

/// Row `row` of the Sylvester Hadamard matrix of order `n` (a power of two).
fn walsh(row: usize, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |j| if (row & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
}

/// Zero-mean, mutually orthogonal `channels x size x size` pattern of each content class.
pub fn content_prototypes(config: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let n = config.size * config.size;
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("synthetic size^2 = {n} must be a power of two")));
    }
    if config.content_classes * config.channels + 1 > n {
        return Err(Error::Config("too many content classes for the pattern space".into()));
    }
    Ok((0..config.content_classes)
        .map(|c| {
            (0..config.channels)
                .flat_map(|ch| walsh(1 + c * config.channels + ch, n).map(|v| v * config.content_scale))
                .collect()
        })
        .collect())
}

/// Per-channel shift of each style class.
pub fn style_offsets(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5354_594c);
    let normal = Normal::new(0.0, config.style_scale.max(0.0)).unwrap();
    (0..config.style_classes)
        .map(|_| (0..config.channels).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

/// Generates `content x style x samples_per_cell` samples of shape
/// `[channels, size, size]`: content pattern plus a channel-constant style
/// shift plus Gaussian noise. Content label is the pattern, private label the style.
pub fn synth_content_style(config: &SynthConfig) -> Result<GroupedDataset> {
    if config.noise.is_nan() || config.noise < 0.0 {
        return Err(Error::Config("noise must be >= 0".into()));
    }
    if config.content_classes == 0 || config.style_classes == 0 || config.samples_per_cell == 0 || config.channels == 0 {
        return Err(Error::Config("synthetic class and sample counts must be >= 1".into()));
    }
    let protos = content_prototypes(config)?;
    let styles = style_offsets(config);
    let plane = config.size * config.size;
    let item = config.channels * plane;
    let total = config.content_classes * config.style_classes * config.samples_per_cell;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise).unwrap();
    let mut data = Vec::with_capacity(total * item);
    let mut content = Vec::with_capacity(total);
    let mut private = Vec::with_capacity(total);
    for c in 0..config.content_classes {
        for (s, shift) in styles.iter().enumerate() {
            for _ in 0..config.samples_per_cell {
                for (i, p) in protos[c].iter().enumerate() {
                    let eps = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(p + shift[i / plane] + eps);
                }
                content.push(c);
                private.push(s);
            }
        }
    }
    // Interleave so contiguous slices mix classes.
    let mut order: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut shuffled = Vec::with_capacity(data.len());
    for &o in &order {
        shuffled.extend_from_slice(&data[o * item..(o + 1) * item]);
    }
    let samples = Tensor::from_vec(&[total, config.channels, config.size, config.size], shuffled)?;
    GroupedDataset::with_classes(
        samples,
        order.iter().map(|&o| content[o]).collect(),
        order.iter().map(|&o| private[o]).collect(),
        config.content_classes,
        config.style_classes,
    )
}
