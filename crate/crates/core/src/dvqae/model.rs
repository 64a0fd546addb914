use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::SampleGroup;
use crate::error::{Error, Result};
use crate::numerics::{InstanceNorm, LayerSpec, LayerStack, Parameter, Tensor};
use crate::quantizer::{slice_quantize, Codebook, CodebookConfig, QuantizeResult, DEFAULT_ALPHA, DEFAULT_BETA};

/// Default weight of the latent alignment term.
pub const DEFAULT_LAMBDA: f64 = 0.01;
/// Variance floor inside the instance-norm square root.
pub const DEFAULT_IN_EPS: f64 = 1e-5;

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Encoder/decoder topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Two stride-2 4x4 convolutions and a 1x1 projection (grid = input / 4),
    /// mirrored by the decoder with transposed convolutions.
    Conv {
        channels: usize,
        height: usize,
        width: usize,
        hidden: usize,
    },
    /// Flat input through one hidden affine layer, reshaped to a latent grid.
    Mlp {
        inputs: usize,
        hidden: usize,
        grid_height: usize,
        grid_width: usize,
    },
    /// Explicit layer lists.
    Custom {
        input_shape: Vec<usize>,
        encoder: Vec<LayerSpec>,
        decoder: Vec<LayerSpec>,
    },
}

impl Architecture {
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Conv { channels, height, width, .. } => vec![*channels, *height, *width],
            Architecture::Mlp { inputs, .. } => vec![*inputs],
            Architecture::Custom { input_shape, .. } => input_shape.clone(),
        }
    }

    /// Encoder and decoder layer lists for latent dimension `m`.
    pub fn layer_specs(&self, m: usize) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>)> {
        match *self {
            Architecture::Conv { channels, height, width, hidden } => {
                if height % 4 != 0 || width % 4 != 0 || height < 4 || width < 4 {
                    return Err(Error::Config(format!(
                        "conv architecture needs height and width divisible by 4, got {height}x{width}"
                    )));
                }
                let down = |i, o| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 4, stride: 2, padding: 1 };
                let up = |i, o| LayerSpec::ConvTranspose2d { in_channels: i, out_channels: o, kernel: 4, stride: 2, padding: 1 };
                let point = |i, o| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 1, stride: 1, padding: 0 };
                Ok((
                    vec![down(channels, hidden), LayerSpec::Relu, down(hidden, hidden), LayerSpec::Relu, point(hidden, m)],
                    vec![point(m, hidden), LayerSpec::Relu, up(hidden, hidden), LayerSpec::Relu, up(hidden, channels)],
                ))
            }
            Architecture::Mlp { inputs, hidden, grid_height, grid_width } => {
                let latent = m * grid_height * grid_width;
                Ok((
                    vec![
                        LayerSpec::Affine { inputs, outputs: hidden },
                        LayerSpec::Relu,
                        LayerSpec::Affine { inputs: hidden, outputs: latent },
                        LayerSpec::Reshape { shape: vec![m, grid_height, grid_width] },
                    ],
                    vec![
                        LayerSpec::Reshape { shape: vec![latent] },
                        LayerSpec::Affine { inputs: latent, outputs: hidden },
                        LayerSpec::Relu,
                        LayerSpec::Affine { inputs: hidden, outputs: inputs },
                    ],
                ))
            }
            Architecture::Custom { ref encoder, ref decoder, .. } => Ok((encoder.clone(), decoder.clone())),
        }
    }
}

/// Everything needed to build a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvqaeConfig {
    pub architecture: Architecture,
    pub codebook: CodebookConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_eps")]
    pub in_eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_IN_EPS
}

impl DvqaeConfig {
    pub fn new(architecture: Architecture, codebook: CodebookConfig) -> Self {
        DvqaeConfig {
            architecture,
            codebook,
            weights: LossWeights::default(),
            in_eps: DEFAULT_IN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codebook.validate()?;
        let w = self.weights;
        if [w.alpha, w.beta, w.lambda].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.in_eps > 0.0) {
            return Err(Error::Config("instance-norm epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// How the private vector is altered before decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum PrivateVariant {
    Zeroed,
    /// Adds `N(0, sigma^2)` noise to every entry.
    Perturbed { sigma: f64, seed: u64 },
    /// Uses another group's private vector.
    Replaced(Vec<f64>),
}

/// Public codes plus private residual of a group of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSplit {
    /// Quantization of all cells of all samples, sample-major.
    pub public: QuantizeResult,
    pub samples: usize,
    /// Group mean of the pre-normalization residual, length `M`.
    pub private: Vec<f64>,
    /// Per-sample cell means of the same residual, before averaging.
    pub sample_private: Vec<Vec<f64>>,
}

/// `[B, M, H, W]` to `B*H*W` rows of length `M`.
pub fn to_cells(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (b, m, hw) = (s[0], s[1], s[2..].iter().product::<usize>());
    let mut out = vec![0.0; t.len()];
    let d = t.data();
    for n in 0..b {
        for c in 0..m {
            for p in 0..hw {
                out[(n * hw + p) * m + c] = d[(n * m + c) * hw + p];
            }
        }
    }
    out
}

/// Inverse of [`to_cells`].
pub fn from_cells(cells: &[f64], batch: usize, m: usize, h: usize, w: usize) -> Result<Tensor> {
    let hw = h * w;
    if cells.len() != batch * m * hw {
        return Err(Error::shape("latent cells", &[batch * hw, m], &[cells.len()]));
    }
    let mut out = vec![0.0; cells.len()];
    for n in 0..batch {
        for c in 0..m {
            for p in 0..hw {
                out[(n * m + c) * hw + p] = cells[(n * hw + p) * m + c];
            }
        }
    }
    Tensor::from_vec(&[batch, m, h, w], out)
}

/// Encoder, instance norm, codebook and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DvqaeModel {
    pub config: DvqaeConfig,
    pub encoder: LayerStack,
    pub norm: InstanceNorm,
    pub codebook: Codebook,
    pub decoder: LayerStack,
}

impl DvqaeModel {
    /// Fresh model; weights and atoms drawn from `seed`.
    pub fn new(config: DvqaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.codebook.dim;
        let (enc_specs, dec_specs) = config.architecture.layer_specs(m)?;
        let encoder = LayerStack::with_prefix("encoder.", &config.architecture.input_shape(), enc_specs, &mut rng)?;
        let decoder = LayerStack::with_prefix("decoder.", encoder.output_shape(), dec_specs, &mut rng)?;
        let atoms = (0..config.codebook.size * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let codebook = Codebook::from_atoms(config.codebook, atoms)?;
        let norm = InstanceNorm::with_prefix("in", m, config.in_eps);
        Self::from_parts(config, encoder, norm, codebook, decoder)
    }

    /// Assembles a model, checking that the parts compose.
    pub fn from_parts(
        config: DvqaeConfig,
        encoder: LayerStack,
        norm: InstanceNorm,
        codebook: Codebook,
        decoder: LayerStack,
    ) -> Result<Self> {
        config.validate()?;
        let out = encoder.output_shape();
        let m = codebook.dim();
        if out.len() != 3 || out[0] != m {
            return Err(Error::shape("encoder output", &[m, 0, 0], out));
        }
        if decoder.input_shape() != out {
            return Err(Error::shape("decoder input", out, decoder.input_shape()));
        }
        if decoder.output_shape() != encoder.input_shape() {
            return Err(Error::shape("decoder output", encoder.input_shape(), decoder.output_shape()));
        }
        if norm.channels() != m {
            return Err(Error::shape("instance norm channels", &[m], &[norm.channels()]));
        }
        if *codebook.config() != config.codebook {
            return Err(Error::Config("codebook does not match model config".into()));
        }
        Ok(DvqaeModel { config, encoder, norm, codebook, decoder })
    }

    pub fn input_shape(&self) -> &[usize] {
        self.encoder.input_shape()
    }

    pub fn latent_dim(&self) -> usize {
        self.codebook.dim()
    }

    /// Latent grid `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        let s = self.encoder.output_shape();
        (s[1], s[2])
    }

    pub fn cells_per_sample(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Indices per sample on the wire: `H * W * n_c`.
    pub fn indices_per_sample(&self) -> usize {
        self.cells_per_sample() * self.codebook.config().slices
    }

    /// Pre-normalization encoder output `h`, `[B, M, H, W]`.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.infer(x)
    }

    /// Normalized encoder output `IN(h)`, the tensor that gets quantized.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.infer(&self.encode_raw(x)?)
    }

    /// Quantizes a `[B, M, H, W]` latent tensor.
    pub fn quantize(&self, z: &Tensor) -> Result<QuantizeResult> {
        slice_quantize(&to_cells(z), &self.codebook)
    }

    /// Rebuilds `z_q` cells from transmitted indices (`cells x n_c`).
    pub fn lookup(&self, indices: &[u32]) -> Result<Vec<f64>> {
        let cfg = self.codebook.config();
        if indices.len() % cfg.slices != 0 {
            return Err(Error::shape("index lookup", &[cfg.slices], &[indices.len()]));
        }
        let mut out = Vec::with_capacity(indices.len() / cfg.slices * cfg.dim);
        for (k, &i) in indices.iter().enumerate() {
            if i as usize >= cfg.size {
                return Err(Error::Protocol(format!("index {i} outside codebook of {}", cfg.size)));
            }
            out.extend_from_slice(self.codebook.sub_atom(i as usize, k % cfg.slices));
        }
        Ok(out)
    }

    /// Public codes and private residual for a batch treated as one group.
    pub fn split_batch(&self, x: &Tensor) -> Result<LatentSplit> {
        let h = self.encode_raw(x)?;
        let n = self.norm.infer(&h)?;
        let public = self.quantize(&n)?;
        let (m, hw, b) = (self.latent_dim(), self.cells_per_sample(), x.batch());
        let h_cells = to_cells(&h);
        let mut sample_private = vec![vec![0.0; m]; b];
        for (s, acc) in sample_private.iter_mut().enumerate() {
            for p in 0..hw {
                let row = (s * hw + p) * m;
                for c in 0..m {
                    acc[c] += h_cells[row + c] - public.quantized[row + c];
                }
            }
            acc.iter_mut().for_each(|v| *v /= hw as f64);
        }
        let mut private = vec![0.0; m];
        for sp in &sample_private {
            private.iter_mut().zip(sp).for_each(|(a, v)| *a += v);
        }
        private.iter_mut().for_each(|v| *v /= b as f64);
        Ok(LatentSplit { public, samples: b, private, sample_private })
    }

    /// Splits a same-private-class group into `Z•` and `Z∘`.
    pub fn split_latent(&self, group: &SampleGroup) -> Result<LatentSplit> {
        if group.is_empty() {
            return Err(Error::Empty("sample group"));
        }
        self.split_batch(&group.samples)
    }

    /// Decodes `z_q` cells with `private` broadcast onto every cell.
    pub fn decode_parts(&self, zq_cells: &[f64], samples: usize, private: &[f64]) -> Result<Tensor> {
        let m = self.latent_dim();
        if private.len() != m {
            return Err(Error::shape("private vector", &[m], &[private.len()]));
        }
        let mut cells = zq_cells.to_vec();
        for row in cells.chunks_mut(m) {
            row.iter_mut().zip(private).for_each(|(a, p)| *a += p);
        }
        let (h, w) = self.grid();
        self.decoder.infer(&from_cells(&cells, samples, m, h, w)?)
    }

    pub fn decode(&self, split: &LatentSplit) -> Result<Tensor> {
        self.decode_parts(&split.public.quantized, split.samples, &split.private)
    }

    /// Decodes with a zeroed, noised or substituted private vector.
    pub fn reconstruct_private_variant(&self, split: &LatentSplit, variant: &PrivateVariant) -> Result<Tensor> {
        let private = match variant {
            PrivateVariant::Zeroed => vec![0.0; self.latent_dim()],
            PrivateVariant::Perturbed { sigma, seed } => {
                if !(*sigma >= 0.0) {
                    return Err(Error::Config("noise sigma must be >= 0".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let normal = Normal::new(0.0, *sigma).unwrap();
                split
                    .private
                    .iter()
                    .map(|v| if *sigma == 0.0 { *v } else { v + normal.sample(&mut rng) })
                    .collect()
            }
            PrivateVariant::Replaced(other) => {
                if other.len() != self.latent_dim() {
                    return Err(Error::shape("replacement private vector", &[self.latent_dim()], &[other.len()]));
                }
                other.clone()
            }
        };
        self.decode_parts(&split.public.quantized, split.samples, &private)
    }

    /// Mean squared reconstruction error when each sample is decoded with
    /// its own group's private vector.
    pub fn reconstruction_error(&self, x: &Tensor, groups: &[usize]) -> Result<f64> {
        Ok(self.batch_loss(x, groups)?.reconstruction)
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.decoder.parameter_count() + 2 * self.norm.channels() + self.codebook.atoms.len()
    }

    /// Trainable tensors other than the codebook.
    pub(crate) fn network_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.extend(self.norm.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.network_params_mut() {
            p.zero_grad();
        }
        self.codebook.atoms.zero_grad();
    }
}
