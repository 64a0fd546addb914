//! Instance normalization over the spatial extent of each channel.

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Per-input, per-channel standardization with a trainable affine map.
///
/// Input layout is `[batch, channels, spatial...]`; statistics are taken over
/// the spatial elements of one channel of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm {
    pub scale: Parameter,
    pub shift: Parameter,
    pub eps: f64,
    cache: Option<NormCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(channels: usize, eps: f64) -> Self {
        Self::with_prefix("in", channels, eps)
    }

    pub(crate) fn with_prefix(prefix: &str, channels: usize, eps: f64) -> Self {
        assert!(eps > 0.0, "instance norm epsilon must be positive");
        InstanceNorm {
            scale: Parameter::new(format!("{prefix}.scale"), Tensor::full(&[channels], 1.0)),
            shift: Parameter::new(format!("{prefix}.shift"), Tensor::zeros(&[channels])),
            eps,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Forward pass without recording anything for backward.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.compute(x)?.0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.compute(x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn compute(&self, x: &Tensor) -> Result<(Tensor, NormCache)> {
        let shape = x.shape();
        if shape.len() < 3 || shape[1] != self.channels() {
            return Err(Error::shape(
                "instance norm input",
                &[0, self.channels(), 0],
                shape,
            ));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let mut out = x.clone();
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(batch * channels);
        let (gamma, beta) = (self.scale.value.data(), self.shift.value.data());
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * spatial;
                let src = &x.data()[start..start + spatial];
                let mean = src.iter().sum::<f64>() / spatial as f64;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / spatial as f64;
                let inv = 1.0 / (var + self.eps).sqrt();
                inv_std.push(inv);
                let norm = &mut normalized.data_mut()[start..start + spatial];
                for (n, v) in norm.iter_mut().zip(src) {
                    *n = (v - mean) * inv;
                }
                let dst = &mut out.data_mut()[start..start + spatial];
                for (o, n) in dst.iter_mut().zip(norm.iter()) {
                    *o = gamma[c] * n + beta[c];
                }
            }
        }
        Ok((out, NormCache { normalized, inv_std }))
    }

    /// Accumulates scale/shift gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("instance norm backward called before forward".into()))?;
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::shape(
                "instance norm upstream gradient",
                cache.normalized.shape(),
                grad_out.shape(),
            ));
        }
        let shape = grad_out.shape();
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let n = spatial as f64;
        let mut grad_in = Tensor::zeros(shape);
        let gamma = self.scale.value.data().to_vec();
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * spatial;
                let g = &grad_out.data()[start..start + spatial];
                let xhat = &cache.normalized.data()[start..start + spatial];
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for (gv, xv) in g.iter().zip(xhat) {
                    sum_g += gv;
                    sum_gx += gv * xv;
                }
                self.shift.grad.data_mut()[c] += sum_g;
                self.scale.grad.data_mut()[c] += sum_gx;
                // d/dx of the standardization, with dxhat = gamma * g.
                let mean_d = gamma[c] * sum_g / n;
                let mean_dx = gamma[c] * sum_gx / n;
                let inv = cache.inv_std[b * channels + c];
                let dst = &mut grad_in.data_mut()[start..start + spatial];
                for i in 0..spatial {
                    dst[i] = inv * (gamma[c] * g[i] - mean_d - xhat[i] * mean_dx);
                }
            }
        }
        Ok(grad_in)
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.scale, &mut self.shift]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
