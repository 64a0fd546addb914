//! Fixed menu of layers with hand-written backward passes.
//!
//! Every layer consumes and produces batched tensors whose leading dimension
//! is the batch. Convolutions use `[channels, height, width]` per item.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::norm::InstanceNorm;
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    InstanceNorm {
        channels: usize,
        eps: f64,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: &[usize]| Err(Error::shape("layer input", expected, input));
        match *self {
            LayerSpec::Affine { inputs, outputs } => {
                if input != [inputs] {
                    return bad(&[inputs]);
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(&[in_channels, 0, 0]);
                }
                let out = |n: usize| -> Option<usize> {
                    let padded = n + 2 * padding;
                    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
                };
                match (out(input[1]), out(input[2])) {
                    (Some(h), Some(w)) => Ok(vec![out_channels, h, w]),
                    _ => bad(&[in_channels, kernel, kernel]),
                }
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels || stride == 0 {
                    return bad(&[in_channels, 0, 0]);
                }
                let out = |n: usize| ((n - 1) * stride + kernel).checked_sub(2 * padding);
                match (out(input[1]), out(input[2])) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => Ok(vec![out_channels, h, w]),
                    _ => bad(&[in_channels, 0, 0]),
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::InstanceNorm { channels, .. } => {
                if input.len() < 2 || input[0] != channels {
                    return bad(&[channels, 0]);
                }
                Ok(input.to_vec())
            }
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return bad(shape);
                }
                Ok(shape.clone())
            }
        }
    }

    /// Number of trainable scalars this layer owns.
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Affine { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel * kernel + out_channels,
            LayerSpec::InstanceNorm { channels, .. } => 2 * channels,
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Reshape { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Cache {
    Input(Tensor),
    Output(Tensor),
    None,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Plain(Vec<Parameter>),
    Norm(InstanceNorm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    kind: Kind,
    cache: Option<Cache>,
}

impl Layer {
    fn new<R: Rng + ?Sized>(
        index: usize,
        spec: LayerSpec,
        input_shape: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let output_shape = spec.output_shape(input_shape)?;
        let mut uniform = |name: String, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
            Parameter::new(name, Tensor::from_vec(shape, data).expect("valid shape"))
        };
        let kind = match spec {
            LayerSpec::Affine { inputs, outputs } => Kind::Plain(vec![
                uniform(format!("{index}.weight"), &[outputs, inputs], inputs),
                uniform(format!("{index}.bias"), &[outputs], inputs),
            ]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                Kind::Plain(vec![
                    uniform(
                        format!("{index}.weight"),
                        &[out_channels, in_channels, kernel, kernel],
                        fan_in,
                    ),
                    uniform(format!("{index}.bias"), &[out_channels], fan_in),
                ])
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = out_channels * kernel * kernel;
                Kind::Plain(vec![
                    uniform(
                        format!("{index}.weight"),
                        &[in_channels, out_channels, kernel, kernel],
                        fan_in,
                    ),
                    uniform(format!("{index}.bias"), &[out_channels], fan_in),
                ])
            }
            LayerSpec::InstanceNorm { channels, eps } => {
                if eps <= 0.0 {
                    return Err(Error::Config("instance norm epsilon must be > 0".into()));
                }
                Kind::Norm(InstanceNorm::with_prefix(&index.to_string(), channels, eps))
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Reshape { .. } => {
                Kind::Plain(Vec::new())
            }
        };
        Ok(Layer {
            spec,
            input_shape: input_shape.to_vec(),
            output_shape,
            kind,
            cache: None,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match &self.kind {
            Kind::Plain(p) => p.iter().collect(),
            Kind::Norm(n) => vec![&n.scale, &n.shift],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match &mut self.kind {
            Kind::Plain(p) => p.iter_mut().collect(),
            Kind::Norm(n) => n.params_mut().into_iter().collect(),
        }
    }

    fn batched(&self, batch: usize, per_item: &[usize]) -> Vec<usize> {
        let mut shape = vec![batch];
        shape.extend_from_slice(per_item);
        shape
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let batch = input.batch();
        let out_shape = self.batched(batch, &self.output_shape);
        match (&self.spec, &self.kind) {
            (LayerSpec::Affine { inputs, outputs }, Kind::Plain(p)) => {
                let (w, b) = (p[0].value.data(), p[1].value.data());
                let mut out = Tensor::zeros(&out_shape);
                for n in 0..batch {
                    let x = input.item(n);
                    let y = out.item_mut(n);
                    for o in 0..*outputs {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        y[o] = b[o] + dot(row, x);
                    }
                }
                Ok(out)
            }
            (&LayerSpec::Conv2d { kernel, stride, padding, .. }, Kind::Plain(p)) => {
                let mut out = Tensor::zeros(&out_shape);
                let geom = ConvGeom::new(&self.input_shape, &self.output_shape, kernel, stride, padding);
                for n in 0..batch {
                    geom.conv_forward(p[0].value.data(), p[1].value.data(), input.item(n), out.item_mut(n));
                }
                Ok(out)
            }
            (&LayerSpec::ConvTranspose2d { kernel, stride, padding, .. }, Kind::Plain(p)) => {
                let mut out = Tensor::zeros(&out_shape);
                let geom = ConvGeom::new(&self.input_shape, &self.output_shape, kernel, stride, padding);
                for n in 0..batch {
                    geom.transpose_forward(p[0].value.data(), p[1].value.data(), input.item(n), out.item_mut(n));
                }
                Ok(out)
            }
            (LayerSpec::Relu, _) => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    *v = v.max(0.0);
                }
                Ok(out)
            }
            (LayerSpec::Sigmoid, _) => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    *v = sigmoid(*v);
                }
                Ok(out)
            }
            (LayerSpec::InstanceNorm { .. }, Kind::Norm(norm)) => norm.infer(input),
            (LayerSpec::Reshape { .. }, _) => input.clone().reshape(&out_shape),
            _ => unreachable!("layer kind always matches its spec"),
        }
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        if let Kind::Norm(norm) = &mut self.kind {
            let out = norm.forward(input)?;
            self.cache = Some(Cache::None);
            return Ok(out);
        }
        let out = self.infer(input)?;
        self.cache = Some(match self.spec {
            LayerSpec::Affine { .. } | LayerSpec::Conv2d { .. } | LayerSpec::ConvTranspose2d { .. } => {
                Cache::Input(input.clone())
            }
            // ReLU keeps its input so the kink side is known exactly.
            LayerSpec::Relu => Cache::Input(input.clone()),
            LayerSpec::Sigmoid => Cache::Output(out.clone()),
            _ => Cache::None,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let batch = grad_out.batch();
        let in_shape = self.batched(batch, &self.input_shape);
        match (&self.spec, &mut self.kind, cache) {
            (LayerSpec::Affine { inputs, outputs }, Kind::Plain(p), Cache::Input(x)) => {
                let (inputs, outputs) = (*inputs, *outputs);
                let mut grad_in = Tensor::zeros(&in_shape);
                let (wp, rest) = p.split_at_mut(1);
                let w = wp[0].value.data();
                let gw = wp[0].grad.data_mut();
                let gb = rest[0].grad.data_mut();
                for n in 0..batch {
                    let g = grad_out.item(n);
                    let xin = x.item(n);
                    let gx = grad_in.item_mut(n);
                    for o in 0..outputs {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let row = &w[o * inputs..(o + 1) * inputs];
                        let grow = &mut gw[o * inputs..(o + 1) * inputs];
                        for i in 0..inputs {
                            grow[i] += go * xin[i];
                            gx[i] += go * row[i];
                        }
                    }
                }
                Ok(grad_in)
            }
            (&LayerSpec::Conv2d { kernel, stride, padding, .. }, Kind::Plain(p), Cache::Input(x)) => {
                let geom = ConvGeom::new(&self.input_shape, &self.output_shape, kernel, stride, padding);
                let mut grad_in = Tensor::zeros(&in_shape);
                let (wp, rest) = p.split_at_mut(1);
                for n in 0..batch {
                    geom.conv_backward(
                        wp[0].value.data(),
                        x.item(n),
                        grad_out.item(n),
                        wp[0].grad.data_mut(),
                        rest[0].grad.data_mut(),
                        grad_in.item_mut(n),
                    );
                }
                Ok(grad_in)
            }
            (&LayerSpec::ConvTranspose2d { kernel, stride, padding, .. }, Kind::Plain(p), Cache::Input(x)) => {
                let geom = ConvGeom::new(&self.input_shape, &self.output_shape, kernel, stride, padding);
                let mut grad_in = Tensor::zeros(&in_shape);
                let (wp, rest) = p.split_at_mut(1);
                for n in 0..batch {
                    geom.transpose_backward(
                        wp[0].value.data(),
                        x.item(n),
                        grad_out.item(n),
                        wp[0].grad.data_mut(),
                        rest[0].grad.data_mut(),
                        grad_in.item_mut(n),
                    );
                }
                Ok(grad_in)
            }
            (LayerSpec::Relu, _, Cache::Input(x)) => {
                let mut grad_in = grad_out.clone();
                for (g, v) in grad_in.data_mut().iter_mut().zip(x.data()) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok(grad_in)
            }
            (LayerSpec::Sigmoid, _, Cache::Output(y)) => {
                let mut grad_in = grad_out.clone();
                for (g, s) in grad_in.data_mut().iter_mut().zip(y.data()) {
                    *g *= s * (1.0 - s);
                }
                Ok(grad_in)
            }
            (LayerSpec::InstanceNorm { .. }, Kind::Norm(norm), _) => norm.backward(grad_out),
            (LayerSpec::Reshape { .. }, _, _) => grad_out.clone().reshape(&in_shape),
            _ => Err(Error::State("layer cache does not match layer kind".into())),
        }
    }

    /// Signs of the cached ReLU input, used to detect kink crossings.
    fn relu_pattern(&self, out: &mut Vec<bool>) {
        if let (LayerSpec::Relu, Some(Cache::Input(x))) = (&self.spec, &self.cache) {
            out.extend(x.data().iter().map(|v| *v > 0.0));
        }
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        if let Kind::Norm(n) = &mut self.kind {
            n.clear_cache();
        }
    }
}

/// An ordered stack of layers with a declared per-item input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl LayerStack {
    /// Builds a stack, checking that adjacent shapes compose.
    pub fn new<R: Rng + ?Sized>(
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_prefix("", input_shape, specs, rng)
    }

    pub fn with_prefix<R: Rng + ?Sized>(
        prefix: &str,
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape("stack input", &[1], input_shape));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let mut layer = Layer::new(i, spec, &shape, rng)?;
            for p in layer.params_mut() {
                p.name = format!("{prefix}{}", p.name);
            }
            shape = layer.output_shape.clone();
            layers.push(layer);
        }
        Ok(LayerStack {
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1
            || input.shape()[1..] != self.input_shape[..]
        {
            let mut expected = vec![input.shape().first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("stack input", &expected, input.shape()));
        }
        Ok(())
    }

    /// Forward pass that records what backward needs.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Forward pass on a frozen stack; safe to share across threads.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        if self.layers.iter().any(|l| l.cache.is_none()) {
            return Err(Error::State("backward called before forward".into()));
        }
        let batch = upstream.shape().first().copied().unwrap_or(0);
        let mut expected = vec![batch];
        expected.extend_from_slice(&self.output_shape);
        if upstream.shape() != expected.as_slice() {
            return Err(Error::shape("stack upstream gradient", &expected, upstream.shape()));
        }
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }

    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.relu_pattern(&mut out);
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index ranges for strided 2-D convolutions.
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

/// Range of `i` in `[0, iter_len)` with `i * stride + offset` inside `[0, target_len)`.
fn valid_range(iter_len: usize, target_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let top = target_len as isize - 1 - offset;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top / s) + 1).min(iter_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

impl ConvGeom {
    fn new(input: &[usize], output: &[usize], kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeom {
            in_c: input[0],
            in_h: input[1],
            in_w: input[2],
            out_c: output[0],
            out_h: output[1],
            out_w: output[2],
            kernel,
            stride,
            padding,
        }
    }

    fn offset(&self, k: usize) -> isize {
        k as isize - self.padding as isize
    }

    fn conv_forward(&self, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
        let (k, s) = (self.kernel, self.stride);
        let out_plane = self.out_h * self.out_w;
        let in_plane = self.in_h * self.in_w;
        for o in 0..self.out_c {
            let y_o = &mut y[o * out_plane..(o + 1) * out_plane];
            y_o.fill(b[o]);
            for c in 0..self.in_c {
                let x_c = &x[c * in_plane..(c + 1) * in_plane];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(self.out_h, self.in_h, s, self.offset(ky));
                    for kx in 0..k {
                        let wv = w[((o * self.in_c + c) * k + ky) * k + kx];
                        let off_x = self.offset(kx);
                        let (ox_lo, ox_hi) = valid_range(self.out_w, self.in_w, s, off_x);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize + self.offset(ky);
                            let row_in = &x_c[iy as usize * self.in_w..];
                            let row_out = &mut y_o[oy * self.out_w..(oy + 1) * self.out_w];
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * s) as isize + off_x;
                                row_out[ox] += wv * row_in[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv_backward(
        &self,
        w: &[f64],
        x: &[f64],
        g: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        gx: &mut [f64],
    ) {
        let (k, s) = (self.kernel, self.stride);
        let out_plane = self.out_h * self.out_w;
        let in_plane = self.in_h * self.in_w;
        for o in 0..self.out_c {
            let g_o = &g[o * out_plane..(o + 1) * out_plane];
            gb[o] += g_o.iter().sum::<f64>();
            for c in 0..self.in_c {
                let x_c = &x[c * in_plane..(c + 1) * in_plane];
                let gx_c = &mut gx[c * in_plane..(c + 1) * in_plane];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(self.out_h, self.in_h, s, self.offset(ky));
                    for kx in 0..k {
                        let widx = ((o * self.in_c + c) * k + ky) * k + kx;
                        let wv = w[widx];
                        let off_x = self.offset(kx);
                        let (ox_lo, ox_hi) = valid_range(self.out_w, self.in_w, s, off_x);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + self.offset(ky)) as usize;
                            let row_g = &g_o[oy * self.out_w..(oy + 1) * self.out_w];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize + off_x) as usize;
                                let gv = row_g[ox];
                                acc += gv * x_c[iy * self.in_w + ix];
                                gx_c[iy * self.in_w + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }

    fn transpose_forward(&self, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
        let (k, s) = (self.kernel, self.stride);
        let out_plane = self.out_h * self.out_w;
        let in_plane = self.in_h * self.in_w;
        for o in 0..self.out_c {
            y[o * out_plane..(o + 1) * out_plane].fill(b[o]);
        }
        for c in 0..self.in_c {
            let x_c = &x[c * in_plane..(c + 1) * in_plane];
            for o in 0..self.out_c {
                let y_o = &mut y[o * out_plane..(o + 1) * out_plane];
                for ky in 0..k {
                    let off_y = self.offset(ky);
                    let (iy_lo, iy_hi) = valid_range(self.in_h, self.out_h, s, off_y);
                    for kx in 0..k {
                        let wv = w[((c * self.out_c + o) * k + ky) * k + kx];
                        let off_x = self.offset(kx);
                        let (ix_lo, ix_hi) = valid_range(self.in_w, self.out_w, s, off_x);
                        for iy in iy_lo..iy_hi {
                            let oy = ((iy * s) as isize + off_y) as usize;
                            let row_in = &x_c[iy * self.in_w..(iy + 1) * self.in_w];
                            let row_out = &mut y_o[oy * self.out_w..(oy + 1) * self.out_w];
                            for ix in ix_lo..ix_hi {
                                let ox = ((ix * s) as isize + off_x) as usize;
                                row_out[ox] += wv * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    fn transpose_backward(
        &self,
        w: &[f64],
        x: &[f64],
        g: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        gx: &mut [f64],
    ) {
        let (k, s) = (self.kernel, self.stride);
        let out_plane = self.out_h * self.out_w;
        let in_plane = self.in_h * self.in_w;
        for o in 0..self.out_c {
            gb[o] += g[o * out_plane..(o + 1) * out_plane].iter().sum::<f64>();
        }
        for c in 0..self.in_c {
            let x_c = &x[c * in_plane..(c + 1) * in_plane];
            let gx_c = &mut gx[c * in_plane..(c + 1) * in_plane];
            for o in 0..self.out_c {
                let g_o = &g[o * out_plane..(o + 1) * out_plane];
                for ky in 0..k {
                    let off_y = self.offset(ky);
                    let (iy_lo, iy_hi) = valid_range(self.in_h, self.out_h, s, off_y);
                    for kx in 0..k {
                        let widx = ((c * self.out_c + o) * k + ky) * k + kx;
                        let wv = w[widx];
                        let off_x = self.offset(kx);
                        let (ix_lo, ix_hi) = valid_range(self.in_w, self.out_w, s, off_x);
                        let mut acc = 0.0;
                        for iy in iy_lo..iy_hi {
                            let oy = ((iy * s) as isize + off_y) as usize;
                            let row_g = &g_o[oy * self.out_w..(oy + 1) * self.out_w];
                            for ix in ix_lo..ix_hi {
                                let ox = ((ix * s) as isize + off_x) as usize;
                                let gv = row_g[ox];
                                acc += gv * x_c[iy * self.in_w + ix];
                                gx_c[iy * self.in_w + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}
