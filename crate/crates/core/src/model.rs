//! The polar encoder-decoder.
//!
//! Encoder: alternating column-wise (`k x 1`, stride 2 down the range axis)
//! and row-wise (`1 x k`, stride 2 across azimuth) convolutions, batch norm
//! and dropout after every column/row pair, then a 3x3 convolution whose
//! output is concatenated with the sixth layer's output. Decoder: row-wise
//! then column-wise transposed convolutions, a 5x2 smoothing convolution,
//! a tall 32x1 column convolution, bilinear upsampling to the input grid
//! and a 1x1 head.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    self, batchnorm_backward, batchnorm_infer, batchnorm_train, bilinear_upsample,
    bilinear_upsample_backward, concat_channels, conv2d, dropout, dropout_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, split_channels, transposed_conv2d, BatchNormCache,
    BatchNormState, ConvSpec, DropoutMask, Mode, Real, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {actual:?} does not match model input {expected:?}")]
    Input {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite activation after layer {layer}")]
    Diverged { layer: String },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    Probability { index: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub name: String,
    pub kind: LayerKind,
    /// `[rows, cols]`
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub out_channels: usize,
    pub activation: Activation,
    /// Batch norm followed by dropout after the activation.
    pub norm_dropout: bool,
}

impl LayerConfig {
    fn new(name: &str, kind: LayerKind, kernel: [usize; 2], stride: [usize; 2], out: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            kernel,
            stride,
            out_channels: out,
            activation: Activation::Relu,
            norm_dropout: false,
        }
    }

    fn normed(mut self) -> Self {
        self.norm_dropout = true;
        self
    }

    fn sigmoid(mut self) -> Self {
        self.activation = Activation::Sigmoid;
        self
    }

    pub fn spec(&self, in_channels: usize) -> ConvSpec {
        ConvSpec::new(
            (self.kernel[0], self.kernel[1]),
            (self.stride[0], self.stride[1]),
            in_channels,
            self.out_channels,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One sigmoid channel `p`, read as the two-class distribution `(1-p, p)`.
    Sigmoid1ch,
    /// Two logits through a softmax; channel 1 is the open class.
    Softmax2ch,
}

impl Head {
    fn channels(self) -> usize {
        match self {
            Head::Sigmoid1ch => 1,
            Head::Softmax2ch => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// 1 for range-azimuth maps, 64 (Doppler bins) for range-azimuth-Doppler.
    pub input_channels: usize,
    pub encoder: Vec<LayerConfig>,
    /// Encoder layer (0-based) whose output joins the last encoder output.
    pub skip_from: usize,
    pub decoder: Vec<LayerConfig>,
    pub head: Head,
    pub dropout_rate: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::ra()
    }
}

impl ModelConfig {
    /// Default geometry for 128x128 single-channel range-azimuth input.
    pub fn ra() -> Self {
        Self::with_channels(1)
    }

    /// Default geometry for 128x128x64 range-azimuth-Doppler input.
    pub fn rad() -> Self {
        Self::with_channels(64)
    }

    pub fn with_channels(input_channels: usize) -> Self {
        use LayerKind::{Conv, TransposedConv};
        let col = |name, k, out| LayerConfig::new(name, Conv, [k, 1], [2, 1], out);
        let row = |name, k, out| LayerConfig::new(name, Conv, [1, k], [1, 2], out);
        Self {
            input_height: 128,
            input_width: 128,
            input_channels,
            encoder: vec![
                col("enc1", 9, 48),
                row("enc2", 5, 48).normed(),
                col("enc3", 9, 64),
                row("enc4", 5, 64).normed(),
                col("enc5", 9, 96),
                row("enc6", 5, 96).normed(),
                LayerConfig::new("enc7", Conv, [3, 3], [1, 1], 96),
            ],
            skip_from: 5,
            decoder: vec![
                LayerConfig::new("dec1", TransposedConv, [1, 16], [1, 2], 64),
                LayerConfig::new("dec2", TransposedConv, [32, 1], [2, 1], 48),
                LayerConfig::new("dec3", Conv, [5, 2], [1, 1], 32).normed(),
                LayerConfig::new("dec4", Conv, [32, 1], [1, 1], 16).sigmoid(),
            ],
            head: Head::Sigmoid1ch,
            dropout_rate: 0.5,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }

    /// Same layer topology on a small grid with narrow layers, for
    /// double-precision gradient checks.
    pub fn reduced(size: usize, input_channels: usize) -> Self {
        let mut cfg = Self::with_channels(input_channels);
        cfg.input_height = size;
        cfg.input_width = size;
        let widths = [3, 3, 4, 4, 5, 5, 5];
        for (layer, w) in cfg.encoder.iter_mut().zip(widths) {
            layer.out_channels = w;
            layer.kernel = layer.kernel.map(|k| k.min(3));
            if layer.name == "enc7" {
                layer.kernel = [3, 3];
            }
        }
        let dec = [([1, 3], 4), ([3, 1], 3), ([5, 2], 3), ([4, 1], 2)];
        for (layer, (k, w)) in cfg.decoder.iter_mut().zip(dec) {
            layer.kernel = k;
            layer.out_channels = w;
        }
        cfg
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_height, self.input_width, self.input_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return fail("encoder and decoder must be non-empty".into());
        }
        if self.skip_from + 1 >= self.encoder.len() {
            return fail(format!("skip_from {} must precede the last encoder layer", self.skip_from));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return fail("batch norm epsilon must be positive and momentum in [0, 1)".into());
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return fail("input dimensions must be positive".into());
        }
        for layer in self.encoder.iter().chain(&self.decoder) {
            if layer.kernel.contains(&0) || layer.stride.contains(&0) || layer.out_channels == 0 {
                return fail(format!("layer {} has a zero size", layer.name));
            }
        }
        let chain = self.shape_chain()?;
        let last = chain.last().expect("non-empty chain");
        if last.output[..2] != [self.input_height, self.input_width] {
            return fail(format!("output {:?} does not match input grid", last.output));
        }
        Ok(())
    }

    /// Per-layer `[rows, cols, channels]` shapes for one frame.
    pub fn shape_chain(&self) -> Result<Vec<LayerShape>> {
        let mut chain = Vec::new();
        let mut cur = self.input_shape();
        let mut skip = None;
        for (i, layer) in self.encoder.iter().enumerate() {
            let out = layer_output(layer, cur)?;
            chain.push(LayerShape::new(&layer.name, cur, out));
            if i == self.skip_from {
                skip = Some(out);
            }
            cur = out;
        }
        let skip = skip.ok_or_else(|| ModelError::Config("skip layer missing".into()))?;
        if skip[..2] != cur[..2] {
            return Err(ModelError::Config(format!(
                "skip output {skip:?} and encoder output {cur:?} differ spatially"
            )));
        }
        let cat = [cur[0], cur[1], cur[2] + skip[2]];
        chain.push(LayerShape::new("concat", cur, cat));
        cur = cat;
        for layer in &self.decoder {
            let out = layer_output(layer, cur)?;
            chain.push(LayerShape::new(&layer.name, cur, out));
            cur = out;
        }
        let up = [self.input_height, self.input_width, cur[2]];
        if up[0] < cur[0] || up[1] < cur[1] {
            return Err(ModelError::Config("decoder output larger than input".into()));
        }
        chain.push(LayerShape::new("upsample", cur, up));
        chain.push(LayerShape::new("head", up, [up[0], up[1], self.head.channels()]));
        Ok(chain)
    }
}

fn layer_output(layer: &LayerConfig, input: [usize; 3]) -> Result<[usize; 3]> {
    let spec = layer.spec(input[2]);
    let (h, w) = match layer.kind {
        LayerKind::Conv => spec.output_size(input[0], input[1]).ok_or_else(|| {
            ModelError::Config(format!("layer {} does not fit its input", layer.name))
        })?,
        LayerKind::TransposedConv => spec.transposed_output_size(input[0], input[1]),
    };
    Ok([h, w, layer.out_channels])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub layer: String,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl LayerShape {
    fn new(layer: &str, input: [usize; 3], output: [usize; 3]) -> Self {
        Self {
            layer: layer.to_string(),
            input,
            output,
        }
    }
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    spec: ConvSpec,
    kind: LayerKind,
    activation: Activation,
    weight: usize,
    bias: usize,
    /// gamma, beta and the index into the batch-norm state list
    norm: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub per_layer: Vec<(String, usize)>,
}

/// Network parameters, batch-norm running statistics and the wiring
/// derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct PolarNet<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    norms: Vec<(String, BatchNormState<T>)>,
    encoder: Vec<LayerSlots>,
    decoder: Vec<LayerSlots>,
    head: LayerSlots,
}

struct LayerCache<T: Real> {
    input: Tensor<T>,
    activated: Tensor<T>,
    norm: Option<BatchNormCache<T>>,
    mask: Option<DropoutMask<T>>,
}

/// Activations kept from [`PolarNet::forward_train`] for the backward pass.
pub struct ForwardCache<T: Real> {
    encoder: Vec<LayerCache<T>>,
    decoder: Vec<LayerCache<T>>,
    skip_channels: usize,
    decoder_hw: (usize, usize),
    head_input: Tensor<T>,
    probs: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }
}

fn he_uniform<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::lit(rng.random_range(-limit..limit))).collect()
}

fn xavier_uniform<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| T::lit(rng.random_range(-limit..limit))).collect()
}

impl<T: Real> PolarNet<T> {
    /// Builds and initializes every parameter: He-uniform weights for ReLU
    /// layers, Xavier-uniform for sigmoid layers, zero biases, unit gamma.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut channels = config.input_channels;
        let mut add_layer = |layer: &LayerConfig, cin: usize, params: &mut Vec<Param<T>>| {
            let spec = layer.spec(cin);
            let (wshape, fan_in, fan_out) = match layer.kind {
                LayerKind::Conv => (
                    spec.conv_weight_shape(),
                    spec.kernel_rows * spec.kernel_cols * cin,
                    spec.kernel_rows * spec.kernel_cols * spec.out_channels,
                ),
                LayerKind::TransposedConv => (
                    spec.transposed_weight_shape(),
                    spec.kernel_rows * spec.kernel_cols * cin,
                    spec.kernel_rows * spec.kernel_cols * spec.out_channels,
                ),
            };
            let len = spec.weight_len();
            let w = match layer.activation {
                Activation::Relu => he_uniform(len, fan_in, rng),
                Activation::Sigmoid => xavier_uniform(len, fan_in, fan_out, rng),
            };
            let weight = params.len();
            params.push(Param {
                name: format!("{}/weight", layer.name),
                tensor: Tensor::new(wshape, w).expect("weight length"),
            });
            params.push(Param {
                name: format!("{}/bias", layer.name),
                tensor: Tensor::zeros([layer.out_channels]),
            });
            let norm = layer.norm_dropout.then(|| {
                let g = params.len();
                params.push(Param {
                    name: format!("{}/bn/gamma", layer.name),
                    tensor: Tensor::full([layer.out_channels], T::one()),
                });
                params.push(Param {
                    name: format!("{}/bn/beta", layer.name),
                    tensor: Tensor::zeros([layer.out_channels]),
                });
                norms.push((
                    format!("{}/bn", layer.name),
                    BatchNormState::new(layer.out_channels, config.bn_momentum, config.bn_epsilon),
                ));
                (g, g + 1, norms.len() - 1)
            });
            LayerSlots {
                spec,
                kind: layer.kind,
                activation: layer.activation,
                weight,
                bias: weight + 1,
                norm,
            }
        };

        let mut encoder = Vec::new();
        let mut skip_channels = 0;
        for (i, layer) in config.encoder.iter().enumerate() {
            encoder.push(add_layer(layer, channels, &mut params));
            channels = layer.out_channels;
            if i == config.skip_from {
                skip_channels = channels;
            }
        }
        channels += skip_channels;
        let mut decoder = Vec::new();
        for layer in &config.decoder {
            decoder.push(add_layer(layer, channels, &mut params));
            channels = layer.out_channels;
        }
        let head_cfg = LayerConfig::new("head", LayerKind::Conv, [1, 1], [1, 1], config.head.channels()).sigmoid();
        let head = add_layer(&head_cfg, channels, &mut params);
        Ok(Self {
            config,
            params,
            norms,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Batch-norm running statistics, in layer order.
    pub fn norm_states(&self) -> &[(String, BatchNormState<T>)] {
        &self.norms
    }

    pub fn norm_states_mut(&mut self) -> &mut [(String, BatchNormState<T>)] {
        &mut self.norms
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn param_count(&self) -> ParamCount {
        let mut per_layer: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let layer = p.name.split('/').next().unwrap_or_default().to_string();
            match per_layer.last_mut() {
                Some((name, n)) if *name == layer => *n += p.tensor.len(),
                _ => per_layer.push((layer, p.tensor.len())),
            }
        }
        ParamCount {
            total: per_layer.iter().map(|(_, n)| n).sum(),
            per_layer,
        }
    }

    /// Converts parameters and running statistics to another precision.
    pub fn cast<U: Real>(&self) -> PolarNet<U> {
        PolarNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|(n, s)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
                    (
                        n.clone(),
                        BatchNormState {
                            running_mean: conv(&s.running_mean),
                            running_var: conv(&s.running_var),
                            momentum: U::lit(s.momentum.to_f64().unwrap_or(0.0)),
                            eps: U::lit(s.eps.to_f64().unwrap_or(0.0)),
                        },
                    )
                })
                .collect(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let [h, w, c] = self.config.input_shape();
        match *x.shape() {
            [n, xh, xw, xc] if (xh, xw, xc) == (h, w, c) && n > 0 => Ok(n),
            _ => Err(ModelError::Input {
                expected: vec![0, h, w, c],
                actual: x.shape().to_vec(),
            }),
        }
    }

    /// Inference-mode forward: running statistics, no dropout. Returns open
    /// probabilities `[N, H, W]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut norms = None;
        // infer mode never draws from the generator
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(self.run(x, Mode::Infer, &mut norms, &mut rng, false)?.probs)
    }

    /// Training-mode forward: batch statistics (folded into the running
    /// statistics) and dropout drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<ForwardCache<T>> {
        let mut norms = Some(std::mem::take(&mut self.norms));
        let out = self.run(x, Mode::Train, &mut norms, rng, true);
        self.norms = norms.expect("states returned");
        out
    }

    /// Forward in the given mode keeping activations, without touching the
    /// running statistics. Used for gradient checks.
    pub fn forward_cached<R: Rng + ?Sized>(&self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<ForwardCache<T>> {
        let mut norms = (mode == Mode::Train).then(|| self.norms.clone());
        self.run(x, mode, &mut norms, rng, true)
    }

    fn run<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        train_norms: &mut Option<Vec<(String, BatchNormState<T>)>>,
        rng: &mut R,
        keep: bool,
    ) -> Result<ForwardCache<T>> {
        let n = self.check_input(x)?;
        let rate = self.config.dropout_rate;
        let mut cur = x.clone();
        let mut enc_cache = Vec::with_capacity(self.encoder.len());
        let mut skip = None;
        for (i, slots) in self.encoder.iter().enumerate() {
            let (out, cache) = self.layer_forward(slots, cur, mode, train_norms, rate, rng, keep)?;
            self.check_layer(&out, &self.config.encoder[i].name)?;
            if i == self.config.skip_from {
                skip = Some(out.clone());
            }
            enc_cache.extend(cache);
            cur = out;
        }
        let skip = skip.expect("validated skip layer");
        let skip_channels = *skip.shape().last().expect("rank 4");
        cur = concat_channels(&cur, &skip)?;
        let mut dec_cache = Vec::with_capacity(self.decoder.len());
        for (i, slots) in self.decoder.iter().enumerate() {
            let (out, cache) = self.layer_forward(slots, cur, mode, train_norms, rate, rng, keep)?;
            self.check_layer(&out, &self.config.decoder[i].name)?;
            dec_cache.extend(cache);
            cur = out;
        }
        let decoder_hw = (cur.shape()[1], cur.shape()[2]);
        let up = bilinear_upsample(&cur, self.config.input_height, self.config.input_width)?;
        let logits = conv2d(
            &up,
            &self.params[self.head.weight].tensor,
            &self.params[self.head.bias].tensor,
            &self.head.spec,
        )?;
        let probs = self.head_probs(&logits, n)?;
        Ok(ForwardCache {
            encoder: enc_cache,
            decoder: dec_cache,
            skip_channels,
            decoder_hw,
            head_input: if keep { up } else { Tensor::zeros([0]) },
            probs,
        })
    }

    fn check_layer(&self, out: &Tensor<T>, layer: &str) -> Result<()> {
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Diverged {
                layer: layer.to_string(),
            });
        }
        Ok(())
    }

    fn head_probs(&self, logits: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let probs = match self.config.head {
            Head::Sigmoid1ch => sigmoid(logits)?.reshape([n, h, w])?,
            Head::Softmax2ch => {
                let diff: Vec<T> = logits.data().chunks_exact(2).map(|z| z[1] - z[0]).collect();
                sigmoid(&Tensor::new([n, h, w], diff)?)?
            }
        };
        if probs.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Diverged { layer: "head".into() });
        }
        Ok(probs)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward<R: Rng + ?Sized>(
        &self,
        slots: &LayerSlots,
        input: Tensor<T>,
        mode: Mode,
        train_norms: &mut Option<Vec<(String, BatchNormState<T>)>>,
        rate: f64,
        rng: &mut R,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<LayerCache<T>>)> {
        let w = &self.params[slots.weight].tensor;
        let b = &self.params[slots.bias].tensor;
        let z = match slots.kind {
            LayerKind::Conv => conv2d(&input, w, b, &slots.spec)?,
            LayerKind::TransposedConv => transposed_conv2d(&input, w, b, &slots.spec)?,
        };
        let activated = match slots.activation {
            Activation::Relu => relu(&z)?,
            Activation::Sigmoid => sigmoid(&z)?,
        };
        let (out, norm, mask) = match slots.norm {
            None => (activated.clone(), None, None),
            Some((g, bt, s)) => {
                let gamma = &self.params[g].tensor;
                let beta = &self.params[bt].tensor;
                let (normed, cache) = match train_norms.as_mut() {
                    Some(states) if mode == Mode::Train => batchnorm_train(&activated, gamma, beta, &mut states[s].1)?,
                    _ => batchnorm_infer(&activated, gamma, beta, &self.norms[s].1)?,
                };
                let (dropped, mask) = dropout(&normed, rate, mode, rng)?;
                (dropped, Some(cache), mask)
            }
        };
        let cache = keep.then_some(LayerCache {
            input,
            activated,
            norm,
            mask,
        });
        Ok((out, cache))
    }

    /// Accumulates `dL/dparam` into every parameter's gradient buffer, given
    /// `dL/dprobs` for the probabilities in `cache`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_probs: &Tensor<T>) -> Result<()> {
        grad_probs.expect_shape("polarnet_backward", cache.probs.shape())?;
        let (h, w) = (self.config.input_height, self.config.input_width);
        let n = cache.probs.shape()[0];

        // d logits
        let dp_dz = sigmoid_backward(&cache.probs, grad_probs)?;
        let dlogits = match self.config.head {
            Head::Sigmoid1ch => dp_dz.reshape([n, h, w, 1])?,
            Head::Softmax2ch => {
                let mut d = Vec::with_capacity(dp_dz.len() * 2);
                for &g in dp_dz.data() {
                    d.push(-g);
                    d.push(g);
                }
                Tensor::new([n, h, w, 2], d)?
            }
        };
        let (dup, dw, db) = tensor::conv2d_backward_with(
            &cache.head_input,
            &self.params[self.head.weight].tensor,
            &self.head.spec,
            &dlogits,
            true,
        )?;
        self.accumulate(self.head.weight, &dw);
        self.accumulate(self.head.bias, &db);
        let (dh, dwid) = cache.decoder_hw;
        let mut grad = bilinear_upsample_backward(&dup.expect("requested"), dh, dwid)?;

        for (i, layer_cache) in cache.decoder.iter().enumerate().rev() {
            let slots = self.decoder[i].clone();
            grad = self.layer_backward(&slots, layer_cache, &grad, true)?.expect("requested");
        }
        let cat_channels = *grad.shape().last().expect("rank 4");
        let (mut grad, skip_grad) = split_channels(&grad, cat_channels - cache.skip_channels)?;
        for (i, layer_cache) in cache.encoder.iter().enumerate().rev() {
            if i == self.config.skip_from {
                for (g, s) in grad.data_mut().iter_mut().zip(skip_grad.data()) {
                    *g += *s;
                }
            }
            let slots = self.encoder[i].clone();
            match self.layer_backward(&slots, layer_cache, &grad, i > 0)? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, grad: &Tensor<T>) {
        let buf = self.params[idx].tensor.grad_mut();
        for (b, &g) in buf.iter_mut().zip(grad.data()) {
            *b += g;
        }
    }

    fn layer_backward(
        &mut self,
        slots: &LayerSlots,
        cache: &LayerCache<T>,
        grad_out: &Tensor<T>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut grad = grad_out.clone();
        if let Some((g, bt, _)) = slots.norm {
            grad = dropout_backward(cache.mask.as_ref(), &grad)?;
            let norm_cache = cache.norm.as_ref().expect("norm cache present");
            let grads = batchnorm_backward(norm_cache, &self.params[g].tensor, &grad)?;
            self.accumulate(g, &grads.gamma);
            self.accumulate(bt, &grads.beta);
            grad = grads.input;
        }
        let dz = match slots.activation {
            Activation::Relu => relu_backward(&cache.activated, &grad)?,
            Activation::Sigmoid => sigmoid_backward(&cache.activated, &grad)?,
        };
        let w = &self.params[slots.weight].tensor;
        let (dx, dw, db) = match slots.kind {
            LayerKind::Conv => tensor::conv2d_backward_with(&cache.input, w, &slots.spec, &dz, want_input)?,
            LayerKind::TransposedConv => {
                tensor::transposed_conv2d_backward_with(&cache.input, w, &slots.spec, &dz, want_input)?
            }
        };
        self.accumulate(slots.weight, &dw);
        self.accumulate(slots.bias, &db);
        Ok(dx)
    }
}

/// Binary polar grid; `1` is open space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolarMask {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl PolarMask {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> std::result::Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "polar_mask",
                expected: vec![rows, cols],
                actual: vec![data.len()],
            });
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(tensor::TensorError::InvalidArgument {
                op: "polar_mask",
                reason: format!("value {} at index {index} is not 0/1", data[index]),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value as u8; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, open: bool) {
        self.data[row * self.cols + col] = open as u8;
    }

    pub fn open_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Thresholds one frame of probabilities: `p >= 0.5` is open.
pub fn predict_mask<T: Real>(probs: &[T], rows: usize, cols: usize) -> Result<PolarMask> {
    let half = T::lit(0.5);
    let mut data = Vec::with_capacity(probs.len());
    for (index, &p) in probs.iter().enumerate() {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(ModelError::Probability {
                index,
                value: p.to_f64().unwrap_or(f64::NAN),
            });
        }
        data.push((p >= half) as u8);
    }
    Ok(PolarMask::new(rows, cols, data)?)
}

/// Thresholds every frame of an `[N, H, W]` probability tensor.
pub fn predict_masks<T: Real>(probs: &Tensor<T>) -> Result<Vec<PolarMask>> {
    let [_, h, w] = *probs.shape() else {
        return Err(ModelError::Input {
            expected: vec![0, 0, 0],
            actual: probs.shape().to_vec(),
        });
    };
    probs
        .data()
        .chunks_exact(h * w)
        .map(|frame| predict_mask(frame, h, w))
        .collect()
}

/// Per-frame zero-mean, unit-variance standardization of an `[N, H, W, C]`
/// batch in place. Constant frames become all zeros.
pub fn standardize_frames<T: Real>(x: &mut Tensor<T>) -> Result<()> {
    let n = x.nhwc("standardize_frames")?.0;
    let per = x.len() / n.max(1);
    for frame in x.data_mut().chunks_exact_mut(per.max(1)) {
        let len = T::lit(frame.len() as f64);
        let mean = frame.iter().fold(T::zero(), |a, &v| a + v) / len;
        let var = frame.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / len;
        let scale = if var > T::zero() { T::one() / var.sqrt() } else { T::zero() };
        for v in frame.iter_mut() {
            *v = (*v - mean) * scale;
        }
    }
    Ok(())
}
