//! Sequential layer graphs and their execution, in full precision or along
//! the simulated limited-precision data path.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::numerics::{quantize_slice, NumberFormat, Rounder, RoundingMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Convolution {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    FullyConnected {
        out_features: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    SoftmaxLoss,
}

fn one() -> usize {
    1
}

impl LayerKind {
    /// Convolution and fully connected layers carry parameters and are the
    /// only layers that get approximated.
    pub fn is_quantizable(&self) -> bool {
        matches!(
            self,
            LayerKind::Convolution { .. } | LayerKind::FullyConnected { .. }
        )
    }
}

/// Number formats of one approximated layer. `None` keeps that group in
/// 32-bit floating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct QuantizationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<NumberFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_format: Option<NumberFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_format: Option<NumberFormat>,
    #[serde(default)]
    pub rounding: RoundingMode,
}

impl QuantizationConfig {
    /// Same format for inputs, parameters and outputs.
    pub fn uniform(fmt: NumberFormat) -> Self {
        QuantizationConfig {
            input_format: Some(fmt),
            param_format: Some(fmt),
            output_format: Some(fmt),
            rounding: RoundingMode::NearestEven,
        }
    }

    fn validate(&self) -> Result<()> {
        for f in [self.input_format, self.param_format, self.output_format]
            .iter()
            .flatten()
        {
            f.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantizationConfig>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            quant: None,
        }
    }
}

/// Per-sample shapes around one layer (batch axis omitted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    /// `(weights, bias)` shapes for parameterized layers.
    pub params: Option<(Vec<usize>, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape, `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let net: NetworkSpec = toml::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Caffe's LeNet for 28×28 MNIST digits: two 5×5 convolutions with 2×2
    /// max pooling, a 500-unit hidden layer and a 10-way classifier.
    pub fn lenet() -> Self {
        use LayerKind::*;
        NetworkSpec {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::new("conv1", Convolution { out_channels: 20, kernel: 5, stride: 1, pad: 0 }),
                LayerSpec::new("pool1", MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("conv2", Convolution { out_channels: 50, kernel: 5, stride: 1, pad: 0 }),
                LayerSpec::new("pool2", MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("ip1", FullyConnected { out_features: 500 }),
                LayerSpec::new("relu1", Relu),
                LayerSpec::new("ip2", FullyConnected { out_features: 10 }),
                LayerSpec::new("loss", SoftmaxLoss),
            ],
        }
    }

    /// The CIFAR-10 "full" topology without its LRN layers.
    pub fn cifar10_full() -> Self {
        use LayerKind::*;
        NetworkSpec {
            input_shape: vec![3, 32, 32],
            layers: vec![
                LayerSpec::new("conv1", Convolution { out_channels: 32, kernel: 5, stride: 1, pad: 2 }),
                LayerSpec::new("pool1", MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("relu1", Relu),
                LayerSpec::new("conv2", Convolution { out_channels: 32, kernel: 5, stride: 1, pad: 2 }),
                LayerSpec::new("relu2", Relu),
                LayerSpec::new("pool2", MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("conv3", Convolution { out_channels: 64, kernel: 5, stride: 1, pad: 2 }),
                LayerSpec::new("relu3", Relu),
                LayerSpec::new("pool3", MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("ip1", FullyConnected { out_features: 10 }),
                LayerSpec::new("loss", SoftmaxLoss),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name '{}'", l.name)));
            }
            if let Some(q) = &l.quant {
                if !l.kind.is_quantizable() {
                    return Err(Error::Config(format!(
                        "layer '{}' cannot carry a quantization config",
                        l.name
                    )));
                }
                q.validate()?;
            }
        }
        if let Some(pos) = self
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::SoftmaxLoss)
        {
            if pos + 1 != self.layers.len() {
                return Err(Error::Config("softmax loss must be the last layer".into()));
            }
        }
        self.resolve().map(|_| ())
    }

    /// Propagates shapes through the chain.
    pub fn resolve(&self) -> Result<Vec<LayerShape>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let ctx = |e: Error| Error::Shape(format!("layer '{}': {e}", l.name));
            let (output, params) = match &l.kind {
                LayerKind::Convolution {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = cur[..] else {
                        return Err(Error::Shape(format!(
                            "layer '{}' needs a [C, H, W] input, got {cur:?}",
                            l.name
                        )));
                    };
                    let oh = kernels::conv_output_extent(h, *kernel, *stride, *pad).map_err(ctx)?;
                    let ow = kernels::conv_output_extent(w, *kernel, *stride, *pad).map_err(ctx)?;
                    (
                        vec![*out_channels, oh, ow],
                        Some((vec![*out_channels, c, *kernel, *kernel], vec![*out_channels])),
                    )
                }
                LayerKind::FullyConnected { out_features } => {
                    let d: usize = cur.iter().product();
                    (
                        vec![*out_features],
                        Some((vec![*out_features, d], vec![*out_features])),
                    )
                }
                LayerKind::Relu => (cur.clone(), None),
                LayerKind::MaxPool { kernel, stride } => {
                    let [c, h, w] = cur[..] else {
                        return Err(Error::Shape(format!(
                            "layer '{}' needs a [C, H, W] input, got {cur:?}",
                            l.name
                        )));
                    };
                    let oh = kernels::pool_output_extent(h, *kernel, *stride).map_err(ctx)?;
                    let ow = kernels::pool_output_extent(w, *kernel, *stride).map_err(ctx)?;
                    (vec![c, oh, ow], None)
                }
                LayerKind::SoftmaxLoss => {
                    if cur.len() != 1 {
                        return Err(Error::Shape(format!(
                            "softmax loss needs flat logits, got {cur:?}"
                        )));
                    }
                    (cur.clone(), None)
                }
            };
            if output.contains(&0) {
                return Err(Error::Shape(format!("layer '{}' has an empty output", l.name)));
            }
            out.push(LayerShape {
                input: std::mem::replace(&mut cur, output.clone()),
                output,
                params,
            });
        }
        Ok(out)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Indices of convolution and fully connected layers.
    pub fn quantizable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_quantizable())
            .collect()
    }

    pub fn num_classes(&self) -> Result<usize> {
        let shapes = self.resolve()?;
        let last = shapes
            .last()
            .ok_or_else(|| Error::Config("network has no layers".into()))?;
        match last.output[..] {
            [k] => Ok(k),
            _ => Err(Error::Shape("network does not end in flat logits".into())),
        }
    }

    pub fn has_quantization(&self) -> bool {
        self.layers.iter().any(|l| l.quant.is_some())
    }

    /// Copy of the network with every quantization config dropped.
    pub fn without_quantization(&self) -> Self {
        let mut net = self.clone();
        net.layers.iter_mut().for_each(|l| l.quant = None);
        net
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Parameters of every layer, indexed like `NetworkSpec::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<Option<LayerParams>>,
}

impl ParameterSet {
    /// Uniform weights in `±sqrt(3 / fan_in)`, zero biases.
    pub fn init(net: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = net
            .resolve()?
            .into_iter()
            .map(|s| {
                s.params.map(|(ws, bs)| {
                    let fan_in: usize = ws[1..].iter().product();
                    let bound = (3.0 / fan_in as f32).sqrt();
                    LayerParams {
                        weights: Tensor::from_fn(&ws, |_| rng.gen_range(-bound..bound)),
                        bias: Tensor::zeros(&bs),
                    }
                })
            })
            .collect();
        Ok(ParameterSet { layers })
    }

    pub fn zeros(net: &NetworkSpec) -> Result<Self> {
        let layers = net
            .resolve()?
            .into_iter()
            .map(|s| {
                s.params.map(|(ws, bs)| LayerParams {
                    weights: Tensor::zeros(&ws),
                    bias: Tensor::zeros(&bs),
                })
            })
            .collect();
        Ok(ParameterSet { layers })
    }

    /// Checks that the parameter shapes fit the network.
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        let shapes = net.resolve()?;
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter slots for {} layers",
                self.layers.len(),
                shapes.len()
            )));
        }
        for ((s, p), l) in shapes.iter().zip(&self.layers).zip(&net.layers) {
            let ok = match (&s.params, p) {
                (None, None) => true,
                (Some((ws, bs)), Some(p)) => p.weights.shape() == ws && p.bias.shape() == bs,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "parameters of layer '{}' do not match its shape",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    /// All parameter tensors in a fixed order: weights then bias of each
    /// parameterized layer.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weights, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weights, &mut p.bias])
    }

    /// Parameters cast to each layer's `param_format`. Stream `2i` rounds the
    /// weights of layer `i`, stream `2i + 1` its bias.
    pub fn quantized(&self, net: &NetworkSpec, mode: Option<RoundingMode>) -> Result<Self> {
        let mut out = self.clone();
        for (i, (l, p)) in net.layers.iter().zip(out.layers.iter_mut()).enumerate() {
            let (Some(q), Some(p)) = (&l.quant, p) else {
                continue;
            };
            let Some(fmt) = q.param_format else {
                continue;
            };
            fmt.validate()?;
            let mode = mode.unwrap_or(q.rounding);
            let mut rw = Rounder::for_stream(mode, 2 * i as u64);
            quantize_slice(p.weights.data_mut(), &fmt, &mut rw);
            let mut rb = Rounder::for_stream(mode, 2 * i as u64 + 1);
            quantize_slice(p.bias.data_mut(), &fmt, &mut rb);
        }
        Ok(out)
    }
}

/// Result of a forward pass: every layer's output and the final logits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
}

/// What a training step needs to run the chain backwards.
#[derive(Debug)]
pub(crate) struct Trace {
    /// Input seen by each layer.
    pub inputs: Vec<Tensor>,
    pub pool_indices: Vec<Option<Vec<usize>>>,
}

pub(crate) struct ExecOptions {
    pub quantize_activations: bool,
    pub keep_trace: bool,
    pub keep_activations: bool,
}

pub(crate) struct ExecResult {
    pub output: Tensor,
    pub activations: Vec<Tensor>,
    pub trace: Option<Trace>,
}

fn quantize_activation(t: &mut Tensor, fmt: &NumberFormat, rounding: RoundingMode, stream: u64) {
    let mut r = Rounder::for_stream(rounding, stream);
    quantize_slice(t.data_mut(), fmt, &mut r);
}

/// Runs the chain with the given (already prepared) parameters.
pub(crate) fn execute(
    net: &NetworkSpec,
    params: &ParameterSet,
    batch: &Tensor,
    opts: ExecOptions,
) -> Result<ExecResult> {
    if batch.shape().len() != net.input_shape.len() + 1 || batch.shape()[1..] != net.input_shape[..] {
        return Err(Error::Shape(format!(
            "batch {:?} does not match network input {:?}",
            batch.shape(),
            net.input_shape
        )));
    }
    if params.layers.len() != net.layers.len() {
        return Err(Error::Shape("parameter set does not match network".into()));
    }
    let mut cur = batch.clone();
    let mut activations = Vec::new();
    let mut inputs = Vec::new();
    let mut pool_indices = Vec::new();
    for (i, (layer, p)) in net.layers.iter().zip(&params.layers).enumerate() {
        let quant = layer.quant.filter(|_| opts.quantize_activations);
        if let Some(fmt) = quant.and_then(|q| q.input_format) {
            quantize_activation(&mut cur, &fmt, quant.unwrap().rounding, 1 << 32 | (2 * i as u64));
        }
        let mut indices = None;
        let mut next = match &layer.kind {
            LayerKind::Convolution { stride, pad, .. } => {
                let p = p.as_ref().ok_or_else(|| missing(layer))?;
                kernels::conv2d(&cur, &p.weights, &p.bias, *stride, *pad)?
            }
            LayerKind::FullyConnected { .. } => {
                let p = p.as_ref().ok_or_else(|| missing(layer))?;
                kernels::fully_connected(&kernels::flatten(&cur)?, &p.weights, &p.bias)?
            }
            LayerKind::Relu => kernels::relu(&cur),
            LayerKind::MaxPool { kernel, stride } => {
                let (t, idx) = kernels::max_pool_with_indices(&cur, *kernel, *stride)?;
                indices = Some(idx);
                t
            }
            LayerKind::SoftmaxLoss => cur.clone(),
        };
        if let Some(fmt) = quant.and_then(|q| q.output_format) {
            quantize_activation(&mut next, &fmt, quant.unwrap().rounding, 1 << 32 | (2 * i as u64 + 1));
        }
        if opts.keep_activations {
            activations.push(next.clone());
        }
        let prev = std::mem::replace(&mut cur, next);
        if opts.keep_trace {
            inputs.push(prev);
            pool_indices.push(indices);
        }
    }
    Ok(ExecResult {
        output: cur,
        activations,
        trace: opts.keep_trace.then_some(Trace {
            inputs,
            pool_indices,
        }),
    })
}

fn missing(layer: &LayerSpec) -> Error {
    Error::Config(format!("layer '{}' has no parameters", layer.name))
}

/// Plain 32-bit evaluation; quantization configs are ignored.
pub fn forward_full(net: &NetworkSpec, params: &ParameterSet, batch: &Tensor) -> Result<ForwardOutput> {
    let r = execute(
        net,
        params,
        batch,
        ExecOptions {
            quantize_activations: false,
            keep_trace: false,
            keep_activations: true,
        },
    )?;
    Ok(ForwardOutput {
        activations: r.activations,
        logits: r.output,
    })
}

/// Fails when only some approximated layers carry a config.
pub(crate) fn check_quant_coverage(net: &NetworkSpec) -> Result<()> {
    if !net.has_quantization() {
        return Ok(());
    }
    for l in net.layers.iter().filter(|l| l.kind.is_quantizable()) {
        if l.quant.is_none() {
            return Err(Error::Config(format!(
                "layer '{}' has no quantization config",
                l.name
            )));
        }
    }
    Ok(())
}

/// Simulated hardware data path. For every annotated layer: quantize the
/// input, quantize weights and bias, accumulate in 32-bit, quantize the
/// output. Other layers run in 32-bit on already-quantized values.
pub fn forward_quantized(
    net: &NetworkSpec,
    params: &ParameterSet,
    batch: &Tensor,
) -> Result<ForwardOutput> {
    check_quant_coverage(net)?;
    let qparams = params.quantized(net, None)?;
    forward_with_quantized_params(net, &qparams, batch)
}

/// [`forward_quantized`] with parameters that were quantized up front.
pub fn forward_with_quantized_params(
    net: &NetworkSpec,
    qparams: &ParameterSet,
    batch: &Tensor,
) -> Result<ForwardOutput> {
    let r = execute(
        net,
        qparams,
        batch,
        ExecOptions {
            quantize_activations: true,
            keep_trace: false,
            keep_activations: true,
        },
    )?;
    Ok(ForwardOutput {
        activations: r.activations,
        logits: r.output,
    })
}

/// Width of the final adder-tree stage: `m + n + ceil(log2 x)` for `m`-bit
/// activations, `n`-bit weights and `x` products per output.
pub fn accumulator_width(m: u32, n: u32, x: u64) -> u32 {
    assert!(x >= 1, "at least one product per output");
    let levels = if x == 1 { 0 } else { 64 - (x - 1).leading_zeros() };
    m + n + levels
}
