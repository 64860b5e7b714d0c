//! Full-precision training and fine-tuning of quantized networks with
//! full-precision shadow weights.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::kernels;
use crate::network::{self, ExecOptions, LayerKind, NetworkSpec, ParameterSet};
use crate::numerics::{derive_stream_seed, RoundingMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl UpdateRule {
    pub fn adam() -> Self {
        UpdateRule::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · gamma^floor(iteration / step_size)`
    Step { gamma: f64, step_size: usize },
}

/// Training hyperparameters, read from a solver file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rule: UpdateRule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    #[serde(default, with = "crate::serde_u64")]
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// L2 penalty added to the weight gradients (biases excluded).
    #[serde(default)]
    pub weight_decay: f64,
    /// Print a progress line every this many iterations; 0 is silent.
    #[serde(default)]
    pub log_interval: usize,
}

impl SolverConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SolverConfig = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be a non-negative number",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let LrSchedule::Step { step_size: 0, .. } = self.lr_schedule {
            return Err(Error::Config("step schedule needs step_size >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Step { gamma, step_size } => {
                self.learning_rate * gamma.powi((iteration / step_size) as i32)
            }
        }
    }

    /// Rate used in the last iteration.
    pub fn final_lr(&self) -> f64 {
        self.lr_at(self.max_iterations.saturating_sub(1))
    }

    /// Fine-tuning solver: Adam at a tenth of this solver's final rate.
    pub fn finetune_default(&self, max_iterations: usize) -> Self {
        SolverConfig {
            rule: UpdateRule::adam(),
            learning_rate: self.final_lr() / 10.0,
            batch_size: self.batch_size,
            max_iterations,
            seed: self.seed,
            lr_schedule: LrSchedule::Constant,
            weight_decay: self.weight_decay,
            log_interval: self.log_interval,
        }
    }
}

/// Loss and analytic gradients of one batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub params: ParameterSet,
    pub input: Tensor,
}

/// Forward in 32-bit, then the chain rule back through every layer.
pub fn backward(
    net: &NetworkSpec,
    params: &ParameterSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Gradients> {
    let run = network::execute(
        net,
        params,
        batch,
        ExecOptions {
            quantize_activations: false,
            keep_trace: true,
            keep_activations: false,
        },
    )?;
    let trace = run.trace.expect("trace requested");
    let (loss, mut grad) = kernels::softmax_cross_entropy(&run.output, labels)?;
    let mut grads = ParameterSet {
        layers: vec![None; net.layers.len()],
    };
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let input = &trace.inputs[i];
        grad = match &layer.kind {
            LayerKind::SoftmaxLoss => grad,
            LayerKind::Relu => kernels::relu_backward(input, &grad),
            LayerKind::MaxPool { .. } => kernels::max_pool_backward(
                input.shape(),
                trace.pool_indices[i].as_deref().expect("pool indices"),
                &grad,
            ),
            LayerKind::Convolution { stride, pad, .. } => {
                let p = params.layers[i].as_ref().expect("checked by execute");
                let (dx, dw, db) = kernels::conv2d_backward(input, &p.weights, &grad, *stride, *pad)?;
                grads.layers[i] = Some(network::LayerParams {
                    weights: dw,
                    bias: db,
                });
                dx
            }
            LayerKind::FullyConnected { .. } => {
                let p = params.layers[i].as_ref().expect("checked by execute");
                let (dx, dw, db) = kernels::fully_connected_backward(input, &p.weights, &grad)?;
                grads.layers[i] = Some(network::LayerParams {
                    weights: dw,
                    bias: db,
                });
                dx
            }
        };
    }
    Ok(Gradients {
        loss,
        params: grads,
        input: grad,
    })
}

/// Per-tensor optimizer state.
struct Optimizer {
    rule: UpdateRule,
    weight_decay: f64,
    step: i32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    fn new(solver: &SolverConfig, params: &ParameterSet) -> Self {
        let zeros = || params.tensors().map(|t| vec![0.0f32; t.len()]).collect();
        Optimizer {
            rule: solver.rule,
            weight_decay: solver.weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    fn apply(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        self.step += 1;
        let bias_correction = match self.rule {
            UpdateRule::Adam { beta1, beta2, .. } => {
                (1.0 - beta1.powi(self.step), 1.0 - beta2.powi(self.step))
            }
            UpdateRule::Sgd => (1.0, 1.0),
        };
        let tensors = params.tensors_mut().zip(grads.tensors());
        for (k, (p, g)) in tensors.enumerate() {
            // tensors alternate weights, bias
            let decay = if k % 2 == 0 { self.weight_decay as f32 } else { 0.0 };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let values = p.data_mut().iter_mut().zip(g.data());
            match self.rule {
                UpdateRule::Sgd => {
                    for (w, &g) in values {
                        *w -= (lr as f32) * (g + decay * *w);
                    }
                }
                UpdateRule::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let (b1, b2) = (beta1 as f32, beta2 as f32);
                    let step = (lr * bias_correction.1.sqrt() / bias_correction.0) as f32;
                    for ((w, &g), (m, v)) in values.zip(m.iter_mut().zip(v.iter_mut())) {
                        let g = g + decay * *w;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= step * *m / (v.sqrt() + epsilon as f32);
                    }
                }
            }
        }
    }
}

/// Endless stream of shuffled mini-batch indices, reshuffled every epoch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Maps an iteration and the shadow parameters to the parameters a batch sees.
type Discretizer<'a> = &'a dyn Fn(usize, &ParameterSet) -> Result<ParameterSet>;

/// Runs the solver on `params`. When `discretize` is given, each batch sees
/// the parameters it returns and the gradient is applied to `params`.
fn optimize(
    net: &NetworkSpec,
    params: &mut ParameterSet,
    data: &Split,
    solver: &SolverConfig,
    discretize: Option<Discretizer<'_>>,
    observer: &mut dyn FnMut(usize, &ParameterSet, &ParameterSet),
) -> Result<()> {
    solver.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split has no samples".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), solver.seed);
    let mut opt = Optimizer::new(solver, params);
    let mut running = 0.0;
    for it in 0..solver.max_iterations {
        let (batch, labels) = data.gather(&sampler.next(solver.batch_size))?;
        let effective = match discretize {
            Some(f) => Cow::Owned(f(it, params)?),
            None => Cow::Borrowed(&*params),
        };
        let g = backward(net, &effective, &batch, &labels)?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: g.loss,
            });
        }
        let discrete = match effective {
            Cow::Owned(p) => Some(p),
            Cow::Borrowed(_) => None,
        };
        let lr = solver.lr_at(it);
        opt.apply(params, &g.params, lr);
        observer(it, discrete.as_ref().unwrap_or(params), params);
        running += g.loss;
        if solver.log_interval > 0 && (it + 1) % solver.log_interval == 0 {
            println!(
                "iteration {} loss {:.5} lr {:.3e}",
                it + 1,
                running / solver.log_interval as f64,
                lr
            );
            running = 0.0;
        }
    }
    Ok(())
}

fn require_loss_layer(net: &NetworkSpec) -> Result<()> {
    match net.layers.last() {
        Some(l) if l.kind == LayerKind::SoftmaxLoss => Ok(()),
        _ => Err(Error::Config("training needs a final softmax loss layer".into())),
    }
}

/// Trains from a seeded initialization in 32-bit floating point.
pub fn train_baseline(net: &NetworkSpec, data: &Split, solver: &SolverConfig) -> Result<ParameterSet> {
    let params = ParameterSet::init(net, solver.seed)?;
    continue_training(net, params, data, solver)
}

/// Continues full-precision training from existing parameters.
pub fn continue_training(
    net: &NetworkSpec,
    mut params: ParameterSet,
    data: &Split,
    solver: &SolverConfig,
) -> Result<ParameterSet> {
    require_loss_layer(net)?;
    params.check(net)?;
    optimize(net, &mut params, data, solver, None, &mut |_, _, _| {})?;
    Ok(params)
}

/// Fine-tunes a quantized network. Every batch samples discrete parameters
/// from the shadow weights with stochastic rounding, runs forward and
/// backward with those parameters and 32-bit layer outputs, and applies the
/// update to the shadow weights. Returns the deployed parameters, the
/// shadow weights rounded to nearest.
pub fn finetune(
    net: &NetworkSpec,
    params: &ParameterSet,
    data: &Split,
    solver: &SolverConfig,
) -> Result<ParameterSet> {
    finetune_observed(net, params, data, solver, &mut |_, _, _| {}).map(|(deployed, _)| deployed)
}

/// [`finetune`] that also reports `(iteration, discrete, shadow)` after each
/// update and returns the final shadow weights alongside.
pub fn finetune_observed(
    net: &NetworkSpec,
    params: &ParameterSet,
    data: &Split,
    solver: &SolverConfig,
    observer: &mut dyn FnMut(usize, &ParameterSet, &ParameterSet),
) -> Result<(ParameterSet, ParameterSet)> {
    require_loss_layer(net)?;
    network::check_quant_coverage(net)?;
    let has_params = net
        .layers
        .iter()
        .any(|l| l.quant.is_some_and(|q| q.param_format.is_some()));
    if !has_params {
        return Err(Error::Config(
            "fine-tuning needs parameter formats on the approximated layers".into(),
        ));
    }
    params.check(net)?;
    let seed = solver.seed;
    let discretize = |it: usize, shadow: &ParameterSet| {
        let mode = RoundingMode::Stochastic {
            seed: derive_stream_seed(seed ^ 0x5eed_f17e, it as u64),
        };
        shadow.quantized(net, Some(mode))
    };
    let mut shadow = params.clone();
    optimize(net, &mut shadow, data, solver, Some(&discretize), observer)?;
    let deployed = shadow.quantized(net, Some(RoundingMode::NearestEven))?;
    Ok((deployed, shadow))
}

/// Logits of every sample, evaluated in chunks.
fn predict(net: &NetworkSpec, params: &ParameterSet, data: &Split, quantized: bool) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.batches(250) {
        let (batch, _) = chunk?;
        let out = network::execute(
            net,
            params,
            &batch,
            ExecOptions {
                quantize_activations: quantized,
                keep_trace: false,
                keep_activations: false,
            },
        )?;
        preds.extend(kernels::argmax_rows(&out.output)?);
    }
    Ok(preds)
}

/// Top-1 accuracy in `[0, 1]`. With `quantized`, runs the simulated data
/// path with every rounding forced to nearest-even.
pub fn score(net: &NetworkSpec, params: &ParameterSet, data: &Split, quantized: bool) -> Result<f64> {
    if quantized {
        score_with_rounding(net, params, data, RoundingMode::NearestEven)
    } else {
        accuracy(&predict(net, params, data, false)?, data)
    }
}

/// Accuracy of the simulated data path with `mode` applied to parameters
/// and activations alike.
pub fn score_with_rounding(
    net: &NetworkSpec,
    params: &ParameterSet,
    data: &Split,
    mode: RoundingMode,
) -> Result<f64> {
    network::check_quant_coverage(net)?;
    let mut net = net.clone();
    for q in net.layers.iter_mut().filter_map(|l| l.quant.as_mut()) {
        q.rounding = mode;
    }
    let qparams = params.quantized(&net, Some(mode))?;
    accuracy(&predict(&net, &qparams, data, true)?, data)
}

fn accuracy(preds: &[usize], data: &Split) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, QuantizationConfig};
    use crate::numerics::{DynamicFixedPointFormat, NumberFormat, Rounder};
    use rand::Rng;

    fn tiny_net() -> NetworkSpec {
        use LayerKind::*;
        NetworkSpec {
            input_shape: vec![2, 6, 6],
            layers: vec![
                LayerSpec::new("conv1", Convolution { out_channels: 3, kernel: 3, stride: 1, pad: 1 }),
                LayerSpec::new("relu1", Relu),
                LayerSpec::new("pool1", MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("conv2", Convolution { out_channels: 4, kernel: 2, stride: 1, pad: 0 }),
                LayerSpec::new("ip1", FullyConnected { out_features: 6 }),
                LayerSpec::new("relu2", Relu),
                LayerSpec::new("ip2", FullyConnected { out_features: 3 }),
                LayerSpec::new("loss", SoftmaxLoss),
            ],
        }
    }

    fn toy_split(n: usize, seed: u64) -> Split {
        // two Gaussian blobs, separable along the first coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let center = if label == 0 { -1.0 } else { 1.0 };
            images.push(center + rng.gen_range(-0.5f32..0.5));
            images.push(rng.gen_range(-1.0f32..1.0));
            labels.push(label);
        }
        Split::new(images, labels, vec![2]).unwrap()
    }

    fn logistic_net() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::new("ip", LayerKind::FullyConnected { out_features: 2 }),
                LayerSpec::new("loss", LayerKind::SoftmaxLoss),
            ],
        }
    }

    fn sgd(lr: f64, iters: usize) -> SolverConfig {
        SolverConfig {
            rule: UpdateRule::Sgd,
            learning_rate: lr,
            batch_size: 8,
            max_iterations: iters,
            seed: 1,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            log_interval: 0,
        }
    }

    #[test]
    fn fc_weight_gradient_is_outer_product() {
        let net = logistic_net();
        let params = ParameterSet::init(&net, 3).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.7, -1.3]).unwrap();
        let g = backward(&net, &params, &x, &[1]).unwrap();
        let logits = network::forward_full(&net, &params, &x).unwrap().logits;
        let (_, dlogits) = kernels::softmax_cross_entropy(&logits, &[1]).unwrap();
        let dw = &g.params.layers[0].as_ref().unwrap().weights;
        for m in 0..2 {
            for d in 0..2 {
                let want = dlogits.data()[m] * x.data()[d];
                assert!((dw.data()[m * 2 + d] - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let net = NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::new("ip1", LayerKind::FullyConnected { out_features: 2 }),
                LayerSpec::new("relu", LayerKind::Relu),
                LayerSpec::new("ip2", LayerKind::FullyConnected { out_features: 2 }),
                LayerSpec::new("loss", LayerKind::SoftmaxLoss),
            ],
        };
        let mut params = ParameterSet::init(&net, 1).unwrap();
        // unit 0 always negative, unit 1 always positive
        params.layers[0].as_mut().unwrap().weights = Tensor::new(vec![2, 2], vec![0., 0., 0., 0.]).unwrap();
        params.layers[0].as_mut().unwrap().bias = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap();
        let g = backward(&net, &params, &x, &[0]).unwrap();
        let db = &g.params.layers[0].as_ref().unwrap().bias;
        assert_eq!(db.data()[0], 0.0);
        assert_ne!(db.data()[1], 0.0);
    }

    /// Independent naive f64 evaluation of the loss. `tensors` holds weights
    /// and bias of each parameterized layer in order.
    fn ref_loss(net: &NetworkSpec, tensors: &[Vec<f64>], x: &[f64], batch: usize, labels: &[usize]) -> f64 {
        let per = x.len() / batch;
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let mut a = x[b * per..(b + 1) * per].to_vec();
            let (mut c, mut h, mut w) = (net.input_shape[0], net.input_shape[1], net.input_shape[2]);
            let mut k_idx = 0;
            for layer in &net.layers {
                match layer.kind {
                    LayerKind::Convolution { out_channels, kernel, stride, pad } => {
                        let (wt, bias) = (&tensors[k_idx], &tensors[k_idx + 1]);
                        k_idx += 2;
                        let oh = (h + 2 * pad - kernel) / stride + 1;
                        let ow = (w + 2 * pad - kernel) / stride + 1;
                        let mut out = vec![0.0; out_channels * oh * ow];
                        for o in 0..out_channels {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let mut acc = bias[o];
                                    for ci in 0..c {
                                        for ky in 0..kernel {
                                            for kx in 0..kernel {
                                                let iy = (y * stride + ky) as isize - pad as isize;
                                                let ix = (xx * stride + kx) as isize - pad as isize;
                                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                    continue;
                                                }
                                                acc += wt[((o * c + ci) * kernel + ky) * kernel + kx]
                                                    * a[(ci * h + iy as usize) * w + ix as usize];
                                            }
                                        }
                                    }
                                    out[(o * oh + y) * ow + xx] = acc;
                                }
                            }
                        }
                        a = out;
                        (c, h, w) = (out_channels, oh, ow);
                    }
                    LayerKind::FullyConnected { out_features } => {
                        let (wt, bias) = (&tensors[k_idx], &tensors[k_idx + 1]);
                        k_idx += 2;
                        let d = a.len();
                        a = (0..out_features)
                            .map(|m| bias[m] + (0..d).map(|j| wt[m * d + j] * a[j]).sum::<f64>())
                            .collect();
                        (c, h, w) = (out_features, 1, 1);
                    }
                    LayerKind::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
                    LayerKind::MaxPool { kernel, stride } => {
                        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                        let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
                        for ci in 0..c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let v = a[(ci * h + y * stride + ky) * w + xx * stride + kx];
                                            let o = &mut out[(ci * oh + y) * ow + xx];
                                            *o = o.max(v);
                                        }
                                    }
                                }
                            }
                        }
                        a = out;
                        (h, w) = (oh, ow);
                    }
                    LayerKind::SoftmaxLoss => {}
                }
            }
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - a[label];
        }
        total / batch as f64
    }

    #[test]
    fn gradients_match_central_differences() {
        let net = tiny_net();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ParameterSet::init(&net, 12).unwrap();
        let x = Tensor::from_fn(&[2, 2, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let labels = [0, 2];
        let g = backward(&net, &params, &x, &labels).unwrap();
        let tensors: Vec<Vec<f64>> = params
            .tensors()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let base = ref_loss(&net, &tensors, &xs, 2, &labels);
        assert!((base - g.loss).abs() < 1e-5);

        let h = 1e-3;
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut compare = |lp: f64, lm: f64, an: f64| {
            let (fwd, bwd) = ((lp - base) / h, (base - lm) / h);
            // skip points where the step crosses a ReLU or pooling kink
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-2) {
                return;
            }
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-2));
            checked += 1;
        };
        for (t, grad) in g.params.tensors().enumerate() {
            for i in 0..tensors[t].len() {
                let at = |delta: f64| {
                    let mut p = tensors.clone();
                    p[t][i] += delta;
                    ref_loss(&net, &p, &xs, 2, &labels)
                };
                compare(at(h), at(-h), grad.data()[i] as f64);
            }
        }
        for i in 0..xs.len() {
            let at = |delta: f64| {
                let mut xx = xs.clone();
                xx[i] += delta;
                ref_loss(&net, &tensors, &xx, 2, &labels)
            };
            compare(at(h), at(-h), g.input.data()[i] as f64);
        }
        assert!(checked > 300, "only {checked} components checked");
        assert!(worst <= 1e-3, "max relative error {worst}");
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let data = toy_split(400, 5);
        let net = logistic_net();
        let params = train_baseline(&net, &data, &sgd(0.5, 500)).unwrap();
        assert!(score(&net, &params, &data, false).unwrap() >= 0.99);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = toy_split(64, 6);
        let net = logistic_net();
        let solver = sgd(0.0, 20);
        let init = ParameterSet::init(&net, solver.seed).unwrap();
        assert_eq!(train_baseline(&net, &data, &solver).unwrap(), init);
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op() {
        let net = logistic_net();
        let mut params = ParameterSet::init(&net, 2).unwrap();
        let before = params.clone();
        let solver = SolverConfig {
            rule: UpdateRule::adam(),
            ..sgd(0.1, 1)
        };
        let mut opt = Optimizer::new(&solver, &params);
        let zeros = ParameterSet::zeros(&net).unwrap();
        for _ in 0..5 {
            opt.apply(&mut params, &zeros, 0.1);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_split(64, 7);
        let mut net = logistic_net();
        net.layers.insert(0, LayerSpec::new("ip0", LayerKind::FullyConnected { out_features: 2 }));
        let err = train_baseline(&net, &data, &sgd(1e30, 50)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_split(128, 8);
        let net = logistic_net();
        let s = SolverConfig {
            rule: UpdateRule::adam(),
            ..sgd(0.01, 40)
        };
        assert_eq!(
            train_baseline(&net, &data, &s).unwrap(),
            train_baseline(&net, &data, &s).unwrap()
        );
    }

    #[test]
    fn step_schedule_and_finetune_rate() {
        let s = SolverConfig {
            lr_schedule: LrSchedule::Step { gamma: 0.1, step_size: 100 },
            ..sgd(0.01, 250)
        };
        assert_eq!(s.lr_at(99), 0.01);
        assert!((s.lr_at(100) - 0.001).abs() < 1e-15);
        assert!((s.final_lr() - 1e-4).abs() < 1e-15);
        let f = s.finetune_default(10);
        assert!((f.learning_rate - 1e-5).abs() < 1e-16);
        assert!(matches!(f.rule, UpdateRule::Adam { .. }));
    }

    fn annotated(net: &NetworkSpec, fmt: NumberFormat) -> NetworkSpec {
        let mut n = net.clone();
        for l in n.layers.iter_mut().filter(|l| l.kind.is_quantizable()) {
            l.quant = Some(QuantizationConfig::uniform(fmt));
        }
        n
    }

    #[test]
    fn finetune_keeps_discrete_weights_on_grid() {
        let data = toy_split(128, 9);
        let fmt = DynamicFixedPointFormat::new(4, 3).unwrap();
        let net = annotated(&logistic_net(), fmt.into());
        let params = ParameterSet::init(&net, 4).unwrap();
        let solver = SolverConfig {
            rule: UpdateRule::adam(),
            ..sgd(0.01, 30)
        };
        let on_grid = |p: &ParameterSet| {
            p.tensors()
                .flat_map(|t| t.data())
                .all(|&v| fmt.quantize(v, &mut Rounder::nearest()) == v)
        };
        let mut off_grid_shadow = false;
        let (deployed, shadow) = finetune_observed(&net, &params, &data, &solver, &mut |_, d, s| {
            assert!(on_grid(d));
            off_grid_shadow |= !on_grid(s);
        })
        .unwrap();
        assert!(off_grid_shadow);
        assert!(on_grid(&deployed));
        assert_eq!(deployed, shadow.quantized(&net, Some(RoundingMode::NearestEven)).unwrap());
        let again = finetune(&net, &params, &data, &solver).unwrap();
        assert_eq!(again, deployed);
    }

    #[test]
    fn finetune_requires_formats() {
        let data = toy_split(16, 1);
        let net = logistic_net();
        let params = ParameterSet::init(&net, 1).unwrap();
        assert!(finetune(&net, &params, &data, &sgd(0.1, 2)).is_err());
    }

    #[test]
    fn lossless_formats_reduce_finetune_to_training() {
        let data = toy_split(128, 10);
        let wide: NumberFormat = DynamicFixedPointFormat::new(32, 24).unwrap().into();
        let plain = logistic_net();
        let net = annotated(&plain, wide);
        let params = ParameterSet::init(&plain, 3).unwrap();
        let solver = SolverConfig {
            rule: UpdateRule::adam(),
            ..sgd(0.01, 50)
        };
        let tuned = finetune(&net, &params, &data, &solver).unwrap();
        let trained = continue_training(&plain, params, &data, &solver).unwrap();
        let (a, b) = (
            score(&net, &tuned, &data, true).unwrap(),
            score(&plain, &trained, &data, false).unwrap(),
        );
        assert!((a - b).abs() <= 0.02, "{a} vs {b}");
    }

    #[test]
    fn score_properties() {
        let mut net = tiny_net();
        let last = net.layers.len() - 2;
        net.layers[last].kind = LayerKind::FullyConnected { out_features: 10 };
        let params = ParameterSet::init(&net, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5000;
        let images: Vec<f32> = (0..n * 72).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let data = Split::new(images, labels, vec![2, 6, 6]).unwrap();
        let a = score(&net, &params, &data, false).unwrap();
        assert!((a - 0.1).abs() <= 0.02, "chance-level accuracy {a}");
        assert_eq!(a, score(&net, &params, &data, true).unwrap());
        assert_eq!(a, score(&net, &params, &data, false).unwrap());
        assert!(score(&net, &params, &data.head(0), false).is_err());
    }
}
