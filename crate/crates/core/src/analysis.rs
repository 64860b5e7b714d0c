//! Range statistics, format-parameter selection and complexity accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, LayerKind, NetworkSpec, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatGroup {
    Params,
    Inputs,
    Outputs,
}

impl StatGroup {
    pub fn name(self) -> &'static str {
        match self {
            StatGroup::Params => "params",
            StatGroup::Inputs => "inputs",
            StatGroup::Outputs => "outputs",
        }
    }
}

/// Magnitude statistics of one number group.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeStats {
    pub layer: String,
    pub group: StatGroup,
    pub max_abs: f32,
    /// Count of nonzero values per `floor(log2 |v|)`.
    pub pow2_histogram: BTreeMap<i32, u64>,
    pub zero_count: u64,
    pub sample_count: u64,
}

/// `floor(log2 |v|)` for finite nonzero `v`, read off the f64 exponent.
pub fn floor_log2(v: f32) -> i32 {
    debug_assert!(v != 0.0 && v.is_finite());
    let bits = (v as f64).to_bits();
    ((bits >> 52) & 0x7ff) as i32 - 1023
}

impl RangeStats {
    pub fn new(layer: impl Into<String>, group: StatGroup) -> Self {
        RangeStats {
            layer: layer.into(),
            group,
            max_abs: 0.0,
            pow2_histogram: BTreeMap::new(),
            zero_count: 0,
            sample_count: 0,
        }
    }

    pub fn observe(&mut self, values: &[f32]) {
        for &v in values {
            self.sample_count += 1;
            if v == 0.0 {
                self.zero_count += 1;
                continue;
            }
            self.max_abs = self.max_abs.max(v.abs());
            *self.pow2_histogram.entry(floor_log2(v)).or_insert(0) += 1;
        }
    }

    /// Combines statistics of the same group; commutative and associative.
    pub fn merge(&mut self, other: &RangeStats) {
        self.max_abs = self.max_abs.max(other.max_abs);
        for (&k, &c) in &other.pow2_histogram {
            *self.pow2_histogram.entry(k).or_insert(0) += c;
        }
        self.zero_count += other.zero_count;
        self.sample_count += other.sample_count;
    }
}

/// Parameter, input and output statistics of every approximated layer over
/// full-precision forward passes of the given batches.
pub fn collect_stats(
    net: &NetworkSpec,
    params: &ParameterSet,
    batches: &[Tensor],
) -> Result<Vec<RangeStats>> {
    if batches.is_empty() {
        return Err(Error::Empty("statistics need at least one sample batch".into()));
    }
    params.check(net)?;
    let layers = net.quantizable_layers();
    let mut stats = Vec::with_capacity(layers.len() * 3);
    for &i in &layers {
        let name = &net.layers[i].name;
        let mut p = RangeStats::new(name, StatGroup::Params);
        if let Some(lp) = &params.layers[i] {
            p.observe(lp.weights.data());
            p.observe(lp.bias.data());
        }
        stats.push(p);
        stats.push(RangeStats::new(name, StatGroup::Inputs));
        stats.push(RangeStats::new(name, StatGroup::Outputs));
    }
    for batch in batches {
        let out = network::forward_full(net, params, batch)?;
        for (k, &i) in layers.iter().enumerate() {
            let input = if i == 0 { batch } else { &out.activations[i - 1] };
            stats[3 * k + 1].observe(input.data());
            stats[3 * k + 2].observe(out.activations[i].data());
        }
    }
    Ok(stats)
}

/// Integer bits (sign excluded) needed for the group's largest magnitude:
/// `ceil(log2(max + 1))`, one less for layer outputs, at least 1.
pub fn choose_integer_length(stats: &RangeStats, is_output: bool) -> i32 {
    integer_length_for(stats.max_abs, is_output)
}

pub fn integer_length_for(max_abs: f32, is_output: bool) -> i32 {
    let mut il = (max_abs as f64 + 1.0).log2().ceil() as i32;
    if is_output {
        il -= 1;
    }
    il.max(1)
}

/// Exponent bits that keep `max_abs` below the largest finite magnitude:
/// `ceil(log2(log2(max) - 1) + 1)`, at least 2.
pub fn choose_exponent_bits(stats: &RangeStats) -> u32 {
    exponent_bits_for(stats.max_abs)
}

pub fn exponent_bits_for(max_abs: f32) -> u32 {
    let inner = (max_abs as f64).log2() - 1.0;
    if inner.is_nan() || inner <= 0.0 {
        return 2;
    }
    ((inner.log2() + 1.0).ceil() as i64).max(2) as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComplexity {
    pub name: String,
    pub macs: u64,
    pub param_count: u64,
    /// Adder-tree width when both the input and parameter formats are set.
    pub acc_bits: Option<u32>,
}

/// Multiply-accumulate count per sample, parameter count and accumulator
/// width of every convolution and fully connected layer.
pub fn complexity_report(net: &NetworkSpec) -> Result<Vec<LayerComplexity>> {
    let shapes = net.resolve()?;
    let mut out = Vec::new();
    for (layer, shape) in net.layers.iter().zip(&shapes) {
        let (products, outputs, param_count) = match layer.kind {
            LayerKind::Convolution {
                out_channels,
                kernel,
                ..
            } => {
                let n = shape.input[0] as u64;
                let m = out_channels as u64;
                let k2 = (kernel * kernel) as u64;
                let rc = (shape.output[1] * shape.output[2]) as u64;
                (n * k2, rc * m, m * n * k2 + m)
            }
            LayerKind::FullyConnected { out_features } => {
                let n = shape.input.iter().product::<usize>() as u64;
                let m = out_features as u64;
                (n, m, n * m + m)
            }
            _ => continue,
        };
        let acc_bits = layer.quant.and_then(|q| {
            let m = q.input_format?.bit_width();
            let n = q.param_format?.bit_width();
            Some(network::accumulator_width(m, n, products))
        });
        out.push(LayerComplexity {
            name: layer.name.clone(),
            macs: products * outputs,
            param_count,
            acc_bits,
        });
    }
    Ok(out)
}

/// Line-oriented dump: one `layer group max_abs zeros samples` line per
/// group followed by its histogram as `exponent:count` pairs.
pub fn format_stats(stats: &[RangeStats]) -> String {
    let mut s = String::from("# layer group max_abs zero_count sample_count\n");
    for st in stats {
        let _ = writeln!(
            s,
            "{} {} {:e} {} {}",
            st.layer,
            st.group.name(),
            st.max_abs,
            st.zero_count,
            st.sample_count
        );
        let hist: Vec<String> = st
            .pow2_histogram
            .iter()
            .map(|(k, c)| format!("{k}:{c}"))
            .collect();
        let _ = writeln!(s, "  histogram {}", hist.join(" "));
    }
    s
}
