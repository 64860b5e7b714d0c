//! Automatic quantization: range analysis, per-part bit-width search, joint
//! evaluation of the chosen formats and a report.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, RangeStats, StatGroup};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{LayerKind, NetworkSpec, ParameterSet, QuantizationConfig};
use crate::numerics::{
    DynamicFixedPointFormat, FixedPointFormat, MinifloatFormat, NumberFormat, PowerOfTwoFormat,
    RoundingMode,
};
use crate::tensor::Tensor;
use crate::trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FixedPoint,
    DynamicFixedPoint,
    Minifloat,
    PowerOfTwo,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::FixedPoint => "fixed point",
            Scheme::DynamicFixedPoint => "dynamic fixed point",
            Scheme::Minifloat => "minifloat",
            Scheme::PowerOfTwo => "power of two",
        })
    }
}

/// The three number categories searched independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    ConvParams,
    FcParams,
    /// Layer inputs and outputs of every approximated layer.
    Outputs,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::ConvParams, Part::FcParams, Part::Outputs];
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::ConvParams => "conv params",
            Part::FcParams => "fc params",
            Part::Outputs => "layer outputs",
        })
    }
}

fn default_grid() -> Vec<u32> {
    vec![16, 8, 4, 2]
}
fn default_subset() -> usize {
    1000
}
fn default_stats_images() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationRequest {
    pub scheme: Scheme,
    /// Allowed absolute accuracy drop, in percentage points.
    pub error_margin: f64,
    /// Candidate bit-widths, strictly decreasing.
    #[serde(default = "default_grid")]
    pub search_grid: Vec<u32>,
    /// Validation images scored per candidate during the search.
    #[serde(default = "default_subset")]
    pub eval_subset_size: usize,
    /// Training images run forward for the range statistics.
    #[serde(default = "default_stats_images")]
    pub stats_images: usize,
    /// Sweep every grid entry instead of binary search.
    #[serde(default)]
    pub exhaustive: bool,
}

impl QuantizationRequest {
    pub fn new(scheme: Scheme, error_margin: f64) -> Self {
        QuantizationRequest {
            scheme,
            error_margin,
            search_grid: default_grid(),
            eval_subset_size: default_subset(),
            stats_images: default_stats_images(),
            exhaustive: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.error_margin.is_finite() || self.error_margin < 0.0 {
            return Err(Error::Config(format!(
                "error margin {} must be a non-negative number",
                self.error_margin
            )));
        }
        if self.search_grid.is_empty() {
            return Err(Error::Config("search grid is empty".into()));
        }
        if self.search_grid.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "search grid {:?} must be strictly decreasing",
                self.search_grid
            )));
        }
        if let Some(b) = self.search_grid.iter().find(|&&b| !(2..=32).contains(&b)) {
            return Err(Error::Config(format!("bit-width {b} outside [2, 32]")));
        }
        if self.scheme == Scheme::Minifloat && self.search_grid[0] > 31 {
            return Err(Error::Config("minifloat widths stop at 31 bits".into()));
        }
        if self.eval_subset_size == 0 || self.stats_images == 0 {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        Ok(())
    }

    /// Lowest accuracy (fraction) that still meets the margin.
    pub fn threshold(&self, baseline: f64) -> f64 {
        baseline - self.error_margin / 100.0
    }
}

fn meets(acc: f64, threshold: f64) -> bool {
    // accuracies are ratios of counts; absorb the rounding of the subtraction
    acc >= threshold - 1e-12
}

/// Accuracy of the network with one part approximated at a bit-width and
/// everything else in 32-bit.
pub trait PartEvaluator {
    fn accuracy(&mut self, part: Part, bit_width: u32) -> Result<f64>;
}

/// Bit-width of each part; `None` keeps the part in 32-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Plan {
    pub conv: Option<u32>,
    pub fc: Option<u32>,
    pub outputs: Option<u32>,
}

impl Plan {
    pub fn uniform(bits: u32) -> Self {
        Plan {
            conv: Some(bits),
            fc: Some(bits),
            outputs: Some(bits),
        }
    }

    pub fn only(part: Part, bits: u32) -> Self {
        let mut p = Plan::default();
        *p.get_mut(part) = Some(bits);
        p
    }

    pub fn get(&self, part: Part) -> Option<u32> {
        match part {
            Part::ConvParams => self.conv,
            Part::FcParams => self.fc,
            Part::Outputs => self.outputs,
        }
    }

    fn get_mut(&mut self, part: Part) -> &mut Option<u32> {
        match part {
            Part::ConvParams => &mut self.conv,
            Part::FcParams => &mut self.fc,
            Part::Outputs => &mut self.outputs,
        }
    }
}

/// Adds joint evaluation of all parts to [`PartEvaluator`].
pub trait FlowEvaluator: PartEvaluator {
    fn joint_accuracy(&mut self, plan: &Plan) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub bit_width: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub bit_width: u32,
    /// False when no candidate met the margin and the widest was returned.
    pub met_margin: bool,
    pub evaluated: Vec<SearchPoint>,
}

/// Smallest grid width whose accuracy meets `baseline - margin`, by binary
/// search over the grid (which assumes accuracy does not drop as bits are
/// added) or by a full sweep when the request asks for it. Falls back to
/// the widest entry when nothing qualifies.
pub fn search_part(
    part: Part,
    request: &QuantizationRequest,
    baseline: f64,
    evaluator: &mut dyn PartEvaluator,
) -> Result<SearchOutcome> {
    request.validate()?;
    let grid = &request.search_grid;
    let threshold = request.threshold(baseline);
    let mut evaluated = Vec::new();
    let mut eval = |i: usize| -> Result<bool> {
        let acc = evaluator.accuracy(part, grid[i])?;
        evaluated.push(SearchPoint {
            bit_width: grid[i],
            accuracy: acc,
        });
        Ok(meets(acc, threshold))
    };
    let best = if request.exhaustive {
        let mut best = None;
        for i in 0..grid.len() {
            if eval(i)? {
                best = Some(i);
            }
        }
        best
    } else {
        // invariant: entries before `lo` pass, entries from `hi` fail
        let (mut lo, mut hi) = (0usize, grid.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if eval(mid)? {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo.checked_sub(1)
    };
    Ok(match best {
        Some(i) => SearchOutcome {
            bit_width: grid[i],
            met_margin: true,
            evaluated,
        },
        None => SearchOutcome {
            bit_width: grid[0],
            met_margin: false,
            evaluated,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPoint {
    pub plan: Plan,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub plan: Plan,
    pub parts: Vec<(Part, SearchOutcome)>,
    /// Joint evaluations in order, the last one being the chosen plan.
    pub joint: Vec<JointPoint>,
    pub met_margin: bool,
    pub warnings: Vec<String>,
}

/// Per-part search of `parts`, then joint evaluation. While the joint drop
/// exceeds the margin, parts are widened one grid step in turn (outputs,
/// then fc, then conv) until the margin is met or the grid is exhausted.
pub fn search_plan(
    request: &QuantizationRequest,
    baseline: f64,
    parts: &[Part],
    evaluator: &mut dyn FlowEvaluator,
) -> Result<SearchResult> {
    request.validate()?;
    let mut plan = Plan::default();
    let mut outcomes = Vec::new();
    let mut warnings = Vec::new();
    for &part in parts {
        let o = search_part(part, request, baseline, evaluator)?;
        if !o.met_margin {
            warnings.push(format!(
                "{part}: no bit-width in {:?} meets the margin on its own, using {}",
                request.search_grid, o.bit_width
            ));
        }
        *plan.get_mut(part) = Some(o.bit_width);
        outcomes.push((part, o));
    }
    let threshold = request.threshold(baseline);
    let grid = &request.search_grid;
    let mut joint = Vec::new();
    let order: Vec<Part> = [Part::Outputs, Part::FcParams, Part::ConvParams]
        .into_iter()
        .filter(|p| parts.contains(p))
        .collect();
    let mut next = 0;
    let met = loop {
        let acc = evaluator.joint_accuracy(&plan)?;
        joint.push(JointPoint { plan, accuracy: acc });
        if meets(acc, threshold) {
            break true;
        }
        // widen the next part that still has a wider grid entry
        let widened = (0..order.len()).find_map(|k| {
            let part = order[(next + k) % order.len()];
            let bits = plan.get(part)?;
            let pos = grid.iter().position(|&b| b == bits)?;
            (pos > 0).then(|| (k, part, grid[pos - 1]))
        });
        match widened {
            Some((k, part, bits)) => {
                *plan.get_mut(part) = Some(bits);
                next = (next + k + 1) % order.len();
            }
            None => {
                warnings.push(format!(
                    "joint accuracy {:.4} misses the margin even at the widest grid entry",
                    acc
                ));
                break false;
            }
        }
    };
    Ok(SearchResult {
        plan,
        parts: outcomes,
        joint,
        met_margin: met,
        warnings,
    })
}

/// Turns a [`Plan`] into per-layer formats for one scheme, using range
/// statistics of the trained network.
#[derive(Debug, Clone)]
pub struct FormatPlanner {
    pub net: NetworkSpec,
    pub scheme: Scheme,
    pub stats: Vec<RangeStats>,
    /// How each (part, bit-width) splits its bits: the integer length for
    /// static fixed point, the exponent bits for minifloat.
    pub splits: HashMap<(Part, u32), u32>,
}

impl FormatPlanner {
    pub fn new(net: &NetworkSpec, scheme: Scheme, stats: Vec<RangeStats>) -> Self {
        FormatPlanner {
            net: net.without_quantization(),
            scheme,
            stats,
            splits: HashMap::new(),
        }
    }

    fn stat(&self, layer: usize, group: StatGroup) -> &RangeStats {
        let name = &self.net.layers[layer].name;
        self.stats
            .iter()
            .find(|s| &s.layer == name && s.group == group)
            .expect("statistics cover every approximated layer")
    }

    /// Which parts have layers in this network.
    pub fn parts(&self) -> Vec<Part> {
        let has = |conv: bool| {
            self.net.layers.iter().any(|l| match l.kind {
                LayerKind::Convolution { .. } => conv,
                LayerKind::FullyConnected { .. } => !conv,
                _ => false,
            })
        };
        let mut parts = Vec::new();
        if has(true) {
            parts.push(Part::ConvParams);
        }
        if has(false) {
            parts.push(Part::FcParams);
        }
        match self.scheme {
            // activations stay in 32-bit next to power-of-two weights
            Scheme::PowerOfTwo => {}
            _ if !parts.is_empty() => parts.push(Part::Outputs),
            _ => {}
        }
        parts
    }

    fn part_max(&self, part: Part) -> f32 {
        self.net
            .quantizable_layers()
            .into_iter()
            .flat_map(|i| {
                let groups: &[StatGroup] = match (part, &self.net.layers[i].kind) {
                    (Part::Outputs, _) => &[StatGroup::Inputs, StatGroup::Outputs],
                    (Part::ConvParams, LayerKind::Convolution { .. })
                    | (Part::FcParams, LayerKind::FullyConnected { .. }) => &[StatGroup::Params],
                    _ => &[],
                };
                groups.iter().map(move |&g| self.stat(i, g).max_abs).collect::<Vec<_>>()
            })
            .fold(0.0, f32::max)
    }

    /// Candidate splits of `bits` for a part. Static fixed point may put the
    /// point anywhere. Minifloat needs at least the exponent bits that avoid
    /// saturation; wider exponents trade mantissa for range at the small end.
    pub fn split_candidates(&self, part: Part, bits: u32) -> Vec<u32> {
        match self.scheme {
            Scheme::FixedPoint => (1..=bits).collect(),
            Scheme::Minifloat => {
                let top = (bits - 1).min(7);
                let low = analysis::exponent_bits_for(self.part_max(part))
                    .min(top)
                    .max(bits.saturating_sub(24));
                (low..=top).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Split used when none was chosen: the integer length covering the
    /// part's largest value, or the fewest exponent bits that avoid
    /// saturation.
    pub fn default_split(&self, part: Part, bits: u32) -> u32 {
        match self.scheme {
            Scheme::FixedPoint => {
                let il = analysis::integer_length_for(self.part_max(part), false);
                il.clamp(1, bits as i32) as u32
            }
            _ => self.split_candidates(part, bits).first().copied().unwrap_or(0),
        }
    }

    fn split(&self, part: Part, bits: u32) -> u32 {
        self.splits
            .get(&(part, bits))
            .copied()
            .unwrap_or_else(|| self.default_split(part, bits))
    }

    fn format(&self, part: Part, bits: u32, layer: usize, group: StatGroup) -> Result<NumberFormat> {
        Ok(match self.scheme {
            Scheme::FixedPoint => {
                let il = self.split(part, bits) as i32;
                FixedPointFormat::new(il, bits as i32 - il)?.into()
            }
            Scheme::DynamicFixedPoint => {
                let is_output = group != StatGroup::Params;
                let il = analysis::choose_integer_length(self.stat(layer, group), is_output);
                DynamicFixedPointFormat::from_integer_length(bits, il)?.into()
            }
            Scheme::Minifloat => {
                let eb = self.split(part, bits);
                MinifloatFormat::new(eb, bits - 1 - eb)?.into()
            }
            Scheme::PowerOfTwo => PowerOfTwoFormat::default().into(),
        })
    }

    /// The network annotated according to `plan`. Every approximated layer
    /// gets a config; parts not in the plan keep 32-bit formats.
    pub fn annotate(&self, plan: &Plan) -> Result<NetworkSpec> {
        let mut net = self.net.clone();
        for i in net.quantizable_layers() {
            let param_part = match net.layers[i].kind {
                LayerKind::Convolution { .. } => Part::ConvParams,
                _ => Part::FcParams,
            };
            let param_format = match plan.get(param_part) {
                Some(b) => Some(self.format(param_part, b, i, StatGroup::Params)?),
                None => None,
            };
            let (input_format, output_format) = match plan.outputs {
                Some(b) if self.scheme != Scheme::PowerOfTwo => (
                    Some(self.format(Part::Outputs, b, i, StatGroup::Inputs)?),
                    Some(self.format(Part::Outputs, b, i, StatGroup::Outputs)?),
                ),
                _ => (None, None),
            };
            net.layers[i].quant = Some(QuantizationConfig {
                input_format,
                param_format,
                output_format,
                rounding: RoundingMode::NearestEven,
            });
        }
        Ok(net)
    }
}

/// Scores plans on a validation subset.
pub struct SubsetEvaluator<'a> {
    pub planner: FormatPlanner,
    pub params: &'a ParameterSet,
    pub data: Split,
    /// Number of networks scored so far.
    pub evaluations: usize,
}

impl SubsetEvaluator<'_> {
    fn score(&mut self, plan: &Plan) -> Result<f64> {
        self.evaluations += 1;
        let net = self.planner.annotate(plan)?;
        trainer::score(&net, self.params, &self.data, true)
    }

    fn sweeps_splits(&self) -> bool {
        matches!(self.planner.scheme, Scheme::FixedPoint | Scheme::Minifloat)
    }

    /// Tries every split of one part's bit-width with the other parts held
    /// and keeps the best.
    fn sweep_split(&mut self, part: Part, plan: &Plan) -> Result<f64> {
        let bits = plan.get(part).expect("part is in the plan");
        let mut best: Option<(f64, u32)> = None;
        for split in self.planner.split_candidates(part, bits) {
            self.planner.splits.insert((part, bits), split);
            let acc = self.score(plan)?;
            if best.is_none_or(|(a, _)| acc > a) {
                best = Some((acc, split));
            }
        }
        let (acc, split) = best.expect("at least one split");
        self.planner.splits.insert((part, bits), split);
        Ok(acc)
    }
}

impl PartEvaluator for SubsetEvaluator<'_> {
    fn accuracy(&mut self, part: Part, bit_width: u32) -> Result<f64> {
        let plan = Plan::only(part, bit_width);
        if self.sweeps_splits() {
            self.sweep_split(part, &plan)
        } else {
            self.score(&plan)
        }
    }
}

impl FlowEvaluator for SubsetEvaluator<'_> {
    fn joint_accuracy(&mut self, plan: &Plan) -> Result<f64> {
        if !self.sweeps_splits() {
            return self.score(plan);
        }
        // a part with no split chosen at this width starts from its best
        // split in isolation; defaults can be degenerate (minifloat weights
        // flushed to zero), and a coordinate pass cannot leave such a point
        for part in Part::ALL {
            if let Some(bits) = plan.get(part) {
                if !self.planner.splits.contains_key(&(part, bits)) {
                    self.sweep_split(part, &Plan::only(part, bits))?;
                }
            }
        }
        // one coordinate pass over the splits, starting from the per-part
        // choices; the last sweep leaves the best split of every part set
        let mut acc = 0.0;
        for part in [Part::Outputs, Part::FcParams, Part::ConvParams] {
            if plan.get(part).is_some() {
                acc = self.sweep_split(part, plan)?;
            }
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartReport {
    pub part: Part,
    /// Absent when the part stays in 32-bit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bit_width: Option<u32>,
    pub met_margin: bool,
    pub search: Vec<SearchPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub input_format: String,
    pub param_format: String,
    pub output_format: String,
    pub macs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_bits: Option<u32>,
    pub param_count: u64,
    pub param_bits: u32,
    pub param_memory_bits: u64,
    /// Output values per sample.
    pub output_count: u64,
    pub output_bits: u32,
    pub output_memory_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationReport {
    pub scheme: Scheme,
    pub error_margin: f64,
    pub search_grid: Vec<u32>,
    pub eval_subset_size: usize,
    pub baseline_accuracy: f64,
    /// Scored with the frozen formats on the full validation split.
    pub quantized_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetuned_accuracy: Option<f64>,
    pub met_margin: bool,
    pub total_param_bits: u64,
    pub total_output_bits: u64,
    pub warnings: Vec<String>,
    pub parts: Vec<PartReport>,
    pub joint: Vec<JointPoint>,
    pub layers: Vec<LayerReport>,
}

impl QuantizationReport {
    pub fn to_text(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

fn describe(f: Option<NumberFormat>) -> String {
    f.map_or_else(|| "float32".to_string(), |f| f.describe())
}

/// Per-layer memory of an annotated network; formats left unset count as
/// 32 bits.
pub fn layer_reports(net: &NetworkSpec) -> Result<Vec<LayerReport>> {
    let shapes = net.resolve()?;
    let complexity = analysis::complexity_report(net)?;
    let mut out = Vec::new();
    for (c, i) in complexity.into_iter().zip(net.quantizable_layers()) {
        let q = net.layers[i].quant.unwrap_or(QuantizationConfig {
            input_format: None,
            param_format: None,
            output_format: None,
            rounding: RoundingMode::NearestEven,
        });
        let param_bits = q.param_format.map_or(32, |f| f.bit_width());
        let output_bits = q.output_format.map_or(32, |f| f.bit_width());
        let output_count = shapes[i].output.iter().product::<usize>() as u64;
        out.push(LayerReport {
            name: c.name,
            input_format: describe(q.input_format),
            param_format: describe(q.param_format),
            output_format: describe(q.output_format),
            macs: c.macs,
            acc_bits: c.acc_bits,
            param_count: c.param_count,
            param_bits,
            param_memory_bits: c.param_count * param_bits as u64,
            output_count,
            output_bits,
            output_memory_bits: output_count * output_bits as u64,
        });
    }
    Ok(out)
}

/// First `n` training images as batches of at most 100.
fn stats_batches(train: &Split, n: usize) -> Result<Vec<Tensor>> {
    let head = train.head(n);
    head.batches(100).map(|b| b.map(|(t, _)| t)).collect()
}

/// Runs the quantization flow and returns the annotated network with its
/// report. Fine-tuning is a separate step.
pub fn run_flow(
    net: &NetworkSpec,
    params: &ParameterSet,
    data: &Dataset,
    request: &QuantizationRequest,
) -> Result<(NetworkSpec, QuantizationReport)> {
    request.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Empty("flow needs training and validation samples".into()));
    }
    let plain = net.without_quantization();
    // ranges of weights and activations
    let stats = analysis::collect_stats(&plain, params, &stats_batches(&data.train, request.stats_images)?)?;
    let planner = FormatPlanner::new(&plain, request.scheme, stats);
    let parts = planner.parts();
    let subset = data.test.head(request.eval_subset_size);
    let subset_baseline = trainer::score(&plain, params, &subset, false)?;
    let mut evaluator = SubsetEvaluator {
        planner,
        params,
        data: subset,
        evaluations: 0,
    };

    let result = if request.scheme == Scheme::PowerOfTwo {
        // the exponent encoding is fixed; only the joint check remains
        let mut plan = Plan::default();
        for &p in &parts {
            *plan.get_mut(p) = Some(PowerOfTwoFormat::default().exponent_bits);
        }
        let acc = evaluator.joint_accuracy(&plan)?;
        let met = meets(acc, request.threshold(subset_baseline));
        SearchResult {
            plan,
            parts: Vec::new(),
            joint: vec![JointPoint { plan, accuracy: acc }],
            met_margin: met,
            warnings: if met {
                Vec::new()
            } else {
                vec![format!("power-of-two weights miss the margin ({acc:.4})")]
            },
        }
    } else {
        search_plan(request, subset_baseline, &parts, &mut evaluator)?
    };

    let annotated = evaluator.planner.annotate(&result.plan)?;
    let baseline = trainer::score(&plain, params, &data.test, false)?;
    let quantized = trainer::score(&annotated, params, &data.test, true)?;
    let layers = layer_reports(&annotated)?;
    let report = QuantizationReport {
        scheme: request.scheme,
        error_margin: request.error_margin,
        search_grid: request.search_grid.clone(),
        eval_subset_size: request.eval_subset_size,
        baseline_accuracy: baseline,
        quantized_accuracy: quantized,
        finetuned_accuracy: None,
        met_margin: result.met_margin,
        total_param_bits: layers.iter().map(|l| l.param_memory_bits).sum(),
        total_output_bits: layers.iter().map(|l| l.output_memory_bits).sum(),
        warnings: result.warnings,
        parts: Part::ALL
            .iter()
            .map(|&part| {
                let outcome = result.parts.iter().find(|(p, _)| *p == part).map(|(_, o)| o);
                PartReport {
                    part,
                    bit_width: result.plan.get(part),
                    met_margin: outcome.is_none_or(|o| o.met_margin),
                    search: outcome.map(|o| o.evaluated.clone()).unwrap_or_default(),
                }
            })
            .collect(),
        joint: result.joint,
        layers,
    };
    Ok((annotated, report))
}
