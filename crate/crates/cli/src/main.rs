use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qbrew_core::analysis;
use qbrew_core::flow::{self, QuantizationReport, QuantizationRequest, Scheme};
use qbrew_core::io::{self, ModelFile};
use qbrew_core::network::NetworkSpec;
use qbrew_core::numerics::RoundingMode;
use qbrew_core::trainer::{self, LrSchedule, SolverConfig, UpdateRule};
use qbrew_core::{Error, Result};

#[derive(Parser)]
#[command(name = "qbrew", version, about = "Train, quantize and fine-tune small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a full-precision baseline.
    Train(TrainArgs),
    /// Dump value ranges and per-layer complexity of a trained model.
    Analyze(AnalyzeArgs),
    /// Choose number formats and write the annotated model and a report.
    Quantize(QuantizeArgs),
    /// Fine-tune an annotated model with shadow weights.
    Finetune(FinetuneArgs),
    /// Print top-1 accuracy on the validation split.
    Score(ScoreArgs),
    /// Summarize a quantization report.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Network description (TOML).
    #[arg(long)]
    net: PathBuf,
    /// Dataset directory (MNIST IDX or CIFAR-10 binary).
    #[arg(long)]
    data: PathBuf,
    /// Solver file (TOML).
    #[arg(long)]
    solver: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the solver file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Training images used for the range statistics.
    #[arg(long, default_value_t = 100)]
    stats_images: usize,
    /// Also write the dump to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SchemeArg {
    Fixed,
    DynamicFixed,
    Minifloat,
    Pow2,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Fixed => Scheme::FixedPoint,
            SchemeArg::DynamicFixed => Scheme::DynamicFixedPoint,
            SchemeArg::Minifloat => Scheme::Minifloat,
            SchemeArg::Pow2 => Scheme::PowerOfTwo,
        }
    }
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum RoundingArg {
    #[default]
    Nearest,
    Stochastic,
}

impl RoundingArg {
    fn mode(self, seed: u64) -> RoundingMode {
        match self {
            RoundingArg::Nearest => RoundingMode::NearestEven,
            RoundingArg::Stochastic => RoundingMode::Stochastic { seed },
        }
    }
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    /// Tolerated accuracy drop in percentage points.
    #[arg(long)]
    margin: f64,
    /// Candidate bit widths, widest first.
    #[arg(long, value_delimiter = ',', default_value = "16,8,4,2")]
    grid: Vec<u32>,
    /// Validation images used while searching.
    #[arg(long, default_value_t = 1000)]
    subset: usize,
    #[arg(long, default_value_t = 100)]
    stats_images: usize,
    /// Rounding recorded in the annotated model.
    #[arg(long, value_enum, default_value_t)]
    rounding: RoundingArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Try every grid entry instead of binary search.
    #[arg(long)]
    exhaustive: bool,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
    /// Annotated model; defaults to the report path with a `.qbm` extension.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Annotated model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Solver file for fine-tuning.
    #[arg(long, conflicts_with = "baseline_solver")]
    solver: Option<PathBuf>,
    /// Derive the fine-tuning solver from the baseline's: same rule, a tenth
    /// of its final learning rate, constant schedule.
    #[arg(long)]
    baseline_solver: Option<PathBuf>,
    /// Overrides the iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Overrides the learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Quantization report to update with the fine-tuned accuracy.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run the simulated quantized data path.
    #[arg(long)]
    quantized: bool,
    #[arg(long, value_enum, requires = "quantized")]
    rounding: Option<RoundingArg>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    report: PathBuf,
}

/// Default fine-tuning solver when no file is given.
fn default_finetune_solver() -> SolverConfig {
    SolverConfig {
        rule: UpdateRule::adam(),
        learning_rate: 1e-4,
        batch_size: 64,
        max_iterations: 1500,
        seed: 1,
        lr_schedule: LrSchedule::Constant,
        weight_decay: 0.0,
        log_interval: 100,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_solver(path: &Path) -> Result<SolverConfig> {
    SolverConfig::from_toml(&read_text(path)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let net = NetworkSpec::from_toml(&read_text(&a.net)?)?;
    let mut solver = read_solver(&a.solver)?;
    if let Some(seed) = a.seed {
        solver.seed = seed;
    }
    let data = io::load_dataset(&a.data)?;
    println!(
        "train: seed {} iterations {} batch {} lr {:e}",
        solver.seed, solver.max_iterations, solver.batch_size, solver.learning_rate
    );
    let start = std::time::Instant::now();
    let params = trainer::train_baseline(&net, &data.train, &solver)?;
    let acc = trainer::score(&net, &params, &data.test, false)?;
    println!("accuracy {acc:.4} ({:.1}s)", start.elapsed().as_secs_f64());
    io::save_model(&a.out, &ModelFile { net, params })
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let model = io::load_model(&a.model)?;
    let data = io::load_dataset(&a.data)?;
    let net = model.net.without_quantization();
    let head = data.train.head(a.stats_images);
    let batches = head
        .batches(100)
        .map(|b| b.map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    let stats = analysis::collect_stats(&net, &model.params, &batches)?;
    let mut text = analysis::format_stats(&stats);
    text.push_str("# layer macs params acc_bits\n");
    for c in analysis::complexity_report(&net)? {
        let acc = c.acc_bits.map_or_else(|| "-".to_string(), |b| b.to_string());
        let _ = writeln!(text, "{} {} {} {}", c.name, c.macs, c.param_count, acc);
    }
    print!("{text}");
    if let Some(out) = a.out {
        std::fs::write(out, text)?;
    }
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let request = QuantizationRequest {
        search_grid: a.grid.clone(),
        eval_subset_size: a.subset,
        stats_images: a.stats_images,
        exhaustive: a.exhaustive,
        ..QuantizationRequest::new(a.scheme.into(), a.margin)
    };
    request.validate()?;
    let model = io::load_model(&a.model)?;
    let data = io::load_dataset(&a.data)?;
    println!(
        "quantize: scheme {} margin {} grid {:?} subset {} seed {}",
        request.scheme, request.error_margin, request.search_grid, request.eval_subset_size, a.seed
    );
    let (mut net, report) = flow::run_flow(&model.net, &model.params, &data, &request)?;
    let mode = a.rounding.mode(a.seed);
    for q in net.layers.iter_mut().filter_map(|l| l.quant.as_mut()) {
        q.rounding = mode;
    }
    print!("{}", summarize(&report));
    std::fs::write(&a.out, report.to_text()?)?;
    let model_out = a.model_out.unwrap_or_else(|| a.out.with_extension("qbm"));
    io::save_model(&model_out, &ModelFile { net, params: model.params })?;
    println!("wrote {} and {}", a.out.display(), model_out.display());
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut solver = match (&a.solver, &a.baseline_solver) {
        (Some(p), _) => read_solver(p)?,
        (None, Some(p)) => {
            let base = read_solver(p)?;
            base.finetune_default(a.iterations.unwrap_or(default_finetune_solver().max_iterations))
        }
        (None, None) => default_finetune_solver(),
    };
    if let Some(n) = a.iterations {
        solver.max_iterations = n;
    }
    if let Some(lr) = a.lr {
        solver.learning_rate = lr;
    }
    if let Some(seed) = a.seed {
        solver.seed = seed;
    }
    solver.validate()?;
    let model = io::load_model(&a.model)?;
    let data = io::load_dataset(&a.data)?;
    let before = trainer::score(&model.net, &model.params, &data.test, true)?;
    println!(
        "finetune: seed {} iterations {} lr {:e} accuracy before {before:.4}",
        solver.seed, solver.max_iterations, solver.learning_rate
    );
    let params = trainer::finetune(&model.net, &model.params, &data.train, &solver)?;
    let after = trainer::score(&model.net, &params, &data.test, true)?;
    println!("accuracy after {after:.4}");
    io::save_model(&a.out, &ModelFile { net: model.net, params })?;
    if let Some(path) = a.report {
        let mut report = QuantizationReport::from_text(&read_text(&path)?)?;
        report.finetuned_accuracy = Some(after);
        std::fs::write(&path, report.to_text()?)?;
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let model = io::load_model(&a.model)?;
    let data = io::load_dataset(&a.data)?;
    let acc = match (a.quantized, a.rounding) {
        (false, _) => trainer::score(&model.net, &model.params, &data.test, false)?,
        (true, None) => trainer::score(&model.net, &model.params, &data.test, true)?,
        (true, Some(r)) => {
            trainer::score_with_rounding(&model.net, &model.params, &data.test, r.mode(a.seed))?
        }
    };
    println!("accuracy {acc:.4}");
    Ok(())
}

fn summarize(r: &QuantizationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scheme {} margin {} pp", r.scheme, r.error_margin);
    let _ = writeln!(s, "baseline accuracy {:.4}", r.baseline_accuracy);
    let _ = writeln!(s, "quantized accuracy {:.4}", r.quantized_accuracy);
    if let Some(f) = r.finetuned_accuracy {
        let _ = writeln!(s, "finetuned accuracy {f:.4}");
    }
    let _ = writeln!(s, "met margin {}", r.met_margin);
    for p in &r.parts {
        let bits = p.bit_width.map_or_else(|| "float32".to_string(), |b| format!("{b} bits"));
        let _ = writeln!(s, "part {} {}", p.part, bits);
    }
    for l in &r.layers {
        let _ = writeln!(
            s,
            "layer {} in {} params {} out {}",
            l.name, l.input_format, l.param_format, l.output_format
        );
    }
    let _ = writeln!(
        s,
        "param memory {} bits, output memory {} bits per sample",
        r.total_param_bits, r.total_output_bits
    );
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn report(a: ReportArgs) -> Result<()> {
    let r = QuantizationReport::from_text(&read_text(&a.report)?)?;
    print!("{}", summarize(&r));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Quantize(a) => quantize(a),
        Command::Finetune(a) => finetune(a),
        Command::Score(a) => score(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qbrew: {e}");
            ExitCode::from(1)
        }
    }
}
