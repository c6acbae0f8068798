//! The `3as` command line: analyze → plan → prune → stats → student.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data errors. Data goes
//! to files or standard output, diagnostics to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use archslim_core::planner::{self, Target, TargetContext};
use archslim_core::spectral::{AnalysisError, LayerSpectrum, SpectralError};
use archslim_core::stats::{self, count_stats};
use archslim_core::{
    canon, nwf, ArchitecturePlan, Architecture, CouplingPolicy, Criterion, FlopConvention, InputShape,
    NetworkWeights, Normalization, PlanConfig, PlanError,
};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::io::{self, IoError};
use crate::parallel;

#[derive(Debug, Parser)]
#[command(
    name = "3as",
    version,
    about = "Pick per-layer filter counts from the spectrum of conv weights, then prune to them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer eigenvalue spectra and cumulative contribution curves.
    Analyze(AnalyzeArgs),
    /// Per-layer filter budgets as a plan file.
    Plan(PlanArgs),
    /// Slice a network down to a plan.
    Prune(PruneArgs),
    /// Parameter and FLOP counts, optionally against a plan or pruned file.
    Stats(StatsArgs),
    /// Architecture-only manifest of the slimmed network.
    Student(StudentArgs),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// NWF weights file.
    input: PathBuf,
    /// Cumulative contribution threshold in [0, 1].
    #[arg(long, default_value_t = 0.95, value_parser = parse_delta)]
    delta: f64,
    /// Standardize each filter before the covariance (correlation PCA).
    #[arg(long)]
    zscore: bool,
    /// Write the JSON report here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write the contribution curves as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ShapeArgs {
    /// Input image shape as CxHxW.
    #[arg(long = "input-shape", default_value = "3x32x32", value_parser = parse_input_shape)]
    input_shape: InputShape,
    /// Report multiply-accumulates instead of FLOPs (halves the counts).
    #[arg(long)]
    macs: bool,
}

impl ShapeArgs {
    fn convention(&self) -> FlopConvention {
        if self.macs {
            FlopConvention::Macs
        } else {
            FlopConvention::Flops
        }
    }
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// NWF weights file.
    input: PathBuf,
    /// Cumulative contribution threshold in [0, 1].
    #[arg(long, default_value_t = 0.95, value_parser = parse_delta, conflicts_with = "target")]
    delta: f64,
    /// Search the threshold so the plan keeps the given fraction of a metric,
    /// e.g. params:0.25.
    #[arg(long, value_parser = parse_target)]
    target: Option<Target>,
    /// How coupled (residual) layers settle on one filter count.
    #[arg(long, default_value = "max", value_parser = parse_coupling)]
    coupling: CouplingPolicy,
    /// Standardize each filter before the covariance (correlation PCA).
    #[arg(long)]
    zscore: bool,
    /// Per-layer threshold override as NAME=DELTA; repeatable.
    #[arg(long = "layer-delta", value_parser = parse_layer_delta)]
    layer_delta: Vec<(String, f64)>,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Write here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// NWF weights file.
    input: PathBuf,
    /// Plan file written by `3as plan`.
    #[arg(long)]
    plan: PathBuf,
    /// Filter importance: l1, l2, gm or bn.
    #[arg(long, default_value = "l1", value_parser = parse_criterion)]
    criterion: Criterion,
    /// Pruned NWF file to write.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the surviving filter indices as JSON.
    #[arg(long)]
    survivors: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// NWF weights file.
    input: PathBuf,
    /// Compare against the architecture a plan describes.
    #[arg(long, conflicts_with = "pruned")]
    plan: Option<PathBuf>,
    /// Compare against a pruned NWF file.
    #[arg(long)]
    pruned: Option<PathBuf>,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Emit JSON instead of a text table.
    #[arg(long)]
    json: bool,
    /// Write here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StudentArgs {
    /// NWF weights file.
    input: PathBuf,
    /// Plan file written by `3as plan`.
    #[arg(long)]
    plan: PathBuf,
    /// Write here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_delta(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_target(s: &str) -> Result<Target, String> {
    s.parse()
}

fn parse_coupling(s: &str) -> Result<CouplingPolicy, String> {
    s.parse()
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse()
}

fn parse_layer_delta(s: &str) -> Result<(String, f64), String> {
    let (name, delta) = s
        .rsplit_once('=')
        .ok_or_else(|| format!("expected NAME=DELTA, got `{s}`"))?;
    if name.is_empty() {
        return Err(format!("expected NAME=DELTA, got `{s}`"));
    }
    Ok((name.to_string(), parse_delta(delta)?))
}

fn parse_input_shape(s: &str) -> Result<InputShape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("expected CxHxW with positive integers, got `{s}`"))?;
    match dims[..] {
        [c, h, w] => Ok(InputShape::new(c, h, w)),
        _ => Err(format!("expected CxHxW with positive integers, got `{s}`")),
    }
}

/// Outcome of a failed command.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::UnknownLayer(name) => {
                Failure::Usage(format!("--layer-delta names `{name}`, which is not a conv2d layer"))
            }
            other => Failure::Data(other.to_string()),
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

struct Streams<'a> {
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Streams<'_> {
    fn emit(&mut self, path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
        match path {
            Some(p) => io::write_atomic(p, bytes).map_err(Failure::from),
            None => self.stdout.write_all(bytes).map_err(data),
        }
    }

    fn warn(&mut self, message: &str) {
        let _ = writeln!(self.stderr, "warning: {message}");
    }
}

/// Runs the tool with `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    1
                }
            };
        }
    };
    let mut streams = Streams { stdout, stderr };
    let result = match cli.command {
        Command::Analyze(a) => analyze(a, &mut streams),
        Command::Plan(a) => plan(a, &mut streams),
        Command::Prune(a) => prune(a),
        Command::Stats(a) => stats_cmd(a, &mut streams),
        Command::Student(a) => student(a, &mut streams),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(streams.stderr, "error: {msg}");
            1
        }
        Err(Failure::Data(msg)) => {
            let _ = writeln!(streams.stderr, "error: {msg}");
            2
        }
    }
}

fn normalization(zscore: bool) -> Normalization {
    if zscore {
        Normalization::Zscore
    } else {
        Normalization::Center
    }
}

fn analyze(args: AnalyzeArgs, out: &mut Streams) -> Result<(), Failure> {
    let net = io::read_weights(&args.input)?;
    let norm = normalization(args.zscore);
    let decompositions = parallel::decompose_network(&net, norm)?;
    if decompositions.is_empty() {
        return Err(PlanError::EmptyNetwork.into());
    }
    let mut spectra = Vec::with_capacity(decompositions.len());
    for d in &decompositions {
        match d.select(args.delta) {
            Ok(s) => spectra.push(s),
            Err(AnalysisError {
                layer,
                source: SpectralError::ZeroVariance,
            }) => {
                out.warn(&format!("layer `{layer}`: zero filter variance; keeping a single filter"));
                spectra.push(LayerSpectrum::zero_variance(&layer, d.filters(), args.delta));
            }
            Err(e) => return Err(data(e)),
        }
    }
    let report = json!({
        "delta": args.delta,
        "normalization": norm,
        "source_fingerprint": nwf::fingerprint(&net),
        "layers": spectra,
    });
    out.emit(args.output.as_deref(), canon::value_to_string(&report).as_bytes())?;
    if let Some(csv) = &args.csv {
        io::write_atomic(csv, stats::curve_csv(&spectra).as_bytes())?;
    }
    Ok(())
}

fn plan(args: PlanArgs, out: &mut Streams) -> Result<(), Failure> {
    let net = io::read_weights(&args.input)?;
    let mut config = PlanConfig::new(args.delta)
        .with_policy(args.coupling)
        .with_normalization(normalization(args.zscore));
    for (layer, delta) in args.layer_delta {
        config = config.with_layer_delta(layer, delta);
    }
    let plan = match args.target {
        None => parallel::plan_architecture(&net, &config)?,
        Some(target) => search(&net, &config, target, &args.shape)?,
    };
    for e in &plan.entries {
        for w in &e.warnings {
            out.warn(&format!("layer `{}`: {w}", e.layer_name));
        }
    }
    if let Some(t) = plan.target.as_ref().filter(|t| !t.within_tolerance) {
        out.warn(&format!(
            "closest reachable ratio is {:.4}, target was {:.4}",
            t.achieved_ratio, t.ratio
        ));
    }
    out.emit(args.output.as_deref(), plan.to_json().as_bytes())
}

fn search(
    net: &NetworkWeights,
    config: &PlanConfig,
    target: Target,
    shape: &ShapeArgs,
) -> Result<ArchitecturePlan, Failure> {
    planner::validate_topology(net)?;
    if net.conv_layers().next().is_none() {
        return Err(PlanError::EmptyNetwork.into());
    }
    let decompositions = parallel::decompose_network(net, config.normalization)?;
    let context = TargetContext {
        input: shape.input_shape,
        convention: shape.convention(),
    };
    Ok(planner::search_target(net, &decompositions, config, target, context)?)
}

fn prune(args: PruneArgs) -> Result<(), Failure> {
    let net = io::read_weights(&args.input)?;
    let plan = io::read_plan(&args.plan)?;
    let outcome = parallel::prune_network(&net, &plan, args.criterion).map_err(data)?;
    io::write_weights(&args.output, &outcome.network)?;
    if let Some(path) = &args.survivors {
        io::write_atomic(path, outcome.survivors_json().as_bytes())?;
    }
    Ok(())
}

fn stats_cmd(args: StatsArgs, out: &mut Streams) -> Result<(), Failure> {
    let net = io::read_weights(&args.input)?;
    let (input, convention) = (args.shape.input_shape, args.shape.convention());
    let before = count_stats(&Architecture::from_network(&net), input, convention).map_err(data)?;
    let after = if let Some(path) = &args.plan {
        let plan = io::read_plan(path)?;
        Some(Architecture::from_plan(&plan, &net)?)
    } else if let Some(path) = &args.pruned {
        Some(Architecture::from_network(&io::read_weights(path)?))
    } else {
        None
    };
    let text = match after {
        None if args.json => before.to_json(),
        None => before.to_text(),
        Some(arch) => {
            let after = count_stats(&arch, input, convention).map_err(data)?;
            let report = stats::reduction_report(&before, &after).map_err(data)?;
            if args.json {
                report.to_json()
            } else {
                report.to_text()
            }
        }
    };
    out.emit(args.output.as_deref(), text.as_bytes())
}

fn student(args: StudentArgs, out: &mut Streams) -> Result<(), Failure> {
    let net = io::read_weights(&args.input)?;
    let plan = io::read_plan(&args.plan)?;
    let manifest = planner::student_manifest(&plan, &net)?;
    out.emit(args.output.as_deref(), manifest.as_bytes())
}
