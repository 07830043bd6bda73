//! Command-line front end: generate toy models, quantize model bundles,
//! evaluate remaining error, and emit diagnostics reports.
//!
//! Exit codes: 0 on full success, 1 on usage or input errors, 2 when some
//! layers failed but the run completed. Progress and errors go to stderr;
//! stdout carries data (paths of written artifacts, evaluation tables).

#![forbid(unsafe_code)]

use anyhow::{anyhow, Context, Result};
use aser::diagnostics::{
    diagnose_model, end_to_end_error, rank_table, rank_table_to_csv, rank_table_to_json,
    remaining_error, whitened_error_spectrum, write_report, ReportFormat, DEFAULT_TOP_K,
};
use aser::pipeline::{
    gen_toy_model, load_model_manifest, load_quantized_bundle, quantize_model,
    write_quantized_bundle, write_toy_model, Method, PipelineConfig, RidgePolicy, ToyModelSpec,
};
use aser::quant::{QuantAxis, QuantSpec};
use aser::reconstruct::RankPolicy;
use aser::tensor::Matrix;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "aser",
    version,
    about = "Post-training weight quantization with low-rank error compensation"
)]
struct Cli {
    /// Worker threads for layer-level parallelism; 0 means all cores.
    /// Results are identical for any value.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize every layer of a model and write the bundle plus a report
    Quantize(QuantizeArgs),
    /// Measure spectra, effective ranks, channel profiles, and rank tables
    Diagnose(DiagnoseArgs),
    /// Print per-layer and total remaining error for quantized bundles
    Eval(EvalArgs),
    /// Generate a synthetic model with boosted outlier channels
    GenToy(GenToyArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    /// Model manifest (JSON) naming weight and calibration tensor files
    #[arg(long)]
    manifest: PathBuf,

    /// Directory for the quantized bundle and report (created if missing)
    #[arg(long)]
    out: PathBuf,

    /// Quantization method: rtn, lorc, aser, or aser-as
    #[arg(long, value_parser = parse_method)]
    method: Method,

    /// Weight bit width (2..=16)
    #[arg(long = "bits-w", value_parser = parse_bits, default_value_t = 4)]
    bits_w: u32,

    /// Activation bit width for end-to-end metrics and bundle metadata
    /// (2..=16), or "none" for weight-only quantization
    #[arg(long = "bits-a", value_parser = parse_bits_a, default_value = "8")]
    bits_a: BitsA,

    /// Fixed adapter rank; mutually exclusive with --alpha
    #[arg(long, default_value_t = 64, conflicts_with = "alpha")]
    rank: usize,

    /// Threshold-based rank selection: keep the largest spectrum prefix
    /// whose share of total singular mass stays below this value (0 to 1,
    /// exclusive)
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,

    /// Rank cap for --alpha selection; defaults to a quarter of the
    /// spectrum length
    #[arg(long = "r-max", requires = "alpha")]
    r_max: Option<usize>,

    /// Number of outlier channels smoothed by aser-as (ignored by other
    /// methods)
    #[arg(long = "f", default_value_t = 32)]
    f: usize,

    /// Gram damping: "auto" (1e-8 * trace / n) or a fixed non-negative
    /// value
    #[arg(long, value_parser = parse_ridge, default_value = "auto")]
    ridge: RidgePolicy,

    /// Seed recorded in the bundle manifest for provenance
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Model manifest the bundle was quantized from
    #[arg(long)]
    manifest: PathBuf,

    /// Quantized bundle manifest (quantized_manifest.json)
    #[arg(long)]
    bundle: PathBuf,

    /// Directory for the report and rank table (created if missing)
    #[arg(long)]
    out: PathBuf,

    /// Report encoding: json or csv
    #[arg(long, value_parser = parse_report_format, default_value = "json")]
    format: ReportFormat,

    /// Number of leading singular values and channel profiles to keep
    #[arg(long = "top-k", default_value_t = DEFAULT_TOP_K)]
    top_k: usize,

    /// Thresholds evaluated by the rank table
    #[arg(
        long = "alpha-grid",
        value_parser = parse_alpha,
        value_delimiter = ',',
        default_values_t = [0.015, 0.03, 0.05, 0.075, 0.1]
    )]
    alpha_grid: Vec<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model manifest with the reference weights and calibration data
    #[arg(long)]
    manifest: PathBuf,

    /// Quantized bundle manifest; repeat to compare several bundles
    #[arg(long, required = true)]
    bundle: Vec<PathBuf>,

    /// Also quantize activations (bit width from each bundle's metadata)
    #[arg(long = "include-act-quant", default_value_t = false)]
    include_act_quant: bool,

    /// Output encoding: text or json
    #[arg(long, value_parser = parse_eval_format, default_value = "text")]
    format: EvalFormat,
}

#[derive(Args)]
struct GenToyArgs {
    /// Directory for the generated tensors and manifest (created if
    /// missing)
    #[arg(long)]
    out: PathBuf,

    /// Number of layers
    #[arg(long, default_value_t = 4)]
    layers: usize,

    /// Output dimension of every layer
    #[arg(long = "out-dim", default_value_t = 64)]
    out_dim: usize,

    /// Input dimension of every layer
    #[arg(long = "in-dim", default_value_t = 64)]
    in_dim: usize,

    /// Calibration tokens per layer
    #[arg(long, default_value_t = 4096)]
    tokens: usize,

    /// Number of boosted activation channels
    #[arg(long = "outlier-channels", default_value_t = 3)]
    outlier_channels: usize,

    /// Multiplier applied to the boosted channels' activations
    #[arg(long, default_value_t = 100.0)]
    gain: f64,

    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct BitsA(Option<u32>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EvalFormat {
    Text,
    Json,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn parse_bits(s: &str) -> Result<u32, String> {
    let bits: u32 = s.parse().map_err(|_| format!("invalid bit width {s:?}"))?;
    if (2..=16).contains(&bits) {
        Ok(bits)
    } else {
        Err(format!("bit width must be in 2..=16, got {bits}"))
    }
}

fn parse_bits_a(s: &str) -> Result<BitsA, String> {
    if s == "none" {
        Ok(BitsA(None))
    } else {
        parse_bits(s).map(|b| BitsA(Some(b)))
    }
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let alpha: f64 = s.parse().map_err(|_| format!("invalid threshold {s:?}"))?;
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(format!("threshold must be strictly between 0 and 1, got {alpha}"))
    }
}

fn parse_ridge(s: &str) -> Result<RidgePolicy, String> {
    if s == "auto" {
        return Ok(RidgePolicy::Auto);
    }
    let value: f64 = s.parse().map_err(|_| format!("invalid ridge {s:?}"))?;
    if value.is_finite() && value >= 0.0 {
        Ok(RidgePolicy::Fixed(value))
    } else {
        Err(format!("ridge must be non-negative and finite, got {value}"))
    }
}

fn parse_report_format(s: &str) -> Result<ReportFormat, String> {
    match s {
        "json" => Ok(ReportFormat::Json),
        "csv" => Ok(ReportFormat::Csv),
        other => Err(format!("unknown format {other:?} (expected json or csv)")),
    }
}

fn parse_eval_format(s: &str) -> Result<EvalFormat, String> {
    match s {
        "text" => Ok(EvalFormat::Text),
        "json" => Ok(EvalFormat::Json),
        other => Err(format!("unknown format {other:?} (expected text or json)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: could not build worker pool: {e}");
            return ExitCode::from(1);
        }
    };

    match pool.install(|| run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Quantize(args) => cmd_quantize(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GenToy(args) => cmd_gen_toy(args),
    }
}

fn act_spec_for(bits_a: Option<u32>) -> Result<Option<QuantSpec>> {
    bits_a
        .map(|bits| QuantSpec::new(bits, QuantAxis::PerCol))
        .transpose()
        .map_err(|e| anyhow!("{e}"))
}

fn cmd_quantize(args: QuantizeArgs) -> Result<ExitCode> {
    let (bundle, calib) = load_model_manifest(&args.manifest)
        .with_context(|| format!("loading model manifest {}", args.manifest.display()))?;
    let weight_spec = QuantSpec::new(args.bits_w, QuantAxis::PerRow)?;
    let rank_policy = match args.alpha {
        Some(alpha) => RankPolicy::Threshold { alpha, r_max: args.r_max },
        None => RankPolicy::Fixed(args.rank),
    };
    let cfg = PipelineConfig {
        method: args.method,
        weight_spec,
        rank_policy,
        outlier_count: args.f,
        ridge: args.ridge,
        seed: args.seed,
    };

    eprintln!(
        "[quantize] {}: {} layers, method {}, {} weight bits",
        bundle.name,
        bundle.layers.len(),
        cfg.method,
        args.bits_w
    );
    let outcome = quantize_model(&bundle, &calib, &cfg)?;
    for (name, layer) in &outcome.layers {
        eprintln!("[quantize] {name}: ok (rank {})", layer.rank());
    }
    for (name, error) in &outcome.failures {
        eprintln!("[quantize] {name}: FAILED: {error}");
    }

    let manifest_path =
        write_quantized_bundle(&args.out, &bundle.name, &outcome.layers, &cfg, args.bits_a.0)?;
    let act_spec = act_spec_for(args.bits_a.0)?;
    let report =
        diagnose_model(&bundle.layers, &calib, &outcome.layers, DEFAULT_TOP_K, act_spec.as_ref())?;
    let report_path = args.out.join("report.json");
    write_report(&report, &report_path, ReportFormat::Json)?;

    println!("{}", manifest_path.display());
    println!("{}", report_path.display());
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "[quantize] {} of {} layers failed",
            outcome.failures.len(),
            bundle.layers.len()
        );
        Ok(ExitCode::from(2))
    }
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<ExitCode> {
    let (bundle, calib) = load_model_manifest(&args.manifest)
        .with_context(|| format!("loading model manifest {}", args.manifest.display()))?;
    let (quantized_manifest, quantized) = load_quantized_bundle(&args.bundle)
        .with_context(|| format!("loading quantized bundle {}", args.bundle.display()))?;
    let act_spec = act_spec_for(quantized_manifest.bits_a)?;
    let report =
        diagnose_model(&bundle.layers, &calib, &quantized, args.top_k, act_spec.as_ref())?;

    let weight_spec = QuantSpec::new(quantized_manifest.bits_w, QuantAxis::PerRow)?;
    let mut spectra = Vec::with_capacity(quantized.len());
    for (name, _) in &quantized {
        let index = bundle
            .layers
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| anyhow!("layer {name:?} not found in the model manifest"))?;
        let (_, w) = &bundle.layers[index];
        let sigma =
            whitened_error_spectrum(w, &calib[index], &weight_spec, quantized_manifest.ridge)?;
        spectra.push((name.clone(), sigma));
    }
    let table = rank_table(&spectra, &args.alpha_grid, None)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let (report_path, table_path, table_bytes) = match args.format {
        ReportFormat::Json => (
            args.out.join("report.json"),
            args.out.join("rank_table.json"),
            rank_table_to_json(&table)?,
        ),
        ReportFormat::Csv => (
            args.out.join("report.csv"),
            args.out.join("rank_table.csv"),
            rank_table_to_csv(&table),
        ),
    };
    write_report(&report, &report_path, args.format)?;
    fs::write(&table_path, table_bytes)
        .with_context(|| format!("writing {}", table_path.display()))?;

    eprintln!("[diagnose] {} layers measured", report.layers.len());
    println!("{}", report_path.display());
    println!("{}", table_path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalLayer {
    layer: String,
    error: f64,
}

#[derive(Serialize)]
struct EvalBundle {
    bundle: String,
    method: String,
    include_act_quant: bool,
    layers: Vec<EvalLayer>,
    total: f64,
}

fn eval_bundle(
    path: &Path,
    bundle_layers: &[(String, Matrix)],
    calib: &[Matrix],
    include_act_quant: bool,
) -> Result<EvalBundle> {
    let (manifest, quantized) = load_quantized_bundle(path)
        .with_context(|| format!("loading quantized bundle {}", path.display()))?;
    let act_spec = if include_act_quant {
        let bits = manifest.bits_a.ok_or_else(|| {
            anyhow!(
                "bundle {} has no activation bit width; cannot include activation quantization",
                path.display()
            )
        })?;
        Some(QuantSpec::new(bits, QuantAxis::PerCol)?)
    } else {
        None
    };

    let mut layers = Vec::with_capacity(quantized.len());
    let mut total = 0.0;
    for (name, layer) in &quantized {
        let index = bundle_layers
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| anyhow!("layer {name:?} not found in the model manifest"))?;
        let (_, w) = &bundle_layers[index];
        let x = &calib[index];
        let error = match &act_spec {
            Some(spec) => end_to_end_error(w, layer, x, spec)?,
            None => remaining_error(w, layer, x)?,
        };
        total += error;
        layers.push(EvalLayer { layer: name.clone(), error });
    }
    Ok(EvalBundle {
        bundle: manifest.name,
        method: manifest.method.to_string(),
        include_act_quant,
        layers,
        total,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let (bundle, calib) = load_model_manifest(&args.manifest)
        .with_context(|| format!("loading model manifest {}", args.manifest.display()))?;
    let mut results = Vec::with_capacity(args.bundle.len());
    for path in &args.bundle {
        results.push(eval_bundle(path, &bundle.layers, &calib, args.include_act_quant)?);
    }

    match args.format {
        EvalFormat::Text => {
            println!("method\tlayer\terror");
            for result in &results {
                for layer in &result.layers {
                    println!("{}\t{}\t{:.10e}", result.method, layer.layer, layer.error);
                }
                if !result.layers.is_empty() {
                    println!("{}\t(total)\t{:.10e}", result.method, result.total);
                }
            }
        }
        EvalFormat::Json => {
            println!("{}", serde_json::to_string_pretty(&results)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<ExitCode> {
    let spec = ToyModelSpec {
        layers: args.layers,
        out_dim: args.out_dim,
        in_dim: args.in_dim,
        tokens: args.tokens,
        outlier_channels: args.outlier_channels,
        outlier_gain: args.gain,
        seed: args.seed,
    };
    let toy = gen_toy_model(&spec)?;
    let manifest_path = write_toy_model(&args.out, &toy)?;
    eprintln!(
        "[gen-toy] {}: {} layers of {}x{}, {} tokens, outlier channels {:?} (gain {})",
        toy.bundle.name,
        args.layers,
        args.out_dim,
        args.in_dim,
        args.tokens,
        toy.outlier_channels,
        args.gain
    );
    println!("{}", manifest_path.display());
    Ok(ExitCode::SUCCESS)
}
