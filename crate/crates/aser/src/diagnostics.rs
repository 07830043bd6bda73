//! Measurements and serialized reports: error spectra, effective ranks,
//! remaining-error norms, channel outlier profiles, rank tables over a
//! threshold grid, smoothing statistics, and adapter overhead estimates.
//!
//! Everything here is a pure function of its inputs; reports serialize
//! with a fixed field order and fixed float formatting so identical runs
//! produce byte-identical files.

use crate::linalg::{effective_rank, svd, LinalgError, EFFECTIVE_RANK_EPSILON};
use crate::pipeline::{
    forward_quantized, forward_reference, Method, PipelineError, QuantizedLayer, RidgePolicy,
};
use crate::quant::{self, QuantSpec};
use crate::reconstruct::{select_rank, RankPolicy, ReconstructError};
use crate::smooth::{channel_absmean, select_outliers, ChannelAxis, SmoothError, SmoothingPlan};
use crate::tensor::{Matrix, TensorError};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

/// Default number of leading singular values kept in serialized spectra.
pub const DEFAULT_TOP_K: usize = 128;

/// Threshold grid used by rank tables unless the caller overrides it.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.015, 0.03, 0.05, 0.075, 0.1];

#[derive(Debug)]
pub enum DiagnosticsError {
    /// Spectra need at least one entry.
    InvalidTopK { value: usize },
    /// The requested spectrum is identically zero, so it cannot be
    /// normalized or assigned an effective rank.
    ZeroSpectrum { what: &'static str },
    /// A quantized layer has no counterpart in the model bundle.
    MissingLayer { layer: String },
    /// Positive dimensions are required.
    InvalidDims { s: usize, d: usize },
    /// Overhead is defined for non-negative ranks only.
    InvalidRank { value: f64 },
    Io(io::Error),
    Linalg(LinalgError),
    Pipeline(PipelineError),
    Reconstruct(ReconstructError),
    Smooth(SmoothError),
    Tensor(TensorError),
}

impl fmt::Display for DiagnosticsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagnosticsError::InvalidTopK { value } => {
                write!(f, "top_k must be at least 1, got {value}")
            }
            DiagnosticsError::ZeroSpectrum { what } => {
                write!(f, "{what} is identically zero; spectrum undefined")
            }
            DiagnosticsError::MissingLayer { layer } => {
                write!(f, "layer {layer:?} not found in the model bundle")
            }
            DiagnosticsError::InvalidDims { s, d } => {
                write!(f, "dimensions must be positive, got s={s}, d={d}")
            }
            DiagnosticsError::InvalidRank { value } => {
                write!(f, "rank must be non-negative and finite, got {value}")
            }
            DiagnosticsError::Io(e) => write!(f, "{e}"),
            DiagnosticsError::Linalg(e) => write!(f, "{e}"),
            DiagnosticsError::Pipeline(e) => write!(f, "{e}"),
            DiagnosticsError::Reconstruct(e) => write!(f, "{e}"),
            DiagnosticsError::Smooth(e) => write!(f, "{e}"),
            DiagnosticsError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

// Display already embeds the full wrapped message; see TensorError.
impl std::error::Error for DiagnosticsError {}

impl From<io::Error> for DiagnosticsError {
    fn from(e: io::Error) -> Self {
        DiagnosticsError::Io(e)
    }
}

impl From<LinalgError> for DiagnosticsError {
    fn from(e: LinalgError) -> Self {
        DiagnosticsError::Linalg(e)
    }
}

impl From<PipelineError> for DiagnosticsError {
    fn from(e: PipelineError) -> Self {
        DiagnosticsError::Pipeline(e)
    }
}

impl From<ReconstructError> for DiagnosticsError {
    fn from(e: ReconstructError) -> Self {
        DiagnosticsError::Reconstruct(e)
    }
}

impl From<SmoothError> for DiagnosticsError {
    fn from(e: SmoothError) -> Self {
        DiagnosticsError::Smooth(e)
    }
}

impl From<TensorError> for DiagnosticsError {
    fn from(e: TensorError) -> Self {
        DiagnosticsError::Tensor(e)
    }
}

// ---------------------------------------------------------------------------
// Scalar measurements
// ---------------------------------------------------------------------------

/// Frobenius norm of the output error a quantized layer leaves behind on
/// the calibration set, with activation quantization excluded so the
/// metric isolates how well the weight error was compensated.
pub fn remaining_error(
    w: &Matrix,
    layer: &QuantizedLayer,
    x: &Matrix,
) -> Result<f64, DiagnosticsError> {
    let reference = forward_reference(w, x)?;
    let quantized = forward_quantized(layer, x, None)?;
    Ok(reference.sub(&quantized)?.fro_norm())
}

/// Like [`remaining_error`] but with the activations fake-quantized by
/// `act_spec` before the multiplies, measuring end-to-end low-bit error.
pub fn end_to_end_error(
    w: &Matrix,
    layer: &QuantizedLayer,
    x: &Matrix,
    act_spec: &QuantSpec,
) -> Result<f64, DiagnosticsError> {
    let reference = forward_reference(w, x)?;
    let quantized = forward_quantized(layer, x, Some(act_spec))?;
    Ok(reference.sub(&quantized)?.fro_norm())
}

/// Relative FLOPs and parameter overhead of a rank-`r` adapter pair on an
/// `s x d` layer, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadEstimate {
    pub flops_pct: f64,
    pub memory_pct: f64,
}

/// Adapter overhead of a rank-`r` compensation path on an `s x d` layer.
/// Both ratios reduce to the same closed form, `100 * 2r / d` percent.
/// `r` may be fractional (e.g. a mean rank across layers).
pub fn overhead_estimate(s: usize, d: usize, r: f64) -> Result<OverheadEstimate, DiagnosticsError> {
    if s == 0 || d == 0 {
        return Err(DiagnosticsError::InvalidDims { s, d });
    }
    if !r.is_finite() || r < 0.0 {
        return Err(DiagnosticsError::InvalidRank { value: r });
    }
    let pct = 100.0 * 2.0 * r / d as f64;
    Ok(OverheadEstimate { flops_pct: pct, memory_pct: pct })
}

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

/// Leading singular values of an error matrix, in its own (weight) space
/// and propagated through the calibration activations (output space). Both
/// spectra are sorted descending and normalized by their largest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub weight_space: Vec<f64>,
    pub output_space: Vec<f64>,
}

/// Full, unnormalized singular spectra of `target` and `target * x`.
///
/// The propagated spectrum is computed from the Gram matrix of the product
/// (an `out x out` symmetric problem) rather than from the product itself,
/// which keeps the cost independent of the token count.
fn raw_spectra(target: &Matrix, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>), DiagnosticsError> {
    let weight_space = svd(target)?.sigma;
    let product = target.matmul(x)?;
    let gram = product.gram();
    let output_space: Vec<f64> = svd(&gram)?.sigma.iter().map(|v| v.sqrt()).collect();
    Ok((weight_space, output_space))
}

fn normalize_spectrum(sigma: &[f64], top_k: usize, what: &'static str) -> Result<Vec<f64>, DiagnosticsError> {
    let head = sigma.first().copied().unwrap_or(0.0);
    if head == 0.0 {
        return Err(DiagnosticsError::ZeroSpectrum { what });
    }
    Ok(sigma.iter().take(top_k).map(|v| v / head).collect())
}

/// Normalized top-k spectra of a quantization-error matrix, before and
/// after propagation through the calibration activations. A target whose
/// spectrum is identically zero is flagged as an error rather than
/// silently normalized.
pub fn spectrum_report(
    target: &Matrix,
    x: &Matrix,
    top_k: usize,
) -> Result<SpectrumReport, DiagnosticsError> {
    if top_k == 0 {
        return Err(DiagnosticsError::InvalidTopK { value: top_k });
    }
    let (weight_sigma, output_sigma) = raw_spectra(target, x)?;
    Ok(SpectrumReport {
        weight_space: normalize_spectrum(&weight_sigma, top_k, "error matrix")?,
        output_space: normalize_spectrum(&output_sigma, top_k, "propagated error matrix")?,
    })
}

/// Singular values of the whitened rounding error `E * S` for a layer,
/// where `E = w - fake_quant(w)` and `S` comes from the calibration Gram
/// matrix. This is the spectrum rank selection operates on.
pub fn whitened_error_spectrum(
    w: &Matrix,
    x: &Matrix,
    weight_spec: &QuantSpec,
    ridge: RidgePolicy,
) -> Result<Vec<f64>, DiagnosticsError> {
    let error = w.sub(&quant::fake_quant(w, weight_spec))?;
    let gram = x.gram();
    let whitener =
        crate::reconstruct::compute_whitener_from_gram(&gram, ridge.resolve(&gram))?;
    Ok(crate::reconstruct::whitening_svd(&error, &whitener)?.sigma)
}

// ---------------------------------------------------------------------------
// Rank tables
// ---------------------------------------------------------------------------

/// Ranks one layer's spectrum selects across the threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTableRow {
    pub layer: String,
    pub ranks: Vec<usize>,
}

/// Selected rank per layer and per threshold, plus the mean rank each
/// threshold yields across layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub alphas: Vec<f64>,
    pub layers: Vec<RankTableRow>,
    pub mean_ranks: Vec<f64>,
}

/// Evaluates threshold-based rank selection for every layer spectrum over
/// a grid of `alpha` values.
pub fn rank_table(
    spectra: &[(String, Vec<f64>)],
    alphas: &[f64],
    r_max: Option<usize>,
) -> Result<RankTable, DiagnosticsError> {
    let mut layers = Vec::with_capacity(spectra.len());
    let mut totals = vec![0usize; alphas.len()];
    for (name, sigma) in spectra {
        let mut ranks = Vec::with_capacity(alphas.len());
        for (slot, alpha) in alphas.iter().enumerate() {
            let rank = select_rank(sigma, &RankPolicy::Threshold { alpha: *alpha, r_max })?;
            totals[slot] += rank;
            ranks.push(rank);
        }
        layers.push(RankTableRow { layer: name.clone(), ranks });
    }
    let mean_ranks = totals
        .iter()
        .map(|t| if spectra.is_empty() { 0.0 } else { *t as f64 / spectra.len() as f64 })
        .collect();
    Ok(RankTable { alphas: alphas.to_vec(), layers, mean_ranks })
}

// ---------------------------------------------------------------------------
// Smoothing statistics
// ---------------------------------------------------------------------------

/// Per-channel activation ranges before and after smoothing, plus the
/// migration-factor statistics over the smoothed channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub channel_absmax_before: Vec<f64>,
    pub channel_absmax_after: Vec<f64>,
    /// Smallest / largest / mean migration factor over the smoothed
    /// channels; all 1.0 when the plan smooths nothing.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub ratio_mean: f64,
}

fn channel_absmax(x: &Matrix) -> Vec<f64> {
    (0..x.rows())
        .map(|c| x.row(c).iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
        .collect()
}

/// Measures how a smoothing plan reshapes the activation ranges. The
/// after-range of channel `i` is its before-range divided by the plan's
/// factor, which is exactly the absmax of the smoothed activations.
pub fn smoothing_report(
    x: &Matrix,
    plan: &SmoothingPlan,
) -> Result<SmoothingReport, DiagnosticsError> {
    if x.rows() != plan.channels() {
        return Err(DiagnosticsError::Smooth(SmoothError::ChannelCount {
            expected: plan.channels(),
            actual: x.rows(),
        }));
    }
    let before = channel_absmax(x);
    let factors = plan.scales().data();
    let after: Vec<f64> = before.iter().zip(factors).map(|(b, m)| b / m).collect();
    let selected: Vec<f64> = plan.outlier_idx().iter().map(|&i| factors[i]).collect();
    let (ratio_min, ratio_max, ratio_mean) = if selected.is_empty() {
        (1.0, 1.0, 1.0)
    } else {
        let min = selected.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = selected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = selected.iter().sum::<f64>() / selected.len() as f64;
        (min, max, mean)
    };
    Ok(SmoothingReport {
        channel_absmax_before: before,
        channel_absmax_after: after,
        ratio_min,
        ratio_max,
        ratio_mean,
    })
}

// ---------------------------------------------------------------------------
// Per-layer diagnostics and the assembled report
// ---------------------------------------------------------------------------

/// One channel's outlier profile: mean absolute activation, mean absolute
/// weight, and their product (the outlier selection criterion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    pub channel: usize,
    pub act_absmean: f64,
    pub weight_absmean: f64,
    pub product: f64,
}

/// Everything measured about one quantized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: String,
    pub method: Method,
    pub rank: usize,
    /// Output error norm on the calibration set, activation quantization
    /// excluded.
    pub remaining_error: f64,
    /// Tail of the whitened spectrum: the error norm the truncation
    /// predicts. `null` for methods whose spectrum is not in output units.
    pub predicted_tail_loss: Option<f64>,
    /// Output error with activations fake-quantized as well, when an
    /// activation spec was supplied.
    pub end_to_end_error: Option<f64>,
    pub effective_rank_weight: f64,
    pub effective_rank_output: f64,
    /// Normalized top-k singular values of the compensation target.
    pub sigma_weight: Vec<f64>,
    /// Normalized top-k singular values of the target propagated through
    /// the calibration activations.
    pub sigma_output: Vec<f64>,
    /// Top-k channels by the outlier criterion, strongest first.
    pub channels: Vec<ChannelStat>,
    pub absmax_before_min: f64,
    pub absmax_before_max: f64,
    pub absmax_after_min: f64,
    pub absmax_after_max: f64,
    pub flops_overhead_pct: f64,
    pub memory_overhead_pct: f64,
}

/// Per-layer diagnostics for a whole bundle, in layer order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub layers: Vec<LayerDiagnostics>,
}

/// The matrix whose low-rank structure the adapters exploit, together with
/// the activations it multiplies: the plain rounding error for unsmoothed
/// methods, or the kept-part rounding error plus the migrated outlier part
/// (with smoothed activations) for `aser-as`.
fn compensation_target(
    w: &Matrix,
    layer: &QuantizedLayer,
    x: &Matrix,
) -> Result<(Matrix, Matrix), DiagnosticsError> {
    match layer.method() {
        Method::Rtn | Method::Lorc | Method::Aser => {
            Ok((w.sub(&layer.wq().dequant())?, x.clone()))
        }
        Method::AserAs => {
            let split = crate::smooth::split_weight(w, layer.plan())?;
            let target = split.kept.sub(&layer.wq().dequant())?.add(&split.outlier)?;
            let smoothed = x.scale_rows(&layer.plan().scales().reciprocal()?)?;
            Ok((target, smoothed))
        }
    }
}

/// Measures one layer. `top_k` bounds the serialized spectra and channel
/// stats; effective ranks always use the full spectra.
pub fn diagnose_layer(
    name: &str,
    w: &Matrix,
    layer: &QuantizedLayer,
    x: &Matrix,
    top_k: usize,
    act_spec: Option<&QuantSpec>,
) -> Result<LayerDiagnostics, DiagnosticsError> {
    if top_k == 0 {
        return Err(DiagnosticsError::InvalidTopK { value: top_k });
    }
    let remaining = remaining_error(w, layer, x)?;
    let end_to_end = match act_spec {
        Some(spec) => Some(end_to_end_error(w, layer, x, spec)?),
        None => None,
    };
    let predicted_tail_loss = match layer.method() {
        Method::Aser | Method::AserAs => layer.adapters().map(|a| a.predicted_tail_loss()),
        Method::Rtn | Method::Lorc => None,
    };

    let (target, target_x) = compensation_target(w, layer, x)?;
    let (weight_sigma, output_sigma) = raw_spectra(&target, &target_x)?;
    let sigma_weight = normalize_spectrum(&weight_sigma, top_k, "error matrix")?;
    let sigma_output = normalize_spectrum(&output_sigma, top_k, "propagated error matrix")?;
    let effective_rank_weight = effective_rank(&weight_sigma, EFFECTIVE_RANK_EPSILON)?;
    let effective_rank_output = effective_rank(&output_sigma, EFFECTIVE_RANK_EPSILON)?;

    let act_means = channel_absmean(x, ChannelAxis::Rows)?;
    let weight_means = channel_absmean(w, ChannelAxis::Cols)?;
    let mut top_channels = select_outliers(&act_means, &weight_means, top_k)?;
    let product =
        |c: usize| act_means.data()[c] * weight_means.data()[c];
    top_channels.sort_by(|&a, &b| {
        product(b).partial_cmp(&product(a)).unwrap().then(a.cmp(&b))
    });
    let channels = top_channels
        .into_iter()
        .map(|c| ChannelStat {
            channel: c,
            act_absmean: act_means.data()[c],
            weight_absmean: weight_means.data()[c],
            product: product(c),
        })
        .collect();

    let smoothing = smoothing_report(x, layer.plan())?;
    let fold_min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let fold_max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let overhead = overhead_estimate(layer.out_dim(), layer.in_dim(), layer.rank() as f64)?;

    Ok(LayerDiagnostics {
        layer: name.to_string(),
        method: layer.method(),
        rank: layer.rank(),
        remaining_error: remaining,
        predicted_tail_loss,
        end_to_end_error: end_to_end,
        effective_rank_weight,
        effective_rank_output,
        sigma_weight,
        sigma_output,
        channels,
        absmax_before_min: fold_min(&smoothing.channel_absmax_before),
        absmax_before_max: fold_max(&smoothing.channel_absmax_before),
        absmax_after_min: fold_min(&smoothing.channel_absmax_after),
        absmax_after_max: fold_max(&smoothing.channel_absmax_after),
        flops_overhead_pct: overhead.flops_pct,
        memory_overhead_pct: overhead.memory_pct,
    })
}

/// Diagnoses every quantized layer against the model bundle it came from,
/// matching layers by name. Measurement order follows the quantized list.
pub fn diagnose_model(
    bundle_layers: &[(String, Matrix)],
    calib: &[Matrix],
    quantized: &[(String, QuantizedLayer)],
    top_k: usize,
    act_spec: Option<&QuantSpec>,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    if bundle_layers.len() != calib.len() {
        return Err(DiagnosticsError::Pipeline(PipelineError::CalibrationCount {
            layers: bundle_layers.len(),
            calibs: calib.len(),
        }));
    }
    let mut layers = Vec::with_capacity(quantized.len());
    for (name, layer) in quantized {
        let index = bundle_layers
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| DiagnosticsError::MissingLayer { layer: name.clone() })?;
        let (_, w) = &bundle_layers[index];
        layers.push(diagnose_layer(name, w, layer, &calib[index], top_k, act_spec)?);
    }
    Ok(DiagnosticsReport { layers })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Output encoding for [`write_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Fixed-width float encoding used in every report: 17 significant digits,
/// enough to reproduce any f64 bit pattern on parse.
fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Pretty JSON with [`format_f64`] applied to every float.
struct ReportJsonFormatter<'a> {
    pretty: PrettyFormatter<'a>,
}

impl ReportJsonFormatter<'_> {
    fn new() -> Self {
        ReportJsonFormatter { pretty: PrettyFormatter::new() }
    }
}

impl Formatter for ReportJsonFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_f64(value).as_bytes())
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.pretty.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.pretty.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(writer)
    }
}

fn to_pinned_json<T: Serialize>(value: &T) -> Result<Vec<u8>, DiagnosticsError> {
    let mut bytes = Vec::new();
    let mut serializer =
        serde_json::Serializer::with_formatter(&mut bytes, ReportJsonFormatter::new());
    value
        .serialize(&mut serializer)
        .map_err(|e| DiagnosticsError::Io(io::Error::new(io::ErrorKind::Other, e)))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Serializes a report to pretty JSON with deterministic field order and
/// 17-significant-digit floats.
pub fn report_to_json(report: &DiagnosticsReport) -> Result<Vec<u8>, DiagnosticsError> {
    to_pinned_json(report)
}

/// Serializes a rank table to pretty JSON with the same pinned float
/// formatting as [`report_to_json`].
pub fn rank_table_to_json(table: &RankTable) -> Result<Vec<u8>, DiagnosticsError> {
    to_pinned_json(table)
}

/// Serializes a rank table as CSV: one row per (layer, alpha) plus one
/// `(mean)` row per alpha.
pub fn rank_table_to_csv(table: &RankTable) -> Vec<u8> {
    let mut out = String::from("layer,alpha,rank\n");
    for row in &table.layers {
        for (alpha, rank) in table.alphas.iter().zip(&row.ranks) {
            out.push_str(&csv_escape(&row.layer));
            out.push_str(&format!(",{},{rank}\n", format_f64(*alpha)));
        }
    }
    for (alpha, mean) in table.alphas.iter().zip(&table.mean_ranks) {
        out.push_str(&format!("(mean),{},{}\n", format_f64(*alpha), format_f64(*mean)));
    }
    out.into_bytes()
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Serializes the scalar metrics of a report as CSV, one row per
/// (layer, metric). Vector-valued fields (spectra, channel profiles) are
/// JSON-only.
pub fn report_to_csv(report: &DiagnosticsReport) -> Vec<u8> {
    let mut out = String::from("layer,method,metric,value\n");
    for layer in &report.layers {
        let mut push = |metric: &str, value: String| {
            out.push_str(&csv_escape(&layer.layer));
            out.push(',');
            out.push_str(&layer.method.to_string());
            out.push(',');
            out.push_str(metric);
            out.push(',');
            out.push_str(&value);
            out.push('\n');
        };
        push("rank", layer.rank.to_string());
        push("remaining_error", format_f64(layer.remaining_error));
        if let Some(v) = layer.predicted_tail_loss {
            push("predicted_tail_loss", format_f64(v));
        }
        if let Some(v) = layer.end_to_end_error {
            push("end_to_end_error", format_f64(v));
        }
        push("effective_rank_weight", format_f64(layer.effective_rank_weight));
        push("effective_rank_output", format_f64(layer.effective_rank_output));
        push("absmax_before_min", format_f64(layer.absmax_before_min));
        push("absmax_before_max", format_f64(layer.absmax_before_max));
        push("absmax_after_min", format_f64(layer.absmax_after_min));
        push("absmax_after_max", format_f64(layer.absmax_after_max));
        push("flops_overhead_pct", format_f64(layer.flops_overhead_pct));
        push("memory_overhead_pct", format_f64(layer.memory_overhead_pct));
    }
    out.into_bytes()
}

/// Writes a report to disk in the requested format. Identical reports
/// produce byte-identical files.
pub fn write_report(
    report: &DiagnosticsReport,
    path: &Path,
    format: ReportFormat,
) -> Result<(), DiagnosticsError> {
    let bytes = match format {
        ReportFormat::Json => report_to_json(report)?,
        ReportFormat::Csv => report_to_csv(report),
    };
    fs::write(path, bytes)?;
    Ok(())
}
