//! Per-layer quantization methods, model-level orchestration, bundle I/O,
//! and a synthetic toy-model generator.
//!
//! Four methods share one interface:
//!
//! - `rtn`: round-to-nearest weights, nothing else;
//! - `lorc`: rtn plus low-rank adapters from the plain SVD of the rounding
//!   error (weight-space optimal, activation-blind);
//! - `aser`: rtn plus adapters from the activation-whitened SVD of the
//!   rounding error (output-space optimal on the calibration set);
//! - `aser-as`: outlier channels are smoothed into the weight and split out
//!   of the integer grid entirely; the adapters compensate both the
//!   rounding error of the kept part and the full outlier part.
//!
//! Everything is deterministic. The only randomness in the crate lives in
//! [`gen_toy_model`], which is fully seeded.

use crate::quant::{self, QuantAxis, QuantError, QuantSpec, QuantizedTensor};
use crate::reconstruct::{
    build_adapters, build_adapters_unwhitened, compute_whitener_from_gram, Adapters, RankPolicy,
    ReconstructError,
};
use crate::smooth::{build_plan, split_weight, SmoothError, SmoothingPlan};
use crate::tensor::{read_tensor, write_tensor, Matrix, TensorError, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug)]
pub enum PipelineError {
    UnknownMethod { input: String },
    /// Weight input width and calibration channel count disagree.
    CalibrationShape { weight_in: usize, calib_channels: usize },
    /// One calibration matrix is required per layer.
    CalibrationCount { layers: usize, calibs: usize },
    DuplicateLayerName { name: String },
    /// Layer names become file names; path separators and empty names are
    /// rejected up front.
    InvalidLayerName { name: String },
    InvalidToySpec { reason: String },
    /// A manifest field disagrees with the tensor file it describes.
    ManifestDim { layer: String, field: &'static str, expected: u64, actual: u64 },
    /// A tensor file failed to read or write; the path names the culprit.
    File { path: PathBuf, source: TensorError },
    /// A JSON document failed to read, parse, or write.
    Json { path: PathBuf, source: JsonFileError },
    Quant(QuantError),
    Smooth(SmoothError),
    Reconstruct(ReconstructError),
    Tensor(TensorError),
}

/// Why a JSON file could not be processed.
#[derive(Debug)]
pub enum JsonFileError {
    Io(io::Error),
    Parse(serde_json::Error),
}

impl fmt::Display for JsonFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JsonFileError::Io(e) => write!(f, "{e}"),
            JsonFileError::Parse(e) => write!(f, "{e}"),
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::UnknownMethod { input } => write!(
                f,
                "unknown method {input:?} (expected rtn, lorc, aser, or aser-as)"
            ),
            PipelineError::CalibrationShape { weight_in, calib_channels } => write!(
                f,
                "weight expects {weight_in} input channels but calibration has {calib_channels}"
            ),
            PipelineError::CalibrationCount { layers, calibs } => {
                write!(f, "{layers} layers but {calibs} calibration matrices")
            }
            PipelineError::DuplicateLayerName { name } => {
                write!(f, "duplicate layer name {name:?}")
            }
            PipelineError::InvalidLayerName { name } => {
                write!(f, "layer name {name:?} is empty or contains path separators")
            }
            PipelineError::InvalidToySpec { reason } => {
                write!(f, "invalid toy model spec: {reason}")
            }
            PipelineError::ManifestDim { layer, field, expected, actual } => write!(
                f,
                "layer {layer:?}: manifest says {field} = {expected}, tensor file has {actual}"
            ),
            PipelineError::File { path, source } => {
                write!(f, "{}: {source}", path.display())
            }
            PipelineError::Json { path, source } => {
                write!(f, "{}: {source}", path.display())
            }
            PipelineError::Quant(e) => write!(f, "{e}"),
            PipelineError::Smooth(e) => write!(f, "{e}"),
            PipelineError::Reconstruct(e) => write!(f, "{e}"),
            PipelineError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

// Display already embeds the full wrapped message, so the chain is not
// re-exposed through source(); reporters that walk causes would print
// every line twice otherwise.
impl std::error::Error for PipelineError {}

impl From<QuantError> for PipelineError {
    fn from(e: QuantError) -> Self {
        PipelineError::Quant(e)
    }
}

impl From<SmoothError> for PipelineError {
    fn from(e: SmoothError) -> Self {
        PipelineError::Smooth(e)
    }
}

impl From<ReconstructError> for PipelineError {
    fn from(e: ReconstructError) -> Self {
        PipelineError::Reconstruct(e)
    }
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        PipelineError::Tensor(e)
    }
}

/// Which quantization method a layer runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rtn,
    Lorc,
    Aser,
    AserAs,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Rtn => "rtn",
            Method::Lorc => "lorc",
            Method::Aser => "aser",
            Method::AserAs => "aser-as",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Method {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Method, PipelineError> {
        match s {
            "rtn" => Ok(Method::Rtn),
            "lorc" => Ok(Method::Lorc),
            "aser" => Ok(Method::Aser),
            "aser-as" => Ok(Method::AserAs),
            other => Err(PipelineError::UnknownMethod { input: other.to_string() }),
        }
    }
}

/// How the Gram-matrix damping term is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RidgePolicy {
    /// `1e-8 * trace(gram) / n`: proportional to the mean channel energy,
    /// so it rescales with the data.
    Auto,
    Fixed(f64),
}

impl RidgePolicy {
    /// Concrete ridge value for a given Gram matrix.
    pub fn resolve(&self, gram: &Matrix) -> f64 {
        match self {
            RidgePolicy::Auto => {
                if gram.rows() == 0 {
                    0.0
                } else {
                    1e-8 * gram.trace() / gram.rows() as f64
                }
            }
            RidgePolicy::Fixed(v) => *v,
        }
    }
}

/// Everything a per-layer quantization run needs besides the tensors.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub method: Method,
    /// Weight grid; weights are always scaled per output row.
    pub weight_spec: QuantSpec,
    pub rank_policy: RankPolicy,
    /// Number of channels `aser-as` smooths and splits out. Ignored by the
    /// other methods.
    pub outlier_count: usize,
    pub ridge: RidgePolicy,
    /// Recorded in output manifests for provenance; the pipeline itself is
    /// deterministic and draws no random numbers.
    pub seed: u64,
}

/// A quantized layer ready for inference: integer weights, the smoothing
/// plan to apply to incoming activations, and optional low-rank
/// compensation adapters.
#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    wq: QuantizedTensor,
    plan: SmoothingPlan,
    adapters: Option<Adapters>,
    method: Method,
    out_dim: usize,
    in_dim: usize,
}

impl QuantizedLayer {
    pub fn wq(&self) -> &QuantizedTensor {
        &self.wq
    }

    pub fn plan(&self) -> &SmoothingPlan {
        &self.plan
    }

    pub fn adapters(&self) -> Option<&Adapters> {
        self.adapters.as_ref()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Kept rank of the compensation path (0 when there is none).
    pub fn rank(&self) -> usize {
        self.adapters.as_ref().map_or(0, |a| a.rank())
    }

    /// Reassembles a layer from stored parts, validating shapes.
    pub fn from_parts(
        wq: QuantizedTensor,
        plan: SmoothingPlan,
        adapters: Option<Adapters>,
        method: Method,
    ) -> Result<QuantizedLayer, PipelineError> {
        let out_dim = wq.rows();
        let in_dim = wq.cols();
        if plan.channels() != in_dim {
            return Err(PipelineError::CalibrationShape {
                weight_in: in_dim,
                calib_channels: plan.channels(),
            });
        }
        if let Some(a) = &adapters {
            if a.la().rows() != out_dim || a.lb().cols() != in_dim {
                return Err(PipelineError::Reconstruct(ReconstructError::DimensionMismatch {
                    op: "QuantizedLayer::from_parts",
                    expected: out_dim,
                    actual: a.la().rows(),
                }));
            }
        }
        Ok(QuantizedLayer { wq, plan, adapters, method, out_dim, in_dim })
    }
}

/// The unquantized layer output `w * x`.
pub fn forward_reference(w: &Matrix, x: &Matrix) -> Result<Matrix, PipelineError> {
    Ok(w.matmul(x)?)
}

/// Runs activations through a quantized layer.
///
/// The smoothing plan's reciprocal factors are always applied to the
/// incoming activation rows (a bitwise no-op for identity plans). If
/// `act_spec` is given, the smoothed activations are fake-quantized with it
/// before any multiply, modeling low-bit activation inference. The adapter
/// term uses the same (smoothed, possibly quantized) activations as the
/// integer path and runs at full precision.
pub fn forward_quantized(
    layer: &QuantizedLayer,
    x: &Matrix,
    act_spec: Option<&QuantSpec>,
) -> Result<Matrix, PipelineError> {
    if x.rows() != layer.in_dim {
        return Err(PipelineError::CalibrationShape {
            weight_in: layer.in_dim,
            calib_channels: x.rows(),
        });
    }
    let mut activations = x.scale_rows(&layer.plan.scales().reciprocal()?)?;
    if let Some(spec) = act_spec {
        activations = quant::fake_quant(&activations, spec);
    }
    let mut y = layer.wq.dequant().matmul(&activations)?;
    if let Some(adapters) = &layer.adapters {
        y = y.add(&adapters.apply(&activations)?)?;
    }
    Ok(y)
}

/// Quantizes one layer's weight against its calibration activations.
pub fn quantize_layer(
    w: &Matrix,
    x: &Matrix,
    cfg: &PipelineConfig,
) -> Result<QuantizedLayer, PipelineError> {
    if w.cols() != x.rows() {
        return Err(PipelineError::CalibrationShape {
            weight_in: w.cols(),
            calib_channels: x.rows(),
        });
    }
    let out_dim = w.rows();
    let in_dim = w.cols();
    match cfg.method {
        Method::Rtn => {
            let wq = quant::quantize(w, &cfg.weight_spec);
            Ok(QuantizedLayer {
                wq,
                plan: SmoothingPlan::identity(in_dim),
                adapters: None,
                method: Method::Rtn,
                out_dim,
                in_dim,
            })
        }
        Method::Lorc => {
            let wq = quant::quantize(w, &cfg.weight_spec);
            let error = w.sub(&wq.dequant())?;
            let adapters = build_adapters_unwhitened(&error, &cfg.rank_policy)?;
            Ok(QuantizedLayer {
                wq,
                plan: SmoothingPlan::identity(in_dim),
                adapters: Some(adapters),
                method: Method::Lorc,
                out_dim,
                in_dim,
            })
        }
        Method::Aser => {
            let wq = quant::quantize(w, &cfg.weight_spec);
            let error = w.sub(&wq.dequant())?;
            let gram = x.gram();
            let whitener = compute_whitener_from_gram(&gram, cfg.ridge.resolve(&gram))?;
            let adapters = build_adapters(&error, &whitener, &cfg.rank_policy)?;
            Ok(QuantizedLayer {
                wq,
                plan: SmoothingPlan::identity(in_dim),
                adapters: Some(adapters),
                method: Method::Aser,
                out_dim,
                in_dim,
            })
        }
        Method::AserAs => {
            let plan = build_plan(w, x, cfg.outlier_count)?;
            let split = split_weight(w, &plan)?;
            let wq = quant::quantize(&split.kept, &cfg.weight_spec);
            // Compensation target: rounding error of the kept part plus the
            // entire outlier part, which never touched the grid.
            let target = split.kept.sub(&wq.dequant())?.add(&split.outlier)?;
            // The whitener must match the activations the layer will
            // actually see, i.e. after smoothing.
            let smoothed = x.scale_rows(&plan.scales().reciprocal()?)?;
            let gram = smoothed.gram();
            let whitener = compute_whitener_from_gram(&gram, cfg.ridge.resolve(&gram))?;
            let adapters = build_adapters(&target, &whitener, &cfg.rank_policy)?;
            Ok(QuantizedLayer {
                wq,
                plan,
                adapters: Some(adapters),
                method: Method::AserAs,
                out_dim,
                in_dim,
            })
        }
    }
}

/// Named weight matrices, in order.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub name: String,
    pub layers: Vec<(String, Matrix)>,
}

/// A generated toy model: weights, per-layer calibration activations, and
/// the channels whose activations were boosted.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub bundle: ModelBundle,
    pub calib: Vec<Matrix>,
    /// Sorted indices of the injected outlier channels (same for every
    /// layer).
    pub outlier_channels: Vec<usize>,
}

/// Parameters for [`gen_toy_model`].
#[derive(Debug, Clone, Copy)]
pub struct ToyModelSpec {
    pub layers: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    pub tokens: usize,
    /// How many input channels get boosted activations.
    pub outlier_channels: usize,
    /// Multiplier applied to the boosted channels' activations.
    pub outlier_gain: f64,
    pub seed: u64,
}

/// Generates a fully seeded synthetic model.
///
/// Weights and activations are standard normal draws from a ChaCha8 stream;
/// a fixed set of `outlier_channels` channels (chosen once per model) has
/// its activation rows multiplied by `outlier_gain` in every layer,
/// mimicking the heavy-channel structure of transformer activations.
/// Identical specs produce bit-identical models.
pub fn gen_toy_model(spec: &ToyModelSpec) -> Result<ToyModel, PipelineError> {
    let invalid = |reason: &str| PipelineError::InvalidToySpec { reason: reason.to_string() };
    if spec.layers == 0 {
        return Err(invalid("layer count must be at least 1"));
    }
    if spec.out_dim == 0 || spec.in_dim == 0 {
        return Err(invalid("dimensions must be at least 1"));
    }
    if spec.tokens == 0 {
        return Err(invalid("token count must be at least 1"));
    }
    if spec.outlier_channels > spec.in_dim {
        return Err(invalid(&format!(
            "outlier channel count {} exceeds input dimension {}",
            spec.outlier_channels, spec.in_dim
        )));
    }
    if !spec.outlier_gain.is_finite() || spec.outlier_gain <= 0.0 {
        return Err(invalid("outlier gain must be finite and positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Partial Fisher-Yates: draw the outlier channels without replacement.
    let mut pool: Vec<usize> = (0..spec.in_dim).collect();
    for k in 0..spec.outlier_channels {
        let j = rng.gen_range(k..spec.in_dim);
        pool.swap(k, j);
    }
    let mut outliers: Vec<usize> = pool[..spec.outlier_channels].to_vec();
    outliers.sort_unstable();
    let mut boosted = vec![false; spec.in_dim];
    for &c in &outliers {
        boosted[c] = true;
    }

    let mut layers = Vec::with_capacity(spec.layers);
    let mut calib = Vec::with_capacity(spec.layers);
    for index in 0..spec.layers {
        let name = format!("layer{index:02}");
        let weight: Vec<f64> =
            (0..spec.out_dim * spec.in_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut activations: Vec<f64> =
            (0..spec.in_dim * spec.tokens).map(|_| rng.sample(StandardNormal)).collect();
        for channel in 0..spec.in_dim {
            if boosted[channel] {
                for v in
                    &mut activations[channel * spec.tokens..(channel + 1) * spec.tokens]
                {
                    *v *= spec.outlier_gain;
                }
            }
        }
        layers.push((name, Matrix::from_vec(spec.out_dim, spec.in_dim, weight)?));
        calib.push(Matrix::from_vec(spec.in_dim, spec.tokens, activations)?);
    }

    Ok(ToyModel {
        bundle: ModelBundle { name: format!("toy-{}", spec.seed), layers },
        calib,
        outlier_channels: outliers,
    })
}

/// Result of a model-level run: successfully quantized layers plus the
/// layers that failed, both in manifest order.
#[derive(Debug)]
pub struct QuantizeOutcome {
    pub layers: Vec<(String, QuantizedLayer)>,
    pub failures: Vec<(String, PipelineError)>,
}

/// Quantizes every layer of a bundle against its calibration matrix.
///
/// Layers are independent and run in parallel on the current rayon pool;
/// results are collected in input order, so the outcome is identical for
/// any worker count. A failing layer does not abort the run — it is
/// reported in `failures` while the rest proceed.
pub fn quantize_model(
    bundle: &ModelBundle,
    calib: &[Matrix],
    cfg: &PipelineConfig,
) -> Result<QuantizeOutcome, PipelineError> {
    if bundle.layers.len() != calib.len() {
        return Err(PipelineError::CalibrationCount {
            layers: bundle.layers.len(),
            calibs: calib.len(),
        });
    }
    let mut names: Vec<&str> = bundle.layers.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    for pair in names.windows(2) {
        if pair[0] == pair[1] {
            return Err(PipelineError::DuplicateLayerName { name: pair[0].to_string() });
        }
    }

    let results: Vec<(String, Result<QuantizedLayer, PipelineError>)> = bundle
        .layers
        .par_iter()
        .zip(calib.par_iter())
        .map(|((name, w), x)| (name.clone(), quantize_layer(w, x, cfg)))
        .collect();

    let mut layers = Vec::new();
    let mut failures = Vec::new();
    for (name, result) in results {
        match result {
            Ok(layer) => layers.push((name, layer)),
            Err(e) => failures.push((name, e)),
        }
    }
    Ok(QuantizeOutcome { layers, failures })
}

// ---------------------------------------------------------------------------
// Model manifest (input side)
// ---------------------------------------------------------------------------

/// One layer entry in a model manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub weight: String,
    pub calib: String,
    #[serde(rename = "out")]
    pub out_dim: u64,
    #[serde(rename = "in")]
    pub in_dim: u64,
}

/// The JSON document naming a model's weight and calibration tensor files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub layers: Vec<ManifestLayer>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        source: JsonFileError::Io(e),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        source: JsonFileError::Parse(e),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        source: JsonFileError::Parse(e),
    })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        source: JsonFileError::Io(e),
    })
}

fn read_tensor_at(path: &Path) -> Result<Matrix, PipelineError> {
    read_tensor(path)
        .map_err(|source| PipelineError::File { path: path.to_path_buf(), source })
}

fn write_tensor_at(path: &Path, m: &Matrix) -> Result<(), PipelineError> {
    write_tensor(path, m)
        .map_err(|source| PipelineError::File { path: path.to_path_buf(), source })
}

fn validate_layer_name(name: &str) -> Result<(), PipelineError> {
    if name.is_empty() || name.contains('/') || name.contains('\\') {
        return Err(PipelineError::InvalidLayerName { name: name.to_string() });
    }
    Ok(())
}

/// Loads a model manifest plus every tensor it references. Tensor paths are
/// resolved relative to the manifest's directory. Dimensions recorded in
/// the manifest are checked against the files.
pub fn load_model_manifest(path: &Path) -> Result<(ModelBundle, Vec<Matrix>), PipelineError> {
    let manifest: ModelManifest = read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut calib = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        validate_layer_name(&entry.name)?;
        let weight = read_tensor_at(&base.join(&entry.weight))?;
        let dim_err = |field, expected, actual| PipelineError::ManifestDim {
            layer: entry.name.clone(),
            field,
            expected,
            actual,
        };
        if weight.rows() as u64 != entry.out_dim {
            return Err(dim_err("out", entry.out_dim, weight.rows() as u64));
        }
        if weight.cols() as u64 != entry.in_dim {
            return Err(dim_err("in", entry.in_dim, weight.cols() as u64));
        }
        let x = read_tensor_at(&base.join(&entry.calib))?;
        if x.rows() as u64 != entry.in_dim {
            return Err(dim_err("in (calibration channels)", entry.in_dim, x.rows() as u64));
        }
        layers.push((entry.name.clone(), weight));
        calib.push(x);
    }
    Ok((ModelBundle { name: manifest.name, layers }, calib))
}

/// Writes a toy model as weight/calibration tensor files plus
/// `manifest.json` in `dir`, returning the manifest path.
pub fn write_toy_model(dir: &Path, toy: &ToyModel) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Json {
        path: dir.to_path_buf(),
        source: JsonFileError::Io(e),
    })?;
    let mut entries = Vec::with_capacity(toy.bundle.layers.len());
    for ((name, weight), x) in toy.bundle.layers.iter().zip(&toy.calib) {
        validate_layer_name(name)?;
        let weight_file = format!("{name}.weight.tnsr");
        let calib_file = format!("{name}.calib.tnsr");
        write_tensor_at(&dir.join(&weight_file), weight)?;
        write_tensor_at(&dir.join(&calib_file), x)?;
        entries.push(ManifestLayer {
            name: name.clone(),
            weight: weight_file,
            calib: calib_file,
            out_dim: weight.rows() as u64,
            in_dim: weight.cols() as u64,
        });
    }
    let manifest = ModelManifest { name: toy.bundle.name.clone(), layers: entries };
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// Quantized bundle (output side)
// ---------------------------------------------------------------------------

/// Per-layer entry of a quantized bundle manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedManifestLayer {
    pub name: String,
    #[serde(rename = "out")]
    pub out_dim: u64,
    #[serde(rename = "in")]
    pub in_dim: u64,
    pub rank: u64,
    /// Channels the smoothing plan migrated (empty for identity plans).
    pub outlier_idx: Vec<usize>,
    /// Singular values beyond the kept rank, needed to reload the adapters
    /// faithfully.
    pub sigma_tail: Vec<f64>,
    pub wq: String,
    pub scales: String,
    pub la: String,
    pub lb: String,
    pub m: String,
}

/// The JSON document describing a quantized bundle: the configuration that
/// produced it plus one entry per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedManifest {
    pub name: String,
    pub method: Method,
    pub bits_w: u32,
    /// Activation bit width the bundle is meant to run at; `null` for
    /// weight-only quantization.
    pub bits_a: Option<u32>,
    pub rank_policy: RankPolicy,
    pub outlier_count: usize,
    pub ridge: RidgePolicy,
    pub seed: u64,
    pub layers: Vec<QuantizedManifestLayer>,
}

/// Writes every quantized layer as five tensor files
/// (`<name>.{wq,scales,la,lb,m}.tnsr`) plus `quantized_manifest.json`
/// echoing the configuration. Returns the manifest path. Output is
/// byte-deterministic for identical inputs.
pub fn write_quantized_bundle(
    dir: &Path,
    bundle_name: &str,
    layers: &[(String, QuantizedLayer)],
    cfg: &PipelineConfig,
    bits_a: Option<u32>,
) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Json {
        path: dir.to_path_buf(),
        source: JsonFileError::Io(e),
    })?;
    let mut entries = Vec::with_capacity(layers.len());
    for (name, layer) in layers {
        validate_layer_name(name)?;
        let files = [
            format!("{name}.wq.tnsr"),
            format!("{name}.scales.tnsr"),
            format!("{name}.la.tnsr"),
            format!("{name}.lb.tnsr"),
            format!("{name}.m.tnsr"),
        ];
        write_tensor_at(&dir.join(&files[0]), &layer.wq.q_matrix())?;
        write_tensor_at(&dir.join(&files[1]), &layer.wq.scales().as_column())?;
        let (la, lb, tail) = match layer.adapters() {
            Some(a) => (a.la().clone(), a.lb().clone(), a.sigma_tail().to_vec()),
            None => (
                Matrix::zeros(layer.out_dim, 0),
                Matrix::zeros(0, layer.in_dim),
                Vec::new(),
            ),
        };
        write_tensor_at(&dir.join(&files[2]), &la)?;
        write_tensor_at(&dir.join(&files[3]), &lb)?;
        write_tensor_at(&dir.join(&files[4]), &layer.plan.scales().as_column())?;
        let [wq, scales, la_file, lb_file, m] = files;
        entries.push(QuantizedManifestLayer {
            name: name.clone(),
            out_dim: layer.out_dim as u64,
            in_dim: layer.in_dim as u64,
            rank: layer.rank() as u64,
            outlier_idx: layer.plan.outlier_idx().to_vec(),
            sigma_tail: tail,
            wq,
            scales,
            la: la_file,
            lb: lb_file,
            m,
        });
    }
    let manifest = QuantizedManifest {
        name: bundle_name.to_string(),
        method: cfg.method,
        bits_w: cfg.weight_spec.bits(),
        bits_a,
        rank_policy: cfg.rank_policy,
        outlier_count: cfg.outlier_count,
        ridge: cfg.ridge,
        seed: cfg.seed,
        layers: entries,
    };
    let manifest_path = dir.join("quantized_manifest.json");
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// Reads a quantized bundle back into memory. Every tensor is validated
/// against the manifest's dimensions and the reassembled layers are
/// bit-faithful to the originals.
pub fn load_quantized_bundle(
    manifest_path: &Path,
) -> Result<(QuantizedManifest, Vec<(String, QuantizedLayer)>), PipelineError> {
    let manifest: QuantizedManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let weight_spec = QuantSpec::new(manifest.bits_w, QuantAxis::PerRow)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        validate_layer_name(&entry.name)?;
        let dim_err = |field, expected, actual| PipelineError::ManifestDim {
            layer: entry.name.clone(),
            field,
            expected,
            actual,
        };
        let q = read_tensor_at(&base.join(&entry.wq))?;
        if q.rows() as u64 != entry.out_dim {
            return Err(dim_err("out", entry.out_dim, q.rows() as u64));
        }
        if q.cols() as u64 != entry.in_dim {
            return Err(dim_err("in", entry.in_dim, q.cols() as u64));
        }
        let scales = Vector::from_column(&read_tensor_at(&base.join(&entry.scales))?)?;
        let wq = QuantizedTensor::from_parts(&q, scales, weight_spec)?;

        let m = Vector::from_column(&read_tensor_at(&base.join(&entry.m))?)?;
        let plan = SmoothingPlan::from_parts(m, entry.outlier_idx.clone())?;

        let la = read_tensor_at(&base.join(&entry.la))?;
        let lb = read_tensor_at(&base.join(&entry.lb))?;
        if la.cols() as u64 != entry.rank {
            return Err(dim_err("rank", entry.rank, la.cols() as u64));
        }
        let adapters = if manifest.method == Method::Rtn {
            None
        } else {
            Some(Adapters::from_parts(la, lb, entry.sigma_tail.clone())?)
        };
        layers.push((
            entry.name.clone(),
            QuantizedLayer::from_parts(wq, plan, adapters, manifest.method)?,
        ));
    }
    Ok((manifest, layers))
}
