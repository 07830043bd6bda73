//! Post-training weight quantization with low-rank error compensation.
//!
//! The core idea: after rounding a weight matrix `W` to a low-bit grid, the
//! rounding error `E = W - dequant(quant(W))` is not noise to the layer's
//! output — it is a matrix whose damage is concentrated along the directions
//! the calibration activations actually exercise. Whitening `E` against the
//! activation covariance and truncating its SVD yields a pair of small
//! adapter matrices that cancel the most damaging part of the error at a
//! cost of two skinny matrix multiplies per layer.
//!
//! The crate provides:
//!
//! - [`tensor`]: dense row-major matrices, vectors, and a little-endian
//!   binary tensor file format with bit-exact round trips.
//! - [`linalg`]: Cholesky factorization, triangular solves, a one-sided
//!   Jacobi SVD, and an entropy-based effective rank.
//! - [`quant`]: symmetric round-to-nearest integer quantization with
//!   per-row or per-column scales.
//! - [`smooth`]: outlier channel selection and activation-to-weight
//!   magnitude migration.
//! - [`reconstruct`]: activation-aware whitening and low-rank adapter
//!   construction from the quantization error.
//! - [`pipeline`]: per-layer quantization methods, model bundles on disk,
//!   and a synthetic toy-model generator for end-to-end checks.
//! - [`diagnostics`]: error measurements, spectra, rank/overhead tables,
//!   and deterministic JSON/CSV reports.

#![forbid(unsafe_code)]

pub mod diagnostics;
pub mod linalg;
pub mod pipeline;
pub mod quant;
pub mod reconstruct;
pub mod smooth;
pub mod tensor;

pub use diagnostics::{
    diagnose_model, overhead_estimate, rank_table, remaining_error, smoothing_report,
    spectrum_report, write_report, DiagnosticsReport, ReportFormat,
};
pub use linalg::{effective_rank, SvdResult};
pub use pipeline::{
    forward_quantized, forward_reference, gen_toy_model, quantize_layer, quantize_model, Method,
    PipelineConfig, QuantizeOutcome, QuantizedLayer, RidgePolicy, ToyModel, ToyModelSpec,
};
pub use quant::{fake_quant, quantize, QuantAxis, QuantSpec, QuantizedTensor};
pub use reconstruct::{Adapters, RankPolicy, Whitener};
pub use smooth::SmoothingPlan;
pub use tensor::{read_tensor, write_tensor, Matrix, Vector};
