//! Symmetric integer quantization with per-row or per-column scales.
//!
//! Each group (a row for weights, a column for activation tokens) gets one
//! scale derived from its absolute maximum; values are rounded to the
//! nearest integer step with ties to even and clamped to the signed range.
//! Scales are snapped to a floating-point fixed point (see [`quantize`]) so
//! that quantizing an already-dequantized tensor reproduces it bit for bit.

use crate::tensor::{Matrix, TensorError, Vector};
use std::fmt;

#[derive(Debug)]
pub enum QuantError {
    /// Bit width outside the supported 2..=16 range.
    InvalidBits { bits: u32 },
    /// A stored integer grid value that is not an integer.
    NotIntegral { index: usize, value: f64 },
    /// A stored integer grid value outside `[-qmax, qmax]`.
    OutOfRange { index: usize, value: f64, qmax: i32 },
    /// Scale vector length does not match the group count for the axis.
    ScaleCount { expected: usize, actual: usize },
    /// Scales must be non-negative.
    NegativeScale { index: usize, value: f64 },
    Tensor(TensorError),
}

impl fmt::Display for QuantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantError::InvalidBits { bits } => {
                write!(f, "bit width must be between 2 and 16, got {bits}")
            }
            QuantError::NotIntegral { index, value } => {
                write!(f, "grid value at flat index {index} is not an integer: {value}")
            }
            QuantError::OutOfRange { index, value, qmax } => {
                write!(f, "grid value at flat index {index} is {value}, outside [-{qmax}, {qmax}]")
            }
            QuantError::ScaleCount { expected, actual } => {
                write!(f, "expected {expected} scales for this axis, got {actual}")
            }
            QuantError::NegativeScale { index, value } => {
                write!(f, "scale at index {index} is negative: {value}")
            }
            QuantError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

// Display already embeds the full wrapped message; see TensorError.
impl std::error::Error for QuantError {}

impl From<TensorError> for QuantError {
    fn from(e: TensorError) -> Self {
        QuantError::Tensor(e)
    }
}

/// Which direction shares a quantization scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantAxis {
    /// One scale per row; the natural choice for weight matrices.
    PerRow,
    /// One scale per column; the natural choice for token-major activations.
    PerCol,
}

/// Bit width plus scaling axis for symmetric integer quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    bits: u32,
    axis: QuantAxis,
}

impl QuantSpec {
    /// Validates the bit width (2..=16 inclusive).
    pub fn new(bits: u32, axis: QuantAxis) -> Result<QuantSpec, QuantError> {
        if !(2..=16).contains(&bits) {
            return Err(QuantError::InvalidBits { bits });
        }
        Ok(QuantSpec { bits, axis })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn axis(&self) -> QuantAxis {
        self.axis
    }

    /// Largest representable magnitude on the integer grid,
    /// `2^(bits-1) - 1`. The range is symmetric: the most negative code is
    /// `-qmax`, not `-qmax - 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }
}

/// Integer grid values plus per-group scales; `dequant` reconstructs the
/// lossy tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    q: Vec<i32>,
    scales: Vector,
    spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    /// One scale per row (`PerRow`) or per column (`PerCol`).
    pub fn scales(&self) -> &Vector {
        &self.scales
    }

    /// Raw grid values, row-major.
    pub fn q(&self) -> &[i32] {
        &self.q
    }

    /// Grid values widened to `f64`, for storage in tensor files. Every
    /// value is a small integer, so the widening is exact.
    pub fn q_matrix(&self) -> Matrix {
        let data = self.q.iter().map(|&v| v as f64).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("integers are finite")
    }

    /// Multiplies each grid value by its group scale.
    pub fn dequant(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.q.len());
        match self.spec.axis {
            QuantAxis::PerRow => {
                for i in 0..self.rows {
                    let s = self.scales.get(i);
                    for j in 0..self.cols {
                        data.push(self.q[i * self.cols + j] as f64 * s);
                    }
                }
            }
            QuantAxis::PerCol => {
                for i in 0..self.rows {
                    for j in 0..self.cols {
                        data.push(self.q[i * self.cols + j] as f64 * self.scales.get(j));
                    }
                }
            }
        }
        Matrix::from_vec(self.rows, self.cols, data).expect("products of finite values")
    }

    /// Rebuilds a quantized tensor from stored grid values and scales,
    /// validating integrality, range, scale count, and scale sign.
    pub fn from_parts(
        q: &Matrix,
        scales: Vector,
        spec: QuantSpec,
    ) -> Result<QuantizedTensor, QuantError> {
        let qmax = spec.qmax();
        let expected = match spec.axis {
            QuantAxis::PerRow => q.rows(),
            QuantAxis::PerCol => q.cols(),
        };
        if scales.len() != expected {
            return Err(QuantError::ScaleCount { expected, actual: scales.len() });
        }
        if let Some(index) = scales.data().iter().position(|s| *s < 0.0) {
            return Err(QuantError::NegativeScale { index, value: scales.get(index) });
        }
        let mut grid = Vec::with_capacity(q.data().len());
        for (index, &value) in q.data().iter().enumerate() {
            if value.fract() != 0.0 {
                return Err(QuantError::NotIntegral { index, value });
            }
            if value.abs() > qmax as f64 {
                return Err(QuantError::OutOfRange { index, value, qmax });
            }
            grid.push(value as i32);
        }
        Ok(QuantizedTensor { rows: q.rows(), cols: q.cols(), q: grid, scales, spec })
    }
}

/// Snaps `absmax / qmax` to a fixed point of `s -> fl(fl(s * qmax) / qmax)`.
///
/// Quantizing a dequantized tensor recomputes its scale as
/// `fl(fl(scale * qmax) / qmax)`; without snapping, that round trip can
/// drift by one ulp (for example with absmax 123456.789 at 3 bits), which
/// would change every grid value on the second pass. The map is monotone,
/// so iterating it cannot cycle; in practice one application settles it.
fn snap_scale(absmax: f64, qmax: f64) -> f64 {
    let mut s = absmax / qmax;
    for _ in 0..8 {
        let next = (s * qmax) / qmax;
        if next == s {
            break;
        }
        s = next;
    }
    s
}

fn quantize_group(values: &mut dyn Iterator<Item = f64>, qmax: i32) -> (f64, Vec<i32>) {
    let collected: Vec<f64> = values.collect();
    let absmax = collected.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if absmax == 0.0 {
        return (0.0, vec![0; collected.len()]);
    }
    let scale = snap_scale(absmax, qmax as f64);
    let q = collected
        .iter()
        .map(|v| {
            let code = (v / scale).round_ties_even();
            code.clamp(-(qmax as f64), qmax as f64) as i32
        })
        .collect();
    (scale, q)
}

/// Symmetric round-to-nearest quantization.
///
/// Per group: the scale is the group's absolute maximum divided by `qmax`,
/// snapped so repeated quantize/dequantize cycles are bitwise stable; each
/// value is divided by the scale, rounded with ties to even, and clamped to
/// `[-qmax, qmax]`. An all-zero group gets scale 0 and all-zero codes.
pub fn quantize(w: &Matrix, spec: &QuantSpec) -> QuantizedTensor {
    let qmax = spec.qmax();
    let rows = w.rows();
    let cols = w.cols();
    match spec.axis {
        QuantAxis::PerRow => {
            let mut scales = Vec::with_capacity(rows);
            let mut q = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                let (scale, codes) = quantize_group(&mut w.row(i).iter().copied(), qmax);
                scales.push(scale);
                q.extend_from_slice(&codes);
            }
            QuantizedTensor {
                rows,
                cols,
                q,
                scales: Vector::from_vec(scales).expect("scales are finite"),
                spec: *spec,
            }
        }
        QuantAxis::PerCol => {
            let mut scales = Vec::with_capacity(cols);
            let mut q = vec![0i32; rows * cols];
            for j in 0..cols {
                let (scale, codes) =
                    quantize_group(&mut (0..rows).map(|i| w.get(i, j)), qmax);
                scales.push(scale);
                for (i, code) in codes.into_iter().enumerate() {
                    q[i * cols + j] = code;
                }
            }
            QuantizedTensor {
                rows,
                cols,
                q,
                scales: Vector::from_vec(scales).expect("scales are finite"),
                spec: *spec,
            }
        }
    }
}

/// Quantize-then-dequantize in one step: the tensor the quantized model
/// actually computes with.
pub fn fake_quant(w: &Matrix, spec: &QuantSpec) -> Matrix {
    quantize(w, spec).dequant()
}
