//! Dense row-major matrices, vectors, and the `.tnsr` on-disk format.
//!
//! Everything is carried as `f64`. Matrices are immutable once constructed;
//! every operation returns a fresh value, which keeps per-layer work safe to
//! run on worker threads without locks. All public constructors and
//! operations reject non-finite entries, so a `Matrix` in hand is always
//! finite.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

/// Leading bytes of every tensor file.
pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";
/// On-disk format revision written after the magic.
pub const TENSOR_FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;

#[derive(Debug)]
pub enum TensorError {
    /// Two operands with incompatible shapes; `left`/`right` are (rows, cols).
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A buffer or vector whose length does not match the expected count.
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A NaN or infinity at flat index `index`.
    NonFinite { op: &'static str, index: usize },
    /// A zero entry where an inverse scale was requested.
    ZeroScale { index: usize },
    /// File does not start with the tensor magic.
    BadMagic { found: [u8; 4] },
    UnsupportedVersion { found: u32 },
    UnsupportedRank { found: u32 },
    /// Header dimensions whose payload size cannot be addressed.
    DimOverflow { rows: u64, cols: u64 },
    /// File ends before the declared payload does.
    Truncated { expected_bytes: u64, actual_bytes: u64 },
    /// File continues past the declared payload.
    TrailingBytes { extra_bytes: u64 },
    Io(io::Error),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            TensorError::LengthMismatch { op, expected, actual } => {
                write!(f, "{op}: expected {expected} values, got {actual}")
            }
            TensorError::NonFinite { op, index } => {
                write!(f, "{op}: non-finite value at flat index {index}")
            }
            TensorError::ZeroScale { index } => {
                write!(f, "cannot invert scale vector: zero entry at index {index}")
            }
            TensorError::BadMagic { found } => {
                write!(f, "not a tensor file: bad magic {found:?}")
            }
            TensorError::UnsupportedVersion { found } => {
                write!(f, "unsupported tensor format version {found}")
            }
            TensorError::UnsupportedRank { found } => {
                write!(f, "unsupported tensor rank {found} (only rank 2 is stored)")
            }
            TensorError::DimOverflow { rows, cols } => {
                write!(f, "tensor dimensions {rows}x{cols} overflow addressable size")
            }
            TensorError::Truncated { expected_bytes, actual_bytes } => write!(
                f,
                "truncated tensor payload: expected {expected_bytes} bytes, file has {actual_bytes}"
            ),
            TensorError::TrailingBytes { extra_bytes } => {
                write!(f, "tensor file has {extra_bytes} bytes past the declared payload")
            }
            TensorError::Io(e) => write!(f, "tensor i/o: {e}"),
        }
    }
}

// Display already embeds the full wrapped message, so the chain is not
// re-exposed through source(); reporters that walk causes would print
// every line twice otherwise.
impl std::error::Error for TensorError {}

impl From<io::Error> for TensorError {
    fn from(e: io::Error) -> Self {
        TensorError::Io(e)
    }
}

/// Dense `rows x cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data; rejects wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, TensorError> {
        let expected = rows
            .checked_mul(cols)
            .ok_or(TensorError::DimOverflow { rows: rows as u64, cols: cols as u64 })?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                op: "Matrix::from_vec",
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Matrix::from_vec", index });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from slices of rows; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Matrix, TensorError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != n_cols {
                return Err(TensorError::LengthMismatch {
                    op: "Matrix::from_rows",
                    expected: n_cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(n_rows, n_cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Matrix { rows: n, cols: n, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        self.data[row * self.cols + col]
    }

    /// Borrows one row as a contiguous slice.
    pub fn row(&self, row: usize) -> &[f64] {
        assert!(row < self.rows, "row index out of bounds");
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    /// `self * rhs`. Requires `self.cols == rhs.rows`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut data = vec![0.0; m * n];
        // i-k-j order: the inner loop walks both the output row and the rhs
        // row contiguously, which vectorizes well.
        for i in 0..m {
            let out_row = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(m, n, data)
    }

    /// Gram matrix `self * self^T`. Each off-diagonal entry is computed once
    /// and mirrored, so the result is symmetric to the bit.
    pub fn gram(&self) -> Matrix {
        let n = self.rows;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let ri = self.row(i);
            for j in i..n {
                let rj = self.row(j);
                let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                data[i * n + j] = dot;
                data[j * n + i] = dot;
            }
        }
        Matrix { rows: n, cols: n, data }
    }

    /// Frobenius norm.
    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Sum of diagonal entries. Panics if the matrix is not square.
    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace requires a square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, TensorError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix, TensorError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        rhs: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch { op, left: self.shape(), right: rhs.shape() });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// Scales column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &Vector) -> Result<Matrix, TensorError> {
        if d.len() != self.cols {
            return Err(TensorError::LengthMismatch {
                op: "scale_cols",
                expected: self.cols,
                actual: d.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            for (v, s) in self.row(i).iter().zip(d.data()) {
                data.push(v * s);
            }
        }
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// Scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &Vector) -> Result<Matrix, TensorError> {
        if d.len() != self.rows {
            return Err(TensorError::LengthMismatch {
                op: "scale_rows",
                expected: self.rows,
                actual: d.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            let s = d.get(i);
            for v in self.row(i) {
                data.push(v * s);
            }
        }
        Matrix::from_vec(self.rows, self.cols, data)
    }
}

/// Dense vector of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn from_vec(data: Vec<f64>) -> Result<Vector, TensorError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Vector::from_vec", index });
        }
        Ok(Vector { data })
    }

    pub fn ones(n: usize) -> Vector {
        Vector { data: vec![1.0; n] }
    }

    pub fn zeros(n: usize) -> Vector {
        Vector { data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    /// Entry-wise reciprocal; errors on any exactly-zero entry.
    pub fn reciprocal(&self) -> Result<Vector, TensorError> {
        if let Some(index) = self.data.iter().position(|v| *v == 0.0) {
            return Err(TensorError::ZeroScale { index });
        }
        Vector::from_vec(self.data.iter().map(|v| 1.0 / v).collect())
    }

    /// The vector as an `n x 1` matrix, for storage in tensor files.
    pub fn as_column(&self) -> Matrix {
        Matrix { rows: self.data.len(), cols: 1, data: self.data.clone() }
    }

    /// Reads a vector back out of an `n x 1` matrix.
    pub fn from_column(m: &Matrix) -> Result<Vector, TensorError> {
        if m.cols() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "Vector::from_column",
                left: m.shape(),
                right: (m.rows(), 1),
            });
        }
        Ok(Vector { data: m.data().to_vec() })
    }
}

/// Writes a matrix to `path` in the tensor file format: magic `TNSR`,
/// format version (u32 LE), rank = 2 (u32 LE), rows and cols (u64 LE), then
/// the row-major payload as IEEE-754 binary64 little-endian. No padding, no
/// checksum; the write is byte-deterministic for equal input.
pub fn write_tensor<P: AsRef<Path>>(path: P, m: &Matrix) -> Result<(), TensorError> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + m.data.len() * 8);
    bytes.extend_from_slice(&TENSOR_MAGIC);
    bytes.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&(m.rows as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a matrix written by [`write_tensor`]. Bad magic, version or rank
/// mismatches, oversized dimensions, short payloads, and trailing bytes are
/// reported as distinct errors; round trips are bit-exact, including
/// subnormals and signed zeros.
pub fn read_tensor<P: AsRef<Path>>(path: P) -> Result<Matrix, TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(TensorError::Truncated {
            expected_bytes: HEADER_LEN as u64,
            actual_bytes: bytes.len() as u64,
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != TENSOR_MAGIC {
        return Err(TensorError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(TensorError::Truncated {
            expected_bytes: HEADER_LEN as u64,
            actual_bytes: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_FORMAT_VERSION {
        return Err(TensorError::UnsupportedVersion { found: version });
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if rank != 2 {
        return Err(TensorError::UnsupportedRank { found: rank });
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(8).is_some())
        .filter(|c| *c <= (isize::MAX as u64) / 8)
        .ok_or(TensorError::DimOverflow { rows, cols })?;
    let payload_bytes = count * 8;
    let expected_bytes = HEADER_LEN as u64 + payload_bytes;
    let actual_bytes = bytes.len() as u64;
    if actual_bytes < expected_bytes {
        return Err(TensorError::Truncated { expected_bytes, actual_bytes });
    }
    if actual_bytes > expected_bytes {
        return Err(TensorError::TrailingBytes { extra_bytes: actual_bytes - expected_bytes });
    }
    let mut data = Vec::with_capacity(count as usize);
    for chunk in bytes[HEADER_LEN..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Matrix::from_vec(rows as usize, cols as usize, data)
}
