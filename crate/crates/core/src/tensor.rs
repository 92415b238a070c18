//! Dense real tensors and bit-packed binary tensors.
//!
//! `Tensor` is the training-time currency: a contiguous, row-major f32 array
//! of rank 1..=4 (interpreted N,C,H,W for feature maps, rows x cols for
//! matrices, W fastest). `BitTensor` is the deployment-time currency: each
//! logical row of {0,1} bits is packed LSB-first into 64-bit words.
//!
//! Conversion between the two views is lossless for +-1 data: bit j of a row
//! is 1 iff the corresponding element is +1.0. Padding bits beyond the
//! logical length are role-dependent (see [`PadRole`]) so that xnor over the
//! padding region never contributes to a bitcount.

use crate::error::{Error, Result};

/// Four-extent shape for feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        debug_assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1);
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

/// Dense rank-1..4 f32 tensor, row-major with the last extent fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Tensor::new(shape, vec![0.0; count]).expect("zeros: invalid shape")
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let count = shape.iter().product();
        Tensor::new(shape, vec![value; count]).expect("filled: invalid shape")
    }

    pub fn from_nchw(shape: Shape, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape.dims().to_vec(), data)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Shape as N,C,H,W. Errors unless rank is exactly 4.
    pub fn nchw(&self) -> Result<Shape> {
        if self.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(Shape::new(self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Rows/cols view. Errors unless rank is exactly 2.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    fn check_same_shape(&self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape(rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape(rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape(rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let data = self.data.iter().map(|a| a * factor).collect();
        Tensor::new(self.shape.clone(), data).unwrap()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor::new(self.shape.clone(), data).unwrap()
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    pub fn abs_mean(&self) -> f32 {
        self.data.iter().map(|a| a.abs()).sum::<f32>() / self.data.len() as f32
    }

    /// Mean over one axis of the current shape; the axis extent collapses to 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, |x| x)
    }

    /// Mean of absolute values over one axis.
    pub fn abs_mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, |x| x.abs())
    }

    fn reduce_axis(&self, axis: usize, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += f(self.data[base + i]);
                }
            }
        }
        let inv = 1.0 / extent as f32;
        for v in &mut out {
            *v *= inv;
        }
        Tensor::new(out_shape, out)
    }

    /// Contiguous slice of `count` rows starting at `start`, for a rank >= 2
    /// tensor whose leading axis indexes rows/samples.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let row: usize = self.shape[1..].iter().product();
        if start + count > self.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "row slice {start}..{} out of range 0..{}",
                start + count,
                self.shape[0]
            )));
        }
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor::new(shape, self.data[start * row..(start + count) * row].to_vec()).unwrap())
    }
}

/// How padding bits beyond the logical length of a packed row are filled.
///
/// Input-role rows pad with 0 and weight-role rows pad with 1, so
/// xnor(0, 1) = 0 over the entire padding region and a bitcount over full
/// words needs no masking or correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadRole {
    Input,
    Weight,
}

pub const WORD_BITS: usize = 64;

/// Bit-packed {0,1} matrix: `rows` logical rows of `cols` bits each, packed
/// LSB-first into 64-bit words (`bit i` of a row lives in word `i / 64` at
/// position `i % 64`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    role: PadRole,
    storage: Vec<u64>,
}

impl BitTensor {
    /// Pack a rows x cols tensor of exact +-1.0 values. Bit j of row i is 1
    /// iff element (i, j) == +1.0; padding is set per `role`.
    pub fn pack(signs: &Tensor, role: PadRole) -> Result<BitTensor> {
        let (rows, cols) = signs.matrix_dims()?;
        let words_per_row = cols.div_ceil(WORD_BITS);
        let pad_word = match role {
            PadRole::Input => 0u64,
            PadRole::Weight => u64::MAX,
        };
        let mut storage = vec![0u64; rows * words_per_row];
        let data = signs.data();
        for r in 0..rows {
            let row_base = r * words_per_row;
            // Start from the padding pattern, then overwrite the logical bits.
            for w in 0..words_per_row {
                storage[row_base + w] = pad_word;
            }
            for j in 0..cols {
                let v = data[r * cols + j];
                let bit = if v == 1.0 {
                    1u64
                } else if v == -1.0 {
                    0u64
                } else {
                    return Err(Error::NonBinaryValue(v));
                };
                let word = row_base + j / WORD_BITS;
                let pos = j % WORD_BITS;
                storage[word] = (storage[word] & !(1u64 << pos)) | (bit << pos);
            }
        }
        Ok(BitTensor {
            rows,
            cols,
            words_per_row,
            role,
            storage,
        })
    }

    /// Build directly from packed words (deserialization path). The caller
    /// is responsible for the padding bits matching `role`.
    pub fn from_words(
        rows: usize,
        cols: usize,
        role: PadRole,
        storage: Vec<u64>,
    ) -> Result<BitTensor> {
        let words_per_row = cols.div_ceil(WORD_BITS);
        if storage.len() != rows * words_per_row {
            return Err(Error::ShapeMismatch(format!(
                "packed storage has {} words, expected {}",
                storage.len(),
                rows * words_per_row
            )));
        }
        Ok(BitTensor {
            rows,
            cols,
            words_per_row,
            role,
            storage,
        })
    }

    /// Expand back to a +-1.0 tensor of shape rows x cols.
    pub fn unpack(&self) -> Tensor {
        let mut data = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            for j in 0..self.cols {
                data[r * self.cols + j] = if self.get(r, j) { 1.0 } else { -1.0 };
            }
        }
        Tensor::new(vec![self.rows, self.cols], data).unwrap()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        let word = row * self.words_per_row + col / WORD_BITS;
        (self.storage[word] >> (col % WORD_BITS)) & 1 == 1
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn role(&self) -> PadRole {
        self.role
    }

    pub fn row_words(&self, row: usize) -> &[u64] {
        &self.storage[row * self.words_per_row..(row + 1) * self.words_per_row]
    }

    pub fn words(&self) -> &[u64] {
        &self.storage
    }
}
