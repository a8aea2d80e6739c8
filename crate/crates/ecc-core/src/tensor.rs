//! Dense 4-D weight tensors with channel-slice views and B-weighted norms.
//!
//! The index order is `(d, c, rh, rw)`: output channels, input channels,
//! kernel height, kernel width. A fully connected layer is the special case
//! `rh = rw = 1`. Data is stored flat in row-major order, which is also the
//! checkpoint wire layout.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("input-channel index {index} out of range (c = {c})")]
    IndexOutOfRange { index: usize, c: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize, usize),
        got: (usize, usize, usize, usize),
    },
    #[error("data length {len} does not match dims {dims:?}")]
    BadDataLength {
        len: usize,
        dims: (usize, usize, usize, usize),
    },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
}

/// 4-D weight tensor of shape `(d, c, rh, rw)` over 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    d: usize,
    c: usize,
    rh: usize,
    rw: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(d: usize, c: usize, rh: usize, rw: usize) -> Self {
        Tensor4 {
            d,
            c,
            rh,
            rw,
            data: vec![0.0; d * c * rh * rw],
        }
    }

    pub fn from_vec(
        d: usize,
        c: usize,
        rh: usize,
        rw: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if data.len() != d * c * rh * rw {
            return Err(TensorError::BadDataLength {
                len: data.len(),
                dims: (d, c, rh, rw),
            });
        }
        Ok(Tensor4 { d, c, rh, rw, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.d, self.c, self.rh, self.rw)
    }

    pub fn out_channels(&self) -> usize {
        self.d
    }

    pub fn in_channels(&self) -> usize {
        self.c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.rh, self.rw)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn flat_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c + i) * self.rh + ky) * self.rw + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.flat_index(o, i, ky, kx)]
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f64) {
        let idx = self.flat_index(o, i, ky, kx);
        self.data[idx] = v;
    }

    /// Flat indices of input-channel slice `i`, i.e. all elements `[·, i, ·, ·]`.
    pub fn channel_slice_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (c, rh, rw) = (self.c, self.rh, self.rw);
        let k = rh * rw;
        (0..self.d).flat_map(move |o| {
            let base = (o * c + i) * k;
            base..base + k
        })
    }

    /// Euclidean norm of input-channel slice `i`.
    pub fn channel_slice_norm(&self, i: usize) -> Result<f64, TensorError> {
        self.check_channel(i)?;
        let mut acc = 0.0;
        for idx in self.channel_slice_indices(i) {
            acc += self.data[idx] * self.data[idx];
        }
        Ok(acc.sqrt())
    }

    fn check_channel(&self, i: usize) -> Result<(), TensorError> {
        if i >= self.c {
            return Err(TensorError::IndexOutOfRange { index: i, c: self.c });
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { index }),
            None => Ok(()),
        }
    }
}

/// Positive diagonal preconditioner with the same shape as the tensor it scales.
///
/// Entries are bounded below by a configured floor, so B-weighted norms are
/// genuine norms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagPreconditioner {
    dims: (usize, usize, usize, usize),
    data: Vec<f64>,
}

impl DiagPreconditioner {
    pub const DEFAULT_FLOOR: f64 = 1e-12;

    /// Identity preconditioner (all ones).
    pub fn identity(d: usize, c: usize, rh: usize, rw: usize) -> Self {
        DiagPreconditioner {
            dims: (d, c, rh, rw),
            data: vec![1.0; d * c * rh * rw],
        }
    }

    /// Builds from raw entries, clamping each at `floor` to keep the diagonal
    /// strictly positive.
    pub fn from_entries(
        dims: (usize, usize, usize, usize),
        entries: Vec<f64>,
        floor: f64,
    ) -> Result<Self, TensorError> {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        if entries.len() != n {
            return Err(TensorError::BadDataLength {
                len: entries.len(),
                dims,
            });
        }
        let data = entries.into_iter().map(|v| v.max(floor)).collect();
        Ok(DiagPreconditioner { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn check_match(&self, w: &Tensor4) -> Result<(), TensorError> {
        if self.dims != w.dims() {
            return Err(TensorError::ShapeMismatch {
                expected: w.dims(),
                got: self.dims,
            });
        }
        Ok(())
    }
}

/// B-weighted squared norm of input-channel slice `i`: sum of `B_e * w_e^2`
/// over the slice `w[·, i, ·, ·]`.
pub fn channel_slice_norm_sq(
    w: &Tensor4,
    i: usize,
    b: &DiagPreconditioner,
) -> Result<f64, TensorError> {
    if i >= w.in_channels() {
        return Err(TensorError::IndexOutOfRange {
            index: i,
            c: w.in_channels(),
        });
    }
    b.check_match(w)?;
    let mut acc = 0.0;
    for idx in w.channel_slice_indices(i) {
        acc += b.data[idx] * w.data[idx] * w.data[idx];
    }
    Ok(acc)
}

/// Layer sparsity: the number of input channels whose slice Euclidean norm
/// exceeds `zero_tol`.
pub fn layer_sparsity(w: &Tensor4, zero_tol: f64) -> usize {
    (0..w.in_channels())
        .filter(|&i| w.channel_slice_norm(i).expect("index in range") > zero_tol)
        .count()
}

/// Returns a copy of `w` with input-channel slice `i` set to exactly zero.
pub fn zero_channel(w: &Tensor4, i: usize) -> Result<Tensor4, TensorError> {
    if i >= w.in_channels() {
        return Err(TensorError::IndexOutOfRange {
            index: i,
            c: w.in_channels(),
        });
    }
    let mut out = w.clone();
    let indices: Vec<usize> = out.channel_slice_indices(i).collect();
    for idx in indices {
        out.data[idx] = 0.0;
    }
    Ok(out)
}
