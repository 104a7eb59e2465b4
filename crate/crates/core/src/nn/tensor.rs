//! Dense activation tensors and the matrix-multiply kernel.
//!
//! Activations are stored channel-major as `[channels][batch][height][width]`.
//! With that layout a convolution is one GEMM over the whole batch
//! (`weights [C_out x C_in·k·k]` times `im2col [C_in·k·k x B·H·W]`), batch
//! norm statistics are reductions over contiguous rows, and a linear layer
//! on `1x1` activations is a plain `W · X`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample shape `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Dims,
    pub batch: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Dims, batch: usize) -> Self {
        Self {
            dims,
            batch,
            data: vec![0.0; dims.numel() * batch],
        }
    }

    /// Gathers sample-major images (`[c][h][w]` each) into a channel-major batch.
    pub fn from_samples<S: AsRef<[f64]>>(dims: Dims, samples: &[S]) -> Result<Self> {
        let batch = samples.len();
        let hw = dims.spatial();
        let mut t = Self::zeros(dims, batch);
        for (b, s) in samples.iter().enumerate() {
            let s = s.as_ref();
            if s.len() != dims.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "sample {b} has {} values, expected {} ({dims})",
                    s.len(),
                    dims.numel()
                )));
            }
            for c in 0..dims.channels {
                let dst = (c * batch + b) * hw;
                t.data[dst..dst + hw].copy_from_slice(&s[c * hw..(c + 1) * hw]);
            }
        }
        Ok(t)
    }

    /// Copies sample `b` back out in `[c][h][w]` order.
    pub fn sample(&self, b: usize) -> Vec<f64> {
        let hw = self.dims.spatial();
        let mut out = Vec::with_capacity(self.dims.numel());
        for c in 0..self.dims.channels {
            let src = (c * self.batch + b) * hw;
            out.extend_from_slice(&self.data[src..src + hw]);
        }
        out
    }

    /// Row `c` of the channel-major layout: every batch/spatial value of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let len = self.batch * self.dims.spatial();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let len = self.batch * self.dims.spatial();
        &mut self.data[c * len..(c + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = op(A) · op(B) + beta · C` for row-major matrices, where `op(A)` is
/// `m x k` and `op(B)` is `k x n`. A transposed operand is stored in its
/// untransposed shape (`k x m` for A, `n x k` for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: A too short");
    assert!(b.len() >= k * n, "gemm: B too short");
    assert!(c.len() >= m * n, "gemm: C too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every index touched by the
    // requested strides lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
