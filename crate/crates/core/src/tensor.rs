//! Dense NCHW `f32` tensors and the matrix kernels the layers are built on.

use crate::error::{Error, Result};

/// A dense 4-D tensor in NCHW order. Feature vectors use `h = w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// `[n, features]` matrix stored as `[n, features, 1, 1]`.
    pub fn matrix(n: usize, features: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_vec([n, features, 1, 1], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3]
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

    /// Contiguous slice holding sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.len() / self.n().max(1);
        &self.data[i * per..(i + 1) * per]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?} on channels",
                a.shape, b.shape
            )));
        }
        let (ca, cb, hw) = (a.c(), b.c(), a.spatial());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.n() {
            data.extend_from_slice(&a.data[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&b.data[i * cb * hw..(i + 1) * cb * hw]);
        }
        Ok(Tensor {
            shape: [a.n(), ca + cb, a.h(), a.w()],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Tensor, Tensor) {
        let (n, c, hw) = (self.n(), self.c(), self.spatial());
        let c_rest = c - c_first;
        let mut a = Vec::with_capacity(n * c_first * hw);
        let mut b = Vec::with_capacity(n * c_rest * hw);
        for i in 0..n {
            let s = &self.data[i * c * hw..(i + 1) * c * hw];
            a.extend_from_slice(&s[..c_first * hw]);
            b.extend_from_slice(&s[c_first * hw..]);
        }
        (
            Tensor {
                shape: [n, c_first, self.h(), self.w()],
                data: a,
            },
            Tensor {
                shape: [n, c_rest, self.h(), self.w()],
                data: b,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent implied by
    // (m, k, n) and the strides index only inside those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided 2-D window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `[channels, in_h, in_w]` image into columns. The result for
/// image `img` of a batch lands in columns `img * positions ..` of a
/// `[rows, batch * positions]` matrix with row stride `ld`.
pub fn im2col(g: &ConvGeometry, input: &[f32], cols: &mut [f32], ld: usize, col_offset: usize) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld + col_offset..row * ld + col_offset + g.positions()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im(g: &ConvGeometry, cols: &[f32], ld: usize, col_offset: usize, output: &mut [f32]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut output[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld + col_offset..row * ld + col_offset + g.positions()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
