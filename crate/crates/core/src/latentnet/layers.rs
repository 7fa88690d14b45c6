//! Batched layer kernels. Activations are row-major `[batch, channels,
//! height, width]`; dense weights are `[out, in]`.

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};

use super::Scalar;

#[inline]
fn rm<T: Scalar>(s: &[T], r: usize, c: usize) -> MatRef<'_, T> {
    MatRef::from_row_major_slice(s, r, c)
}

#[inline]
fn rm_mut<T: Scalar>(s: &mut [T], r: usize, c: usize) -> MatMut<'_, T> {
    MatMut::from_row_major_slice_mut(s, r, c)
}

/// `y[b, o] = Σ_i x[b, i] w[o, i] + bias[o]`.
pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], batch: usize, n_in: usize, n_out: usize, y: &mut [T]) {
    for row in y.chunks_exact_mut(n_out) {
        row.copy_from_slice(bias);
    }
    matmul(rm_mut(y, batch, n_out), Accum::Add, rm(x, batch, n_in), rm(w, n_out, n_in).transpose(), T::one(), Par::Seq);
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// `dx` is given.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    matmul(rm_mut(dw, n_out, n_in), Accum::Add, rm(dy, batch, n_out).transpose(), rm(x, batch, n_in), T::one(), Par::Seq);
    for row in dy.chunks_exact(n_out) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        matmul(rm_mut(dx, batch, n_in), Accum::Replace, rm(dy, batch, n_out), rm(w, n_out, n_in), T::one(), Par::Seq);
    }
}

/// Geometry of a 2D convolution with square kernel, equal stride and
/// padding on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.h_out() * self.w_out()
    }
}

/// Unfolds `[batch, c_in, h_in, w_in]` into `[patch, batch · positions]`.
pub fn im2col<T: Scalar>(x: &[T], s: &ConvShape, batch: usize, cols: &mut [T]) {
    let (ho, wo) = (s.h_out(), s.w_out());
    let npos = ho * wo;
    let ncol = batch * npos;
    let k = s.kernel;
    for c in 0..s.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut cols[r * ncol..(r + 1) * ncol];
                for b in 0..batch {
                    let img = &x[(b * s.c_in + c) * s.h_in * s.w_in..][..s.h_in * s.w_in];
                    for oy in 0..ho {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        let out = &mut dst[b * npos + oy * wo..][..wo];
                        if iy < 0 || iy >= s.h_in as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &img[iy as usize * s.w_in..][..s.w_in];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            *o = if ix < 0 || ix >= s.w_in as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image
/// batch (which is overwritten).
pub fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, batch: usize, x: &mut [T]) {
    x.fill(T::zero());
    let (ho, wo) = (s.h_out(), s.w_out());
    let npos = ho * wo;
    let ncol = batch * npos;
    let k = s.kernel;
    for c in 0..s.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let src = &cols[r * ncol..(r + 1) * ncol];
                for b in 0..batch {
                    let img = &mut x[(b * s.c_in + c) * s.h_in * s.w_in..][..s.h_in * s.w_in];
                    for oy in 0..ho {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h_in as isize {
                            continue;
                        }
                        let row = &mut img[iy as usize * s.w_in..][..s.w_in];
                        let vals = &src[b * npos + oy * wo..][..wo];
                        for (ox, &v) in vals.iter().enumerate() {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix >= 0 && ix < s.w_in as isize {
                                row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[c_out, batch · positions]` to `[batch, c_out, positions]`, adding bias.
fn unpack_channels<T: Scalar>(m: &[T], bias: &[T], c_out: usize, batch: usize, npos: usize, y: &mut [T]) {
    for o in 0..c_out {
        for b in 0..batch {
            let src = &m[o * batch * npos + b * npos..][..npos];
            let dst = &mut y[(b * c_out + o) * npos..][..npos];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bias[o];
            }
        }
    }
}

fn pack_channels<T: Scalar>(y: &[T], c: usize, batch: usize, npos: usize, m: &mut [T]) {
    for o in 0..c {
        for b in 0..batch {
            m[o * batch * npos + b * npos..][..npos].copy_from_slice(&y[(b * c + o) * npos..][..npos]);
        }
    }
}

/// Convolution, weights `[c_out, c_in, k, k]`. Returns the unfolded input
/// for the backward pass.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], s: &ConvShape, batch: usize, y: &mut [T]) -> Vec<T> {
    let npos = s.positions();
    let ncol = batch * npos;
    let mut cols = vec![T::zero(); s.patch() * ncol];
    im2col(x, s, batch, &mut cols);
    let mut m = vec![T::zero(); s.c_out * ncol];
    matmul(rm_mut(&mut m, s.c_out, ncol), Accum::Replace, rm(w, s.c_out, s.patch()), rm(&cols, s.patch(), ncol), T::one(), Par::Seq);
    unpack_channels(&m, bias, s.c_out, batch, npos, y);
    cols
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    cols: &[T],
    w: &[T],
    dy: &[T],
    s: &ConvShape,
    batch: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let npos = s.positions();
    let ncol = batch * npos;
    let mut dm = vec![T::zero(); s.c_out * ncol];
    pack_channels(dy, s.c_out, batch, npos, &mut dm);
    for (o, g) in db.iter_mut().enumerate() {
        *g += dm[o * ncol..(o + 1) * ncol].iter().fold(T::zero(), |a, &v| a + v);
    }
    matmul(rm_mut(dw, s.c_out, s.patch()), Accum::Add, rm(&dm, s.c_out, ncol), rm(cols, s.patch(), ncol).transpose(), T::one(), Par::Seq);
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); s.patch() * ncol];
        matmul(rm_mut(&mut dcols, s.patch(), ncol), Accum::Replace, rm(w, s.c_out, s.patch()).transpose(), rm(&dm, s.c_out, ncol), T::one(), Par::Seq);
        col2im(&dcols, s, batch, dx);
    }
}

/// Transposed convolution, the adjoint of the convolution described by
/// `s` (which maps the *output* of this layer back to its input). Weights
/// are `[s.c_out, s.c_in, k, k]`, i.e. `[in, out, k, k]` from this layer's
/// point of view. `y` has shape `[batch, s.c_in, s.h_in, s.w_in]`.
pub fn tconv_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], s: &ConvShape, batch: usize, y: &mut [T]) {
    let npos = s.positions();
    let ncol = batch * npos;
    let mut xm = vec![T::zero(); s.c_out * ncol];
    pack_channels(x, s.c_out, batch, npos, &mut xm);
    let mut cols = vec![T::zero(); s.patch() * ncol];
    matmul(rm_mut(&mut cols, s.patch(), ncol), Accum::Replace, rm(w, s.c_out, s.patch()).transpose(), rm(&xm, s.c_out, ncol), T::one(), Par::Seq);
    col2im(&cols, s, batch, y);
    let plane = s.h_in * s.w_in;
    for b in 0..batch {
        for c in 0..s.c_in {
            for v in &mut y[(b * s.c_in + c) * plane..][..plane] {
                *v += bias[c];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn tconv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    s: &ConvShape,
    batch: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let npos = s.positions();
    let ncol = batch * npos;
    let plane = s.h_in * s.w_in;
    for b in 0..batch {
        for c in 0..s.c_in {
            db[c] += dy[(b * s.c_in + c) * plane..][..plane].iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    let mut dcols = vec![T::zero(); s.patch() * ncol];
    im2col(dy, s, batch, &mut dcols);
    let mut xm = vec![T::zero(); s.c_out * ncol];
    pack_channels(x, s.c_out, batch, npos, &mut xm);
    matmul(rm_mut(dw, s.c_out, s.patch()), Accum::Add, rm(&xm, s.c_out, ncol), rm(&dcols, s.patch(), ncol).transpose(), T::one(), Par::Seq);
    if let Some(dx) = dx {
        let mut dm = vec![T::zero(); s.c_out * ncol];
        matmul(rm_mut(&mut dm, s.c_out, ncol), Accum::Replace, rm(w, s.c_out, s.patch()), rm(&dcols, s.patch(), ncol), T::one(), Par::Seq);
        unpack_channels(&dm, &vec![T::zero(); s.c_out], s.c_out, batch, npos, dx);
    }
}

/// Hidden-layer activation `x · σ(x)`.
#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
