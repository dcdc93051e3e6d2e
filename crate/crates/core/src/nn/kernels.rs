//! Dense kernels shared by the differentiable ops.

/// Matrix layout of a gemm operand.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows × cols` matrix stored contiguously.
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn rows_t(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn strided(data: &'a [f32], row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            row_stride,
            col_stride,
        }
    }
}

/// `c = alpha * a·b + beta * c` where `a` is `m × k`, `b` is `k × n` and `c`
/// is row-major with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for row in 0..m {
            for v in &mut c[row * ldc..row * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.data.len() > (m - 1) * a.row_stride + (k - 1) * a.col_stride);
    assert!(b.data.len() > (k - 1) * b.row_stride + (n - 1) * b.col_stride);
    assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Unfolds one `[channels, length]` signal into `[channels * kernel, out_len]` columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f32],
    channels: usize,
    length: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    cols: &mut [f32],
) {
    for c in 0..channels {
        let src = &x[c * length..(c + 1) * length];
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            let (lo, hi) = valid_range(length, k, stride, pad, out_len);
            row[..lo].fill(0.0);
            row[hi..].fill(0.0);
            if lo == hi {
                continue;
            }
            let first = lo * stride + k - pad;
            if stride == 1 {
                row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
            } else {
                for (dst, &s) in row[lo..hi]
                    .iter_mut()
                    .zip(src[first..].iter().step_by(stride))
                {
                    *dst = s;
                }
            }
        }
    }
}

/// Output positions `l` in `lo..hi` whose tap `l·stride + k − pad` lands inside the signal.
fn valid_range(
    length: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out_len);
    let hi = if length + pad > k {
        (length + pad - k).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the signal.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f32],
    channels: usize,
    length: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    dx: &mut [f32],
) {
    for c in 0..channels {
        let dst = &mut dx[c * length..(c + 1) * length];
        for k in 0..kernel {
            let row = &cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            let (lo, hi) = valid_range(length, k, stride, pad, out_len);
            if lo == hi {
                continue;
            }
            let first = lo * stride + k - pad;
            if stride == 1 {
                for (d, &g) in dst[first..first + hi - lo].iter_mut().zip(&row[lo..hi]) {
                    *d += g;
                }
            } else {
                for (d, &g) in dst[first..].iter_mut().step_by(stride).zip(&row[lo..hi]) {
                    *d += g;
                }
            }
        }
    }
}

pub(crate) fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(
        x: &[f32],
        c: usize,
        len: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out: usize,
    ) -> Vec<f32> {
        let mut cols = vec![0.0; c * kernel * out];
        for ch in 0..c {
            for k in 0..kernel {
                for l in 0..out {
                    let pos = (l * stride + k) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        cols[(ch * kernel + k) * out + l] = x[ch * len + pos as usize];
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn unfold_matches_direct_indexing_and_adjoint() {
        for (len, kernel, stride, pad) in [
            (9usize, 3usize, 1usize, 1usize),
            (8, 5, 2, 2),
            (4, 7, 1, 3),
            (3, 3, 3, 0),
            (2, 5, 2, 4),
        ] {
            let c = 2;
            let out = (len + 2 * pad).saturating_sub(kernel) / stride + 1;
            let x: Vec<f32> = (0..c * len).map(|i| i as f32 + 1.0).collect();
            let mut cols = vec![f32::NAN; c * kernel * out];
            im2col(&x, c, len, kernel, stride, pad, out, &mut cols);
            assert_eq!(cols, naive_im2col(&x, c, len, kernel, stride, pad, out));
            // <im2col(x), g> == <x, col2im(g)>
            let g: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.37).sin()).collect();
            let mut dx = vec![0.0; x.len()];
            col2im(&g, c, len, kernel, stride, pad, out, &mut dx);
            let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| (a * b) as f64).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
            assert!(
                (lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }
}
