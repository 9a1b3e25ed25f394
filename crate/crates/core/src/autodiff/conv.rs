//! Lowering of 2-D convolution to matrix multiplication.
//!
//! `im2col` unrolls every receptive field of the input into one row of a
//! matrix so the convolution becomes a single dense GEMM; `col2im` is the
//! adjoint scatter-add used by the backward pass.

use ndarray::{Array2, Array4, ArrayView4};

/// Output spatial size for one dimension.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unrolls `x` of shape `[B, C, H, W]` into `[B*OH*OW, C*KH*KW]`.
///
/// Row `(b*OH + oh)*OW + ow` holds the receptive field that produces output
/// pixel `(oh, ow)` of batch element `b`; out-of-bounds taps read as zero.
pub fn im2col(
    x: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut m = Array2::<f64>::zeros((b * oh * ow, c * kh * kw));

    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (bi * oh + ohi) * ow + owi;
                let mut mrow = m.row_mut(row);
                let mslice = mrow.as_slice_mut().expect("row is contiguous");
                for ci in 0..c {
                    for ki in 0..kh {
                        let iy = (ohi * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (owi * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            mslice[(ci * kh + ki) * kw + kj] =
                                x[(bi, ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Adjoint of [`im2col`]: scatter-adds the unrolled gradient back onto the
/// input layout `[B, C, H, W]`.
pub fn col2im(
    m: &Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut x = Array4::<f64>::zeros((b, c, h, w));

    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (bi * oh + ohi) * ow + owi;
                let mrow = m.row(row);
                let mslice = mrow.as_slice().expect("row is contiguous");
                for ci in 0..c {
                    for ki in 0..kh {
                        let iy = (ohi * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (owi * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[(bi, ci, iy as usize, ix as usize)] +=
                                mslice[(ci * kh + ki) * kw + kj];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn im2col_identity_kernel_geometry() {
        // 1x1 kernel, stride 1, no pad: im2col is just a flatten-permute.
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| (c * 9 + i * 3 + j) as f64);
        let m = im2col(&x.view(), 1, 1, 1, 0);
        assert_eq!(m.dim(), (9, 2));
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 1)], 9.0);
        assert_eq!(m[(8, 0)], 8.0);
    }

    #[test]
    fn col2im_accumulates_overlaps() {
        // 2x2 kernel stride 1 on 3x3: centre pixel appears in 4 windows.
        let x = Array4::<f64>::ones((1, 1, 3, 3));
        let m = im2col(&x.view(), 2, 2, 1, 0);
        let back = col2im(&m, 1, 1, 3, 3, 2, 2, 1, 0);
        assert_eq!(back[(0, 0, 1, 1)], 4.0);
        assert_eq!(back[(0, 0, 0, 0)], 1.0);
        assert_eq!(back[(0, 0, 0, 1)], 2.0);
    }
}
