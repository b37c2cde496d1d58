//! im2col convolution kernels: forward, input adjoint and weight adjoint.
//!
//! All three are bilinear in their two arguments, which is what lets the
//! autodiff layer express each one's derivative in terms of the others.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let cols = g.cols();
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let srcrow = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += srcrow[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[cout, n*ho*wo]` → `[n, cout, ho, wo]`
fn unpermute(mat: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let cols = g.cols();
    let mut out = vec![0.0; mat.len()];
    for co in 0..g.cout {
        for n in 0..g.n {
            out[(n * g.cout + co) * hw..(n * g.cout + co + 1) * hw]
                .copy_from_slice(&mat[co * cols + n * hw..co * cols + (n + 1) * hw]);
        }
    }
    out
}

/// `[n, cout, ho, wo]` → `[cout, n*ho*wo]`
fn permute(y: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let cols = g.cols();
    let mut out = vec![0.0; y.len()];
    for co in 0..g.cout {
        for n in 0..g.n {
            out[co * cols + n * hw..co * cols + (n + 1) * hw]
                .copy_from_slice(&y[(n * g.cout + co) * hw..(n * g.cout + co + 1) * hw]);
        }
    }
    out
}

pub(crate) fn geometry(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        n: x_shape[0],
        cin: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        cout: w_shape[0],
        k: w_shape[2],
        stride,
        pad,
    }
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let g = geometry(x.shape(), w.shape(), stride, pad);
    let cols = im2col(x.data(), &g);
    let mat = gemm(w.data(), false, &cols, false, g.cout, g.rows(), g.cols());
    let (ho, wo) = g.out_hw();
    Tensor::from_parts(vec![g.n, g.cout, ho, wo], unpermute(&mat, &g))
}

/// Adjoint of `conv2d` in its input: maps an output-shaped tensor back to
/// input shape `[n, cin, h, w]`.
pub(crate) fn conv2d_input_adjoint(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    hw: (usize, usize),
) -> Tensor {
    let g = ConvGeom {
        n: gy.shape()[0],
        cin: w.shape()[1],
        h: hw.0,
        w: hw.1,
        cout: w.shape()[0],
        k: w.shape()[2],
        stride,
        pad,
    };
    let gy_mat = permute(gy.data(), &g);
    let cols = gemm(w.data(), true, &gy_mat, false, g.rows(), g.cout, g.cols());
    Tensor::from_parts(vec![g.n, g.cin, g.h, g.w], col2im(&cols, &g))
}

/// Adjoint of `conv2d` in its weight: `[cout, cin, k, k]`.
pub(crate) fn conv2d_weight_adjoint(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    k: usize,
) -> Tensor {
    let g = ConvGeom {
        n: x.shape()[0],
        cin: x.shape()[1],
        h: x.shape()[2],
        w: x.shape()[3],
        cout: gy.shape()[1],
        k,
        stride,
        pad,
    };
    let cols = im2col(x.data(), &g);
    let gy_mat = permute(gy.data(), &g);
    let gw = gemm(&gy_mat, false, &cols, true, g.cout, g.cols(), g.rows());
    Tensor::from_parts(vec![g.cout, g.cin, k, k], gw)
}
