use super::{OpGrad, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("stride must be at least 1"));
    }
    let padded = extent + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::dim(format!(
            "kernel {kernel} does not fit extent {extent} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (_, c_in, h, w) = input.dims4()?;
        let (c_out, wc, kh, kw) = weight.dims4()?;
        if wc != c_in {
            return Err(Error::dim(format!(
                "conv weight expects {wc} input channels, input has {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!("non-square kernel {kh}x{kw}")));
        }
        let h_out = conv_output_extent(h, kh, stride, pad)?;
        let w_out = conv_output_extent(w, kw, stride, pad)?;
        Ok(Geometry {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one `[C, H, W]` sample into a `[C·K·K, H_out·W_out]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a patch-gradient matrix back onto a `[C, H, W]` sample, adding.
    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation with square kernels, zero padding and a shared
/// stride on both axes.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, stride, pad)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::dim(format!(
            "conv bias shape {:?}, expected [{}]",
            bias.shape(),
            g.c_out
        )));
    }
    let n = input.batch();
    let (rows, p) = (g.patch_rows(), g.positions());
    let mut col = vec![T::zero(); rows * p];
    let mut out = vec![T::zero(); n * g.c_out * p];
    for (s, y) in out.chunks_exact_mut(g.c_out * p).enumerate() {
        g.im2col(input.sample(s), &mut col);
        T::gemm(g.c_out, rows, p, weight.data(), (rows as isize, 1), &col, (p as isize, 1), y, false);
        for (co, plane) in y.chunks_exact_mut(p).enumerate() {
            let b = bias.data()[co];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    let out = Tensor::new(vec![n, g.c_out, g.h_out, g.w_out], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Backward of [`conv2d`]. Parameter gradients are `[d_weight, d_bias]`,
/// summed over the batch in sample order.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<OpGrad<T>> {
    let g = Geometry::new(input, weight, stride, pad)?;
    let n = input.batch();
    let expected = [n, g.c_out, g.h_out, g.w_out];
    if grad_out.shape() != expected {
        return Err(Error::dim(format!(
            "conv grad shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (rows, p) = (g.patch_rows(), g.positions());
    let mut col = vec![T::zero(); rows * p];
    let mut dcol = vec![T::zero(); rows * p];
    let mut dw = vec![T::zero(); g.c_out * rows];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = if need_input_grad {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let sample_in = input.sample_len();
    for s in 0..n {
        let dy = grad_out.sample(s);
        g.im2col(input.sample(s), &mut col);
        // dW += dY · colᵀ
        T::gemm(g.c_out, p, rows, dy, (p as isize, 1), &col, (1, p as isize), &mut dw, s > 0);
        for (co, plane) in dy.chunks_exact(p).enumerate() {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            db[co] += acc;
        }
        if need_input_grad {
            // dcol = Wᵀ · dY
            T::gemm(rows, g.c_out, p, weight.data(), (1, rows as isize), dy, (p as isize, 1), &mut dcol, false);
            g.col2im(&dcol, &mut dx[s * sample_in..(s + 1) * sample_in]);
        }
    }
    Ok(OpGrad {
        params: vec![
            Tensor::new(weight.shape().to_vec(), dw)?,
            Tensor::new(vec![g.c_out], db)?,
        ],
        input: if need_input_grad {
            Some(Tensor::new(input.shape().to_vec(), dx)?)
        } else {
            None
        },
    })
}
