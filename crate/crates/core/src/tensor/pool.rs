use super::conv::conv_output_extent;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index of the winning element for every output element.
    pub argmax: Vec<usize>,
}

fn pooled_extents(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if 2 * pad > kernel {
        return Err(Error::dim(format!("pool padding {pad} exceeds half of kernel {kernel}")));
    }
    Ok((
        conv_output_extent(h, kernel, stride, pad)?,
        conv_output_extent(w, kernel, stride, pad)?,
    ))
}

/// Max pooling; padded positions never win. Ties go to the first maximal
/// element in row-major window order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<MaxPoolOutput<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = pooled_extents(h, w, kernel, stride, pad)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(usize, T)> = None;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best.is_none_or(|(_, v)| x[idx] > v) {
                            best = Some((idx, x[idx]));
                        }
                    }
                }
                let (idx, v) = best.expect("pool window covers at least one input element");
                out.push(v);
                argmax.push(idx);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(vec![n, c, ho, wo], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward<T: Scalar>(argmax: &[usize], input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim(format!(
            "maxpool backward: {} routes for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Average pooling without padding.
pub fn avgpool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = pooled_extents(h, w, kernel, stride, 0)?;
    let x = input.data();
    let scale = T::of(1.0 / (kernel * kernel) as f64);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for &v in &x[row..row + kernel] {
                        acc += v;
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avgpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let (n, c, h, w) = dx.dims4()?;
    let (ho, wo) = pooled_extents(h, w, kernel, stride, 0)?;
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(Error::dim(format!(
            "avgpool grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, c, ho, wo]
        )));
    }
    let scale = T::of(1.0 / (kernel * kernel) as f64);
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let share = g[(plane * ho + oy) * wo + ox] * scale;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for v in &mut d[row..row + kernel] {
                        *v += share;
                    }
                }
            }
        }
    }
    Ok(dx)
}
