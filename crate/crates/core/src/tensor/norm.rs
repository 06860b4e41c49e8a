use super::{OpGrad, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Saved state of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_params<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>, stats: &RunningStats<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] || stats.channels() != c {
        return Err(Error::dim(format!(
            "batch norm over {c} channels got gamma {:?}, beta {:?}, stats for {}",
            gamma.shape(),
            beta.shape(),
            stats.channels()
        )));
    }
    Ok(())
}

/// Normalizes with batch statistics and folds them into `stats` by
/// exponential moving average.
pub fn batchnorm2d_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    check_params(c, gamma, beta, stats)?;
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(Error::DegenerateBatch(m));
    }
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = || (0..n).map(move |s| (s * c + ch) * hw);
        let mut sum = 0.0f64;
        for base in planes() {
            sum += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0f64;
        for base in planes() {
            sq += x[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / m as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let (mean_t, istd_t) = (T::of(mean), T::of(istd));
        for base in planes() {
            for i in base..base + hw {
                let xh = (x[i] - mean_t) * istd_t;
                normalized[i] = xh;
                out[i] = g * xh + b;
            }
        }
        inv_std.push(istd_t);

        let unbiased = sq / (m - 1) as f64;
        let rm = &mut stats.mean.data_mut()[ch];
        *rm = T::of((1.0 - momentum) * rm.as_f64() + momentum * mean);
        let rv = &mut stats.var.data_mut()[ch];
        *rv = T::of((1.0 - momentum) * rv.as_f64() + momentum * unbiased);
    }
    let out = Tensor::new(input.shape().to_vec(), out)?;
    out.ensure_finite("batchnorm2d")?;
    Ok((
        out,
        BatchNormCache {
            normalized: Tensor::new(input.shape().to_vec(), normalized)?,
            inv_std,
        },
    ))
}

/// Normalizes with the running statistics. Pure.
pub fn batchnorm2d_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    check_params(c, gamma, beta, stats)?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let mean = stats.mean.data()[ch];
        let istd = T::of(1.0 / (stats.var.data()[ch].as_f64() + eps).sqrt());
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                out[i] = g * ((x[i] - mean) * istd) + b;
            }
        }
    }
    let out = Tensor::new(input.shape().to_vec(), out)?;
    out.ensure_finite("batchnorm2d")?;
    Ok(out)
}

/// Backward of [`batchnorm2d_train`]; parameter gradients are
/// `[d_gamma, d_beta]`.
pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<OpGrad<T>> {
    grad_out.same_shape(&cache.normalized, "batchnorm2d backward")?;
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = if need_input_grad {
        vec![T::zero(); dy.len()]
    } else {
        Vec::new()
    };
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                sum_dy += dy[i].as_f64();
                sum_dy_xh += dy[i].as_f64() * xh[i].as_f64();
            }
        }
        dgamma[ch] = T::of(sum_dy_xh);
        dbeta[ch] = T::of(sum_dy);
        if need_input_grad {
            let scale = gamma.data()[ch].as_f64() * cache.inv_std[ch].as_f64() / m;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let v = m * dy[i].as_f64() - sum_dy - xh[i].as_f64() * sum_dy_xh;
                    dx[i] = T::of(scale * v);
                }
            }
        }
    }
    Ok(OpGrad {
        params: vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?],
        input: if need_input_grad {
            Some(Tensor::new(grad_out.shape().to_vec(), dx)?)
        } else {
            None
        },
    })
}
