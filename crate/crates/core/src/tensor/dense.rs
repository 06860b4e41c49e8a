use super::{OpGrad, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` through where the forward input was strictly positive.
/// `forward` may be either the relu input or its output; both have the same
/// positive set.
pub fn relu_backward<T: Scalar>(forward: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    forward.same_shape(grad_out, "relu backward")?;
    let data = forward
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(forward.shape().to_vec(), data)
}

/// `y = x · Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fan_in) = input.dims2()?;
    let (fan_out, w_in) = weight.dims2()?;
    if w_in != fan_in || bias.shape() != [fan_out] {
        return Err(Error::dim(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let w = weight.data();
    let mut out = Vec::with_capacity(n * fan_out);
    for s in 0..n {
        let x = input.sample(s);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(x) {
                acc += a * b;
            }
            out.push(acc + bias.data()[o]);
        }
    }
    let out = Tensor::new(vec![n, fan_out], out)?;
    out.ensure_finite("linear")?;
    Ok(out)
}

/// Backward of [`linear`]; parameter gradients are `[d_weight, d_bias]`.
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<OpGrad<T>> {
    let (n, fan_in) = input.dims2()?;
    let (fan_out, _) = weight.dims2()?;
    if grad_out.shape() != [n, fan_out] {
        return Err(Error::dim(format!(
            "linear grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, fan_out]
        )));
    }
    let w = weight.data();
    let mut dw = vec![T::zero(); fan_out * fan_in];
    let mut db = vec![T::zero(); fan_out];
    let mut dx = if need_input_grad {
        vec![T::zero(); n * fan_in]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let x = input.sample(s);
        let g = grad_out.sample(s);
        for o in 0..fan_out {
            let go = g[o];
            db[o] += go;
            for (d, &xi) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                *d += go * xi;
            }
        }
        if need_input_grad {
            let row = &mut dx[s * fan_in..(s + 1) * fan_in];
            for o in 0..fan_out {
                let go = g[o];
                for (d, &wv) in row.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *d += go * wv;
                }
            }
        }
    }
    Ok(OpGrad {
        params: vec![
            Tensor::new(vec![fan_out, fan_in], dw)?,
            Tensor::new(vec![fan_out], db)?,
        ],
        input: if need_input_grad {
            Some(Tensor::new(vec![n, fan_in], dx)?)
        } else {
            None
        },
    })
}

pub fn residual_add<T: Scalar>(main: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
    main.same_shape(skip, "residual add")?;
    let data = main.data().iter().zip(skip.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(main.shape().to_vec(), data)
}

/// Both branches of an addition receive the upstream gradient unchanged.
pub fn residual_add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten<T: Scalar>(input: Tensor<T>) -> Result<Tensor<T>> {
    let n = input.batch();
    let rest = input.sample_len();
    input.reshape(&[n, rest])
}
