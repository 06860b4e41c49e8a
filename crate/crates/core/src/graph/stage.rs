//! Stage kinds and their per-stage forward/backward passes.

use crate::error::{Error, Result};
use crate::tensor::{
    self, avgpool2d, avgpool2d_backward, batchnorm2d_backward, batchnorm2d_eval,
    batchnorm2d_train, conv2d, conv2d_backward, conv_output_extent, linear, linear_backward,
    maxpool2d, maxpool2d_backward, relu, relu_backward, residual_add, BatchNormCache,
    RunningStats, Scalar, Tensor, BN_EPS, BN_MOMENTUM,
};

/// Per-sample shape (no batch axis) of each activation slot.
pub type SlotShapes = Vec<Vec<usize>>;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return Err(Error::Shape(format!("conv expects [C, H, W], got {input:?}")));
        };
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let k = self.kernel();
        let ho = conv_output_extent(h, k, self.stride, self.pad).map_err(shape_err)?;
        let wo = conv_output_extent(w, k, self.stride, self.pad).map_err(shape_err)?;
        Ok(vec![self.out_channels(), ho, wo])
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let k = self.kernel() as u64;
        Ok(k * k * self.in_channels() as u64 * self.out_channels() as u64 * (out[1] * out[2]) as u64)
    }
}

fn shape_err(e: Error) -> Error {
    match e {
        Error::Dimension(msg) => Error::Shape(msg),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
        }
    }
}

/// conv → optional batch norm → optional relu.
#[derive(Debug, Clone)]
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ConvUnitCache<T> {
    input: Tensor<T>,
    bn: Option<BatchNormCache<T>>,
    relu_out: Option<Tensor<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvUnitCache<T>)> {
        let mut y = conv2d(x, &self.conv.weight, &self.conv.bias, self.conv.stride, self.conv.pad)?;
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (out, cache) = batchnorm2d_train(&y, &bn.gamma, &bn.beta, &mut bn.stats, BN_MOMENTUM, BN_EPS)?;
            y = out;
            bn_cache = Some(cache);
        }
        let mut relu_out = None;
        if self.relu {
            y = relu(&y);
            relu_out = Some(y.clone());
        }
        Ok((
            y,
            ConvUnitCache {
                input: x.clone(),
                bn: bn_cache,
                relu_out,
            },
        ))
    }

    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.conv.weight, &self.conv.bias, self.conv.stride, self.conv.pad)?;
        if let Some(bn) = &self.bn {
            y = batchnorm2d_eval(&y, &bn.gamma, &bn.beta, &bn.stats, BN_EPS)?;
        }
        if self.relu {
            y = relu(&y);
        }
        Ok(y)
    }

    fn backward(
        &self,
        cache: &ConvUnitCache<T>,
        grad_out: Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(Vec<Tensor<T>>, Option<Tensor<T>>)> {
        let mut g = match &cache.relu_out {
            Some(out) => relu_backward(out, &grad_out)?,
            None => grad_out,
        };
        let mut bn_grads = Vec::new();
        if let (Some(bn), Some(bn_cache)) = (&self.bn, &cache.bn) {
            let r = batchnorm2d_backward(bn_cache, &bn.gamma, &g, true)?;
            bn_grads = r.params;
            g = r.input.expect("input grad requested");
        }
        let r = conv2d_backward(
            &cache.input,
            &self.conv.weight,
            self.conv.stride,
            self.conv.pad,
            &g,
            need_input_grad,
        )?;
        let mut params = r.params;
        params.extend(bn_grads);
        Ok((params, r.input))
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![&self.conv.weight, &self.conv.bias];
        if let Some(bn) = &self.bn {
            p.push(&bn.gamma);
            p.push(&bn.beta);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![&mut self.conv.weight, &mut self.conv.bias];
        if let Some(bn) = &mut self.bn {
            p.push(&mut bn.gamma);
            p.push(&mut bn.beta);
        }
        p
    }

    fn state(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut s = vec![
            (format!("{prefix}conv.weight"), &self.conv.weight),
            (format!("{prefix}conv.bias"), &self.conv.bias),
        ];
        if let Some(bn) = &self.bn {
            s.push((format!("{prefix}bn.gamma"), &bn.gamma));
            s.push((format!("{prefix}bn.beta"), &bn.beta));
            s.push((format!("{prefix}bn.running_mean"), &bn.stats.mean));
            s.push((format!("{prefix}bn.running_var"), &bn.stats.var));
        }
        s
    }

    fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut s = vec![
            (format!("{prefix}conv.weight"), &mut self.conv.weight),
            (format!("{prefix}conv.bias"), &mut self.conv.bias),
        ];
        if let Some(bn) = &mut self.bn {
            s.push((format!("{prefix}bn.gamma"), &mut bn.gamma));
            s.push((format!("{prefix}bn.beta"), &mut bn.beta));
            s.push((format!("{prefix}bn.running_mean"), &mut bn.stats.mean));
            s.push((format!("{prefix}bn.running_var"), &mut bn.stats.var));
        }
        s
    }

    fn param_len(&self) -> usize {
        if self.bn.is_some() {
            4
        } else {
            2
        }
    }
}

/// Basic two-conv residual block: `relu(main2(main1(x)) + skip(x))`, where
/// the skip path is the identity or a projection conv unit.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub main1: ConvUnit<T>,
    pub main2: ConvUnit<T>,
    pub projection: Option<ConvUnit<T>>,
}

/// Input half of a residual block cut in two: emits the main-path
/// activation after `main1` and the skip-path output.
#[derive(Debug, Clone)]
pub struct BlockFront<T> {
    pub main1: ConvUnit<T>,
    pub projection: Option<ConvUnit<T>>,
}

/// Output half of a residual block cut in two: consumes `(main, skip)`.
#[derive(Debug, Clone)]
pub struct BlockBack<T> {
    pub main2: ConvUnit<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Pool {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return Err(Error::Shape(format!("pool expects [C, H, W], got {input:?}")));
        };
        let ho = conv_output_extent(h, self.kernel, self.stride, self.pad).map_err(shape_err)?;
        let wo = conv_output_extent(w, self.kernel, self.stride, self.pad).map_err(shape_err)?;
        Ok(vec![c, ho, wo])
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub enum StageKind<T> {
    Conv(ConvUnit<T>),
    Residual(ResidualBlock<T>),
    BlockFront(BlockFront<T>),
    BlockBack(BlockBack<T>),
    MaxPool(Pool),
    AvgPool(Pool),
    Flatten,
    Linear(Linear<T>),
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    /// Ordinal of this stage in the unsplit graph; split halves keep it.
    pub id: usize,
    pub kind: StageKind<T>,
    pub droppable: bool,
}

#[derive(Debug, Clone)]
pub enum StageCache<T> {
    Conv(ConvUnitCache<T>),
    Residual {
        main1: ConvUnitCache<T>,
        main2: ConvUnitCache<T>,
        projection: Option<ConvUnitCache<T>>,
        out: Tensor<T>,
    },
    BlockFront {
        main1: ConvUnitCache<T>,
        projection: Option<ConvUnitCache<T>>,
    },
    BlockBack {
        main2: ConvUnitCache<T>,
        out: Tensor<T>,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Linear {
        input: Tensor<T>,
        out: Option<Tensor<T>>,
    },
}

fn one<T>(mut slots: Vec<Tensor<T>>, what: &str) -> Result<Tensor<T>> {
    if slots.len() != 1 {
        return Err(Error::dim(format!("{what} takes 1 input slot, got {}", slots.len())));
    }
    Ok(slots.pop().expect("length checked"))
}

fn two<T>(slots: Vec<Tensor<T>>, what: &str) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = slots.len();
    let mut it = slots.into_iter();
    match (it.next(), it.next(), n) {
        (Some(a), Some(b), 2) => Ok((a, b)),
        _ => Err(Error::dim(format!("{what} takes 2 input slots, got {n}"))),
    }
}

fn skip_eval<T: Scalar>(projection: &Option<ConvUnit<T>>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match projection {
        Some(p) => p.eval(x),
        None => Ok(x.clone()),
    }
}

fn skip_train<T: Scalar>(
    projection: &mut Option<ConvUnit<T>>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Option<ConvUnitCache<T>>)> {
    match projection {
        Some(p) => {
            let (y, c) = p.forward_train(x)?;
            Ok((y, Some(c)))
        }
        None => Ok((x.clone(), None)),
    }
}

fn join_output<T: Scalar>(main: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(relu(&residual_add(main, skip)?))
}

impl<T: Scalar> Stage<T> {
    pub fn new(id: usize, kind: StageKind<T>) -> Self {
        Stage {
            id,
            kind,
            droppable: false,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            StageKind::Conv(_) => "conv_unit",
            StageKind::Residual(_) => "residual_block",
            StageKind::BlockFront(_) => "block_front",
            StageKind::BlockBack(_) => "block_back",
            StageKind::MaxPool(_) => "maxpool",
            StageKind::AvgPool(_) => "avgpool",
            StageKind::Flatten => "flatten",
            StageKind::Linear(_) => "linear_unit",
        }
    }

    /// Whether this stage holds convolution weights.
    pub fn is_conv_bearing(&self) -> bool {
        matches!(
            self.kind,
            StageKind::Conv(_) | StageKind::Residual(_) | StageKind::BlockFront(_) | StageKind::BlockBack(_)
        )
    }

    pub fn has_params(&self) -> bool {
        !self.params().is_empty()
    }

    pub fn output_shapes(&self, input: &[Vec<usize>]) -> Result<SlotShapes> {
        let single = |what: &str| -> Result<&Vec<usize>> {
            match input {
                [s] => Ok(s),
                _ => Err(Error::Shape(format!("{what} takes 1 slot, got {}", input.len()))),
            }
        };
        match &self.kind {
            StageKind::Conv(u) => Ok(vec![u.conv.output_shape(single("conv_unit")?)?]),
            StageKind::Residual(b) => {
                let x = single("residual_block")?;
                let main = b.main2.conv.output_shape(&b.main1.conv.output_shape(x)?)?;
                let skip = match &b.projection {
                    Some(p) => p.conv.output_shape(x)?,
                    None => x.clone(),
                };
                if main != skip {
                    return Err(Error::Shape(format!(
                        "residual main path {main:?} does not match skip path {skip:?}"
                    )));
                }
                Ok(vec![main])
            }
            StageKind::BlockFront(f) => {
                let x = single("block_front")?;
                let main = f.main1.conv.output_shape(x)?;
                let skip = match &f.projection {
                    Some(p) => p.conv.output_shape(x)?,
                    None => x.clone(),
                };
                Ok(vec![main, skip])
            }
            StageKind::BlockBack(b) => {
                let [main, skip] = input else {
                    return Err(Error::Shape(format!("block_back takes 2 slots, got {}", input.len())));
                };
                let out = b.main2.conv.output_shape(main)?;
                if &out != skip {
                    return Err(Error::Shape(format!(
                        "residual main path {out:?} does not match skip path {skip:?}"
                    )));
                }
                Ok(vec![out])
            }
            StageKind::MaxPool(p) | StageKind::AvgPool(p) => Ok(vec![p.output_shape(single("pool")?)?]),
            StageKind::Flatten => Ok(vec![vec![single("flatten")?.iter().product()]]),
            StageKind::Linear(l) => {
                let x = single("linear_unit")?;
                let fan_in = l.weight.shape()[1];
                if x.as_slice() != [fan_in] {
                    return Err(Error::Shape(format!("linear expects [{fan_in}], got {x:?}")));
                }
                Ok(vec![vec![l.weight.shape()[0]]])
            }
        }
    }

    /// Forward multiply-accumulates per sample.
    pub fn macs(&self, input: &[Vec<usize>]) -> Result<u64> {
        let unit = |u: &ConvUnit<T>, x: &[usize]| u.conv.macs(x);
        match (&self.kind, input) {
            (StageKind::Conv(u), [x]) => unit(u, x),
            (StageKind::Residual(b), [x]) => {
                let mid = b.main1.conv.output_shape(x)?;
                let proj = match &b.projection {
                    Some(p) => unit(p, x)?,
                    None => 0,
                };
                Ok(unit(&b.main1, x)? + unit(&b.main2, &mid)? + proj)
            }
            (StageKind::BlockFront(f), [x]) => {
                let proj = match &f.projection {
                    Some(p) => unit(p, x)?,
                    None => 0,
                };
                Ok(unit(&f.main1, x)? + proj)
            }
            (StageKind::BlockBack(b), [main, _]) => unit(&b.main2, main),
            (StageKind::Linear(l), [_]) => Ok((l.weight.shape()[0] * l.weight.shape()[1]) as u64),
            (StageKind::MaxPool(_) | StageKind::AvgPool(_) | StageKind::Flatten, _) => Ok(0),
            _ => Err(Error::Shape(format!(
                "{} got {} input slots",
                self.kind_name(),
                input.len()
            ))),
        }
    }

    pub fn eval(&self, inputs: Vec<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        Ok(match &self.kind {
            StageKind::Conv(u) => vec![u.eval(&one(inputs, "conv_unit")?)?],
            StageKind::Residual(b) => {
                let x = one(inputs, "residual_block")?;
                let main = b.main2.eval(&b.main1.eval(&x)?)?;
                let skip = skip_eval(&b.projection, &x)?;
                vec![join_output(&main, &skip)?]
            }
            StageKind::BlockFront(f) => {
                let x = one(inputs, "block_front")?;
                let main = f.main1.eval(&x)?;
                let skip = skip_eval(&f.projection, &x)?;
                vec![main, skip]
            }
            StageKind::BlockBack(b) => {
                let (main, skip) = two(inputs, "block_back")?;
                vec![join_output(&b.main2.eval(&main)?, &skip)?]
            }
            StageKind::MaxPool(p) => {
                vec![maxpool2d(&one(inputs, "maxpool")?, p.kernel, p.stride, p.pad)?.output]
            }
            StageKind::AvgPool(p) => vec![avgpool2d(&one(inputs, "avgpool")?, p.kernel, p.stride)?],
            StageKind::Flatten => vec![tensor::flatten(one(inputs, "flatten")?)?],
            StageKind::Linear(l) => {
                let y = linear(&one(inputs, "linear_unit")?, &l.weight, &l.bias)?;
                vec![if l.relu { relu(&y) } else { y }]
            }
        })
    }

    pub fn forward_train(&mut self, inputs: Vec<Tensor<T>>) -> Result<(Vec<Tensor<T>>, StageCache<T>)> {
        Ok(match &mut self.kind {
            StageKind::Conv(u) => {
                let (y, c) = u.forward_train(&one(inputs, "conv_unit")?)?;
                (vec![y], StageCache::Conv(c))
            }
            StageKind::Residual(b) => {
                let x = one(inputs, "residual_block")?;
                let (m1, c1) = b.main1.forward_train(&x)?;
                let (m2, c2) = b.main2.forward_train(&m1)?;
                let (skip, cp) = skip_train(&mut b.projection, &x)?;
                let out = join_output(&m2, &skip)?;
                let cache = StageCache::Residual {
                    main1: c1,
                    main2: c2,
                    projection: cp,
                    out: out.clone(),
                };
                (vec![out], cache)
            }
            StageKind::BlockFront(f) => {
                let x = one(inputs, "block_front")?;
                let (m1, c1) = f.main1.forward_train(&x)?;
                let (skip, cp) = skip_train(&mut f.projection, &x)?;
                (
                    vec![m1, skip],
                    StageCache::BlockFront {
                        main1: c1,
                        projection: cp,
                    },
                )
            }
            StageKind::BlockBack(b) => {
                let (main, skip) = two(inputs, "block_back")?;
                let (m2, c2) = b.main2.forward_train(&main)?;
                let out = join_output(&m2, &skip)?;
                (
                    vec![out.clone()],
                    StageCache::BlockBack { main2: c2, out },
                )
            }
            StageKind::MaxPool(p) => {
                let x = one(inputs, "maxpool")?;
                let r = maxpool2d(&x, p.kernel, p.stride, p.pad)?;
                (
                    vec![r.output],
                    StageCache::MaxPool {
                        argmax: r.argmax,
                        input_shape: x.shape().to_vec(),
                    },
                )
            }
            StageKind::AvgPool(p) => {
                let x = one(inputs, "avgpool")?;
                let y = avgpool2d(&x, p.kernel, p.stride)?;
                (
                    vec![y],
                    StageCache::AvgPool {
                        input_shape: x.shape().to_vec(),
                    },
                )
            }
            StageKind::Flatten => {
                let x = one(inputs, "flatten")?;
                let input_shape = x.shape().to_vec();
                (vec![tensor::flatten(x)?], StageCache::Flatten { input_shape })
            }
            StageKind::Linear(l) => {
                let x = one(inputs, "linear_unit")?;
                let mut y = linear(&x, &l.weight, &l.bias)?;
                let mut out = None;
                if l.relu {
                    y = relu(&y);
                    out = Some(y.clone());
                }
                (vec![y], StageCache::Linear { input: x, out })
            }
        })
    }

    /// Returns parameter gradients (in [`Stage::params`] order) and, when
    /// requested, one gradient per input slot.
    pub fn backward(
        &self,
        cache: &StageCache<T>,
        grad_out: Vec<Tensor<T>>,
        need_input_grad: bool,
    ) -> Result<(Vec<Tensor<T>>, Option<Vec<Tensor<T>>>)> {
        let mismatch = || Error::Consistency(format!("cache does not belong to a {} stage", self.kind_name()));
        match (&self.kind, cache) {
            (StageKind::Conv(u), StageCache::Conv(c)) => {
                let (p, dx) = u.backward(c, one(grad_out, "conv_unit")?, need_input_grad)?;
                Ok((p, dx.map(|d| vec![d])))
            }
            (
                StageKind::Residual(b),
                StageCache::Residual {
                    main1,
                    main2,
                    projection,
                    out,
                },
            ) => {
                let g = relu_backward(out, &one(grad_out, "residual_block")?)?;
                let (mut params, dm1) = b.main2.backward(main2, g.clone(), true)?;
                let (p1, dx_main) = b.main1.backward(main1, dm1.expect("requested"), need_input_grad)?;
                let (pp, dx_skip) = match (&b.projection, projection) {
                    (Some(p), Some(c)) => p.backward(c, g, need_input_grad)?,
                    (None, None) => (Vec::new(), need_input_grad.then_some(g)),
                    _ => return Err(mismatch()),
                };
                let mut all = p1;
                all.append(&mut params);
                all.extend(pp);
                let dx = match (dx_main, dx_skip) {
                    (Some(a), Some(b)) => Some(vec![residual_add(&a, &b)?]),
                    _ => None,
                };
                Ok((all, dx))
            }
            (StageKind::BlockFront(f), StageCache::BlockFront { main1, projection }) => {
                let (gm, gs) = two(grad_out, "block_front")?;
                let (mut params, dx_main) = f.main1.backward(main1, gm, need_input_grad)?;
                let (pp, dx_skip) = match (&f.projection, projection) {
                    (Some(p), Some(c)) => p.backward(c, gs, need_input_grad)?,
                    (None, None) => (Vec::new(), need_input_grad.then_some(gs)),
                    _ => return Err(mismatch()),
                };
                params.extend(pp);
                let dx = match (dx_main, dx_skip) {
                    (Some(a), Some(b)) => Some(vec![residual_add(&a, &b)?]),
                    _ => None,
                };
                Ok((params, dx))
            }
            (StageKind::BlockBack(b), StageCache::BlockBack { main2, out }) => {
                let g = relu_backward(out, &one(grad_out, "block_back")?)?;
                let (params, dm) = b.main2.backward(main2, g.clone(), need_input_grad)?;
                Ok((params, dm.map(|d| vec![d, g])))
            }
            (StageKind::MaxPool(_), StageCache::MaxPool { argmax, input_shape }) => {
                let dx = if need_input_grad {
                    Some(vec![maxpool2d_backward(argmax, input_shape, &one(grad_out, "maxpool")?)?])
                } else {
                    None
                };
                Ok((Vec::new(), dx))
            }
            (StageKind::AvgPool(p), StageCache::AvgPool { input_shape }) => {
                let dx = if need_input_grad {
                    let g = one(grad_out, "avgpool")?;
                    Some(vec![avgpool2d_backward(input_shape, p.kernel, p.stride, &g)?])
                } else {
                    None
                };
                Ok((Vec::new(), dx))
            }
            (StageKind::Flatten, StageCache::Flatten { input_shape }) => {
                let dx = if need_input_grad {
                    Some(vec![one(grad_out, "flatten")?.reshape(input_shape)?])
                } else {
                    None
                };
                Ok((Vec::new(), dx))
            }
            (StageKind::Linear(l), StageCache::Linear { input, out }) => {
                let mut g = one(grad_out, "linear_unit")?;
                if let Some(out) = out {
                    g = relu_backward(out, &g)?;
                }
                let r = linear_backward(input, &l.weight, &g, need_input_grad)?;
                Ok((r.params, r.input.map(|d| vec![d])))
            }
            _ => Err(mismatch()),
        }
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match &self.kind {
            StageKind::Conv(u) => u.params(),
            StageKind::Residual(b) => {
                let mut p = b.main1.params();
                p.extend(b.main2.params());
                if let Some(proj) = &b.projection {
                    p.extend(proj.params());
                }
                p
            }
            StageKind::BlockFront(f) => {
                let mut p = f.main1.params();
                if let Some(proj) = &f.projection {
                    p.extend(proj.params());
                }
                p
            }
            StageKind::BlockBack(b) => b.main2.params(),
            StageKind::Linear(l) => vec![&l.weight, &l.bias],
            StageKind::MaxPool(_) | StageKind::AvgPool(_) | StageKind::Flatten => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.kind {
            StageKind::Conv(u) => u.params_mut(),
            StageKind::Residual(b) => {
                let mut p = b.main1.params_mut();
                p.extend(b.main2.params_mut());
                if let Some(proj) = &mut b.projection {
                    p.extend(proj.params_mut());
                }
                p
            }
            StageKind::BlockFront(f) => {
                let mut p = f.main1.params_mut();
                if let Some(proj) = &mut f.projection {
                    p.extend(proj.params_mut());
                }
                p
            }
            StageKind::BlockBack(b) => b.main2.params_mut(),
            StageKind::Linear(l) => vec![&mut l.weight, &mut l.bias],
            StageKind::MaxPool(_) | StageKind::AvgPool(_) | StageKind::Flatten => Vec::new(),
        }
    }

    /// Parameters plus batch-norm running statistics, by name.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        match &self.kind {
            StageKind::Conv(u) => u.state(""),
            StageKind::Residual(b) => {
                let mut s = b.main1.state("main1.");
                s.extend(b.main2.state("main2."));
                if let Some(p) = &b.projection {
                    s.extend(p.state("proj."));
                }
                s
            }
            StageKind::BlockFront(f) => {
                let mut s = f.main1.state("main1.");
                if let Some(p) = &f.projection {
                    s.extend(p.state("proj."));
                }
                s
            }
            StageKind::BlockBack(b) => b.main2.state("main2."),
            StageKind::Linear(l) => vec![("weight".into(), &l.weight), ("bias".into(), &l.bias)],
            StageKind::MaxPool(_) | StageKind::AvgPool(_) | StageKind::Flatten => Vec::new(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match &mut self.kind {
            StageKind::Conv(u) => u.state_mut(""),
            StageKind::Residual(b) => {
                let mut s = b.main1.state_mut("main1.");
                s.extend(b.main2.state_mut("main2."));
                if let Some(p) = &mut b.projection {
                    s.extend(p.state_mut("proj."));
                }
                s
            }
            StageKind::BlockFront(f) => {
                let mut s = f.main1.state_mut("main1.");
                if let Some(p) = &mut f.projection {
                    s.extend(p.state_mut("proj."));
                }
                s
            }
            StageKind::BlockBack(b) => b.main2.state_mut("main2."),
            StageKind::Linear(l) => vec![("weight".into(), &mut l.weight), ("bias".into(), &mut l.bias)],
            StageKind::MaxPool(_) | StageKind::AvgPool(_) | StageKind::Flatten => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Indices into [`Stage::params`] of the main-path convolution weights,
    /// the tensors whose gradients feed layer scoring.
    pub fn scored_weights(&self) -> Vec<usize> {
        match &self.kind {
            StageKind::Conv(_) => vec![0],
            StageKind::Residual(b) => vec![0, b.main1.param_len()],
            StageKind::BlockFront(_) | StageKind::BlockBack(_) => vec![0],
            _ => Vec::new(),
        }
    }
}
