//! Finite-difference oracle shared by the gradient and acceptance tests.
#![allow(dead_code)]

use learndrop::graph::NetGraph;
use learndrop::tensor::*;
use learndrop::{build, ArchPreset, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: usize = 20;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn numeric(x: &Tensor<f64>, coords: &[usize], mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn all(t: &Tensor<f64>) -> Vec<usize> {
    (0..t.len()).collect()
}

/// `Σ r ⊙ y`, the scalar whose gradient w.r.t. `y` is `r`.
fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error over `TRIALS` checks of one op, with respect to
/// every differentiable argument.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut worst = |name: &'static str, f: &dyn Fn(u64) -> f64| {
        let e = (0..TRIALS as u64).map(f).fold(0.0, f64::max);
        out.push((name, e));
    };

    worst("conv2d", &|t| {
        let mut g = rng(100 + t);
        let (stride, pad) = [(1, 1), (2, 0), (2, 1), (1, 0)][t as usize % 4];
        let k = [3, 1, 3, 2][t as usize % 4];
        let x = random(&mut g, &[2, 3, 6, 5]);
        let w = random(&mut g, &[4, 3, k, k]);
        let b = random(&mut g, &[4]);
        let y = conv2d(&x, &w, &b, stride, pad).unwrap();
        let r = random(&mut g, y.shape());
        let an = conv2d_backward(&x, &w, stride, pad, &r, true).unwrap();
        let ex = rel_err(an.input.as_ref().unwrap().data(), &numeric(&x, &all(&x), |p| project(&conv2d(p, &w, &b, stride, pad).unwrap(), &r)));
        let ew = rel_err(an.params[0].data(), &numeric(&w, &all(&w), |p| project(&conv2d(&x, p, &b, stride, pad).unwrap(), &r)));
        let eb = rel_err(an.params[1].data(), &numeric(&b, &all(&b), |p| project(&conv2d(&x, &w, p, stride, pad).unwrap(), &r)));
        ex.max(ew).max(eb)
    });

    worst("batchnorm2d", &|t| {
        let mut g = rng(200 + t);
        let x = random(&mut g, &[3, 2, 3, 3]);
        let gamma = random(&mut g, &[2]);
        let beta = random(&mut g, &[2]);
        let run = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut s = RunningStats::new(2);
            batchnorm2d_train(x, gm, bt, &mut s, BN_MOMENTUM, BN_EPS).unwrap()
        };
        let (y, cache) = run(&x, &gamma, &beta);
        let r = random(&mut g, y.shape());
        let an = batchnorm2d_backward(&cache, &gamma, &r, true).unwrap();
        let ex = rel_err(an.input.as_ref().unwrap().data(), &numeric(&x, &all(&x), |p| project(&run(p, &gamma, &beta).0, &r)));
        let eg = rel_err(an.params[0].data(), &numeric(&gamma, &all(&gamma), |p| project(&run(&x, p, &beta).0, &r)));
        let eb = rel_err(an.params[1].data(), &numeric(&beta, &all(&beta), |p| project(&run(&x, &gamma, p).0, &r)));
        ex.max(eg).max(eb)
    });

    worst("linear", &|t| {
        let mut g = rng(300 + t);
        let x = random(&mut g, &[3, 5]);
        let w = random(&mut g, &[4, 5]);
        let b = random(&mut g, &[4]);
        let y = linear(&x, &w, &b).unwrap();
        let r = random(&mut g, y.shape());
        let an = linear_backward(&x, &w, &r, true).unwrap();
        let ex = rel_err(an.input.as_ref().unwrap().data(), &numeric(&x, &all(&x), |p| project(&linear(p, &w, &b).unwrap(), &r)));
        let ew = rel_err(an.params[0].data(), &numeric(&w, &all(&w), |p| project(&linear(&x, p, &b).unwrap(), &r)));
        let eb = rel_err(an.params[1].data(), &numeric(&b, &all(&b), |p| project(&linear(&x, &w, p).unwrap(), &r)));
        ex.max(ew).max(eb)
    });

    worst("relu", &|t| {
        let mut g = rng(400 + t);
        let x = random(&mut g, &[2, 3, 4, 4]);
        let y = relu(&x);
        let r = random(&mut g, y.shape());
        let an = relu_backward(&y, &r).unwrap();
        rel_err(an.data(), &numeric(&x, &all(&x), |p| project(&relu(p), &r)))
    });

    worst("maxpool2d", &|t| {
        let mut g = rng(500 + t);
        let (k, s, pad) = [(2, 2, 0), (3, 2, 1), (2, 1, 0), (3, 3, 1)][t as usize % 4];
        let x = random(&mut g, &[2, 2, 6, 6]);
        let y = maxpool2d(&x, k, s, pad).unwrap();
        let r = random(&mut g, y.output.shape());
        let an = maxpool2d_backward(&y.argmax, x.shape(), &r).unwrap();
        rel_err(an.data(), &numeric(&x, &all(&x), |p| project(&maxpool2d(p, k, s, pad).unwrap().output, &r)))
    });

    worst("avgpool2d", &|t| {
        let mut g = rng(600 + t);
        let (k, s) = [(2, 2), (3, 1), (6, 1), (3, 3)][t as usize % 4];
        let x = random(&mut g, &[2, 2, 6, 6]);
        let y = avgpool2d(&x, k, s).unwrap();
        let r = random(&mut g, y.shape());
        let an = avgpool2d_backward(x.shape(), k, s, &r).unwrap();
        rel_err(an.data(), &numeric(&x, &all(&x), |p| project(&avgpool2d(p, k, s).unwrap(), &r)))
    });

    worst("residual_add", &|t| {
        let mut g = rng(700 + t);
        let a = random(&mut g, &[2, 3, 2, 2]);
        let b = random(&mut g, &[2, 3, 2, 2]);
        let r = random(&mut g, a.shape());
        let (ga, gb) = residual_add_backward(&r);
        let ea = rel_err(ga.data(), &numeric(&a, &all(&a), |p| project(&residual_add(p, &b).unwrap(), &r)));
        let eb = rel_err(gb.data(), &numeric(&b, &all(&b), |p| project(&residual_add(&a, p).unwrap(), &r)));
        ea.max(eb)
    });

    worst("softmax_xent", &|t| {
        let mut g = rng(800 + t);
        let x = random(&mut g, &[4, 5]).map(|v| v * 3.0);
        let labels: Vec<usize> = (0..4).map(|_| g.gen_range(0..5)).collect();
        let an = softmax_xent(&x, &labels).unwrap();
        rel_err(an.grad.data(), &numeric(&x, &all(&x), |p| softmax_xent(p, &labels).unwrap().loss))
    });

    out
}

fn network_loss(g: &NetGraph<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let mut g = g.clone();
    let f = g.forward(vec![x.clone()], Mode::Train).unwrap();
    softmax_xent(&f.output, y).unwrap().loss
}

/// Relative error of the whole-network parameter gradient on two samples,
/// probing up to `per_tensor` coordinates of every parameter tensor.
pub fn network_error(preset: ArchPreset, per_tensor: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let net = build::<f64>(preset, &[1, 8, 8], 3, seed).unwrap();
    let x = random(&mut g, &[2, 1, 8, 8]);
    let y = vec![0, 2];
    let mut probe = net.clone();
    let f = probe.forward(vec![x.clone()], Mode::Train).unwrap();
    let loss = softmax_xent(&f.output, &y).unwrap();
    let grads = probe.backward(&f.record.unwrap(), loss.grad).unwrap();
    let (mut analytic, mut numerical) = (Vec::new(), Vec::new());
    for (si, stage_grads) in grads.iter().enumerate() {
        for (pi, grad) in stage_grads.iter().enumerate() {
            let n = grad.len();
            let coords: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| g.gen_range(0..n)).collect() };
            let base = net.stages()[si].params()[pi].clone();
            let num = numeric(&base, &coords, |p| {
                let mut h = net.clone();
                *h.stages_mut()[si].params_mut()[pi] = p.clone();
                network_loss(&h, &x, &y)
            });
            analytic.extend(coords.iter().map(|&c| grad.data()[c]));
            numerical.extend(num);
        }
    }
    rel_err(&analytic, &numerical)
}
