//! Non-convolutional layer kernels.

use rand::Rng;

use super::tensor::{Shape, Tensor};

/// Elementwise nonlinearity fused into convolution nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Relu,
    Sigmoid,
}

impl Nonlinearity {
    pub fn apply(self, z: &mut Tensor) {
        match self {
            Nonlinearity::Identity => {}
            Nonlinearity::Relu => z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Nonlinearity::Sigmoid => z.data_mut().iter_mut().for_each(|v| {
                *v = crate::activations::sigmoid(*v as f64) as f32;
            }),
        }
    }

    /// Turn an output gradient into a pre-activation gradient using the
    /// stored activation output `y`.
    pub fn backward(self, y: &Tensor, dy: &mut Tensor) {
        match self {
            Nonlinearity::Identity => {}
            Nonlinearity::Relu => {
                for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Nonlinearity::Sigmoid => {
                for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
                    *g *= v * (1.0 - v);
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// argmax index of every output element.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let os = Shape::new(s.b, s.t, s.c, oh, ow);
    let mut y = Tensor::zeros(os);
    let mut arg = vec![0u32; os.len()];
    let xd = x.data();
    let mut o = 0;
    for plane in 0..s.b * s.t * s.c {
        let base = plane * s.hw();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut bi = base;
                for dy in 0..2 {
                    let iy = oy * 2 + dy;
                    if iy >= s.h {
                        continue;
                    }
                    for dx in 0..2 {
                        let ix = ox * 2 + dx;
                        if ix >= s.w {
                            continue;
                        }
                        let i = base + iy * s.w + ix;
                        if xd[i] > best {
                            best = xd[i];
                            bi = i;
                        }
                    }
                }
                y.data_mut()[o] = best;
                arg[o] = bi as u32;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(input: Shape, arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dy.data()) {
        d[i as usize] += g;
    }
    dx
}

pub const BN_EPSILON: f32 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.99;

/// Per-channel statistics saved by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn for_channel_planes<F: FnMut(usize, std::ops::Range<usize>)>(s: Shape, mut f: F) {
    let hw = s.hw();
    for img in 0..s.images() {
        for c in 0..s.c {
            let start = (img * s.c + c) * hw;
            f(c, start..start + hw);
        }
    }
}

/// Batch normalization over every axis except channels.
///
/// In training mode the batch statistics are used and the moving averages
/// updated; otherwise the moving averages are used.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    moving_mean: &mut [f32],
    moving_var: &mut [f32],
    training: bool,
) -> (Tensor, Option<BnCache>) {
    let s = x.shape();
    let xd = x.data();
    let count = (s.images() * s.hw()) as f64;
    let (mean, var) = if training {
        let mut sum = vec![0.0f64; s.c];
        let mut sq = vec![0.0f64; s.c];
        for_channel_planes(s, |c, r| {
            for &v in &xd[r] {
                sum[c] += v as f64;
            }
        });
        let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
        for_channel_planes(s, |c, r| {
            for &v in &xd[r] {
                let d = v as f64 - mean[c];
                sq[c] += d * d;
            }
        });
        let var: Vec<f64> = sq.iter().map(|v| v / count).collect();
        for c in 0..s.c {
            moving_mean[c] = BN_MOMENTUM * moving_mean[c] + (1.0 - BN_MOMENTUM) * mean[c] as f32;
            moving_var[c] = BN_MOMENTUM * moving_var[c] + (1.0 - BN_MOMENTUM) * var[c] as f32;
        }
        (mean, var)
    } else {
        (
            moving_mean.iter().map(|&v| v as f64).collect(),
            moving_var.iter().map(|&v| v as f64).collect(),
        )
    };
    let inv_std: Vec<f32> = var
        .iter()
        .map(|v| (1.0 / (v + BN_EPSILON as f64).sqrt()) as f32)
        .collect();
    let mut y = Tensor::zeros(s);
    let mut xhat = if training { vec![0.0f32; s.len()] } else { Vec::new() };
    {
        let yd = y.data_mut();
        for_channel_planes(s, |c, r| {
            let m = mean[c] as f32;
            for i in r {
                let h = (xd[i] - m) * inv_std[c];
                if training {
                    xhat[i] = h;
                }
                yd[i] = gamma[c] * h + beta[c];
            }
        });
    }
    let cache = training.then_some(BnCache { xhat, inv_std });
    (y, cache)
}

/// Gradients of a training-mode batch norm. Accumulates into `dgamma` and
/// `dbeta` and returns the input gradient.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &[f32],
    dy: &Tensor,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Tensor {
    let s = dy.shape();
    let dyd = dy.data();
    let count = (s.images() * s.hw()) as f64;
    let mut sum_dy = vec![0.0f64; s.c];
    let mut sum_dy_xhat = vec![0.0f64; s.c];
    for_channel_planes(s, |c, r| {
        for i in r {
            sum_dy[c] += dyd[i] as f64;
            sum_dy_xhat[c] += dyd[i] as f64 * cache.xhat[i] as f64;
        }
    });
    for c in 0..s.c {
        dgamma[c] += sum_dy_xhat[c] as f32;
        dbeta[c] += sum_dy[c] as f32;
    }
    let mut dx = Tensor::zeros(s);
    let dxd = dx.data_mut();
    for_channel_planes(s, |c, r| {
        let k = gamma[c] * cache.inv_std[c];
        let m_dy = (sum_dy[c] / count) as f32;
        let m_dyx = (sum_dy_xhat[c] / count) as f32;
        for i in r {
            dxd[i] = k * (dyd[i] - m_dy - cache.xhat[i] * m_dyx);
        }
    });
    dx
}

/// Inverted dropout: kept units are scaled by 1/(1-rate). Returns the mask of
/// scale factors for the backward pass.
pub fn dropout_forward<R: Rng>(x: &Tensor, rate: f32, rng: &mut R) -> (Tensor, Vec<f32>) {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.data().len())
        .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
        .collect();
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    (y, mask)
}

pub fn dropout_backward(mask: &[f32], dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (v, m) in dx.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    dx
}

/// Concatenate along channels; all inputs share b, t, h, w.
pub fn concat_forward(xs: &[&Tensor]) -> Tensor {
    let s0 = xs[0].shape();
    let c: usize = xs.iter().map(|x| x.shape().c).sum();
    let os = Shape::new(s0.b, s0.t, c, s0.h, s0.w);
    let mut y = Tensor::zeros(os);
    for b in 0..s0.b {
        for t in 0..s0.t {
            let mut off = 0;
            let out = y.image_mut(b, t);
            for x in xs {
                let src = x.image(b, t);
                out[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
    }
    y
}

pub fn concat_backward(shapes: &[Shape], dy: &Tensor) -> Vec<Tensor> {
    let s = dy.shape();
    let mut outs: Vec<Tensor> = shapes.iter().map(|&sh| Tensor::zeros(sh)).collect();
    for b in 0..s.b {
        for t in 0..s.t {
            let src = dy.image(b, t);
            let mut off = 0;
            for o in outs.iter_mut() {
                let dst = o.image_mut(b, t);
                let n = dst.len();
                dst.copy_from_slice(&src[off..off + n]);
                off += n;
            }
        }
    }
    outs
}

/// Keep only the center time step.
pub fn center_slice_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let tc = s.t / 2;
    let os = Shape::new(s.b, 1, s.c, s.h, s.w);
    let mut y = Tensor::zeros(os);
    for b in 0..s.b {
        y.image_mut(b, 0).copy_from_slice(x.image(b, tc));
    }
    y
}

pub fn center_slice_backward(input: Shape, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input);
    let tc = input.t / 2;
    for b in 0..input.b {
        dx.image_mut(b, tc).copy_from_slice(dy.image(b, 0));
    }
    dx
}
