//! Layer kinds and their forward/backward kernels.
//!
//! All kernels operate on flat row-major buffers holding a whole batch. Shapes
//! passed around here are per-sample (no leading batch axis).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

const KERNEL: usize = 3;
const PAD: usize = 1;
const POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3×3 kernel, stride 1, padding 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    /// 2×2 window, stride 2.
    MaxPool2d,
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            context: format!("{} layer input", self.name()),
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                _ => Err(mismatch(vec![in_channels, 0, 0])),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d => match input {
                [c, h, w] if *h >= POOL && *w >= POOL => Ok(vec![*c, h / POOL, w / POOL]),
                _ => Err(mismatch(vec![0, POOL, POOL])),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { in_dim, out_dim } => match input {
                [d] if *d == in_dim => Ok(vec![out_dim]),
                _ => Err(mismatch(vec![in_dim])),
            },
        }
    }

    /// `[weight, bias]` shapes, or nothing for parameterless layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels } => vec![
                vec![out_channels, in_channels, KERNEL, KERNEL],
                vec![out_channels],
            ],
            LayerSpec::Dense { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            _ => Vec::new(),
        }
    }

    /// Kaiming-uniform weights (fan-in), zero biases.
    pub(crate) fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> Vec<Tensor<T>> {
        let shapes = self.param_shapes();
        let Some(w_shape) = shapes.first() else {
            return Vec::new();
        };
        let fan_in: usize = w_shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = w_shape.iter().product();
        let w: Vec<T> = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        vec![
            Tensor::new(w_shape.clone(), w).expect("init shape"),
            Tensor::zeros(shapes[1].clone()),
        ]
    }
}

/// Per-layer state a training forward pass leaves behind for backward.
#[derive(Clone, Debug)]
pub(crate) enum Saved {
    None,
    /// Flat index of the winning input element for each pooled output.
    PoolArgmax(Vec<u32>),
}

pub(crate) fn forward<T: Scalar>(
    spec: &LayerSpec,
    params: &[Tensor<T>],
    input: &[T],
    in_shape: &[usize],
    batch: usize,
    keep: bool,
) -> (Vec<T>, Saved) {
    match *spec {
        LayerSpec::Conv2d { in_channels, out_channels } => (
            conv_forward(
                params[0].data(),
                params[1].data(),
                input,
                in_channels,
                out_channels,
                in_shape[1],
                in_shape[2],
                batch,
            ),
            Saved::None,
        ),
        LayerSpec::Relu => (
            input
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            Saved::None,
        ),
        LayerSpec::MaxPool2d => {
            let (out, arg) = pool_forward(input, in_shape, batch, keep);
            (out, arg.map_or(Saved::None, Saved::PoolArgmax))
        }
        LayerSpec::Flatten => (input.to_vec(), Saved::None),
        LayerSpec::Dense { in_dim, out_dim } => (
            dense_forward(params[0].data(), params[1].data(), input, in_dim, out_dim, batch),
            Saved::None,
        ),
    }
}

/// Accumulates parameter gradients into `params` and returns the gradient
/// with respect to the layer input, unless `need_input_grad` is false.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    spec: &LayerSpec,
    params: &mut [Tensor<T>],
    input: &[T],
    in_shape: &[usize],
    saved: &Saved,
    grad_out: &[T],
    batch: usize,
    need_input_grad: bool,
) -> Option<Vec<T>> {
    match *spec {
        LayerSpec::Conv2d { in_channels, out_channels } => conv_backward(
            params,
            input,
            grad_out,
            in_channels,
            out_channels,
            in_shape[1],
            in_shape[2],
            batch,
            need_input_grad,
        ),
        LayerSpec::Relu => need_input_grad.then(|| {
            input
                .iter()
                .zip(grad_out)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect()
        }),
        LayerSpec::MaxPool2d => need_input_grad.then(|| {
            let Saved::PoolArgmax(arg) = saved else {
                unreachable!("pool forward in training mode always records argmax")
            };
            let mut dx = vec![T::zero(); input.len()];
            for (&src, &g) in arg.iter().zip(grad_out) {
                dx[src as usize] += g;
            }
            dx
        }),
        LayerSpec::Flatten => need_input_grad.then(|| grad_out.to_vec()),
        LayerSpec::Dense { in_dim, out_dim } => {
            dense_backward(params, input, grad_out, in_dim, out_dim, batch, need_input_grad)
        }
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - PAD as isize;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - PAD as isize;
                        *v = if ix < 0 || ix >= w as isize {
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

fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - PAD as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    weight: &[T],
    bias: &[T],
    x: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    batch: usize,
) -> Vec<T> {
    let hw = h * w;
    let kdim = cin * KERNEL * KERNEL;
    let mut col = vec![T::zero(); kdim * hw];
    let mut out = vec![T::zero(); batch * cout * hw];
    for b in 0..batch {
        im2col(&x[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut col);
        let y = &mut out[b * cout * hw..(b + 1) * cout * hw];
        for (o, plane) in y.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[o]);
        }
        T::gemm(
            cout, kdim, hw, T::one(), weight, kdim as isize, 1, &col, hw as isize, 1, T::one(), y,
            hw as isize, 1,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    params: &mut [Tensor<T>],
    x: &[T],
    dy: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    batch: usize,
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    let kdim = cin * KERNEL * KERNEL;
    let mut col = vec![T::zero(); kdim * hw];
    let mut dcol = vec![T::zero(); kdim * hw];
    let mut dx = need_input_grad.then(|| vec![T::zero(); x.len()]);
    let (weight, bias) = params.split_at_mut(1);
    let (w_data, w_grad) = weight[0].data_and_grad_mut();
    let b_grad = bias[0].grad_mut();
    for b in 0..batch {
        let dyb = &dy[b * cout * hw..(b + 1) * cout * hw];
        for (o, plane) in dyb.chunks(hw).enumerate() {
            b_grad[o] += plane.iter().copied().sum::<T>();
        }
        im2col(&x[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut col);
        // dW[cout, kdim] += dY[cout, hw] · colᵀ[hw, kdim]
        T::gemm(
            cout, hw, kdim, T::one(), dyb, hw as isize, 1, &col, 1, hw as isize, T::one(), w_grad,
            kdim as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcol[kdim, hw] = Wᵀ[kdim, cout] · dY[cout, hw]
            T::gemm(
                kdim, cout, hw, T::one(), w_data, 1, kdim as isize, dyb, hw as isize, 1, T::zero(),
                &mut dcol, hw as isize, 1,
            );
            col2im_add(&dcol, cin, h, w, &mut dx[b * cin * hw..(b + 1) * cin * hw]);
        }
    }
    dx
}

fn pool_forward<T: Scalar>(
    x: &[T],
    in_shape: &[usize],
    batch: usize,
    keep: bool,
) -> (Vec<T>, Option<Vec<u32>>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / POOL, w / POOL);
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut arg = keep.then(|| Vec::with_capacity(batch * c * oh * ow));
    for plane_idx in 0..batch * c {
        let base = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * POOL * w + ox * POOL;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let idx = base + (oy * POOL + dy) * w + ox * POOL + dx;
                        // strict comparison keeps the first maximum in scan order
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                if let Some(a) = arg.as_mut() {
                    a.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

fn dense_forward<T: Scalar>(
    weight: &[T],
    bias: &[T],
    x: &[T],
    in_dim: usize,
    out_dim: usize,
    batch: usize,
) -> Vec<T> {
    let mut y: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    // y[B, out] += x[B, in] · Wᵀ[in, out]
    T::gemm(
        batch, in_dim, out_dim, T::one(), x, in_dim as isize, 1, weight, 1, in_dim as isize,
        T::one(), &mut y, out_dim as isize, 1,
    );
    y
}

fn dense_backward<T: Scalar>(
    params: &mut [Tensor<T>],
    x: &[T],
    dy: &[T],
    in_dim: usize,
    out_dim: usize,
    batch: usize,
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let (weight, bias) = params.split_at_mut(1);
    let (w_data, w_grad) = weight[0].data_and_grad_mut();
    let b_grad = bias[0].grad_mut();
    for row in dy.chunks(out_dim) {
        for (g, &d) in b_grad.iter_mut().zip(row) {
            *g += d;
        }
    }
    // dW[out, in] += dYᵀ[out, B] · x[B, in]
    T::gemm(
        out_dim, batch, in_dim, T::one(), dy, 1, out_dim as isize, x, in_dim as isize, 1,
        T::one(), w_grad, in_dim as isize, 1,
    );
    need_input_grad.then(|| {
        let mut dx = vec![T::zero(); batch * in_dim];
        T::gemm(
            batch, out_dim, in_dim, T::one(), dy, out_dim as isize, 1, w_data, in_dim as isize, 1,
            T::zero(), &mut dx, in_dim as isize, 1,
        );
        dx
    })
}
