//! CNN building blocks with explicit forward/backward passes.
//!
//! Convolutions run as im2col + GEMM per sample, parallelized over the
//! batch; gradient contributions are reduced in sample order so training is
//! bit-deterministic regardless of thread count.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize) -> f32 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    (g * (2.0 / fan_in as f64).sqrt()) as f32
}

pub fn im2col(x: ArrayView3<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::<f32>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out_row = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wo + ox] = plane[(iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

pub fn col2im(
    col: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = col.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += col_row[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution with optional bias.
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub stride: usize,
    pub pad: usize,
    pub wgrad: Array4<f32>,
    pub bgrad: Option<Array1<f32>>,
    pub wmom: Array4<f32>,
    pub bmom: Option<Array1<f32>>,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let fan_in = cin * k * k;
        let mut weight = Array4::<f32>::zeros((cout, cin, k, k));
        for v in weight.iter_mut() {
            *v = he_normal(rng, fan_in);
        }
        Conv2d {
            weight,
            bias: bias.then(|| Array1::zeros(cout)),
            stride,
            pad,
            wgrad: Array4::zeros((cout, cin, k, k)),
            bgrad: bias.then(|| Array1::zeros(cout)),
            wmom: Array4::zeros((cout, cin, k, k)),
            bmom: bias.then(|| Array1::zeros(cout)),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b, _cin, h, w) = x.dim();
        let (cout, cin, k, _) = self.weight.dim();
        let (ho, wo) = self.out_hw(h, w);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("contiguous weight");

        let outs: Vec<Array2<f32>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(x.index_axis(Axis(0), bi), k, self.stride, self.pad);
                w2.dot(&col)
            })
            .collect();

        let mut y = Array4::<f32>::zeros((b, cout, ho, wo));
        for (bi, o) in outs.into_iter().enumerate() {
            let o3 = o.into_shape_with_order((cout, ho, wo)).unwrap();
            y.index_axis_mut(Axis(0), bi).assign(&o3);
        }
        if let Some(bias) = &self.bias {
            for bi in 0..b {
                for c in 0..cout {
                    let mut plane = y.slice_mut(ndarray::s![bi, c, .., ..]);
                    plane += bias[c];
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
        let (b, cin_x, h, w) = x.dim();
        let (cout, cin, k, _) = self.weight.dim();
        debug_assert_eq!(cin_x, cin);
        let (ho, wo) = self.out_hw(h, w);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("contiguous weight");

        let per_sample: Vec<(Array2<f32>, Array3<f32>, Array1<f32>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(x.index_axis(Axis(0), bi), k, self.stride, self.pad);
                let dy2 = dy
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((cout, ho * wo))
                    .expect("contiguous grad");
                let dw = dy2.dot(&col.t());
                let dcol = w2.t().dot(&dy2);
                let dx = col2im(&dcol, cin, h, w, k, self.stride, self.pad);
                let db = dy2.sum_axis(Axis(1));
                (dw, dx, db)
            })
            .collect();

        let mut dx = Array4::<f32>::zeros((b, cin, h, w));
        let mut wg = self
            .wgrad
            .view_mut()
            .into_shape_with_order((cout, cin * k * k))
            .expect("contiguous wgrad");
        for (bi, (dw, dxb, db)) in per_sample.into_iter().enumerate() {
            wg += &dw;
            dx.index_axis_mut(Axis(0), bi).assign(&dxb);
            if let Some(bg) = &mut self.bgrad {
                *bg += &db;
            }
        }
        dx
    }
}

/// Per-channel batch normalization.
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
    pub ggrad: Array1<f32>,
    pub bgrad: Array1<f32>,
    pub gmom: Array1<f32>,
    pub bmom: Array1<f32>,
}

pub struct BnCache {
    pub xhat: Array4<f32>,
    pub inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.1,
            eps: 1e-5,
            ggrad: Array1::zeros(c),
            bgrad: Array1::zeros(c),
            gmom: Array1::zeros(c),
            bmom: Array1::zeros(c),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f32;
        let mut mean = Array1::<f32>::zeros(c);
        let mut var = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let mut s = 0.0f32;
            for bi in 0..b {
                for v in x.slice(ndarray::s![bi, ci, .., ..]).iter() {
                    s += v;
                }
            }
            mean[ci] = s / n;
            let mut sq = 0.0f32;
            for bi in 0..b {
                for v in x.slice(ndarray::s![bi, ci, .., ..]).iter() {
                    let d = v - mean[ci];
                    sq += d * d;
                }
            }
            var[ci] = sq / n;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                let s = inv_std[ci];
                for v in xhat.slice_mut(ndarray::s![bi, ci, .., ..]).iter_mut() {
                    *v = (*v - m) * s;
                }
            }
        }
        let mut y = xhat.clone();
        for bi in 0..b {
            for ci in 0..c {
                let g = self.gamma[ci];
                let be = self.beta[ci];
                for v in y.slice_mut(ndarray::s![bi, ci, .., ..]).iter_mut() {
                    *v = *v * g + be;
                }
            }
        }
        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci];
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b, c, _h, _w) = x.dim();
        let mut y = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let m = self.running_mean[ci];
                let s = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                let g = self.gamma[ci];
                let be = self.beta[ci];
                for v in y.slice_mut(ndarray::s![bi, ci, .., ..]).iter_mut() {
                    *v = (*v - m) * s * g + be;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = dy.dim();
        let n = (b * h * w) as f32;
        let mut dx = Array4::<f32>::zeros((b, c, h, w));
        for ci in 0..c {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for bi in 0..b {
                let dyp = dy.slice(ndarray::s![bi, ci, .., ..]);
                let xp = cache.xhat.slice(ndarray::s![bi, ci, .., ..]);
                for (d, xh) in dyp.iter().zip(xp.iter()) {
                    sum_dy += d;
                    sum_dy_xhat += d * xh;
                }
            }
            self.ggrad[ci] += sum_dy_xhat;
            self.bgrad[ci] += sum_dy;
            let g = self.gamma[ci];
            let s = cache.inv_std[ci];
            let k = g * s / n;
            for bi in 0..b {
                let dyp = dy.slice(ndarray::s![bi, ci, .., ..]);
                let xp = cache.xhat.slice(ndarray::s![bi, ci, .., ..]);
                let mut dxp = dx.slice_mut(ndarray::s![bi, ci, .., ..]);
                for ((o, d), xh) in dxp.iter_mut().zip(dyp.iter()).zip(xp.iter()) {
                    *o = k * (n * d - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

pub const LEAKY_SLOPE: f32 = 0.1;

pub fn leaky_forward(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_backward(x: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    for (o, v) in dx.iter_mut().zip(x.iter()) {
        if *v <= 0.0 {
            *o *= LEAKY_SLOPE;
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Input spatial dims must be even.
pub fn maxpool2_forward(x: &Array4<f32>) -> (Array4<f32>, Vec<u8>) {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((b, c, ho, wo));
    let mut arg = vec![0u8; b * c * ho * wo];
    let mut i = 0;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut which = 0u8;
                    for dy in 0..2 {
                        for dxx in 0..2 {
                            let v = x[(bi, ci, 2 * oy + dy, 2 * ox + dxx)];
                            if v > best {
                                best = v;
                                which = (dy * 2 + dxx) as u8;
                            }
                        }
                    }
                    y[(bi, ci, oy, ox)] = best;
                    arg[i] = which;
                    i += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(
    arg: &[u8],
    dy: &Array4<f32>,
    in_h: usize,
    in_w: usize,
) -> Array4<f32> {
    let (b, c, ho, wo) = dy.dim();
    let mut dx = Array4::<f32>::zeros((b, c, in_h, in_w));
    let mut i = 0;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let which = arg[i] as usize;
                    let (dyy, dxx) = (which / 2, which % 2);
                    dx[(bi, ci, 2 * oy + dyy, 2 * ox + dxx)] += dy[(bi, ci, oy, ox)];
                    i += 1;
                }
            }
        }
    }
    dx
}
