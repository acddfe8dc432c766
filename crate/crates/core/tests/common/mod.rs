//! Brute-force reference implementations and finite-difference helpers shared
//! by the integration tests. Everything here is written per pixel and per tap,
//! without the im2col machinery of the library kernels.

#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wait_core::autograd::{Graph, Tensor, Var};

pub fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor {
    Array4::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// Uniform values whose fractional part stays at least `margin` from an integer.
pub fn off_lattice(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
    lo: f64,
    hi: f64,
    margin: f64,
) -> Tensor {
    Array4::from_shape_simple_fn(shape, || loop {
        let v: f64 = rng.random_range(lo..hi);
        let frac = v - v.floor();
        if frac > margin && frac < 1.0 - margin {
            return v;
        }
    })
}

/// Plane `(n, c)` of `t` sampled at `(x, y)` with zero padding.
pub fn bilinear(t: &Tensor, n: usize, c: usize, x: f64, y: f64) -> f64 {
    let (_, _, h, w) = t.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
                acc += wx * wy * t[[n, c, yi as usize, xi as usize]];
            }
        }
    }
    acc
}

/// Direct convolution; `w` is `(C_out, C_in, K, K)`.
pub fn conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Tensor {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let span = dil * (k - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (wd + 2 * pad - span) / stride + 1;
    let mut out = Array4::zeros((n, c_out, oh, ow));
    for b in 0..n {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w[[o, c, ky, kx]] * x[[b, c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[b, o, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

/// Direct deformable 3x3 convolution; tap `k = 3 ky + kx` reads `(dx, dy)` from
/// offset channels `(2k, 2k + 1)`.
pub fn deformable(x: &Tensor, offsets: &Tensor, w: &Tensor, bias: Option<&[f64]>) -> Tensor {
    let (n, c_in, h, wd) = x.dim();
    let c_out = w.dim().0;
    let mut out = Array4::zeros((n, c_out, h, wd));
    for b in 0..n {
        for o in 0..c_out {
            for py in 0..h {
                for px in 0..wd {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = ky * 3 + kx;
                            let dx = offsets[[b, 2 * k, py, px]];
                            let dy = offsets[[b, 2 * k + 1, py, px]];
                            let sx = px as f64 + kx as f64 - 1.0 + dx;
                            let sy = py as f64 + ky as f64 - 1.0 + dy;
                            for c in 0..c_in {
                                acc += w[[o, c, ky, kx]] * bilinear(x, b, c, sx, sy);
                            }
                        }
                    }
                    out[[b, o, py, px]] = acc;
                }
            }
        }
    }
    out
}

/// `out(p) = img(p + flow(p))`.
pub fn warp(img: &Tensor, flow: &Tensor) -> Tensor {
    let (n, c, h, w) = img.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + flow[[b, 0, y, x]];
                let sy = y as f64 + flow[[b, 1, y, x]];
                for ch in 0..c {
                    out[[b, ch, y, x]] = bilinear(img, b, ch, sx, sy);
                }
            }
        }
    }
    out
}

/// Forward-backward consistency mask with the published thresholds; flow
/// gradients use forward differences, zero on the last row and column.
pub fn occlusion(fwd: &Tensor, bwd: &Tensor) -> Array2<u8> {
    let (_, _, h, w) = fwd.dim();
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (fwd[[0, 0, y, x]], fwd[[0, 1, y, x]]);
            let sx = x as f64 + u;
            let sy = y as f64 + v;
            let (bu, bv) = (bilinear(bwd, 0, 0, sx, sy), bilinear(bwd, 0, 1, sx, sy));
            let sum_sq = (u + bu).powi(2) + (v + bv).powi(2);
            let mag_sq = u * u + v * v + bu * bu + bv * bv;
            let inconsistent = sum_sq > 0.01 * mag_sq + 0.5;
            let diff = |yy: usize, xx: usize, ch: usize| fwd[[0, ch, yy, xx]] - fwd[[0, ch, y, x]];
            let mut grad = 0.0;
            for ch in 0..2 {
                if x + 1 < w {
                    grad += diff(y, x + 1, ch).powi(2);
                }
                if y + 1 < h {
                    grad += diff(y + 1, x, ch).powi(2);
                }
            }
            let boundary = grad > 0.01 * (u * u + v * v) + 0.002;
            mask[[y, x]] = u8::from(!(inconsistent || boundary));
        }
    }
    mask
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with a `1e-6` floor on the magnitude.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds a scalar objective from graph inputs.
pub type Objective<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Largest relative error between autograd and central differences over every
/// element of every input.
pub fn grad_check(inputs: &[Tensor], f: &Objective<'_>, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(&out);
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&mut g, &vars).item()
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.raw_dim()));
        for (idx, _) in t.indexed_iter() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i][idx] += h;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i][idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[idx], numeric));
        }
    }
    worst
}

/// `mean(v * r)` for a fixed random `r`, so every output element matters.
pub fn project(g: &mut Graph, v: &Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    let p = g.mul(v, &rv).expect("projection shapes");
    g.mean(&p)
}
