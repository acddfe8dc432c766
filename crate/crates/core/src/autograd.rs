//! A small reverse-mode tape over `(N, C, H, W)` tensors.
//!
//! Values are reference-counted so recording an op never copies its inputs.
//! A [`Var`] without a node id is a constant: nothing upstream of it needs a
//! gradient, and no backward state is kept for it. With gradients disabled
//! the graph records nothing, so intermediate activations are freed as soon
//! as the caller drops them.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::warping_ops::{self, ConvGeometry};

pub type Tensor = Array4<f64>;

#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.value.dim()
    }

    pub fn tracks_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        self.value.iter().next().copied().unwrap_or(0.0)
    }
}

enum Op {
    Leaf,
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        va: Arc<Tensor>,
        vb: Arc<Tensor>,
    },
    Scale(Option<usize>, f64),
    Shift(Option<usize>),
    Relu {
        a: Option<usize>,
        out: Arc<Tensor>,
    },
    LeakyRelu {
        a: Option<usize>,
        slope: f64,
        input: Arc<Tensor>,
    },
    Tanh {
        a: Option<usize>,
        out: Arc<Tensor>,
    },
    Softplus {
        a: Option<usize>,
        input: Arc<Tensor>,
    },
    Abs {
        a: Option<usize>,
        input: Arc<Tensor>,
    },
    Square {
        a: Option<usize>,
        input: Arc<Tensor>,
    },
    Mean {
        a: Option<usize>,
        shape: (usize, usize, usize, usize),
    },
    Conv {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Arc<Tensor>,
        wv: Arc<Tensor>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Arc<Tensor>,
        wv: Arc<Tensor>,
        geom: ConvGeometry,
    },
    Deform {
        x: Option<usize>,
        off: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Arc<Tensor>,
        offv: Arc<Tensor>,
        wv: Arc<Tensor>,
    },
    Warp {
        x: Option<usize>,
        flow: Option<usize>,
        xv: Arc<Tensor>,
        fv: Arc<Tensor>,
    },
    InstanceNorm {
        a: Option<usize>,
        normalized: Arc<Tensor>,
        inv_std: Vec<f64>,
    },
    ReflectPad {
        a: Option<usize>,
        pad: usize,
        shape: (usize, usize, usize, usize),
    },
    Concat(Vec<(Option<usize>, usize)>),
}

struct Node {
    op: Op,
}

/// Records operations for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph that records nothing; used for inference.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_shared(op, Arc::new(value))
    }

    fn push_shared(&mut self, op: Op, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { op });
        Var {
            id: Some(self.nodes.len() - 1),
            value,
        }
    }

    fn record(&mut self, parents: &[Option<usize>], op: impl FnOnce() -> Op, value: Tensor) -> Var {
        if self.grad_enabled && parents.iter().any(Option::is_some) {
            self.push(op(), value)
        } else {
            Var {
                id: None,
                value: Arc::new(value),
            }
        }
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        if self.grad_enabled {
            self.push(Op::Leaf, value)
        } else {
            self.constant(value)
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        Var {
            id: None,
            value: Arc::new(value),
        }
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        Var { id: None, value }
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array4::from_elem((1, 1, 1, 1), v))
    }

    /// Parameter leaf; repeated calls within one graph return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return v.clone();
        }
        let value = store.shared(id);
        let var = if self.grad_enabled {
            self.push_shared(Op::Leaf, value)
        } else {
            Var { id: None, value }
        };
        self.params.insert(id, var.clone());
        var
    }

    fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
        if a.dim() != b.dim() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("add", a, b)?;
        let v = a.value() + b.value();
        Ok(self.record(&[a.id, b.id], || Op::Add(a.id, b.id), v))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("sub", a, b)?;
        let v = a.value() - b.value();
        Ok(self.record(&[a.id, b.id], || Op::Sub(a.id, b.id), v))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("mul", a, b)?;
        let v = a.value() * b.value();
        Ok(self.record(
            &[a.id, b.id],
            || Op::Mul {
                a: a.id,
                b: b.id,
                va: a.shared(),
                vb: b.shared(),
            },
            v,
        ))
    }

    pub fn scale(&mut self, a: &Var, k: f64) -> Var {
        let v = a.value() * k;
        self.record(&[a.id], || Op::Scale(a.id, k), v)
    }

    pub fn shift(&mut self, a: &Var, c: f64) -> Var {
        let v = a.value() + c;
        self.record(&[a.id], || Op::Shift(a.id), v)
    }

    pub fn relu(&mut self, a: &Var) -> Var {
        let out = Arc::new(a.value().mapv(|v| v.max(0.0)));
        if self.grad_enabled && a.id.is_some() {
            self.push_shared(
                Op::Relu {
                    a: a.id,
                    out: Arc::clone(&out),
                },
                out,
            )
        } else {
            Var { id: None, value: out }
        }
    }

    pub fn leaky_relu(&mut self, a: &Var, slope: f64) -> Var {
        let v = a.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        self.record(
            &[a.id],
            || Op::LeakyRelu {
                a: a.id,
                slope,
                input: a.shared(),
            },
            v,
        )
    }

    pub fn tanh(&mut self, a: &Var) -> Var {
        let out = Arc::new(a.value().mapv(f64::tanh));
        if self.grad_enabled && a.id.is_some() {
            self.push_shared(
                Op::Tanh {
                    a: a.id,
                    out: Arc::clone(&out),
                },
                out,
            )
        } else {
            Var { id: None, value: out }
        }
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: &Var) -> Var {
        let v = a.value().mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.record(
            &[a.id],
            || Op::Softplus {
                a: a.id,
                input: a.shared(),
            },
            v,
        )
    }

    pub fn abs(&mut self, a: &Var) -> Var {
        let v = a.value().mapv(f64::abs);
        self.record(
            &[a.id],
            || Op::Abs {
                a: a.id,
                input: a.shared(),
            },
            v,
        )
    }

    pub fn square(&mut self, a: &Var) -> Var {
        let v = a.value().mapv(|x| x * x);
        self.record(
            &[a.id],
            || Op::Square {
                a: a.id,
                input: a.shared(),
            },
            v,
        )
    }

    /// Mean over every element; the result is a `(1, 1, 1, 1)` scalar.
    /// Summation runs in ascending memory order.
    pub fn mean(&mut self, a: &Var) -> Var {
        let n = a.value().len().max(1) as f64;
        let total: f64 = a.value().iter().sum();
        let v = Array4::from_elem((1, 1, 1, 1), total / n);
        self.record(
            &[a.id],
            || Op::Mean {
                a: a.id,
                shape: a.dim(),
            },
            v,
        )
    }

    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| b.value().as_slice().expect("bias contiguous"));
        let v = warping_ops::conv2d(x.value(), w.value(), bias, geom)?;
        let bid = b.and_then(|b| b.id);
        Ok(self.record(
            &[x.id, w.id, bid],
            || Op::Conv {
                x: x.id,
                w: w.id,
                b: bid,
                xv: x.shared(),
                wv: w.shared(),
                geom,
            },
            v,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        geom: ConvGeometry,
        output_padding: usize,
    ) -> Result<Var> {
        let bias = b.map(|b| b.value().as_slice().expect("bias contiguous"));
        let v = warping_ops::conv_transpose2d(x.value(), w.value(), bias, geom, output_padding)?;
        let bid = b.and_then(|b| b.id);
        Ok(self.record(
            &[x.id, w.id, bid],
            || Op::ConvTranspose {
                x: x.id,
                w: w.id,
                b: bid,
                xv: x.shared(),
                wv: w.shared(),
                geom,
            },
            v,
        ))
    }

    pub fn deformable_conv(
        &mut self,
        x: &Var,
        offsets: &Var,
        w: &Var,
        b: Option<&Var>,
    ) -> Result<Var> {
        let bias = b.map(|b| b.value().as_slice().expect("bias contiguous"));
        let v = warping_ops::deformable_conv(x.value(), offsets.value(), w.value(), bias)?;
        let bid = b.and_then(|b| b.id);
        Ok(self.record(
            &[x.id, offsets.id, w.id, bid],
            || Op::Deform {
                x: x.id,
                off: offsets.id,
                w: w.id,
                b: bid,
                xv: x.shared(),
                offv: offsets.shared(),
                wv: w.shared(),
            },
            v,
        ))
    }

    pub fn flow_warp(&mut self, x: &Var, flow: &Var) -> Result<Var> {
        let v = warping_ops::flow_warp(x.value(), flow.value())?;
        Ok(self.record(
            &[x.id, flow.id],
            || Op::Warp {
                x: x.id,
                flow: flow.id,
                xv: x.shared(),
                fv: flow.shared(),
            },
            v,
        ))
    }

    /// Per-sample, per-channel normalization over H x W (no affine parameters).
    pub fn instance_norm(&mut self, a: &Var, eps: f64) -> Var {
        let (n, c, h, w) = a.dim();
        let plane = (h * w) as f64;
        let mut out = a.value().to_owned();
        let mut inv_std = Vec::with_capacity(n * c);
        for mut sample in out.axis_iter_mut(Axis(0)) {
            for mut ch in sample.axis_iter_mut(Axis(0)) {
                let mean = ch.sum() / plane;
                let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane;
                let inv = 1.0 / (var + eps).sqrt();
                ch.mapv_inplace(|v| (v - mean) * inv);
                inv_std.push(inv);
            }
        }
        let out = Arc::new(out);
        if self.grad_enabled && a.id.is_some() {
            self.push_shared(
                Op::InstanceNorm {
                    a: a.id,
                    normalized: Arc::clone(&out),
                    inv_std,
                },
                out,
            )
        } else {
            Var { id: None, value: out }
        }
    }

    pub fn reflect_pad(&mut self, a: &Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = a.dim();
        if pad >= h || pad >= w {
            return Err(Error::shape(
                "reflect_pad",
                format!("padding {pad} needs a map larger than {h}x{w}"),
            ));
        }
        let src = a.value();
        let out = Array4::from_shape_fn((n, c, h + 2 * pad, w + 2 * pad), |(b, ch, y, x)| {
            src[[b, ch, reflect(y, pad, h), reflect(x, pad, w)]]
        });
        Ok(self.record(
            &[a.id],
            || Op::ReflectPad {
                a: a.id,
                pad,
                shape: a.dim(),
            },
            out,
        ))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let (n, _, h, w) = first.dim();
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dim();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.dim(), p.dim()),
                ));
            }
            total += pc;
        }
        let mut out = Array4::zeros((n, total, h, w));
        let mut offset = 0;
        for p in parts {
            let pc = p.dim().1;
            out.slice_mut(s![.., offset..offset + pc, .., ..])
                .assign(p.value());
            offset += pc;
        }
        let ids: Vec<Option<usize>> = parts.iter().map(|p| p.id).collect();
        let layout: Vec<(Option<usize>, usize)> = parts.iter().map(|p| (p.id, p.dim().1)).collect();
        Ok(self.record(&ids, || Op::Concat(layout), out))
    }

    /// Reverse sweep from `output`, seeding its gradient with ones.
    pub fn backward(&self, output: &Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if let Some(id) = output.id {
            grads[id] = Some(Array4::ones(output.dim()));
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&self.nodes[id].op, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(pid, var)| var.id.map(|node| (*pid, node)))
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, || g.clone());
                accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, || g.clone());
                accumulate(grads, *b, || -g);
            }
            Op::Mul { a, b, va, vb } => {
                accumulate(grads, *a, || g * &**vb);
                accumulate(grads, *b, || g * &**va);
            }
            Op::Scale(a, k) => accumulate(grads, *a, || g * *k),
            Op::Shift(a) => accumulate(grads, *a, || g.clone()),
            Op::Relu { a, out } => accumulate(grads, *a, || {
                let mut d = g.clone();
                Zip::from(&mut d).and(&**out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
                d
            }),
            Op::LeakyRelu { a, slope, input } => accumulate(grads, *a, || {
                let mut d = g.clone();
                Zip::from(&mut d).and(&**input).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                d
            }),
            Op::Tanh { a, out } => accumulate(grads, *a, || {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&**out)
                    .for_each(|d, &o| *d *= 1.0 - o * o);
                d
            }),
            Op::Softplus { a, input } => accumulate(grads, *a, || {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&**input)
                    .for_each(|d, &x| *d *= 1.0 / (1.0 + (-x).exp()));
                d
            }),
            Op::Abs { a, input } => accumulate(grads, *a, || {
                let mut d = g.clone();
                Zip::from(&mut d).and(&**input).for_each(|d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                d
            }),
            Op::Square { a, input } => accumulate(grads, *a, || {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&**input)
                    .for_each(|d, &x| *d *= 2.0 * x);
                d
            }),
            Op::Mean { a, shape } => {
                let count = (shape.0 * shape.1 * shape.2 * shape.3).max(1) as f64;
                let gv = g.iter().next().copied().unwrap_or(0.0) / count;
                accumulate(grads, *a, || Array4::from_elem(*shape, gv));
            }
            Op::Conv {
                x,
                w,
                b,
                xv,
                wv,
                geom,
            } => {
                let (dx, dw, db) = warping_ops::conv2d_backward(xv, wv, g, *geom, x.is_some());
                if let Some(dx) = dx {
                    accumulate(grads, *x, || dx);
                }
                accumulate(grads, *w, || dw);
                accumulate(grads, *b, || bias_grad(db));
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                xv,
                wv,
                geom,
            } => {
                let (dx, dw, db) =
                    warping_ops::conv_transpose2d_backward(xv, wv, g, *geom, x.is_some());
                if let Some(dx) = dx {
                    accumulate(grads, *x, || dx);
                }
                accumulate(grads, *w, || dw);
                accumulate(grads, *b, || bias_grad(db));
            }
            Op::Deform {
                x,
                off,
                w,
                b,
                xv,
                offv,
                wv,
            } => {
                let d = warping_ops::deformable_conv_backward(
                    xv,
                    offv,
                    wv,
                    g,
                    x.is_some(),
                    off.is_some(),
                );
                if let Some(dx) = d.input {
                    accumulate(grads, *x, || dx);
                }
                if let Some(doff) = d.offsets {
                    accumulate(grads, *off, || doff);
                }
                accumulate(grads, *w, || d.weights);
                accumulate(grads, *b, || bias_grad(d.bias));
            }
            Op::Warp { x, flow, xv, fv } => {
                let (dx, df) =
                    warping_ops::flow_warp_backward(xv, fv, g, x.is_some(), flow.is_some());
                if let Some(dx) = dx {
                    accumulate(grads, *x, || dx);
                }
                if let Some(df) = df {
                    accumulate(grads, *flow, || df);
                }
            }
            Op::InstanceNorm {
                a,
                normalized,
                inv_std,
            } => accumulate(grads, *a, || {
                let (n, c, h, w) = g.dim();
                let plane = (h * w) as f64;
                let mut d = g.clone();
                for b in 0..n {
                    for ch in 0..c {
                        let inv = inv_std[b * c + ch];
                        let xhat = normalized.slice(s![b, ch, .., ..]);
                        let mut dch = d.slice_mut(s![b, ch, .., ..]);
                        let mean_g = dch.sum() / plane;
                        let mean_gx = Zip::from(&dch)
                            .and(&xhat)
                            .fold(0.0, |acc, &gv, &xv| acc + gv * xv)
                            / plane;
                        Zip::from(&mut dch)
                            .and(&xhat)
                            .for_each(|gv, &xv| *gv = inv * (*gv - mean_g - xv * mean_gx));
                    }
                }
                d
            }),
            Op::ReflectPad { a, pad, shape } => accumulate(grads, *a, || {
                let (_, _, h, w) = *shape;
                let mut d = Array4::zeros(*shape);
                for ((b, ch, y, x), &gv) in g.indexed_iter() {
                    d[[b, ch, reflect(y, *pad, h), reflect(x, *pad, w)]] += gv;
                }
                d
            }),
            Op::Concat(layout) => {
                let mut offset = 0;
                for &(id, c) in layout {
                    accumulate(grads, id, || {
                        g.slice(s![.., offset..offset + c, .., ..]).to_owned()
                    });
                    offset += c;
                }
            }
        }
    }
}

#[inline]
fn reflect(i: usize, pad: usize, len: usize) -> usize {
    let j = i as isize - pad as isize;
    if j < 0 {
        (-j) as usize
    } else if j as usize >= len {
        2 * (len - 1) - j as usize
    } else {
        j as usize
    }
}

fn bias_grad(db: Vec<f64>) -> Tensor {
    let c = db.len();
    Array4::from_shape_vec((1, c, 1, 1), db).expect("bias gradient shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: Option<usize>, g: impl FnOnce() -> Tensor) {
    let Some(id) = id else { return };
    match grads[id].as_mut() {
        Some(acc) => *acc += &g(),
        None => grads[id] = Some(g()),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads[id].as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }
}
