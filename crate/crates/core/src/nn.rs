//! Parameter storage and the layer building blocks shared by every network.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::warping_ops::ConvGeometry;

/// Epsilon of every instance-norm layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Networks hold [`ParamId`]s into a shared store.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    /// Mutable access; clones the tensor only if a live graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if self.values[id.0].dim() != value.dim() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    self.values[id.0].dim(),
                    value.dim()
                ),
            ));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    /// Number of scalar parameters whose names start with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).map(|id| self.get(id).len()).sum()
    }
}

/// Deterministic initializer: N(0, 0.02) weights, zero biases.
pub struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Init {
            rng,
            normal: Normal::new(0.0, 0.02).expect("valid normal"),
        }
    }

    pub fn weights(&mut self, shape: (usize, usize, usize, usize)) -> Tensor {
        let normal = self.normal;
        let rng = &mut self.rng;
        Array4::from_shape_simple_fn(shape, || normal.sample(rng))
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// Builder context: a store, an initializer, and the current name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub init: &'a mut Init,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Init, prefix: impl Into<String>) -> Self {
        Builder {
            store,
            init,
            prefix: prefix.into(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            store: self.store,
            init: self.init,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn weight(&mut self, name: &str, shape: (usize, usize, usize, usize)) -> Result<ParamId> {
        let value = self.init.weights(shape);
        self.store.add(format!("{}.{}", self.prefix, name), value)
    }

    pub fn zeros(&mut self, name: &str, shape: (usize, usize, usize, usize)) -> Result<ParamId> {
        self.store
            .add(format!("{}.{}", self.prefix, name), Array4::zeros(shape))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let mut sb = b.sub(name);
        let k = geom.kernel;
        let weight = sb.weight("weight", (out_channels, in_channels, k, k))?;
        let bias = Some(sb.zeros("bias", (1, out_channels, 1, 1))?);
        Ok(Conv2d {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|id| g.param(ps, id));
        g.conv2d(x, &w, b.as_ref(), self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    /// 3x3, stride 2: doubles the spatial size.
    pub fn upsample(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let mut sb = b.sub(name);
        let weight = sb.weight("weight", (in_channels, out_channels, 3, 3))?;
        let bias = sb.zeros("bias", (1, out_channels, 1, 1))?;
        Ok(ConvTranspose2d {
            weight,
            bias,
            geom: ConvGeometry {
                kernel: 3,
                stride: 2,
                padding: 1,
                dilation: 1,
            },
            output_padding: 1,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv_transpose2d(x, &w, Some(&b), self.geom, self.output_padding)
    }
}

/// Deformable 3x3 convolution whose offsets come from the caller.
#[derive(Debug, Clone)]
pub struct DeformConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DeformConv2d {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let mut sb = b.sub(name);
        Ok(DeformConv2d {
            weight: sb.weight("weight", (out_channels, in_channels, 3, 3))?,
            bias: sb.zeros("bias", (1, out_channels, 1, 1))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var, offsets: &Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.deformable_conv(x, offsets, &w, Some(&b))
    }
}
