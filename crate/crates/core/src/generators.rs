//! Network assemblies: the feature-warping generator, the plain translation
//! generator, the 70x70 patch discriminator and the next-frame predictor used
//! by the recycle baselines.
//!
//! All networks take `(N, 3, S, S)` batches in `[-1, 1]` and accept a width /
//! size scale through their spec structs, so tests can run the same topology
//! at desk scale.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvTranspose2d, DeformConv2d, ParamStore, NORM_EPS};
use crate::warping_ops::ConvGeometry;

/// Offset channels consumed by a 3x3 deformable layer: one `(dx, dy)` per tap.
pub const OFFSET_CHANNELS: usize = 2 * 3 * 3;

pub const DEFAULT_DILATIONS: [usize; 5] = [3, 6, 12, 18, 24];

fn check_image(op: &'static str, x: &Var, size: usize) -> Result<()> {
    let (_, c, h, w) = x.dim();
    if c != 3 || h != size || w != size {
        return Err(Error::shape(
            op,
            format!("expected (N, 3, {size}, {size}), got {:?}", x.dim()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub image_size: usize,
    pub base_channels: usize,
    pub downsample_stages: usize,
    pub residual_blocks: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            image_size: 256,
            base_channels: 64,
            downsample_stages: 2,
            residual_blocks: 9,
        }
    }
}

impl BackboneSpec {
    pub fn out_channels(&self) -> usize {
        self.base_channels
    }
}

struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        let h = g.reflect_pad(x, 1)?;
        let h = self.c1.forward(g, ps, &h)?;
        let h = g.instance_norm(&h, NORM_EPS);
        let h = g.relu(&h);
        let h = g.reflect_pad(&h, 1)?;
        let h = self.c2.forward(g, ps, &h)?;
        let h = g.instance_norm(&h, NORM_EPS);
        g.add(x, &h)
    }
}

fn valid_conv(kernel: usize) -> ConvGeometry {
    ConvGeometry {
        kernel,
        stride: 1,
        padding: 0,
        dilation: 1,
    }
}

/// Residual encoder-decoder with its output convolution removed.
pub struct Backbone {
    spec: BackboneSpec,
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
}

impl Backbone {
    pub fn new(b: &mut Builder<'_>, spec: &BackboneSpec) -> Result<Self> {
        let scale = 1usize << spec.downsample_stages;
        if spec.image_size == 0 || !spec.image_size.is_multiple_of(scale) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {scale}",
                spec.image_size
            )));
        }
        let c = spec.base_channels;
        let stem = Conv2d::new(b, "stem", 3, c, valid_conv(7))?;
        let mut down = Vec::new();
        let mut ch = c;
        for i in 0..spec.downsample_stages {
            let geom = ConvGeometry {
                kernel: 3,
                stride: 2,
                padding: 1,
                dilation: 1,
            };
            down.push(Conv2d::new(b, &format!("down{i}"), ch, ch * 2, geom)?);
            ch *= 2;
        }
        let mut blocks = Vec::new();
        for i in 0..spec.residual_blocks {
            let mut rb = b.sub(&format!("res{i}"));
            blocks.push(ResBlock {
                c1: Conv2d::new(&mut rb, "conv1", ch, ch, valid_conv(3))?,
                c2: Conv2d::new(&mut rb, "conv2", ch, ch, valid_conv(3))?,
            });
        }
        let mut up = Vec::new();
        for i in 0..spec.downsample_stages {
            up.push(ConvTranspose2d::upsample(b, &format!("up{i}"), ch, ch / 2)?);
            ch /= 2;
        }
        Ok(Backbone {
            spec: spec.clone(),
            stem,
            down,
            blocks,
            up,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        check_image("backbone_forward", x, self.spec.image_size)?;
        let h = g.reflect_pad(x, 3)?;
        let h = self.stem.forward(g, ps, &h)?;
        let h = g.instance_norm(&h, NORM_EPS);
        let mut h = g.relu(&h);
        for conv in &self.down {
            h = conv.forward(g, ps, &h)?;
            h = g.instance_norm(&h, NORM_EPS);
            h = g.relu(&h);
        }
        for block in &self.blocks {
            h = block.forward(g, ps, &h)?;
        }
        for conv in &self.up {
            h = conv.forward(g, ps, &h)?;
            h = g.instance_norm(&h, NORM_EPS);
            h = g.relu(&h);
        }
        Ok(h)
    }
}

/// 7x7 reflect-padded convolution to RGB followed by Tanh.
struct RgbHead {
    conv: Conv2d,
}

impl RgbHead {
    fn new(b: &mut Builder<'_>, in_channels: usize) -> Result<Self> {
        Ok(RgbHead {
            conv: Conv2d::new(b, "head", in_channels, 3, valid_conv(7))?,
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        let h = g.reflect_pad(x, 3)?;
        let h = self.conv.forward(g, ps, &h)?;
        Ok(g.tanh(&h))
    }
}

/// Backbone plus output convolution: the single-frame translation network.
pub struct PlainGenerator {
    pub backbone: Backbone,
    head: RgbHead,
}

impl PlainGenerator {
    pub fn new(b: &mut Builder<'_>, spec: &BackboneSpec) -> Result<Self> {
        let backbone = Backbone::new(&mut b.sub("backbone"), spec)?;
        let head = RgbHead::new(b, spec.out_channels())?;
        Ok(PlainGenerator { backbone, head })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        let f = self.backbone.forward(g, ps, x)?;
        self.head.forward(g, ps, &f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetNetworkSpec {
    pub depth: usize,
    /// Adds a skip connection around every block.
    pub residual: bool,
}

impl Default for OffsetNetworkSpec {
    fn default() -> Self {
        OffsetNetworkSpec {
            depth: 8,
            residual: false,
        }
    }
}

struct OffsetBlock {
    c1: Conv2d,
    c2: Conv2d,
}

/// Maps the feature difference to offset features; spatial size and width preserved.
pub struct OffsetNetwork {
    blocks: Vec<OffsetBlock>,
    residual: bool,
}

impl OffsetNetwork {
    pub fn new(b: &mut Builder<'_>, spec: &OffsetNetworkSpec, channels: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let mut bb = b.sub(&format!("block{i}"));
            blocks.push(OffsetBlock {
                c1: Conv2d::new(&mut bb, "conv1", channels, channels, ConvGeometry::same(3))?,
                c2: Conv2d::new(&mut bb, "conv2", channels, channels, ConvGeometry::same(3))?,
            });
        }
        Ok(OffsetNetwork {
            blocks,
            residual: spec.residual,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for block in &self.blocks {
            let mut y = h.clone();
            for conv in [&block.c1, &block.c2] {
                y = conv.forward(g, ps, &y)?;
                y = g.instance_norm(&y, NORM_EPS);
                y = g.relu(&y);
            }
            h = if self.residual { g.add(&h, &y)? } else { y };
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpingStageSpec {
    pub dilations: Vec<usize>,
}

impl Default for WarpingStageSpec {
    fn default() -> Self {
        WarpingStageSpec {
            dilations: DEFAULT_DILATIONS.to_vec(),
        }
    }
}

impl WarpingStageSpec {
    /// The first `layers` entries of the default dilation ladder.
    pub fn with_layers(layers: usize) -> Result<Self> {
        if layers == 0 || layers > DEFAULT_DILATIONS.len() {
            return Err(Error::Config(format!(
                "warping layer count must be in 1..={}, got {layers}",
                DEFAULT_DILATIONS.len()
            )));
        }
        Ok(WarpingStageSpec {
            dilations: DEFAULT_DILATIONS[..layers].to_vec(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.dilations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::Config("at least one warping layer is required".into()));
        }
        if self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dilations must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        Ok(())
    }
}

/// Dilated 3x3 convolution producing the offsets of a deformable 3x3 layer
/// that resamples the auxiliary features.
pub struct WarpingLayer {
    pub dilation: usize,
    pub offset_conv: Conv2d,
    pub deform: DeformConv2d,
}

impl WarpingLayer {
    fn new(b: &mut Builder<'_>, channels: usize, dilation: usize) -> Result<Self> {
        Ok(WarpingLayer {
            dilation,
            offset_conv: Conv2d::new(
                b,
                "offset",
                channels,
                OFFSET_CHANNELS,
                ConvGeometry::dilated(dilation),
            )?,
            deform: DeformConv2d::new(b, "deform", channels, channels)?,
        })
    }

    pub fn offsets(&self, g: &mut Graph, ps: &ParamStore, offset_features: &Var) -> Result<Var> {
        self.offset_conv.forward(g, ps, offset_features)
    }

    pub fn warp(&self, g: &mut Graph, ps: &ParamStore, aux: &Var, offsets: &Var) -> Result<Var> {
        self.deform.forward(g, ps, aux, offsets)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct WaitSpec {
    pub backbone: BackboneSpec,
    pub offset: OffsetNetworkSpec,
    pub warping: WarpingStageSpec,
}

/// Backbone features of both frames, their difference, and the offset features.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub reference: Var,
    pub auxiliary: Var,
    pub difference: Var,
    pub offset: Var,
}

/// Intermediate tensors of one warping-generator pass.
#[derive(Debug, Clone)]
pub struct WaitTrace {
    pub features: FeatureBundle,
    pub offsets: Vec<Var>,
    pub warped: Vec<Var>,
    pub stacked: Var,
    pub output: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WaitForwardOptions {
    /// Replace every dilated-conv output with zeros, reducing each warping
    /// layer to a plain 3x3 convolution of the auxiliary features.
    pub zero_offsets: bool,
}

/// Generator with in-network feature warping.
pub struct WaitGenerator {
    pub spec: WaitSpec,
    pub backbone: Backbone,
    pub offset_net: OffsetNetwork,
    pub warping: Vec<WarpingLayer>,
    fusion: RgbHead,
}

impl WaitGenerator {
    pub fn new(b: &mut Builder<'_>, spec: &WaitSpec) -> Result<Self> {
        spec.warping.validate()?;
        let c = spec.backbone.out_channels();
        let backbone = Backbone::new(&mut b.sub("backbone"), &spec.backbone)?;
        let offset_net = OffsetNetwork::new(&mut b.sub("offset_net"), &spec.offset, c)?;
        let mut warping = Vec::new();
        for (i, &d) in spec.warping.dilations.iter().enumerate() {
            warping.push(WarpingLayer::new(&mut b.sub(&format!("warp{i}")), c, d)?);
        }
        let fusion = RgbHead::new(b, c * warping.len())?;
        Ok(WaitGenerator {
            spec: spec.clone(),
            backbone,
            offset_net,
            warping,
            fusion,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x_ref: &Var, x_aux: &Var) -> Result<Var> {
        Ok(self
            .forward_traced(g, ps, x_ref, x_aux, WaitForwardOptions::default())?
            .output)
    }

    /// Single-frame inference path: the reference frame doubles as auxiliary.
    pub fn forward_single(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        self.forward(g, ps, x, x)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x_ref: &Var,
        x_aux: &Var,
        opts: WaitForwardOptions,
    ) -> Result<WaitTrace> {
        if x_ref.dim() != x_aux.dim() {
            return Err(Error::shape(
                "wait_generator_forward",
                format!("reference {:?} vs auxiliary {:?}", x_ref.dim(), x_aux.dim()),
            ));
        }
        let f_ref = self.backbone.forward(g, ps, x_ref)?;
        let f_aux = self.backbone.forward(g, ps, x_aux)?;
        let f_diff = g.sub(&f_ref, &f_aux)?;
        let f_offset = self.offset_net.forward(g, ps, &f_diff)?;
        let mut offsets = Vec::with_capacity(self.warping.len());
        let mut warped = Vec::with_capacity(self.warping.len());
        for layer in &self.warping {
            let off = if opts.zero_offsets {
                let (n, _, h, w) = f_aux.dim();
                g.constant(ndarray::Array4::zeros((n, OFFSET_CHANNELS, h, w)))
            } else {
                layer.offsets(g, ps, &f_offset)?
            };
            warped.push(layer.warp(g, ps, &f_aux, &off)?);
            offsets.push(off);
        }
        let stacked = g.concat(&warped)?;
        let output = self.fusion.forward(g, ps, &stacked)?;
        Ok(WaitTrace {
            features: FeatureBundle {
                reference: f_ref,
                auxiliary: f_aux,
                difference: f_diff,
                offset: f_offset,
            },
            offsets,
            warped,
            stacked,
            output,
        })
    }
}

/// Source-to-target generator: plain or feature-warping.
pub enum SourceGenerator {
    Plain(PlainGenerator),
    Wait(WaitGenerator),
}

impl SourceGenerator {
    /// Translates `x`; the warping generator uses `aux` as its auxiliary frame,
    /// or `x` itself when no auxiliary frame is given.
    pub fn translate(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: &Var,
        aux: Option<&Var>,
    ) -> Result<Var> {
        match self {
            SourceGenerator::Plain(net) => net.forward(g, ps, x),
            SourceGenerator::Wait(net) => net.forward(g, ps, x, aux.unwrap_or(x)),
        }
    }

    pub fn is_wait(&self) -> bool {
        matches!(self, SourceGenerator::Wait(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub image_size: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            image_size: 256,
            base_channels: 64,
        }
    }
}

/// 70x70 patch classifier: three stride-2 4x4 stages, one stride-1 stage, and a
/// one-channel stride-1 score layer.
pub struct Discriminator {
    spec: DiscriminatorSpec,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(b: &mut Builder<'_>, spec: &DiscriminatorSpec) -> Result<Self> {
        let c = spec.base_channels;
        let geom = |stride| ConvGeometry {
            kernel: 4,
            stride,
            padding: 1,
            dilation: 1,
        };
        let plan = [
            (3, c, 2),
            (c, 2 * c, 2),
            (2 * c, 4 * c, 2),
            (4 * c, 8 * c, 1),
            (8 * c, 1, 1),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv2d::new(b, &format!("conv{i}"), ci, co, geom(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Discriminator {
            spec: spec.clone(),
            convs,
        })
    }

    /// Spatial side of the score map for a square input of side `size`.
    pub fn score_size(&self, size: usize) -> Option<usize> {
        self.convs
            .iter()
            .try_fold(size, |s, conv| conv.geom.out_size(s))
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: &Var) -> Result<Var> {
        check_image("discriminator_forward", x, self.spec.image_size)?;
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, ps, &h)?;
            if i == last {
                break;
            }
            if i > 0 {
                h = g.instance_norm(&h, NORM_EPS);
            }
            h = g.leaky_relu(&h, 0.2);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub image_size: usize,
    pub base_channels: usize,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec {
            image_size: 256,
            base_channels: 64,
        }
    }
}

/// Two-level encoder-decoder with skip connections over a concatenated frame
/// pair, predicting the following frame.
pub struct TemporalPredictor {
    spec: PredictorSpec,
    enc0: Conv2d,
    enc1: Conv2d,
    enc2: Conv2d,
    up1: ConvTranspose2d,
    dec1: Conv2d,
    up0: ConvTranspose2d,
    dec0: Conv2d,
    out: Conv2d,
}

impl TemporalPredictor {
    pub fn new(b: &mut Builder<'_>, spec: &PredictorSpec) -> Result<Self> {
        if !spec.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "predictor needs an image size divisible by 4, got {}",
                spec.image_size
            )));
        }
        let c = spec.base_channels;
        let same = ConvGeometry::same(3);
        let down = ConvGeometry {
            kernel: 3,
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        Ok(TemporalPredictor {
            spec: spec.clone(),
            enc0: Conv2d::new(b, "enc0", 6, c, same)?,
            enc1: Conv2d::new(b, "enc1", c, 2 * c, down)?,
            enc2: Conv2d::new(b, "enc2", 2 * c, 4 * c, down)?,
            up1: ConvTranspose2d::upsample(b, "up1", 4 * c, 2 * c)?,
            dec1: Conv2d::new(b, "dec1", 4 * c, 2 * c, same)?,
            up0: ConvTranspose2d::upsample(b, "up0", 2 * c, c)?,
            dec0: Conv2d::new(b, "dec0", 2 * c, c, same)?,
            out: Conv2d::new(b, "out", c, 3, same)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, prev: &Var, curr: &Var) -> Result<Var> {
        check_image("temporal_predictor_forward", prev, self.spec.image_size)?;
        check_image("temporal_predictor_forward", curr, self.spec.image_size)?;
        let x = g.concat(&[prev.clone(), curr.clone()])?;
        let block = |g: &mut Graph, conv: &Conv2d, h: &Var| -> Result<Var> {
            let h = conv.forward(g, ps, h)?;
            let h = g.instance_norm(&h, NORM_EPS);
            Ok(g.relu(&h))
        };
        let e0 = block(g, &self.enc0, &x)?;
        let e1 = block(g, &self.enc1, &e0)?;
        let e2 = block(g, &self.enc2, &e1)?;
        let u1 = self.up1.forward(g, ps, &e2)?;
        let u1 = g.instance_norm(&u1, NORM_EPS);
        let u1 = g.relu(&u1);
        let d1 = g.concat(&[u1, e1])?;
        let d1 = block(g, &self.dec1, &d1)?;
        let u0 = self.up0.forward(g, ps, &d1)?;
        let u0 = g.instance_norm(&u0, NORM_EPS);
        let u0 = g.relu(&u0);
        let d0 = g.concat(&[u0, e0])?;
        let d0 = block(g, &self.dec0, &d0)?;
        let out = self.out.forward(g, ps, &d0)?;
        Ok(g.tanh(&out))
    }
}
