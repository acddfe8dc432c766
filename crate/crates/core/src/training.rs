//! Models, optimizers, per-variant training steps, the training loop, and
//! video inference.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::checkpoint::{architecture_hash, Checkpoint, CheckpointMeta};
use crate::config::{lr_schedule, InferenceAux, Variant, VariantConfig};
use crate::data_pipeline::{
    sample_delta, stack, Dataset, Frame, FrameSequence, ImageSet, TensorImage,
};
use crate::error::{Error, Result};
use crate::generators::{
    Discriminator, PlainGenerator, SourceGenerator, TemporalPredictor, WaitGenerator,
};
use crate::losses::{
    adversarial_loss, cycle_loss, flow_warp_loss, identity_loss, recycle_losses,
    temporal_diff_loss, Domain, LossReport, RecycleNets,
};
use crate::metrics::FlowDir;
use crate::nn::{Builder, Init, ParamId, ParamStore};
use crate::warping_ops::FlowField;

/// Parameter-name prefixes of the generator-side networks.
pub const GENERATOR_PREFIXES: [&str; 4] = ["g_x.", "g_y.", "p_x.", "p_y."];
/// Parameter-name prefixes of the discriminators.
pub const DISCRIMINATOR_PREFIXES: [&str; 2] = ["d_x.", "d_y."];

pub struct Nets {
    pub g_x: SourceGenerator,
    pub g_y: PlainGenerator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub p_x: Option<TemporalPredictor>,
    pub p_y: Option<TemporalPredictor>,
}

/// All networks of one variant and their parameters.
pub struct Model {
    pub config: VariantConfig,
    pub params: ParamStore,
    pub nets: Nets,
}

impl Model {
    /// Seeded initialization from `config.seed`.
    pub fn new(config: &VariantConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(config.seed));
        let backbone = config.backbone_spec();
        let g_x = if config.variant.uses_warping_generator() {
            let mut b = Builder::new(&mut ps, &mut init, "g_x");
            SourceGenerator::Wait(WaitGenerator::new(&mut b, &config.wait_spec())?)
        } else {
            let mut b = Builder::new(&mut ps, &mut init, "g_x");
            SourceGenerator::Plain(PlainGenerator::new(&mut b, &backbone)?)
        };
        let g_y = PlainGenerator::new(&mut Builder::new(&mut ps, &mut init, "g_y"), &backbone)?;
        let disc = config.discriminator_spec();
        let d_x = Discriminator::new(&mut Builder::new(&mut ps, &mut init, "d_x"), &disc)?;
        let d_y = Discriminator::new(&mut Builder::new(&mut ps, &mut init, "d_y"), &disc)?;
        let (p_x, p_y) = if config.variant.uses_predictors() {
            let spec = config.predictor_spec();
            (
                Some(TemporalPredictor::new(&mut Builder::new(&mut ps, &mut init, "p_x"), &spec)?),
                Some(TemporalPredictor::new(&mut Builder::new(&mut ps, &mut init, "p_y"), &spec)?),
            )
        } else {
            (None, None)
        };
        Ok(Model {
            config: config.clone(),
            params: ps,
            nets: Nets {
                g_x,
                g_y,
                d_x,
                d_y,
                p_x,
                p_y,
            },
        })
    }

    /// Rebuilds the model recorded in `ckpt` and loads its parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Model::new(&ckpt.meta.config)?;
        ckpt.restore_params(&mut m.params)?;
        Ok(m)
    }

    pub fn architecture_hash(&self) -> String {
        architecture_hash(&self.params)
    }

    fn ids_with(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| prefixes.iter().any(|p| self.params.name(id).starts_with(p)))
            .collect()
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.ids_with(&GENERATOR_PREFIXES)
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.ids_with(&DISCRIMINATOR_PREFIXES)
    }

    /// Source-to-target translation of a batch without recording gradients.
    pub fn translate_batch(&self, x: &Tensor, aux: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let av = aux.map(|a| g.constant(a.clone()));
        let out = self
            .nets
            .g_x
            .translate(&mut g, &self.params, &xv, av.as_ref())?;
        Ok(out.value().clone())
    }

    pub fn translate(&self, x: &TensorImage, aux: Option<&TensorImage>) -> Result<TensorImage> {
        let xb = stack(&[x])?;
        let ab = aux.map(|a| stack(&[a])).transpose()?;
        let out = self.translate_batch(&xb, ab.as_ref())?;
        let img = out.index_axis(Axis(0), 0).to_owned();
        TensorImage::new(img.mapv(|v| v.clamp(-1.0, 1.0)))
    }
}

/// Adam with per-parameter first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    state: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// Updates every parameter in `ids` that received a gradient.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &Gradients, ids: &[ParamId], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for &id in ids {
            let Some(grad) = grads.param(id) else { continue };
            let (m, v) = self.state.entry(id).or_insert_with(|| {
                (Tensor::zeros(grad.raw_dim()), Tensor::zeros(grad.raw_dim()))
            });
            Zip::from(ps.get_mut(id))
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }

    fn export(&self, tag: &str, ps: &ParamStore, out: &mut Vec<(String, Tensor)>) {
        for (id, (m, v)) in &self.state {
            out.push((format!("{tag}.m.{}", ps.name(*id)), m.clone()));
            out.push((format!("{tag}.v.{}", ps.name(*id)), v.clone()));
        }
    }

    fn import(&mut self, tag: &str, ps: &ParamStore, ckpt: &Checkpoint, steps: u64) -> Result<()> {
        self.steps = steps;
        self.state.clear();
        for id in ps.ids() {
            let name = ps.name(id);
            let m = ckpt.tensor(&format!("{tag}.m.{name}"));
            let v = ckpt.tensor(&format!("{tag}.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    self.state.insert(id, (m.clone(), v.clone()));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "incomplete optimizer state for {name}"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// History of generated images shown to the discriminators.
#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Array3<f64>>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `image` and returns it, or once full, with probability 1/2
    /// swaps it for a random stored image and returns that instead.
    pub fn query_one<R: Rng + ?Sized>(&mut self, image: Array3<f64>, rng: &mut R) -> Array3<f64> {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if rng.random::<f64>() < 0.5 {
            let i = rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], image)
        } else {
            image
        }
    }

    pub fn query<R: Rng + ?Sized>(&mut self, batch: &Tensor, rng: &mut R) -> Tensor {
        let mut out = batch.clone();
        for (i, img) in batch.outer_iter().enumerate() {
            let picked = self.query_one(img.to_owned(), rng);
            out.index_axis_mut(Axis(0), i).assign(&picked);
        }
        out
    }
}

/// Counts of temporal loss evaluations, by domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounters {
    pub source_temporal: u64,
    pub target_temporal: u64,
    /// Batches that read ordered target-domain frames.
    pub target_sequence_reads: u64,
}

impl LossCounters {
    pub fn temporal_total(&self) -> u64 {
        self.source_temporal + self.target_temporal
    }
}

/// Precomputed flows, looked up by `(from, to)` frame stems.
pub enum FlowSource {
    Dir(FlowDir),
    Memory(HashMap<(String, String), FlowField>),
}

impl FlowSource {
    pub fn get(&self, from: &str, to: &str) -> Result<FlowField> {
        match self {
            FlowSource::Dir(d) => d.load(from, to).map_err(|e| match e {
                Error::Io { path, .. } => {
                    Error::Data(format!("missing flow file {}", path.display()))
                }
                other => other,
            }),
            FlowSource::Memory(m) => m
                .get(&(from.to_string(), to.to_string()))
                .cloned()
                .ok_or_else(|| Error::Data(format!("missing flow {from} -> {to}"))),
        }
    }

    pub fn contains(&self, from: &str, to: &str) -> bool {
        match self {
            FlowSource::Dir(d) => d.path(from, to).is_file(),
            FlowSource::Memory(m) => m.contains_key(&(from.to_string(), to.to_string())),
        }
    }
}

/// Source clips, target images, and optional flows for one training run.
pub struct TrainingData {
    pub source: Vec<FrameSequence>,
    pub target: ImageSet,
    /// Ordered target frames, read only by the `recyclegan` variant.
    pub target_clips: Vec<FrameSequence>,
    pub flows: Option<FlowSource>,
}

fn target_as_clip(target: &ImageSet) -> Result<FrameSequence> {
    let frames = target
        .images
        .iter()
        .enumerate()
        .map(|(i, h)| Frame {
            handle: h.clone(),
            timestamp: i as u64,
        })
        .collect();
    FrameSequence::new("target", 1, frames)
}

impl TrainingData {
    /// Target images double as one ordered clip in listing order.
    pub fn new(source: Vec<FrameSequence>, target: ImageSet) -> Result<Self> {
        let target_clips = vec![target_as_clip(&target)?];
        Ok(TrainingData {
            source,
            target,
            target_clips,
            flows: None,
        })
    }

    pub fn with_flows(mut self, flows: FlowSource) -> Self {
        self.flows = Some(flows);
        self
    }

    /// Loads the splits named in `cfg.data` from a prepared dataset root.
    pub fn from_config(cfg: &VariantConfig) -> Result<Self> {
        let root = cfg
            .data
            .root
            .as_ref()
            .ok_or_else(|| Error::Config("data.root is not set".into()))?;
        let ds = Dataset::open(root)?;
        let source = ds.clips(&cfg.data.source_split)?;
        let target = ds.images(&cfg.data.target_split)?;
        let target_clips = {
            let clips = ds.clips(&cfg.data.target_split)?;
            if clips.is_empty() {
                vec![target_as_clip(&target)?]
            } else {
                clips
            }
        };
        Ok(TrainingData {
            source,
            target,
            target_clips,
            flows: cfg.data.flows.as_ref().map(|p| FlowSource::Dir(FlowDir::new(p))),
        })
    }
}

/// Position of a reference frame: `(clip, frame)`.
pub type FramePos = (usize, usize);

/// One training batch; frame tensors are `(N, 3, S, S)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    /// Auxiliary frame (`t + delta`), or `t + 1` for the flow and predictor variants.
    pub x_aux: Option<Tensor>,
    /// `t + 2` for the predictor variants.
    pub x_next: Option<Tensor>,
    /// Flow mapping frame-`t` pixels into frame `t + 1`.
    pub flow: Option<Tensor>,
    pub y: Tensor,
    /// Target frames `t + 1`, `t + 2` (`recyclegan` only).
    pub y_seq: Option<(Tensor, Tensor)>,
    pub refs: Vec<FramePos>,
    pub deltas: Vec<i64>,
    pub target_refs: Vec<usize>,
}

/// Builds batches according to a variant's pairing rule.
pub struct Sampler<'a> {
    cfg: &'a VariantConfig,
    data: &'a TrainingData,
}

impl<'a> Sampler<'a> {
    pub fn new(cfg: &'a VariantConfig, data: &'a TrainingData) -> Self {
        Sampler { cfg, data }
    }

    /// Frames needed after the reference frame.
    fn lookahead(&self) -> usize {
        match self.cfg.variant {
            Variant::Cyclegan | Variant::Wait | Variant::CycleganTemp => 0,
            Variant::OpticalFlowWarp => 1,
            Variant::Recyclegan | Variant::Recycleganv2 => 2,
        }
    }

    /// Valid reference positions, in clip order.
    pub fn positions(&self) -> Vec<FramePos> {
        let min_len = match self.cfg.variant {
            Variant::Cyclegan => 1,
            Variant::Wait | Variant::CycleganTemp => 2,
            _ => self.lookahead() + 1,
        };
        let mut out = Vec::new();
        for (c, clip) in self.data.source.iter().enumerate() {
            if clip.len() < min_len {
                continue;
            }
            for t in 0..clip.len() - self.lookahead() {
                out.push((c, t));
            }
        }
        out
    }

    /// Shuffled reference positions of one epoch, chunked into batches.
    pub fn epoch_plan<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Vec<FramePos>>> {
        let mut pos = self.positions();
        if pos.is_empty() {
            return Err(Error::Data(format!(
                "no usable source frames for variant {}",
                self.cfg.variant
            )));
        }
        pos.shuffle(rng);
        let mut plan: Vec<Vec<FramePos>> =
            pos.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect();
        if let Some(cap) = self.cfg.iterations_per_epoch {
            plan.truncate(cap);
        }
        Ok(plan)
    }

    fn load(&self, clip: usize, t: usize) -> Result<TensorImage> {
        self.data.source[clip].load(t, self.cfg.image_size)
    }

    fn flow(&self, clip: usize, t: usize) -> Result<Tensor> {
        let flows = self
            .data
            .flows
            .as_ref()
            .ok_or_else(|| Error::Config("variant optical_flow_warp needs flows".into()))?;
        let seq = &self.data.source[clip];
        let f = flows.get(&seq.frame_stem(t)?, &seq.frame_stem(t + 1)?)?;
        let s = self.cfg.image_size;
        Ok(f.resized(s, s).to_batch())
    }

    /// Checks that every flow the variant will read exists.
    pub fn check_flows(&self) -> Result<()> {
        if self.cfg.variant != Variant::OpticalFlowWarp {
            return Ok(());
        }
        let flows = self
            .data
            .flows
            .as_ref()
            .ok_or_else(|| Error::Config("variant optical_flow_warp needs flows".into()))?;
        let mut missing = Vec::new();
        for (c, t) in self.positions() {
            let seq = &self.data.source[c];
            let (a, b) = (seq.frame_stem(t)?, seq.frame_stem(t + 1)?);
            if !flows.contains(&a, &b) {
                missing.push(format!("{a} -> {b}"));
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "{} missing flow(s): {}",
                missing.len(),
                missing.join(", ")
            )))
        }
    }

    pub fn batch<R: Rng + ?Sized>(
        &self,
        refs: &[FramePos],
        rng: &mut R,
        counters: &mut LossCounters,
    ) -> Result<Batch> {
        let s = self.cfg.image_size;
        let variant = self.cfg.variant;
        let mut x = Vec::new();
        let mut aux = Vec::new();
        let mut next = Vec::new();
        let mut flows = Vec::new();
        let mut deltas = Vec::new();
        for &(c, t) in refs {
            x.push(self.load(c, t)?);
            match variant {
                Variant::Wait | Variant::CycleganTemp => {
                    let d = sample_delta(self.data.source[c].len(), t, self.cfg.time_gap, rng)?;
                    aux.push(self.load(c, (t as i64 + d) as usize)?);
                    deltas.push(d);
                }
                Variant::OpticalFlowWarp => {
                    aux.push(self.load(c, t + 1)?);
                    flows.push(self.flow(c, t)?);
                    deltas.push(1);
                }
                Variant::Recyclegan | Variant::Recycleganv2 => {
                    aux.push(self.load(c, t + 1)?);
                    next.push(self.load(c, t + 2)?);
                    deltas.push(1);
                }
                Variant::Cyclegan => {}
            }
        }
        let mut y = Vec::new();
        let mut y1 = Vec::new();
        let mut y2 = Vec::new();
        let mut target_refs = Vec::new();
        if variant == Variant::Recyclegan {
            counters.target_sequence_reads += 1;
            let tpos: Vec<FramePos> = self
                .data
                .target_clips
                .iter()
                .enumerate()
                .filter(|(_, c)| c.len() >= 3)
                .flat_map(|(ci, c)| (0..c.len() - 2).map(move |t| (ci, t)))
                .collect();
            if tpos.is_empty() {
                return Err(Error::Data(
                    "recyclegan needs an ordered target clip of at least 3 frames".into(),
                ));
            }
            for _ in refs {
                let (ci, t) = tpos[rng.random_range(0..tpos.len())];
                let clip = &self.data.target_clips[ci];
                y.push(clip.load(t, s)?);
                y1.push(clip.load(t + 1, s)?);
                y2.push(clip.load(t + 2, s)?);
                target_refs.push(t);
            }
        } else {
            for _ in refs {
                let i = self.data.target.sample_index(rng)?;
                y.push(self.data.target.images[i].load(s)?);
                target_refs.push(i);
            }
        }
        let st = |v: &[TensorImage]| -> Result<Option<Tensor>> {
            if v.is_empty() {
                Ok(None)
            } else {
                stack(&v.iter().collect::<Vec<_>>()).map(Some)
            }
        };
        let flow = if flows.is_empty() {
            None
        } else {
            let views: Vec<_> = flows.iter().map(|f| f.view()).collect();
            Some(ndarray::concatenate(Axis(0), &views).expect("flows share a shape"))
        };
        Ok(Batch {
            x: st(&x)?.expect("non-empty batch"),
            x_aux: st(&aux)?,
            x_next: st(&next)?,
            flow,
            y: st(&y)?.expect("non-empty batch"),
            y_seq: match (st(&y1)?, st(&y2)?) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            },
            refs: refs.to_vec(),
            deltas,
            target_refs,
        })
    }
}

/// Model plus optimizer and pool state.
pub struct TrainState {
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub pool_x: ImagePool,
    pub pool_y: ImagePool,
    pub counters: LossCounters,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
}

fn require<'b>(t: &'b Option<Tensor>, what: &str, variant: Variant) -> Result<&'b Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::Data(format!("variant {variant} batch is missing {what}")))
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (w, v) in terms {
        let scaled = g.scale(v, *w);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(&t, &scaled)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.scalar(0.0)))
}

/// Generated images of a generator update, reused by the discriminator update.
#[derive(Debug, Clone)]
pub struct Fakes {
    pub fake_y: Tensor,
    pub fake_x: Tensor,
}

impl TrainState {
    pub fn new(config: &VariantConfig) -> Result<Self> {
        Ok(TrainState {
            model: Model::new(config)?,
            opt_g: Adam::new(),
            opt_d: Adam::new(),
            pool_x: ImagePool::new(config.pool_capacity),
            pool_y: ImagePool::new(config.pool_capacity),
            counters: LossCounters::default(),
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.model.config
    }

    /// One generator update. The returned report has the generator-side fields set.
    pub fn generator_step(&mut self, batch: &Batch, lr: f64) -> Result<(LossReport, Fakes)> {
        let cfg = self.model.config.clone();
        let variant = cfg.variant;
        let w = cfg.weights;
        let form = cfg.adversarial;
        let mut report = LossReport::default();
        let grads;
        let fakes;
        {
            let ps = &self.model.params;
            let nets = &self.model.nets;
            let mut g = Graph::new();
            let x = g.constant(batch.x.clone());
            let y = g.constant(batch.y.clone());
            let x_aux = batch.x_aux.as_ref().map(|a| g.constant(a.clone()));

            let fake_y = match variant {
                Variant::Wait => {
                    require(&batch.x_aux, "auxiliary frames", variant)?;
                    nets.g_x.translate(&mut g, ps, &x, x_aux.as_ref())?
                }
                _ => nets.g_x.translate(&mut g, ps, &x, None)?,
            };
            let rec_x = nets.g_y.forward(&mut g, ps, &fake_y)?;
            let fake_x = nets.g_y.forward(&mut g, ps, &y)?;
            let rec_y = nets.g_x.translate(&mut g, ps, &fake_x, None)?;

            let s_y = nets.d_y.forward(&mut g, ps, &fake_y)?;
            let s_x = nets.d_x.forward(&mut g, ps, &fake_x)?;
            let a1 = adversarial_loss(&mut g, &s_y, true, form)?;
            let a2 = adversarial_loss(&mut g, &s_x, true, form)?;
            let adv = g.add(&a1, &a2)?;
            let c1 = cycle_loss(&mut g, &x, &rec_x)?;
            let c2 = cycle_loss(&mut g, &y, &rec_y)?;
            let cyc = g.add(&c1, &c2)?;
            report.adv_g = adv.item();
            report.cycle = cyc.item();
            let mut terms = vec![(w.adversarial, adv), (w.cycle, cyc)];

            if w.identity > 0.0 {
                let id_y = nets.g_x.translate(&mut g, ps, &y, None)?;
                let id_x = nets.g_y.forward(&mut g, ps, &x)?;
                let i1 = identity_loss(&mut g, &y, &id_y)?;
                let i2 = identity_loss(&mut g, &x, &id_x)?;
                let idl = g.add(&i1, &i2)?;
                report.identity = idl.item();
                terms.push((w.identity, idl));
            }

            match variant {
                Variant::CycleganTemp => {
                    let xa = x_aux
                        .as_ref()
                        .ok_or_else(|| Error::Data("cyclegan_temp batch has no auxiliary frames".into()))?;
                    let fake_aux = nets.g_x.translate(&mut g, ps, xa, None)?;
                    let l = temporal_diff_loss(&mut g, &x, xa, &fake_y, &fake_aux)?;
                    self.counters.source_temporal += 1;
                    report.temp_diff = l.item();
                    terms.push((w.temp_diff, l));
                }
                Variant::OpticalFlowWarp => {
                    let xn = x_aux
                        .as_ref()
                        .ok_or_else(|| Error::Data("optical_flow_warp batch has no next frames".into()))?;
                    let flow = g.constant(require(&batch.flow, "flows", variant)?.clone());
                    let fake_next = nets.g_x.translate(&mut g, ps, xn, None)?;
                    let l = flow_warp_loss(&mut g, &fake_y, &fake_next, &flow)?;
                    self.counters.source_temporal += 1;
                    report.flow_warp = l.item();
                    terms.push((w.flow_warp, l));
                }
                Variant::Recyclegan | Variant::Recycleganv2 => {
                    let rn = RecycleNets {
                        g_x: &nets.g_x,
                        g_y: &nets.g_y,
                        p_x: nets.p_x.as_ref(),
                        p_y: nets.p_y.as_ref(),
                    };
                    let x1 = x_aux
                        .as_ref()
                        .ok_or_else(|| Error::Data("recycle batch has no t+1 frames".into()))?;
                    let x2 = g.constant(require(&batch.x_next, "t+2 frames", variant)?.clone());
                    let (rec, recy) = recycle_losses(&mut g, ps, &rn, Domain::Source, &x, x1, &x2)?;
                    self.counters.source_temporal += 1;
                    let (mut rec_total, mut recy_total) = (rec, recy);
                    if variant == Variant::Recyclegan {
                        let (y1, y2) = batch.y_seq.as_ref().ok_or_else(|| {
                            Error::Data("recyclegan batch has no ordered target frames".into())
                        })?;
                        let y1 = g.constant(y1.clone());
                        let y2 = g.constant(y2.clone());
                        let (r2, c2) = recycle_losses(&mut g, ps, &rn, Domain::Target, &y, &y1, &y2)?;
                        self.counters.target_temporal += 1;
                        rec_total = g.add(&rec_total, &r2)?;
                        recy_total = g.add(&recy_total, &c2)?;
                    }
                    report.recurrent = rec_total.item();
                    report.recycle = recy_total.item();
                    terms.push((w.recurrent, rec_total));
                    terms.push((w.recycle, recy_total));
                }
                Variant::Cyclegan | Variant::Wait => {}
            }

            let total = weighted_sum(&mut g, &terms)?;
            report.total_g = total.item();
            if !report.total_g.is_finite() {
                return Err(self.nan_error(batch, lr, &report));
            }
            grads = g.backward(&total);
            fakes = Fakes {
                fake_y: fake_y.value().clone(),
                fake_x: fake_x.value().clone(),
            };
        }
        let ids = self.model.generator_ids();
        self.opt_g.step(&mut self.model.params, &grads, &ids, lr);
        Ok((report, fakes))
    }

    /// One update of both discriminators on pooled fakes; returns the D loss.
    pub fn discriminator_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        fakes: &Fakes,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let form = self.model.config.adversarial;
        let pooled_y = self.pool_y.query(&fakes.fake_y, rng);
        let pooled_x = self.pool_x.query(&fakes.fake_x, rng);
        let grads;
        let value;
        {
            let ps = &self.model.params;
            let nets = &self.model.nets;
            let mut g = Graph::new();
            let side = |g: &mut Graph, d: &Discriminator, real: &Tensor, fake: Tensor| -> Result<Var> {
                let r = g.constant(real.clone());
                let f = g.constant(fake);
                let sr = d.forward(g, ps, &r)?;
                let sf = d.forward(g, ps, &f)?;
                let l_real = adversarial_loss(g, &sr, true, form)?;
                let lf = adversarial_loss(g, &sf, false, form)?;
                let sum = g.add(&l_real, &lf)?;
                Ok(g.scale(&sum, 0.5))
            };
            let dy = side(&mut g, &nets.d_y, &batch.y, pooled_y)?;
            let dx = side(&mut g, &nets.d_x, &batch.x, pooled_x)?;
            let total = g.add(&dy, &dx)?;
            value = total.item();
            if !value.is_finite() {
                let report = LossReport {
                    adv_d: value,
                    ..LossReport::default()
                };
                return Err(self.nan_error(batch, lr, &report));
            }
            grads = g.backward(&total);
        }
        let ids = self.model.discriminator_ids();
        self.opt_d.step(&mut self.model.params, &grads, &ids, lr);
        Ok(value)
    }

    /// Generator update, then discriminator update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        lr: f64,
        rng: &mut R,
    ) -> Result<LossReport> {
        let (mut report, fakes) = self.generator_step(batch, lr)?;
        let d = self.discriminator_step(batch, &fakes, lr, rng)?;
        report.adv_d = d;
        report.total_d = d;
        self.iteration += 1;
        Ok(report)
    }

    fn nan_error(&self, batch: &Batch, lr: f64, report: &LossReport) -> Error {
        Error::Numerical(format!(
            "non-finite loss at iteration {} (epoch {}, lr {lr}): source frames {:?}, deltas {:?}, target images {:?}, losses {}",
            self.iteration,
            self.epoch,
            batch.refs,
            batch.deltas,
            batch.target_refs,
            serde_json::to_string(report).unwrap_or_default()
        ))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let ps = &self.model.params;
        let mut tensors: Vec<(String, Tensor)> = ps
            .ids()
            .map(|id| (ps.name(id).to_string(), ps.get(id).clone()))
            .collect();
        self.opt_g.export("adam_g", ps, &mut tensors);
        self.opt_d.export("adam_d", ps, &mut tensors);
        for (tag, pool) in [("pool_x", &self.pool_x), ("pool_y", &self.pool_y)] {
            for (i, img) in pool.images.iter().enumerate() {
                tensors.push((format!("{tag}.{i:04}"), img.clone().insert_axis(Axis(0))));
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                config: self.model.config.clone(),
                architecture: self.model.architecture_hash(),
                epoch: self.epoch,
                iteration: self.iteration,
                generator_steps: self.opt_g.steps,
                discriminator_steps: self.opt_d.steps,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut st = TrainState::new(&ckpt.meta.config)?;
        ckpt.restore_params(&mut st.model.params)?;
        st.opt_g
            .import("adam_g", &st.model.params, ckpt, ckpt.meta.generator_steps)?;
        st.opt_d
            .import("adam_d", &st.model.params, ckpt, ckpt.meta.discriminator_steps)?;
        for (tag, pool) in [("pool_x", &mut st.pool_x), ("pool_y", &mut st.pool_y)] {
            let prefix = format!("{tag}.");
            pool.images = ckpt
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(_, t)| t.index_axis(Axis(0), 0).to_owned())
                .collect();
        }
        st.epoch = ckpt.meta.epoch;
        st.iteration = ckpt.meta.iteration;
        Ok(st)
    }
}

/// One line of `logs/losses.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.checkpoints().join("latest.ckpt")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("logs").join("losses.jsonl")
    }

    pub fn samples(&self, epoch: usize) -> PathBuf {
        self.root.join("samples").join(format!("epoch_{epoch:03}"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/latest.ckpt` when it exists.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub iterations: u64,
    pub last: Option<LossReport>,
    pub counters: LossCounters,
    pub checkpoints: Vec<PathBuf>,
}

/// Per-epoch random stream, independent of how many draws earlier epochs made.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn write_samples(model: &Model, data: &TrainingData, dir: &Path) -> Result<()> {
    let n = model.config.sample_frames;
    if n == 0 {
        return Ok(());
    }
    let Some(clip) = data.source.iter().find(|c| !c.is_empty()) else {
        return Ok(());
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in stylize_video(model, clip, n)?.iter().enumerate() {
        let path = dir.join(format!("sample_{i:02}.png"));
        img.to_rgb8().save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs, writing checkpoints, loss logs and samples under `out`.
pub fn train(
    cfg: &VariantConfig,
    data: &TrainingData,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = RunDir::new(out);
    let sampler = Sampler::new(cfg, data);
    sampler.check_flows()?;
    for d in [run.checkpoints(), run.root.join("logs")] {
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut state = if opts.resume && run.latest().is_file() {
        let ckpt = Checkpoint::load(&run.latest())?;
        if ckpt.meta.config != *cfg {
            return Err(Error::Config(
                "cannot resume: configuration differs from the checkpoint".into(),
            ));
        }
        TrainState::from_checkpoint(&ckpt)?
    } else {
        TrainState::new(cfg)?
    };
    cfg.save(&run.config())?;
    let log_path = run.losses();
    let log_file = if state.iteration > 0 {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let mut summary = TrainSummary {
        epochs: 0,
        iterations: 0,
        last: None,
        counters: LossCounters::default(),
        checkpoints: Vec::new(),
    };
    for epoch in state.epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut rng = epoch_rng(cfg.seed, epoch);
        for refs in sampler.epoch_plan(&mut rng)? {
            let batch = sampler.batch(&refs, &mut rng, &mut state.counters)?;
            let report = state.train_step(&batch, lr, &mut rng)?;
            let rec = LogRecord {
                epoch,
                iteration: state.iteration,
                lr,
                losses: report,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("log record"))
                .map_err(|e| Error::io(&log_path, e))?;
            summary.iterations += 1;
            summary.last = Some(report);
        }
        state.epoch = epoch + 1;
        summary.epochs += 1;
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let ckpt = state.to_checkpoint();
            let path = run.checkpoint(state.epoch);
            ckpt.save(&path)?;
            ckpt.save(&run.latest())?;
            summary.checkpoints.push(path);
            write_samples(&state.model, data, &run.samples(state.epoch))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    summary.counters = state.counters;
    Ok(summary)
}

/// Translates the first `limit` frames of `seq` (all when `limit` is larger),
/// one frame at a time, in order.
pub fn stylize_video(model: &Model, seq: &FrameSequence, limit: usize) -> Result<Vec<TensorImage>> {
    let size = model.config.image_size;
    let n = seq.len().min(limit);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = seq.load(i, size)?;
        let y = if model.config.variant.uses_warping_generator() {
            match model.config.inference_aux {
                InferenceAux::Duplicate => model.translate(&x, None)?,
                InferenceAux::Neighbor => {
                    let j = if i + 1 < seq.len() { i + 1 } else { i.saturating_sub(1) };
                    let aux = seq.load(j, size)?;
                    model.translate(&x, Some(&aux))?
                }
            }
        } else {
            model.translate(&x, None)?
        };
        out.push(y);
    }
    Ok(out)
}

/// Parses `logs/losses.jsonl`.
pub fn read_loss_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn tiny(variant: Variant) -> VariantConfig {
        let mut c = VariantConfig::new(variant);
        c.image_size = 32;
        c.base_channels = 4;
        c.residual_blocks = 1;
        c.disc_channels = 4;
        c.predictor_channels = 4;
        c.offset_depth = 1;
        c.warping_layers = 2;
        c.batch_size = 2;
        c.epochs = 1;
        c.iterations_per_epoch = Some(1);
        if variant == Variant::OpticalFlowWarp {
            c.data.flows = Some("unused".into());
        }
        c
    }

    fn frames(n: usize, seed: u8) -> Vec<RgbImage> {
        (0..n)
            .map(|i| {
                RgbImage::from_fn(32, 32, |x, y| {
                    Rgb([(x * 8) as u8 ^ seed, (y * 8) as u8, (i * 30) as u8])
                })
            })
            .collect()
    }

    fn data() -> TrainingData {
        let clip = FrameSequence::from_images("a", frames(5, 0)).unwrap();
        TrainingData::new(vec![clip], ImageSet::from_images(frames(4, 77))).unwrap()
    }

    #[test]
    fn pool_fills_then_swaps() {
        let mut pool = ImagePool::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = |v: f64| Array3::from_elem((1, 1, 1), v);
        assert_eq!(pool.query_one(img(1.0), &mut rng), img(1.0));
        assert_eq!(pool.query_one(img(2.0), &mut rng), img(2.0));
        assert_eq!(pool.len(), 2);
        for k in 3..20 {
            let r = pool.query_one(img(k as f64), &mut rng);
            assert!(r[[0, 0, 0]] <= k as f64);
            assert_eq!(pool.len(), 2);
        }
        let mut none = ImagePool::new(0);
        assert_eq!(none.query_one(img(5.0), &mut rng), img(5.0));
        assert!(none.is_empty());
    }

    #[test]
    fn positions_follow_pairing_rules() {
        let d = data();
        let count = |v| Sampler::new(&tiny(v), &d).positions().len();
        assert_eq!(count(Variant::Cyclegan), 5);
        assert_eq!(count(Variant::Wait), 5);
        assert_eq!(count(Variant::OpticalFlowWarp), 4);
        assert_eq!(count(Variant::Recyclegan), 3);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut ps = ParamStore::new();
        let id = ps.add("g_x.w", Tensor::from_elem((1, 1, 1, 1), 1.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&ps, id);
        let sq = g.square(&w);
        let loss = g.mean(&sq);
        let grads = g.backward(&loss);
        drop(g);
        let mut adam = Adam::new();
        adam.step(&mut ps, &grads, &[id], 0.1);
        // First Adam step moves by lr * sign(grad) (up to eps).
        assert!((ps.get(id)[[0, 0, 0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn every_variant_takes_a_finite_step() {
        let d = data();
        for v in Variant::ALL {
            let cfg = tiny(v);
            let mut mem = HashMap::new();
            for t in 0..4 {
                let clip = &d.source[0];
                mem.insert(
                    (clip.frame_stem(t).unwrap(), clip.frame_stem(t + 1).unwrap()),
                    FlowField::zeros(32, 32),
                );
            }
            let d = TrainingData {
                source: d.source.clone(),
                target: d.target.clone(),
                target_clips: d.target_clips.clone(),
                flows: Some(FlowSource::Memory(mem)),
            };
            let sampler = Sampler::new(&cfg, &d);
            let mut state = TrainState::new(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let plan = sampler.epoch_plan(&mut rng).unwrap();
            let batch = sampler.batch(&plan[0], &mut rng, &mut state.counters).unwrap();
            let r = state.train_step(&batch, 1e-4, &mut rng).unwrap();
            assert!(r.is_finite(), "{v}");
            assert!(r.cycle > 0.0 && r.adv_d > 0.0, "{v}");
            if v == Variant::Cyclegan || v == Variant::Wait {
                assert_eq!((r.temp_diff, r.flow_warp, r.recycle, r.recurrent), (0.0, 0.0, 0.0, 0.0));
                assert_eq!(state.counters.temporal_total(), 0);
            }
        }
    }

    #[test]
    fn checkpoint_state_round_trip() {
        let cfg = tiny(Variant::Wait);
        let d = data();
        let sampler = Sampler::new(&cfg, &d);
        let mut state = TrainState::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sampler.epoch_plan(&mut rng).unwrap();
        let batch = sampler.batch(&plan[0], &mut rng, &mut state.counters).unwrap();
        state.train_step(&batch, 1e-4, &mut rng).unwrap();
        let ckpt = state.to_checkpoint();
        let back = TrainState::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.to_checkpoint().encode(), ckpt.encode());
        let mut other = tiny(Variant::Wait);
        other.offset_depth = 2;
        let mut wrong = ckpt.clone();
        wrong.meta.config = other;
        assert!(matches!(Model::from_checkpoint(&wrong), Err(Error::Checkpoint(_))));
    }
}
