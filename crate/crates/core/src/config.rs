//! Run configuration, read from and written to TOML.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{
    BackboneSpec, DiscriminatorSpec, OffsetNetworkSpec, PredictorSpec, WaitSpec,
    WarpingStageSpec, DEFAULT_DILATIONS,
};
use crate::losses::{AdversarialForm, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cyclegan,
    CycleganTemp,
    OpticalFlowWarp,
    Recyclegan,
    Recycleganv2,
    Wait,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cyclegan,
        Variant::CycleganTemp,
        Variant::OpticalFlowWarp,
        Variant::Recyclegan,
        Variant::Recycleganv2,
        Variant::Wait,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Cyclegan => "cyclegan",
            Variant::CycleganTemp => "cyclegan_temp",
            Variant::OpticalFlowWarp => "optical_flow_warp",
            Variant::Recyclegan => "recyclegan",
            Variant::Recycleganv2 => "recycleganv2",
            Variant::Wait => "wait",
        }
    }

    pub fn parse(key: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == key)
            .ok_or_else(|| {
                let valid: Vec<_> = Variant::ALL.iter().map(|v| v.key()).collect();
                Error::Config(format!(
                    "unknown variant {key}; valid variants: {}",
                    valid.join(", ")
                ))
            })
    }

    /// Whether the source generator takes an auxiliary frame.
    pub fn uses_warping_generator(self) -> bool {
        self == Variant::Wait
    }

    pub fn uses_predictors(self) -> bool {
        matches!(self, Variant::Recyclegan | Variant::Recycleganv2)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    /// Constant for the first half of training, then linear to zero.
    #[default]
    Linear,
    Constant,
}

/// Auxiliary frame used by the warping generator at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceAux {
    /// The reference frame itself.
    #[default]
    Duplicate,
    /// The following frame of the clip (the preceding one for the last frame).
    Neighbor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default = "defaults::source_split")]
    pub source_split: String,
    #[serde(default = "defaults::target_split")]
    pub target_split: String,
    /// Directory of `<from>__<to>.flo` files; required by `optical_flow_warp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            source_split: defaults::source_split(),
            target_split: defaults::target_split(),
            flows: None,
        }
    }
}

mod defaults {
    pub fn source_split() -> String {
        "trainA".into()
    }
    pub fn target_split() -> String {
        "trainB".into()
    }
    pub fn time_gap() -> usize {
        2
    }
    pub fn offset_depth() -> usize {
        8
    }
    pub fn warping_layers() -> usize {
        5
    }
    pub fn lr() -> f64 {
        0.0008
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn epochs() -> usize {
        200
    }
    pub fn image_size() -> usize {
        256
    }
    pub fn channels() -> usize {
        64
    }
    pub fn residual_blocks() -> usize {
        9
    }
    pub fn pool_capacity() -> usize {
        50
    }
    pub fn checkpoint_every() -> usize {
        10
    }
    pub fn sample_frames() -> usize {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::time_gap")]
    pub time_gap: usize,
    #[serde(default = "defaults::offset_depth")]
    pub offset_depth: usize,
    #[serde(default)]
    pub offset_residual: bool,
    #[serde(default = "defaults::warping_layers")]
    pub warping_layers: usize,
    /// Explicit dilations; defaults to the first `warping_layers` of 3, 6, 12, 18, 24.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilations: Option<Vec<usize>>,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Caps iterations per epoch; unset means one full pass over the source split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations_per_epoch: Option<usize>,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::channels")]
    pub base_channels: usize,
    #[serde(default = "defaults::residual_blocks")]
    pub residual_blocks: usize,
    #[serde(default = "defaults::channels")]
    pub disc_channels: usize,
    #[serde(default = "defaults::channels")]
    pub predictor_channels: usize,
    #[serde(default)]
    pub adversarial: AdversarialForm,
    #[serde(default = "defaults::pool_capacity")]
    pub pool_capacity: usize,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,
    /// Source frames rendered into `samples/` at each checkpoint.
    #[serde(default = "defaults::sample_frames")]
    pub sample_frames: usize,
    #[serde(default)]
    pub inference_aux: InferenceAux,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub data: DataConfig,
}

impl VariantConfig {
    /// Defaults for `variant`.
    pub fn new(variant: Variant) -> Self {
        VariantConfig {
            variant,
            seed: 0,
            time_gap: defaults::time_gap(),
            offset_depth: defaults::offset_depth(),
            offset_residual: false,
            warping_layers: defaults::warping_layers(),
            dilations: None,
            lr: defaults::lr(),
            lr_decay: LrDecay::default(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            iterations_per_epoch: None,
            image_size: defaults::image_size(),
            base_channels: defaults::channels(),
            residual_blocks: defaults::residual_blocks(),
            disc_channels: defaults::channels(),
            predictor_channels: defaults::channels(),
            adversarial: AdversarialForm::default(),
            pool_capacity: defaults::pool_capacity(),
            checkpoint_every: defaults::checkpoint_every(),
            sample_frames: defaults::sample_frames(),
            inference_aux: InferenceAux::default(),
            weights: LossWeights::default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: VariantConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            if msg.contains("unknown variant") {
                let valid: Vec<_> = Variant::ALL.iter().map(|v| v.key()).collect();
                Error::Config(format!("{msg}; valid variants: {}", valid.join(", ")))
            } else {
                Error::Config(e.to_string())
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        VariantConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn resolved_dilations(&self) -> Vec<usize> {
        match &self.dilations {
            Some(d) => d.clone(),
            None => DEFAULT_DILATIONS[..self.warping_layers.min(DEFAULT_DILATIONS.len())].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.time_gap == 0 {
            return fail("time_gap must be >= 1".into());
        }
        if self.offset_depth == 0 {
            return fail("offset_depth must be >= 1".into());
        }
        if self.warping_layers == 0 {
            return fail("warping_layers must be >= 1".into());
        }
        match &self.dilations {
            Some(d) if d.len() != self.warping_layers => {
                return fail(format!(
                    "dilations lists {} values for {} warping layers",
                    d.len(),
                    self.warping_layers
                ))
            }
            None if self.warping_layers > DEFAULT_DILATIONS.len() => {
                return fail(format!(
                    "warping_layers > {} needs explicit dilations",
                    DEFAULT_DILATIONS.len()
                ))
            }
            _ => {}
        }
        self.warping_spec().validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return fail("batch_size, epochs and checkpoint_every must be >= 1".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return fail("iterations_per_epoch must be >= 1".into());
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(4) {
            return fail(format!(
                "image_size must be a multiple of 4 and >= 32, got {}",
                self.image_size
            ));
        }
        if self.base_channels == 0 || self.disc_channels == 0 || self.predictor_channels == 0 {
            return fail("channel counts must be >= 1".into());
        }
        if self.variant == Variant::OpticalFlowWarp && self.data.flows.is_none() {
            return fail("variant optical_flow_warp requires data.flows".into());
        }
        let w = &self.weights;
        let all = [
            w.adversarial,
            w.cycle,
            w.identity,
            w.temp_diff,
            w.flow_warp,
            w.recurrent,
            w.recycle,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            image_size: self.image_size,
            base_channels: self.base_channels,
            downsample_stages: 2,
            residual_blocks: self.residual_blocks,
        }
    }

    pub fn warping_spec(&self) -> WarpingStageSpec {
        WarpingStageSpec {
            dilations: self.resolved_dilations(),
        }
    }

    pub fn wait_spec(&self) -> WaitSpec {
        WaitSpec {
            backbone: self.backbone_spec(),
            offset: OffsetNetworkSpec {
                depth: self.offset_depth,
                residual: self.offset_residual,
            },
            warping: self.warping_spec(),
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            image_size: self.image_size,
            base_channels: self.disc_channels,
        }
    }

    pub fn predictor_spec(&self) -> PredictorSpec {
        PredictorSpec {
            image_size: self.image_size,
            base_channels: self.predictor_channels,
        }
    }
}

/// Learning rate at `epoch` (0-based).
pub fn lr_schedule(epoch: usize, cfg: &VariantConfig) -> f64 {
    match cfg.lr_decay {
        LrDecay::Constant => cfg.lr,
        LrDecay::Linear => {
            let total = cfg.epochs as f64;
            let half = total / 2.0;
            let e = epoch as f64;
            if e <= half {
                cfg.lr
            } else {
                cfg.lr * ((total - e) / (total - half)).max(0.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = VariantConfig::from_toml("variant = \"wait\"").unwrap();
        assert_eq!(c.lr, 0.0008);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.epochs, 200);
        assert_eq!(c.time_gap, 2);
        assert_eq!(c.offset_depth, 8);
        assert_eq!(c.resolved_dilations(), vec![3, 6, 12, 18, 24]);
        assert_eq!(c, VariantConfig::new(Variant::Wait));
    }

    #[test]
    fn schedule_points() {
        let c = VariantConfig::new(Variant::Wait);
        assert_eq!(lr_schedule(0, &c), 0.0008);
        assert_eq!(lr_schedule(100, &c), 0.0008);
        assert!((lr_schedule(150, &c) - 0.0004).abs() < 1e-15);
        assert_eq!(lr_schedule(200, &c), 0.0);
        let constant = VariantConfig {
            lr_decay: LrDecay::Constant,
            ..c
        };
        assert_eq!(lr_schedule(199, &constant), 0.0008);
    }

    #[test]
    fn rejects_unknown_keys_and_variants() {
        let e = VariantConfig::from_toml("variant = \"wait\"\noffset_dpeth = 6").unwrap_err();
        assert!(e.to_string().contains("offset_dpeth"));
        let e = VariantConfig::from_toml("variant = \"waitt\"").unwrap_err();
        assert!(e.to_string().contains("recycleganv2"), "{e}");
        assert!(Variant::parse("nope").is_err());
        assert_eq!(Variant::parse("cyclegan_temp").unwrap(), Variant::CycleganTemp);
    }

    #[test]
    fn variant_requirements() {
        assert!(VariantConfig::from_toml("variant = \"optical_flow_warp\"").is_err());
        let ok = "variant = \"optical_flow_warp\"\n[data]\nflows = \"flows\"";
        assert!(VariantConfig::from_toml(ok).is_ok());
        assert!(VariantConfig::from_toml("variant = \"wait\"\nwarping_layers = 6").is_err());
        assert!(VariantConfig::from_toml("variant = \"wait\"\nwarping_layers = 2\ndilations = [2]").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = VariantConfig::new(Variant::Recycleganv2);
        c.dilations = None;
        c.warping_layers = 3;
        c.iterations_per_epoch = Some(7);
        c.weights.cycle = 2.5;
        c.data.root = Some("data/as".into());
        let again = VariantConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_toml(), c.to_toml());
    }
}
