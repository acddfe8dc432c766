//! Enumeration of the warping-generator ablation runs: offset-network depth,
//! number of warping layers, and time gap, each varied with the others fixed.

use serde::{Deserialize, Serialize};

use crate::config::{Variant, VariantConfig};
use crate::error::{Error, Result};

pub const ABLATION_EPOCHS: usize = 300;
pub const ABLATION_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    OffsetDepth,
    WarpingLayers,
    TimeGap,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::OffsetDepth, Axis::WarpingLayers, Axis::TimeGap];

    pub fn key(self) -> &'static str {
        match self {
            Axis::OffsetDepth => "offset_depth",
            Axis::WarpingLayers => "warping_layers",
            Axis::TimeGap => "time_gap",
        }
    }

    fn apply(self, cfg: &mut VariantConfig, value: usize) {
        match self {
            Axis::OffsetDepth => cfg.offset_depth = value,
            Axis::WarpingLayers => {
                cfg.warping_layers = value;
                cfg.dilations = None;
            }
            Axis::TimeGap => cfg.time_gap = value,
        }
    }
}

/// Values to try per axis. Axes are swept one at a time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_depth: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warping_layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_gap: Option<Vec<usize>>,
}

impl Default for Sweep {
    /// Depth {6, 8, 10}, warping layers 1..=5, time gap 1..=5.
    fn default() -> Self {
        Sweep {
            offset_depth: Some(vec![6, 8, 10]),
            warping_layers: Some((1..=5).collect()),
            time_gap: Some((1..=5).collect()),
        }
    }
}

impl Sweep {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Sweep = toml::from_str(text).map_err(|e| {
            let valid: Vec<_> = Axis::ALL.iter().map(|a| a.key()).collect();
            Error::Config(format!("{e}; valid axes: {}", valid.join(", ")))
        })?;
        let axes = s.axes();
        if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::Config("sweep lists no values".into()));
        }
        Ok(s)
    }

    /// Listed axes in sweep order.
    pub fn axes(&self) -> Vec<(Axis, &[usize])> {
        [
            (Axis::OffsetDepth, &self.offset_depth),
            (Axis::WarpingLayers, &self.warping_layers),
            (Axis::TimeGap, &self.time_gap),
        ]
        .into_iter()
        .filter_map(|(a, v)| v.as_deref().map(|v| (a, v)))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub axis: Axis,
    pub value: usize,
    pub config: VariantConfig,
}

/// Training schedule of the ablation study applied to `base`.
pub fn ablation_base(base: &VariantConfig) -> VariantConfig {
    VariantConfig {
        variant: Variant::Wait,
        epochs: ABLATION_EPOCHS,
        batch_size: ABLATION_BATCH,
        ..base.clone()
    }
}

/// One validated config per (axis, value), in axis order.
pub fn plan(base: &VariantConfig, sweep: &Sweep) -> Result<Vec<AblationRun>> {
    let base = ablation_base(base);
    let mut runs = Vec::new();
    for (axis, values) in sweep.axes() {
        for &value in values {
            let mut config = base.clone();
            axis.apply(&mut config, value);
            config
                .validate()
                .map_err(|e| Error::Config(format!("{}={value}: {e}", axis.key())))?;
            runs.push(AblationRun {
                name: format!("{}_{value}", axis.key()),
                axis,
                value,
                config,
            });
        }
    }
    Ok(runs)
}
