//! Training objectives. Every reduction is a mean over all elements, so loss
//! weights do not depend on resolution or batch size.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generators::{PlainGenerator, SourceGenerator, TemporalPredictor};
use crate::nn::ParamStore;

/// Mean absolute difference.
pub fn l1(g: &mut Graph, a: &Var, b: &Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(&d);
    Ok(g.mean(&d))
}

/// `mean |x - G_Y(G_X(x))|`.
pub fn cycle_loss(g: &mut Graph, x: &Var, x_rec: &Var) -> Result<Var> {
    l1(g, x, x_rec)
}

/// `mean |y - G(y)|` for a generator fed an image of its own output domain.
pub fn identity_loss(g: &mut Graph, y: &Var, y_mapped: &Var) -> Result<Var> {
    l1(g, y, y_mapped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `mean((s - target)^2)`.
    #[default]
    LeastSquares,
    /// Binary cross-entropy on raw scores: `mean(softplus(s) - target * s)`.
    Log,
}

pub fn adversarial_loss(
    g: &mut Graph,
    scores: &Var,
    target_is_real: bool,
    form: AdversarialForm,
) -> Result<Var> {
    if scores.value().iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("discriminator produced NaN scores".into()));
    }
    let target = if target_is_real { 1.0 } else { 0.0 };
    Ok(match form {
        AdversarialForm::LeastSquares => {
            let d = g.shift(scores, -target);
            let d = g.square(&d);
            g.mean(&d)
        }
        AdversarialForm::Log => {
            let sp = g.softplus(scores);
            let t = g.scale(scores, target);
            let d = g.sub(&sp, &t)?;
            g.mean(&d)
        }
    })
}

/// `mean |(x_t - x_aux) - (y_t - y_aux)|`: output differences should follow
/// input differences.
pub fn temporal_diff_loss(
    g: &mut Graph,
    x_t: &Var,
    x_aux: &Var,
    y_t: &Var,
    y_aux: &Var,
) -> Result<Var> {
    let dx = g.sub(x_t, x_aux)?;
    let dy = g.sub(y_t, y_aux)?;
    l1(g, &dx, &dy)
}

/// `mean |y_t - warp(y_next, flow)|` with `flow` mapping frame-t pixels into
/// frame t+1 (backward-warping convention). No occlusion mask is applied.
pub fn flow_warp_loss(g: &mut Graph, y_t: &Var, y_next: &Var, flow: &Var) -> Result<Var> {
    let warped = g.flow_warp(y_next, flow)?;
    l1(g, y_t, &warped)
}

/// Networks used by the recycle objectives.
pub struct RecycleNets<'a> {
    pub g_x: &'a SourceGenerator,
    pub g_y: &'a PlainGenerator,
    pub p_x: Option<&'a TemporalPredictor>,
    pub p_y: Option<&'a TemporalPredictor>,
}

impl<'a> RecycleNets<'a> {
    fn predictors(&self) -> Result<(&'a TemporalPredictor, &'a TemporalPredictor)> {
        match (self.p_x, self.p_y) {
            (Some(px), Some(py)) => Ok((px, py)),
            _ => Err(Error::Config(
                "recycle losses need both temporal predictors".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// `(recurrent, recycle)` for one domain's consecutive triple.
///
/// Source domain: `recurrent = |P_X(x_prev, x_curr) - x_next|`,
/// `recycle = |x_next - G_Y(P_Y(G_X(x_prev), G_X(x_curr)))|`. The target
/// domain swaps the roles of the generators and predictors.
pub fn recycle_losses(
    g: &mut Graph,
    ps: &ParamStore,
    nets: &RecycleNets<'_>,
    domain: Domain,
    prev: &Var,
    curr: &Var,
    next: &Var,
) -> Result<(Var, Var)> {
    let (p_x, p_y) = nets.predictors()?;
    let (own, other) = match domain {
        Domain::Source => (p_x, p_y),
        Domain::Target => (p_y, p_x),
    };
    let predicted = own.forward(g, ps, prev, curr)?;
    let recurrent = l1(g, &predicted, next)?;
    let (a, b) = match domain {
        Domain::Source => (
            nets.g_x.translate(g, ps, prev, None)?,
            nets.g_x.translate(g, ps, curr, None)?,
        ),
        Domain::Target => (
            nets.g_y.forward(g, ps, prev)?,
            nets.g_y.forward(g, ps, curr)?,
        ),
    };
    let predicted_other = other.forward(g, ps, &a, &b)?;
    let back = match domain {
        Domain::Source => nets.g_y.forward(g, ps, &predicted_other)?,
        Domain::Target => nets.g_x.translate(g, ps, &predicted_other, None)?,
    };
    let recycle = l1(g, next, &back)?;
    Ok((recurrent, recycle))
}

/// Loss multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub temp_diff: f64,
    pub flow_warp: f64,
    pub recurrent: f64,
    pub recycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            cycle: 10.0,
            identity: 5.0,
            temp_diff: 1.0,
            flow_warp: 1.0,
            recurrent: 10.0,
            recycle: 10.0,
        }
    }
}

/// Named scalars of one training step. Components a variant does not use are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "adv_G")]
    pub adv_g: f64,
    #[serde(rename = "adv_D")]
    pub adv_d: f64,
    pub cycle: f64,
    pub identity: f64,
    pub temp_diff: f64,
    pub flow_warp: f64,
    pub recycle: f64,
    pub recurrent: f64,
    #[serde(rename = "total_G")]
    pub total_g: f64,
    #[serde(rename = "total_D")]
    pub total_d: f64,
}

impl LossReport {
    /// Weighted generator objective from the individual components.
    pub fn weighted_generator_total(&self, w: &LossWeights) -> f64 {
        w.adversarial * self.adv_g
            + w.cycle * self.cycle
            + w.identity * self.identity
            + w.temp_diff * self.temp_diff
            + w.flow_warp * self.flow_warp
            + w.recurrent * self.recurrent
            + w.recycle * self.recycle
    }

    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("adv_G", self.adv_g),
            ("adv_D", self.adv_d),
            ("cycle", self.cycle),
            ("identity", self.identity),
            ("temp_diff", self.temp_diff),
            ("flow_warp", self.flow_warp),
            ("recycle", self.recycle),
            ("recurrent", self.recurrent),
            ("total_G", self.total_g),
            ("total_D", self.total_d),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }
}
