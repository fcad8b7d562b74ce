//! Reward terms and their gradient-normalized combination.
//!
//! Each term contributes `w_i * g_i / max(||g_i||, floor)` where `g_i` is its gradient
//! with respect to the sample. The norm is a constant during differentiation, so rescaling
//! any reward leaves the combined direction untouched.
//!
//! Implicit terms (classifier-free guidance, density ratio) have no scalar value. Their
//! gradient is evaluated at a forward-diffused copy `x_t = alpha * x + sigma * eps` and
//! pulled back to `x` through `alpha`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream, tag};
use crate::schedule::{alpha, forward_diffuse};
use crate::scorenet::{cfg_gradient, density_ratio_gradient, DenoiseModel};

/// Registered analytic rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ExplicitReward {
    /// `sum_j exp(-||x - m_j||^2 / (2 tau^2))`
    ModeProximity { centers: Vec<Vec<f64>>, tau: f64 },
    /// `tanh(a . x + b)`
    HalfSpace { direction: Vec<f64>, offset: f64 },
    /// `-lambda ||x||^2`
    AntiSaturation { lambda: f64 },
}

pub const REGISTERED_REWARDS: [&str; 3] = ["mode_proximity", "half_space", "anti_saturation"];

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("`{key}` expects a number, got `{v}`")))
}

/// Parses `1,2;3,4` into points.
pub fn parse_points(key: &str, v: &str) -> Result<Vec<Vec<f64>>> {
    v.split(';')
        .map(|p| p.split(',').map(|c| parse_f64(key, c)).collect())
        .collect()
}

fn take<'a>(params: &'a BTreeMap<String, String>, name: &str, key: &str) -> Result<&'a str> {
    params
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::invalid(format!("reward `{name}` needs parameter `{key}`")))
}

impl ExplicitReward {
    pub fn mode_proximity(centers: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if centers.is_empty() || !(tau > 0.0) {
            return Err(Error::invalid("mode_proximity needs centers and tau > 0"));
        }
        Ok(ExplicitReward::ModeProximity { centers, tau })
    }

    pub fn half_space(direction: Vec<f64>, offset: f64) -> Self {
        ExplicitReward::HalfSpace { direction, offset }
    }

    pub fn anti_saturation(lambda: f64) -> Self {
        ExplicitReward::AntiSaturation { lambda }
    }

    /// Builds a registered reward from its name and string parameters.
    pub fn from_name(name: &str, params: &BTreeMap<String, String>) -> Result<Self> {
        match name {
            "mode_proximity" => Self::mode_proximity(
                parse_points("centers", take(params, name, "centers")?)?,
                parse_f64("tau", take(params, name, "tau")?)?,
            ),
            "half_space" => Ok(Self::half_space(
                parse_points("direction", take(params, name, "direction")?)?
                    .pop()
                    .unwrap_or_default(),
                params.get("offset").map_or(Ok(0.0), |v| parse_f64("offset", v))?,
            )),
            "anti_saturation" => Ok(Self::anti_saturation(parse_f64(
                "lambda",
                take(params, name, "lambda")?,
            )?)),
            other => Err(Error::invalid(format!(
                "unknown reward `{other}` (registered: {})",
                REGISTERED_REWARDS.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExplicitReward::ModeProximity { .. } => "mode_proximity",
            ExplicitReward::HalfSpace { .. } => "half_space",
            ExplicitReward::AntiSaturation { .. } => "anti_saturation",
        }
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = x.len();
        match self {
            ExplicitReward::ModeProximity { centers, tau } => {
                let inv = 1.0 / (tau * tau);
                let mut value = 0.0;
                let mut grad = vec![0.0; d];
                for m in centers {
                    if m.len() != d {
                        return Err(Error::invalid("reward center dimension mismatch"));
                    }
                    let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                    let e = (-0.5 * sq * inv).exp();
                    value += e;
                    for ((g, xi), mi) in grad.iter_mut().zip(x).zip(m) {
                        *g -= e * (xi - mi) * inv;
                    }
                }
                Ok((value, grad))
            }
            ExplicitReward::HalfSpace { direction, offset } => {
                if direction.len() != d {
                    return Err(Error::invalid("half-space direction dimension mismatch"));
                }
                let t = (x.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>() + offset).tanh();
                let s = 1.0 - t * t;
                Ok((t, direction.iter().map(|a| s * a).collect()))
            }
            ExplicitReward::AntiSaturation { lambda } => {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                Ok((-lambda * sq, x.iter().map(|v| -2.0 * lambda * v).collect()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardKind {
    Explicit { reward: ExplicitReward, scale: f64 },
    /// Classifier-free guidance toward `class` using the frozen conditional net.
    CfgImplicit { class: usize },
    /// Score difference between the sharp and smoothed nets.
    DensityRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTerm {
    pub name: String,
    pub base_weight: f64,
    pub kind: RewardKind,
}

impl RewardTerm {
    pub fn explicit(name: impl Into<String>, reward: ExplicitReward, base_weight: f64) -> Result<Self> {
        Self::new(
            name,
            base_weight,
            RewardKind::Explicit { reward, scale: 1.0 },
        )
    }

    pub fn cfg(name: impl Into<String>, class: usize, base_weight: f64) -> Result<Self> {
        Self::new(name, base_weight, RewardKind::CfgImplicit { class })
    }

    pub fn density_ratio(name: impl Into<String>, base_weight: f64) -> Result<Self> {
        Self::new(name, base_weight, RewardKind::DensityRatio)
    }

    pub fn new(name: impl Into<String>, base_weight: f64, kind: RewardKind) -> Result<Self> {
        if !(base_weight > 0.0 && base_weight.is_finite()) {
            return Err(Error::invalid(format!("base weight {base_weight} must be > 0")));
        }
        Ok(RewardTerm {
            name: name.into(),
            base_weight,
            kind,
        })
    }

    /// Multiplies an explicit reward by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        if let RewardKind::Explicit { scale, .. } = &mut self.kind {
            *scale *= factor;
        }
        self
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self.kind, RewardKind::Explicit { .. })
    }
}

/// Value and exact gradient of an explicit term.
pub fn eval_explicit(term: &RewardTerm, x: &[f64], _class: Option<usize>) -> Result<(f64, Vec<f64>)> {
    match &term.kind {
        RewardKind::Explicit { reward, scale } => {
            let (v, g) = reward.value_and_gradient(x)?;
            Ok((scale * v, g.into_iter().map(|gi| scale * gi).collect()))
        }
        _ => Err(Error::invalid(format!("term `{}` is not an explicit reward", term.name))),
    }
}

/// Range of the noise level drawn for implicit guidance terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaRule {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule { lo: 0.2, hi: 0.8 }
    }
}

impl SigmaRule {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("guidance sigma range [{lo}, {hi}] must lie in (0, 1]")));
        }
        Ok(SigmaRule { lo, hi })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }
}

/// Frozen networks and randomness consumed by implicit terms.
pub struct GuidanceContext<'a, R: Rng> {
    pub cfg_net: Option<&'a dyn DenoiseModel>,
    /// `(sharp, smoothed)` nets of the density-ratio classifier.
    pub ratio_nets: Option<(&'a dyn DenoiseModel, &'a dyn DenoiseModel)>,
    pub rule: SigmaRule,
    /// Noise level already present in the point being rewarded (0 for clean samples).
    pub base_sigma: f64,
    pub rng: R,
}

impl<'a, R: Rng> GuidanceContext<'a, R> {
    pub fn new(rng: R) -> Self {
        GuidanceContext {
            cfg_net: None,
            ratio_nets: None,
            rule: SigmaRule::default(),
            base_sigma: 0.0,
            rng,
        }
    }
}

/// Pullback of an implicit guidance gradient evaluated at `alpha(sigma) x + sigma eps`.
fn implicit_pullback(
    x: &[f64],
    sigma: f64,
    eps: &[f64],
    base_sigma: f64,
    grad_at: impl FnOnce(&[f64], f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("guidance noise level must be positive"));
    }
    let xt = forward_diffuse(x, sigma, eps)?;
    let a = alpha(sigma);
    let total = (1.0 - (1.0 - base_sigma * base_sigma) * a * a).max(0.0).sqrt();
    let g = grad_at(&xt, total)?;
    Ok(g.into_iter().map(|v| a * v).collect())
}

/// Gradient of `-L_cfg / 2` with respect to `x` for a fixed draw `(sigma, eps)`, where
/// `L_cfg = ||x_t - sg(x_t + cfg_grad)||^2`.
pub fn cfg_pullback_with_draw<M: DenoiseModel + ?Sized>(
    net: &M,
    x: &[f64],
    class: usize,
    sigma: f64,
    eps: &[f64],
) -> Result<Vec<f64>> {
    implicit_pullback(x, sigma, eps, 0.0, |xt, s| cfg_gradient(net, xt, s, class))
}

/// CFG guidance pullback with `sigma` drawn from `rule`.
pub fn cfg_reward_pullback<M: DenoiseModel + ?Sized>(
    net: &M,
    x: &[f64],
    class: usize,
    rule: SigmaRule,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream(seed, &[tag::GUIDANCE]);
    let sigma = rule.draw(&mut rng);
    let eps = normal_vec(&mut rng, x.len());
    cfg_pullback_with_draw(net, x, class, sigma, &eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedGradient {
    pub total: Vec<f64>,
    pub per_term: Vec<Vec<f64>>,
    pub raw_norms: Vec<f64>,
    /// Reward values (0 for implicit terms).
    pub values: Vec<f64>,
}

/// How per-term gradients are weighted before summation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Weighting {
    /// `w_i / max(||g_i||, floor)`.
    Normalized { floor: f64 },
    /// Fixed `w_i`.
    Fixed,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Normalized { floor: 1e-8 }
    }
}

/// Raw value and gradient of any term at `x`.
pub fn raw_gradient<R: Rng>(
    term: &RewardTerm,
    x: &[f64],
    class: Option<usize>,
    ctx: &mut GuidanceContext<'_, R>,
) -> Result<(f64, Vec<f64>)> {
    match &term.kind {
        RewardKind::Explicit { .. } => eval_explicit(term, x, class),
        RewardKind::CfgImplicit { class } => {
            let net = ctx
                .cfg_net
                .ok_or_else(|| Error::invalid(format!("term `{}` needs a conditional net", term.name)))?;
            let sigma = ctx.rule.draw(&mut ctx.rng);
            let eps = normal_vec(&mut ctx.rng, x.len());
            let g = implicit_pullback(x, sigma, &eps, ctx.base_sigma, |xt, s| {
                cfg_gradient(net, xt, s, *class)
            })?;
            Ok((0.0, g))
        }
        RewardKind::DensityRatio => {
            let (a, b) = ctx
                .ratio_nets
                .ok_or_else(|| Error::invalid(format!("term `{}` needs density-ratio nets", term.name)))?;
            let sigma = ctx.rule.draw(&mut ctx.rng);
            let eps = normal_vec(&mut ctx.rng, x.len());
            let g = implicit_pullback(x, sigma, &eps, ctx.base_sigma, |xt, s| {
                density_ratio_gradient(a, b, xt, s)
            })?;
            Ok((0.0, g))
        }
    }
}

pub fn combine<R: Rng>(
    terms: &[RewardTerm],
    x: &[f64],
    class: Option<usize>,
    ctx: &mut GuidanceContext<'_, R>,
    weighting: Weighting,
) -> Result<CombinedGradient> {
    if terms.is_empty() {
        return Err(Error::invalid("no reward terms to combine"));
    }
    if let Weighting::Normalized { floor } = weighting {
        if !(floor > 0.0) {
            return Err(Error::invalid("normalization floor must be positive"));
        }
    }
    let d = x.len();
    let mut total = vec![0.0; d];
    let mut per_term = Vec::with_capacity(terms.len());
    let mut raw_norms = Vec::with_capacity(terms.len());
    let mut values = Vec::with_capacity(terms.len());
    for term in terms {
        let (value, g) = raw_gradient(term, x, class, ctx)?;
        if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("reward term `{}`", term.name),
                "non-finite value or gradient",
            ));
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = match weighting {
            Weighting::Normalized { floor } => term.base_weight / norm.max(floor),
            Weighting::Fixed => term.base_weight,
        };
        let contrib: Vec<f64> = g.iter().map(|v| w * v).collect();
        total.iter_mut().zip(&contrib).for_each(|(t, c)| *t += c);
        per_term.push(contrib);
        raw_norms.push(norm);
        values.push(value);
    }
    Ok(CombinedGradient {
        total,
        per_term,
        raw_norms,
        values,
    })
}

/// `sum_i w_i g_i / max(||g_i||, floor)` at `x`.
pub fn combine_normalized<R: Rng>(
    terms: &[RewardTerm],
    x: &[f64],
    class: Option<usize>,
    ctx: &mut GuidanceContext<'_, R>,
    floor: f64,
) -> Result<CombinedGradient> {
    combine(terms, x, class, ctx, Weighting::Normalized { floor })
}

/// Weighted sum of explicit reward values.
pub fn weighted_value(terms: &[RewardTerm], weights: &[f64], x: &[f64]) -> Result<f64> {
    let mut v = 0.0;
    for (t, w) in terms.iter().zip(weights) {
        v += w * eval_explicit(t, x, None)?.0;
    }
    Ok(v)
}
