//! The `K`-step push-forward generator.
//!
//! One step maps `x_k` at level `sigma_k` to `x_{k-1}` at `sigma_{k-1}`:
//!
//! ```text
//! x0   = f(x_k, sigma_k, c)
//! eps  = (x_k - alpha_k * x0) / sigma_k          (= x_k at sigma_k = 1)
//! mix  = eta * eps + sqrt(1 - eta^2) * noise
//! next = alpha_{k-1} * x0 + sigma_{k-1} * mix
//! ```
//!
//! `eta = 1` is a deterministic DDIM step; `eta = 0` injects fresh noise. Because `eps`
//! and `next` are affine in `x0` and `x_k`, the step is `next = a*x0 + b*x_k + const`,
//! which is what the reverse pass uses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream, tag};
use crate::schedule::{alpha, NoiseSchedule};
use crate::scorenet::{eps_from_x0, DenoiseModel, Denoiser, ForwardCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EtaPolicy {
    Fixed(f64),
    /// Independent `U[0, 1]` draw per step and per sample.
    Random,
}

impl EtaPolicy {
    pub fn fixed(eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
        }
        Ok(EtaPolicy::Fixed(eta))
    }
}

impl std::fmt::Display for EtaPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EtaPolicy::Fixed(e) => write!(f, "{e}"),
            EtaPolicy::Random => f.write_str("random"),
        }
    }
}

impl std::str::FromStr for EtaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(EtaPolicy::Random);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::invalid(format!("eta must be `random` or a number, got `{s}`")))?;
        EtaPolicy::fixed(v)
    }
}

/// Per-step randomness of one chain, ordered from step `K` down to step 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainNoise {
    pub etas: Vec<f64>,
    pub noises: Vec<Vec<f64>>,
}

impl ChainNoise {
    pub fn draw(policy: EtaPolicy, steps: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut etas = Vec::with_capacity(steps);
        let mut noises = Vec::with_capacity(steps);
        for _ in 0..steps {
            etas.push(match policy {
                EtaPolicy::Fixed(e) => e,
                EtaPolicy::Random => rng.random::<f64>(),
            });
            noises.push(normal_vec(rng, dim));
        }
        ChainNoise { etas, noises }
    }

    /// Randomness used by the step leaving level `k`.
    fn at(&self, steps: usize, k: usize) -> (f64, &[f64]) {
        let i = steps - k;
        (self.etas[i], &self.noises[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_K, ..., x_0`.
    pub states: Vec<Vec<f64>>,
    /// `eta` used by the steps leaving `x_K, ..., x_1`.
    pub etas: Vec<f64>,
    pub noises: Vec<Vec<f64>>,
    pub x0_preds: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn sample(&self) -> &[f64] {
        self.states.last().unwrap()
    }
}

fn check_levels(sigma_k: f64, sigma_prev: f64) -> Result<()> {
    if !(sigma_k > 0.0 && sigma_k <= 1.0) {
        return Err(Error::invalid(format!("step level {sigma_k} outside (0, 1]")));
    }
    if !(sigma_prev >= 0.0 && sigma_prev < sigma_k) {
        return Err(Error::invalid(format!(
            "target level {sigma_prev} must lie in [0, {sigma_k})"
        )));
    }
    Ok(())
}

fn step_from_prediction(
    x_k: &[f64],
    x0: &[f64],
    sigma_k: f64,
    sigma_prev: f64,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let eps_model = if sigma_k == 1.0 {
        x_k.to_vec()
    } else {
        eps_from_x0(x_k, sigma_k, x0)?
    };
    let keep = (1.0 - eta * eta).max(0.0).sqrt();
    let a_prev = alpha(sigma_prev);
    Ok(x0
        .iter()
        .zip(&eps_model)
        .zip(noise)
        .map(|((f, e), n)| a_prev * f + sigma_prev * (eta * e + keep * n))
        .collect())
}

/// Affine coefficients `(a, b)` with `d next = a * d x0 + b * d x_k`.
fn step_coefficients(sigma_k: f64, sigma_prev: f64, eta: f64) -> (f64, f64) {
    let b = sigma_prev * eta / sigma_k;
    (alpha(sigma_prev) - b * alpha(sigma_k), b)
}

/// One generator step; returns `(x_prev, x0_pred)`.
#[allow(clippy::too_many_arguments)]
pub fn gen_step<M: DenoiseModel + ?Sized>(
    net: &M,
    x_k: &[f64],
    sigma_k: f64,
    sigma_prev: f64,
    eta: f64,
    noise: &[f64],
    class: Option<usize>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_levels(sigma_k, sigma_prev)?;
    let x0 = net.denoise(x_k, sigma_k, class)?;
    let next = step_from_prediction(x_k, &x0, sigma_k, sigma_prev, eta, noise)?;
    Ok((next, x0))
}

/// Runs the full chain with pre-drawn randomness.
pub fn generate_with_noise<M: DenoiseModel + ?Sized>(
    net: &M,
    z: &[f64],
    schedule: &NoiseSchedule,
    noise: &ChainNoise,
    class: Option<usize>,
) -> Result<Trajectory> {
    if z.len() != net.dim() {
        return Err(Error::invalid("latent dimension does not match the network"));
    }
    let steps = schedule.steps();
    let mut states = vec![z.to_vec()];
    let mut x0_preds = Vec::with_capacity(steps);
    for k in (1..=steps).rev() {
        let (eta, eps) = noise.at(steps, k);
        let (next, x0) = gen_step(
            net,
            states.last().unwrap(),
            schedule.sigma(k),
            schedule.sigma(k - 1),
            eta,
            eps,
            class,
        )?;
        states.push(next);
        x0_preds.push(x0);
    }
    Ok(Trajectory {
        states,
        etas: noise.etas.clone(),
        noises: noise.noises.clone(),
        x0_preds,
    })
}

/// Samples one trajectory from `z`, drawing the per-step randomness from `seed`.
pub fn generate<M: DenoiseModel + ?Sized>(
    net: &M,
    z: &[f64],
    schedule: &NoiseSchedule,
    policy: EtaPolicy,
    class: Option<usize>,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = stream(seed, &[tag::SAMPLE]);
    let noise = ChainNoise::draw(policy, schedule.steps(), z.len(), &mut rng);
    generate_with_noise(net, z, schedule, &noise, class)
}

/// Draws `count` samples, each from its own latent and noise stream.
pub fn sample_batch<M: DenoiseModel + ?Sized>(
    net: &M,
    schedule: &NoiseSchedule,
    policy: EtaPolicy,
    class: Option<usize>,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, &[tag::SAMPLE, i as u64]);
            let z = normal_vec(&mut rng, net.dim());
            let noise = ChainNoise::draw(policy, schedule.steps(), net.dim(), &mut rng);
            generate_with_noise(net, &z, schedule, &noise, class)
        })
        .collect()
}

/// One recorded differentiable step.
#[derive(Debug, Clone)]
pub struct TracedStep {
    cache: ForwardCache,
    a: f64,
    b: f64,
}

/// Forward record of a chain segment whose steps are all on the differentiable path.
#[derive(Debug, Clone)]
pub struct TracedChain {
    steps: Vec<TracedStep>,
    /// The segment's input state (a constant for differentiation).
    pub input: Vec<f64>,
    /// The segment's output state.
    pub output: Vec<f64>,
    /// Clean prediction of the last traced step.
    pub x0_pred: Vec<f64>,
}

impl TracedChain {
    /// Number of denoiser evaluations the reverse pass goes through.
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// Reverse pass. `grad_output` and `grad_x0_pred` are upstream gradients on the
    /// segment output and on the last step's clean prediction. Parameter gradients are
    /// accumulated into `param_grad`.
    pub fn backward(
        &self,
        net: &Denoiser,
        grad_output: &[f64],
        grad_x0_pred: Option<&[f64]>,
        param_grad: &mut [f64],
    ) {
        let mut g = grad_output.to_vec();
        for (i, st) in self.steps.iter().enumerate().rev() {
            let mut g_f: Vec<f64> = g.iter().map(|v| st.a * v).collect();
            if i + 1 == self.steps.len() {
                if let Some(extra) = grad_x0_pred {
                    g_f.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
                }
            }
            let g_in = net.backward(&st.cache, &g_f, Some(param_grad));
            if i == 0 {
                break;
            }
            g = g.iter().zip(&g_in).map(|(v, gi)| st.b * v + gi).collect();
        }
    }
}

fn traced_steps(
    net: &Denoiser,
    x_start: &[f64],
    schedule: &NoiseSchedule,
    noise: &ChainNoise,
    levels: impl Iterator<Item = usize>,
    class: Option<usize>,
) -> Result<TracedChain> {
    let steps = schedule.steps();
    let mut x = x_start.to_vec();
    let mut traced = Vec::new();
    let mut x0_pred = Vec::new();
    for k in levels {
        let (sk, sp) = (schedule.sigma(k), schedule.sigma(k - 1));
        check_levels(sk, sp)?;
        let (eta, eps) = noise.at(steps, k);
        let cache = net.forward(&x, sk, class)?;
        let next = step_from_prediction(&x, &cache.output, sk, sp, eta, eps)?;
        let (a, b) = step_coefficients(sk, sp, eta);
        x0_pred = cache.output.clone();
        traced.push(TracedStep { cache, a, b });
        x = next;
    }
    Ok(TracedChain {
        steps: traced,
        input: x_start.to_vec(),
        output: x,
        x0_pred,
    })
}

/// Full chain with every step recorded for reverse mode.
pub fn generate_traced(
    net: &Denoiser,
    z: &[f64],
    schedule: &NoiseSchedule,
    noise: &ChainNoise,
    class: Option<usize>,
) -> Result<TracedChain> {
    if z.len() != net.dim() {
        return Err(Error::invalid("latent dimension does not match the network"));
    }
    traced_steps(net, z, schedule, noise, (1..=schedule.steps()).rev(), class)
}

/// Runs steps `K..k+1` without gradient, then traces the single step leaving level `k`.
///
/// The returned chain has depth 1: `input` is the frozen state at `sigma_k`, `output`
/// the state at `sigma_{k-1}` and `x0_pred` the clean prediction at `sigma_k`.
pub fn generate_with_intermediate(
    net: &Denoiser,
    z: &[f64],
    schedule: &NoiseSchedule,
    k: usize,
    noise: &ChainNoise,
    class: Option<usize>,
) -> Result<TracedChain> {
    let steps = schedule.steps();
    if k == 0 || k > steps {
        return Err(Error::invalid(format!("step index {k} outside 1..={steps}")));
    }
    if z.len() != net.dim() {
        return Err(Error::invalid("latent dimension does not match the network"));
    }
    let mut x = z.to_vec();
    for j in ((k + 1)..=steps).rev() {
        let (eta, eps) = noise.at(steps, j);
        x = gen_step(net, &x, schedule.sigma(j), schedule.sigma(j - 1), eta, eps, class)?.0;
    }
    traced_steps(net, &x, schedule, noise, std::iter::once(k), class)
}
