//! Reward maximization with weight regularization (R0) and its intermediate-supervision
//! variant (R0+).
//!
//! Both modes start from a copy of the pretrained parameters `phi` and minimize
//!
//! ```text
//! omega_reg * ||theta - phi||^2  -  mean_batch sum_i w_i R_i(x) / sg(||dR_i/dx||)
//! ```
//!
//! R0 differentiates the full `K`-step chain. R0+ runs a random-length prefix without
//! gradient and differentiates a single step, so the reverse pass always goes through
//! exactly one denoiser evaluation.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{generate_traced, generate_with_intermediate, ChainNoise, EtaPolicy, TracedChain};
use crate::optim::Adam;
use crate::oracle::diag_cosine;
use crate::rewards::{combine, GuidanceContext, RewardTerm, SigmaRule, Weighting};
use crate::rng::{normal_vec, stream, tag};
use crate::schedule::NoiseSchedule;
use crate::scorenet::{DenoiseModel, Denoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    R0,
    R0Plus,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R0" | "r0" => Ok(Mode::R0),
            "R0+" | "r0+" | "r0plus" => Ok(Mode::R0Plus),
            other => Err(Error::invalid(format!("unknown training mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::R0 => "R0",
            Mode::R0Plus => "R0+",
        })
    }
}

/// Distribution of the supervised step index in R0+.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum StepRule {
    #[default]
    Uniform,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub omega_reg: f64,
    /// Base weight of the classifier-free guidance term; 0 disables it.
    pub omega_cfg: f64,
    /// Class targeted by classifier-free guidance.
    pub cfg_class: Option<usize>,
    pub terms: Vec<RewardTerm>,
    pub schedule: NoiseSchedule,
    pub eta: EtaPolicy,
    pub weighting: Weighting,
    pub sigma_rule: SigmaRule,
    pub step_rule: StepRule,
    /// Condition fed to the generator itself (None for an unconditional generator).
    pub gen_class: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: Mode, schedule: NoiseSchedule, terms: Vec<RewardTerm>) -> Self {
        TrainConfig {
            mode,
            iterations: 1000,
            batch: 64,
            lr: 1e-3,
            omega_reg: 0.1,
            omega_cfg: 0.0,
            cfg_class: None,
            terms,
            schedule,
            eta: EtaPolicy::Random,
            weighting: Weighting::default(),
            sigma_rule: SigmaRule::default(),
            step_rule: StepRule::Uniform,
            gen_class: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::invalid("iterations and batch must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.omega_reg >= 0.0 && self.omega_reg.is_finite()) {
            return Err(Error::invalid("omega_reg must be >= 0"));
        }
        if !(self.omega_cfg >= 0.0 && self.omega_cfg.is_finite()) {
            return Err(Error::invalid("omega_cfg must be >= 0"));
        }
        if self.terms.is_empty() && self.omega_cfg == 0.0 && self.omega_reg == 0.0 {
            return Err(Error::invalid("nothing to optimize: no reward terms and both omegas are 0"));
        }
        if self.omega_cfg > 0.0 && self.cfg_class.is_none() {
            return Err(Error::invalid("omega_cfg > 0 requires a guidance class"));
        }
        if let StepRule::Fixed(k) = self.step_rule {
            if k == 0 || k > self.schedule.steps() {
                return Err(Error::invalid(format!("fixed step index {k} outside 1..=K")));
            }
        }
        Ok(())
    }

    /// Reward terms including the guidance term implied by `omega_cfg`.
    pub fn all_terms(&self) -> Vec<RewardTerm> {
        let mut t = self.terms.clone();
        if self.omega_cfg > 0.0 {
            if let Some(c) = self.cfg_class {
                t.push(RewardTerm {
                    name: "cfg".into(),
                    base_weight: self.omega_cfg,
                    kind: crate::rewards::RewardKind::CfgImplicit { class: c },
                });
            }
        }
        t
    }
}

/// Frozen networks used during training.
#[derive(Clone, Copy)]
pub struct FrozenNets<'a> {
    /// Pretrained generator weights `phi`; also the initialization.
    pub pretrained: &'a Denoiser,
    /// Conditional net for classifier-free guidance.
    pub cfg: Option<&'a dyn DenoiseModel>,
    /// `(sharp, smoothed)` nets for density-ratio guidance.
    pub ratio: Option<(&'a dyn DenoiseModel, &'a dyn DenoiseModel)>,
}

impl<'a> FrozenNets<'a> {
    pub fn new(pretrained: &'a Denoiser) -> Self {
        FrozenNets {
            pretrained,
            cfg: None,
            ratio: None,
        }
    }
}

/// `||theta - phi||^2` over all parameter blocks.
pub fn weight_reg(theta: &Denoiser, phi: &Denoiser) -> Result<f64> {
    check_shapes(theta, phi)?;
    Ok(theta
        .params()
        .iter()
        .zip(phi.params())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `d ||theta - phi||^2 / d theta = 2 (theta - phi)`.
pub fn weight_reg_gradient(theta: &Denoiser, phi: &Denoiser) -> Result<Vec<f64>> {
    check_shapes(theta, phi)?;
    Ok(theta
        .params()
        .iter()
        .zip(phi.params())
        .map(|(a, b)| 2.0 * (a - b))
        .collect())
}

fn check_shapes(theta: &Denoiser, phi: &Denoiser) -> Result<()> {
    if theta.arch() != phi.arch() {
        return Err(Error::invalid("parameter sets have different shapes"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStats {
    pub raw_norm: f64,
    pub value: f64,
    /// Mean norm of the weighted contribution.
    pub contrib_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub terms: Vec<TermStats>,
    pub reg_loss: f64,
    pub reg_grad_norm: f64,
    pub cos_reward_reg: f64,
    /// Denoiser evaluations on the differentiable path (max over the batch).
    pub depth: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub term_names: Vec<String>,
    pub records: Vec<IterationRecord>,
}

impl RunLog {
    /// CSV with one row per iteration. `wall_ms` is written as 0 unless `wall_clock`.
    pub fn to_csv(&self, wall_clock: bool) -> String {
        let mut out = String::from("iter");
        for n in &self.term_names {
            out.push_str(&format!(",{n}.raw_norm,{n}.value,{n}.contrib_norm"));
        }
        out.push_str(",reg_loss,reg_grad_norm,cos_reward_reg,depth,wall_ms\n");
        for r in &self.records {
            out.push_str(&r.iter.to_string());
            for t in &r.terms {
                out.push_str(&format!(",{:e},{:e},{:e}", t.raw_norm, t.value, t.contrib_norm));
            }
            let wall = if wall_clock { r.wall_ms } else { 0.0 };
            out.push_str(&format!(
                ",{:e},{:e},{:e},{},{:e}\n",
                r.reg_loss, r.reg_grad_norm, r.cos_reward_reg, r.depth, wall
            ));
        }
        out
    }

    /// Weighted sum of mean term values for each iteration.
    pub fn combined_values(&self, weights: &[f64]) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.terms.iter().zip(weights).map(|(t, w)| w * t.value).sum())
            .collect()
    }
}

/// Parameter gradients of one iteration, before the optimizer update.
#[derive(Debug, Clone)]
pub struct IterationGradient {
    /// Gradient of the (negated) reward objective.
    pub reward: Vec<f64>,
    /// Gradient of `omega_reg * L_reg`.
    pub reg: Vec<f64>,
    pub record: IterationRecord,
}

impl IterationGradient {
    pub fn total(&self) -> Vec<f64> {
        self.reward.iter().zip(&self.reg).map(|(a, b)| a + b).collect()
    }
}

/// Draws the supervised step index for R0+.
fn draw_step(cfg: &TrainConfig, iter: usize, sample: usize) -> usize {
    let k_max = cfg.schedule.steps();
    match cfg.step_rule {
        StepRule::Fixed(k) => k,
        StepRule::Uniform if k_max == 1 => 1,
        StepRule::Uniform => stream(cfg.seed, &[tag::STEP_INDEX, iter as u64, sample as u64])
            .random_range(1..=k_max),
    }
}

/// Computes the parameter gradient of iteration `iter` at parameters `theta`.
pub fn iteration_gradient(
    cfg: &TrainConfig,
    theta: &Denoiser,
    nets: &FrozenNets<'_>,
    iter: usize,
) -> Result<IterationGradient> {
    let terms = cfg.all_terms();
    let (explicit, implicit): (Vec<(usize, RewardTerm)>, Vec<(usize, RewardTerm)>) =
        terms.iter().cloned().enumerate().partition(|(_, t)| t.is_explicit());
    let explicit_terms: Vec<RewardTerm> = explicit.iter().map(|p| p.1.clone()).collect();
    let implicit_terms: Vec<RewardTerm> = implicit.iter().map(|p| p.1.clone()).collect();

    let d = theta.dim();
    let steps = cfg.schedule.steps();
    let scale = 1.0 / cfg.batch as f64;
    let mut reward_grad = vec![0.0; theta.param_count()];
    let mut stats = vec![
        TermStats {
            raw_norm: 0.0,
            value: 0.0,
            contrib_norm: 0.0
        };
        terms.len()
    ];
    let mut depth = 0;

    for i in 0..cfg.batch {
        let mut rng = stream(cfg.seed, &[tag::TRAIN, iter as u64, i as u64]);
        let z = normal_vec(&mut rng, d);
        let noise = ChainNoise::draw(cfg.eta, steps, d, &mut rng);
        let (chain, base_sigma): (TracedChain, f64) = match cfg.mode {
            Mode::R0 => (generate_traced(theta, &z, &cfg.schedule, &noise, cfg.gen_class)?, 0.0),
            Mode::R0Plus => {
                let k = draw_step(cfg, iter, i);
                (
                    generate_with_intermediate(theta, &z, &cfg.schedule, k, &noise, cfg.gen_class)?,
                    cfg.schedule.sigma(k - 1),
                )
            }
        };
        depth = depth.max(chain.depth());

        let mut ctx = GuidanceContext {
            cfg_net: nets.cfg,
            ratio_nets: nets.ratio,
            rule: cfg.sigma_rule,
            base_sigma,
            rng: stream(cfg.seed, &[tag::GUIDANCE, iter as u64, i as u64]),
        };
        // explicit rewards act on the clean prediction, implicit ones on the chain output
        let explicit_at = match cfg.mode {
            Mode::R0 => &chain.output,
            Mode::R0Plus => &chain.x0_pred,
        };
        let mut g_explicit = vec![0.0; d];
        if !explicit_terms.is_empty() {
            let c = combine(&explicit_terms, explicit_at, cfg.gen_class, &mut ctx, cfg.weighting)?;
            for (j, (idx, _)) in explicit.iter().enumerate() {
                accumulate(&mut stats[*idx], &c.per_term[j], c.raw_norms[j], c.values[j], scale);
            }
            g_explicit = c.total.iter().map(|v| -scale * v).collect();
        }
        let mut g_implicit = vec![0.0; d];
        if !implicit_terms.is_empty() {
            let c = combine(&implicit_terms, &chain.output, cfg.gen_class, &mut ctx, cfg.weighting)?;
            for (j, (idx, _)) in implicit.iter().enumerate() {
                accumulate(&mut stats[*idx], &c.per_term[j], c.raw_norms[j], c.values[j], scale);
            }
            g_implicit = c.total.iter().map(|v| -scale * v).collect();
        }
        match cfg.mode {
            Mode::R0 => {
                let g: Vec<f64> = g_explicit.iter().zip(&g_implicit).map(|(a, b)| a + b).collect();
                chain.backward(theta, &g, None, &mut reward_grad);
            }
            Mode::R0Plus => chain.backward(theta, &g_implicit, Some(&g_explicit), &mut reward_grad),
        }
    }

    let reg_loss = weight_reg(theta, nets.pretrained)?;
    let reg: Vec<f64> = weight_reg_gradient(theta, nets.pretrained)?
        .into_iter()
        .map(|g| cfg.omega_reg * g)
        .collect();
    let reg_grad_norm = reg.iter().map(|v| v * v).sum::<f64>().sqrt();
    let record = IterationRecord {
        iter,
        terms: stats,
        reg_loss,
        reg_grad_norm,
        cos_reward_reg: diag_cosine(&reward_grad, &reg),
        depth,
        wall_ms: 0.0,
    };
    Ok(IterationGradient {
        reward: reward_grad,
        reg,
        record,
    })
}

fn accumulate(s: &mut TermStats, contrib: &[f64], raw: f64, value: f64, scale: f64) {
    s.raw_norm += scale * raw;
    s.value += scale * value;
    s.contrib_norm += scale * contrib.iter().map(|v| v * v).sum::<f64>().sqrt();
}

/// Whether training should continue after an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Callbacks invoked by the training loop.
pub trait TrainHooks {
    /// Called after each update with the new parameters.
    fn after_iteration(&mut self, _record: &IterationRecord, _theta: &Denoiser) -> Result<Control> {
        Ok(Control::Continue)
    }

    /// Called with the last finite parameters when training diverges.
    fn on_divergence(&mut self, _iteration: usize, _last_good: &Denoiser) {}
}

/// No-op hooks.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: Denoiser,
    pub log: RunLog,
}

/// Runs the configured mode starting from the pretrained parameters.
pub fn train(cfg: &TrainConfig, nets: &FrozenNets<'_>, hooks: &mut dyn TrainHooks) -> Result<TrainOutcome> {
    train_from(cfg, nets, nets.pretrained.clone(), hooks)
}

/// Like [`train`] but starting from explicit parameters `theta`.
pub fn train_from(
    cfg: &TrainConfig,
    nets: &FrozenNets<'_>,
    mut theta: Denoiser,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shapes(&theta, nets.pretrained)?;
    let mut opt = Adam::new(theta.param_count(), cfg.lr);
    let mut log = RunLog {
        term_names: cfg.all_terms().into_iter().map(|t| t.name).collect(),
        records: Vec::with_capacity(cfg.iterations),
    };
    let start = Instant::now();
    for iter in 0..cfg.iterations {
        let step = iteration_gradient(cfg, &theta, nets, iter);
        let diverged = |detail: String| Error::TrainingDiverged { iteration: iter, detail };
        let grads = match step {
            Ok(g) => g,
            Err(Error::Numeric { context, detail }) => {
                hooks.on_divergence(iter, &theta);
                return Err(diverged(format!("{context}: {detail}")));
            }
            Err(e) => return Err(e),
        };
        let total = grads.total();
        if total.iter().any(|v| !v.is_finite()) || !grads.record.reg_loss.is_finite() {
            hooks.on_divergence(iter, &theta);
            return Err(diverged("non-finite gradient".into()));
        }
        let last_good = theta.clone();
        opt.step(theta.params_mut(), &total);
        if theta.params().iter().any(|v| !v.is_finite()) {
            hooks.on_divergence(iter, &last_good);
            return Err(diverged("non-finite parameters after update".into()));
        }
        let mut record = grads.record;
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let control = hooks.after_iteration(&record, &theta)?;
        log.records.push(record);
        if control == Control::Stop {
            break;
        }
    }
    Ok(TrainOutcome { theta, log })
}

/// End-to-end training through all `K` steps.
pub fn train_r0(cfg: &TrainConfig, nets: &FrozenNets<'_>, hooks: &mut dyn TrainHooks) -> Result<TrainOutcome> {
    if cfg.mode != Mode::R0 {
        return Err(Error::invalid("train_r0 called with a non-R0 config"));
    }
    train(cfg, nets, hooks)
}

/// Intermediate supervision through a single differentiable step.
pub fn train_r0plus(
    cfg: &TrainConfig,
    nets: &FrozenNets<'_>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    if cfg.mode != Mode::R0Plus {
        return Err(Error::invalid("train_r0plus called with a non-R0+ config"));
    }
    train(cfg, nets, hooks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::ExplicitReward;
    use crate::schedule::LadderKind;
    use crate::scorenet::Architecture;

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 2,
            cond_classes: 0,
            hidden: vec![12, 12],
            skip: true,
        }
    }

    fn small_net(seed: u64) -> Denoiser {
        Denoiser::new(small_arch(), &mut stream(seed, &[99]))
    }

    fn bump(center: [f64; 2], tau: f64, w: f64) -> RewardTerm {
        let r = ExplicitReward::mode_proximity(vec![center.to_vec()], tau).unwrap();
        RewardTerm::explicit("bump", r, w).unwrap()
    }

    fn config(mode: Mode, steps: usize) -> TrainConfig {
        let sched = NoiseSchedule::new(steps, LadderKind::Linear).unwrap();
        let mut cfg = TrainConfig::new(mode, sched, vec![bump([1.0, 1.0], 0.5, 1.0)]);
        cfg.iterations = 6;
        cfg.batch = 8;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn weight_reg_exact_values() {
        let phi = small_net(1);
        assert_eq!(weight_reg(&phi, &phi).unwrap(), 0.0);

        let n = small_arch().param_count();
        let zero = Denoiser::from_params(small_arch(), vec![0.0; n]).unwrap();
        let mut p = vec![0.0; n];
        p[0] = 3.0;
        p[n - 1] = 4.0;
        let theta = Denoiser::from_params(small_arch(), p).unwrap();
        assert_eq!(weight_reg(&theta, &zero).unwrap(), 25.0);
    }

    #[test]
    fn weight_reg_gradient_matches_finite_differences() {
        let phi = small_net(1);
        let theta = small_net(2);
        let g = weight_reg_gradient(&theta, &phi).unwrap();
        let h = 1e-4;
        for idx in [0, 7, 40, theta.param_count() - 1] {
            let mut tp = theta.clone();
            tp.params_mut()[idx] += h;
            let mut tm = theta.clone();
            tm.params_mut()[idx] -= h;
            let fd = (weight_reg(&tp, &phi).unwrap() - weight_reg(&tm, &phi).unwrap()) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-6 * g[idx].abs().max(1e-3), "{idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn weight_reg_rejects_shape_mismatch() {
        let a = small_net(1);
        let b = Denoiser::new(Architecture::standard(2, 0), &mut stream(1, &[1]));
        assert!(matches!(weight_reg(&a, &b), Err(Error::InvalidArgument(_))));
        assert!(weight_reg_gradient(&a, &b).is_err());
    }

    struct DistanceTrace {
        phi: Denoiser,
        dist: Vec<f64>,
    }

    impl TrainHooks for DistanceTrace {
        fn after_iteration(&mut self, _r: &IterationRecord, theta: &Denoiser) -> Result<Control> {
            self.dist.push(weight_reg(theta, &self.phi)?.sqrt());
            Ok(Control::Continue)
        }
    }

    #[test]
    fn regularization_alone_pulls_back_monotonically() {
        let phi = small_net(3);
        let mut start = phi.clone();
        for (i, p) in start.params_mut().iter_mut().enumerate() {
            *p += if i % 2 == 0 { 0.05 } else { -0.03 };
        }
        let mut cfg = config(Mode::R0, 2);
        cfg.terms.clear();
        cfg.omega_reg = 1.0;
        cfg.iterations = 40;
        let d0 = weight_reg(&start, &phi).unwrap().sqrt();
        let mut trace = DistanceTrace { phi: phi.clone(), dist: vec![d0] };
        train_from(&cfg, &FrozenNets::new(&phi), start, &mut trace).unwrap();
        assert!(trace.dist.windows(2).all(|w| w[1] < w[0]), "{:?}", trace.dist);
    }

    #[test]
    fn single_step_modes_coincide() {
        let phi = small_net(4);
        let nets = FrozenNets::new(&phi);
        let a = train(&config(Mode::R0, 1), &nets, &mut NoHooks).unwrap();
        let b = train(&config(Mode::R0Plus, 1), &nets, &mut NoHooks).unwrap();
        assert_eq!(a.theta.params(), b.theta.params());
        assert_eq!(a.log.to_csv(false), b.log.to_csv(false));
    }

    #[test]
    fn training_is_reproducible() {
        let phi = small_net(5);
        let nets = FrozenNets::new(&phi);
        for mode in [Mode::R0, Mode::R0Plus] {
            let cfg = config(mode, 3);
            let a = train(&cfg, &nets, &mut NoHooks).unwrap();
            let b = train(&cfg, &nets, &mut NoHooks).unwrap();
            assert_eq!(a.theta.params(), b.theta.params());
            assert_eq!(a.log.to_csv(false), b.log.to_csv(false));

            let mut other = cfg.clone();
            other.seed += 1;
            let c = train(&other, &nets, &mut NoHooks).unwrap();
            assert_ne!(a.theta.params(), c.theta.params());
        }
    }

    #[test]
    fn normalized_contributions_have_base_weight_norm() {
        let phi = small_net(6);
        let mut cfg = config(Mode::R0, 3);
        cfg.terms = vec![bump([1.0, 1.0], 3.0, 0.7), bump([-1.0, 0.0], 2.0, 2.5)];
        let g = iteration_gradient(&cfg, &phi, &FrozenNets::new(&phi), 0).unwrap();
        for (t, w) in g.record.terms.iter().zip([0.7, 2.5]) {
            assert!(t.raw_norm > 0.0);
            assert!((t.contrib_norm - w).abs() < 1e-12, "{} vs {w}", t.contrib_norm);
        }
    }

    #[test]
    fn reverse_depth_is_k_for_r0_and_one_for_r0plus() {
        let phi = small_net(7);
        let nets = FrozenNets::new(&phi);
        for k in [1, 2, 4, 8] {
            let r0 = iteration_gradient(&config(Mode::R0, k), &phi, &nets, 0).unwrap();
            let r0p = iteration_gradient(&config(Mode::R0Plus, k), &phi, &nets, 0).unwrap();
            assert_eq!(r0.record.depth, k);
            assert_eq!(r0p.record.depth, 1);
        }
    }

    #[test]
    fn first_r0plus_gradient_treats_prefix_as_constant() {
        // batch of one with a fixed supervised step: the gradient must equal the
        // finite difference of the reward of a single denoiser call on the frozen state
        let theta = small_net(8);
        let phi = small_net(9);
        let mut cfg = config(Mode::R0Plus, 4);
        cfg.batch = 1;
        cfg.omega_reg = 0.0;
        cfg.step_rule = StepRule::Fixed(2);
        let term = cfg.terms[0].clone();
        let got = iteration_gradient(&cfg, &theta, &FrozenNets::new(&phi), 0).unwrap().reward;

        let mut rng = stream(cfg.seed, &[tag::TRAIN, 0, 0]);
        let z = normal_vec(&mut rng, 2);
        let noise = ChainNoise::draw(cfg.eta, 4, 2, &mut rng);
        let chain = generate_with_intermediate(&theta, &z, &cfg.schedule, 2, &noise, None).unwrap();
        let sigma = cfg.schedule.sigma(2);
        let (_, g) = crate::rewards::eval_explicit(&term, &chain.x0_pred, None).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let objective = |net: &Denoiser| {
            let x0 = net.denoise(&chain.input, sigma, None).unwrap();
            -crate::rewards::eval_explicit(&term, &x0, None).unwrap().0 / norm
        };
        let h = 1e-5;
        for idx in [0, 13, 100, theta.param_count() - 2] {
            let mut tp = theta.clone();
            tp.params_mut()[idx] += h;
            let mut tm = theta.clone();
            tm.params_mut()[idx] -= h;
            let fd = (objective(&tp) - objective(&tm)) / (2.0 * h);
            assert!((fd - got[idx]).abs() < 1e-7 + 1e-5 * fd.abs(), "{idx}: {fd} vs {}", got[idx]);
        }
    }

    #[test]
    fn hooks_can_stop_early() {
        struct StopAt(usize);
        impl TrainHooks for StopAt {
            fn after_iteration(&mut self, r: &IterationRecord, _t: &Denoiser) -> Result<Control> {
                Ok(if r.iter + 1 == self.0 { Control::Stop } else { Control::Continue })
            }
        }
        let phi = small_net(10);
        let out = train(&config(Mode::R0, 2), &FrozenNets::new(&phi), &mut StopAt(3)).unwrap();
        assert_eq!(out.log.records.len(), 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(Mode::R0, 2);
        cfg.terms.clear();
        cfg.omega_reg = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = config(Mode::R0, 2);
        cfg.omega_cfg = 1.0;
        assert!(cfg.validate().is_err());
        cfg.cfg_class = Some(0);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.all_terms().last().unwrap().name, "cfg");

        let mut cfg = config(Mode::R0Plus, 2);
        cfg.step_rule = StepRule::Fixed(3);
        assert!(cfg.validate().is_err());

        let phi = small_net(1);
        assert!(train_r0(&config(Mode::R0Plus, 2), &FrozenNets::new(&phi), &mut NoHooks).is_err());
        assert!(train_r0plus(&config(Mode::R0, 2), &FrozenNets::new(&phi), &mut NoHooks).is_err());
    }

    #[test]
    fn runlog_csv_layout() {
        let phi = small_net(12);
        let out = train(&config(Mode::R0, 2), &FrozenNets::new(&phi), &mut NoHooks).unwrap();
        let csv = out.log.to_csv(false);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,bump.raw_norm,bump.value,bump.contrib_norm,reg_loss,reg_grad_norm,cos_reward_reg,depth,wall_ms"
        );
        assert_eq!(lines.count(), 6);
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",0e0")));
        assert_eq!(out.log.combined_values(&[2.0]).len(), 6);
        assert_eq!("R0+".parse::<Mode>().unwrap(), Mode::R0Plus);
        assert!("R1".parse::<Mode>().is_err());
    }
}
