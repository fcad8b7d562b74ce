//! End-to-end acceptance checks. Each test writes one `acceptance #N PASS|FAIL` line to
//! stderr (bypassing the test harness capture) before asserting.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rewardgen::cli::Checkpoint;
use rewardgen::data::Dataset;
use rewardgen::generator::{generate, generate_traced, sample_batch, ChainNoise, EtaPolicy};
use rewardgen::oracle::{finite_diff_gradient, grid_argmax, mode_coverage, GridSpec};
use rewardgen::rewards::{
    cfg_pullback_with_draw, combine, eval_explicit, weighted_value, ExplicitReward, GuidanceContext, RewardTerm,
    Weighting,
};
use rewardgen::rng::{normal_vec, stream};
use rewardgen::schedule::{LadderKind, NoiseSchedule};
use rewardgen::scorenet::{pretrain_denoiser, score, Architecture, Denoiser, ExactDenoiser, PretrainConfig};
use rewardgen::trainer::{
    iteration_gradient, train, weight_reg, weight_reg_gradient, Control, FrozenNets, IterationRecord, Mode,
    NoHooks, TrainConfig, TrainHooks,
};

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance #{n} {verdict} {title}: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn four_modes() -> Dataset {
    let means = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
    Dataset::mixture(means, 0.25, None, None).unwrap()
}

/// Generator pretrained on the four-mode mixture, shared by several criteria.
fn four_mode_phi() -> &'static Denoiser {
    static NET: OnceLock<Denoiser> = OnceLock::new();
    NET.get_or_init(|| {
        let mut pc = PretrainConfig::new(four_modes());
        pc.steps = 3000;
        pretrain_denoiser(&pc, 7).unwrap().net
    })
}

fn k4() -> NoiseSchedule {
    NoiseSchedule::new(4, LadderKind::Linear).unwrap()
}

fn bump(name: &str, centers: Vec<Vec<f64>>, tau: f64, weight: f64) -> RewardTerm {
    RewardTerm::explicit(name, ExplicitReward::mode_proximity(centers, tau).unwrap(), weight).unwrap()
}

fn common_mode_terms() -> Vec<RewardTerm> {
    vec![
        bump("r1", vec![vec![1.0, 1.0], vec![-1.0, 1.0]], 0.5, 1.0),
        bump("r2", vec![vec![1.0, 1.0], vec![1.0, -1.0]], 0.5, 1.0),
    ]
}

fn draw(net: &Denoiser, count: usize, seed: u64) -> Vec<Vec<f64>> {
    sample_batch(net, &k4(), EtaPolicy::Random, None, count, seed)
        .unwrap()
        .into_iter()
        .map(|t| t.sample().to_vec())
        .collect()
}

#[test]
fn criterion_1_ddim_reduction() {
    let target = vec![0.7, -1.3];
    let model = ExactDenoiser::unconditional(Dataset::point(target.clone()).unwrap());
    let sched = NoiseSchedule::new(8, LadderKind::Linear).unwrap();
    let z = normal_vec(&mut stream(3, &[1]), 2);
    let a = generate(&model, &z, &sched, EtaPolicy::Fixed(1.0), None, 11).unwrap();
    let b = generate(&model, &z, &sched, EtaPolicy::Fixed(1.0), None, 12).unwrap();
    let err = a.sample().iter().zip(&target).map(|(x, t)| (x - t).abs()).fold(0.0, f64::max);
    let same = a.states == b.states;
    let pass = err <= 1e-10 && same && a.noises != b.noises;
    report(1, "DDIM reduction", pass, &format!("max |x0 - x*| = {err:.2e}, noise-independent: {same}"));
    assert!(pass);
}

#[test]
fn criterion_2_common_mode_recovery() {
    let terms = common_mode_terms();
    let grid = GridSpec::cube(2, -3.0, 3.0, 401).unwrap();
    let oracle = grid_argmax(&terms, &[1.0, 1.0], &grid).unwrap();
    let a = vec![1.0, 1.0];
    let oracle_ok = oracle.argmax.iter().zip(&a).all(|(p, q)| (p - q).abs() <= grid.spacing(0));

    let phi = four_mode_phi();
    let mut hits = Vec::new();
    for seed in 0..5 {
        let mut cfg = TrainConfig::new(Mode::R0, k4(), terms.clone());
        cfg.iterations = 3000;
        cfg.batch = 64;
        cfg.omega_reg = 0.1;
        cfg.seed = seed;
        let theta = train(&cfg, &FrozenNets::new(phi), &mut NoHooks).unwrap().theta;
        let cov = mode_coverage(&draw(&theta, 1000, 1000 + seed), std::slice::from_ref(&a), 0.3).unwrap();
        hits.push(cov.on_mode);
    }
    let med = median(hits.clone());
    let pass = oracle_ok && med >= 0.9;
    report(
        2,
        "common-mode recovery",
        pass,
        &format!("oracle argmax {:?}; hit fractions {hits:?}, median {med:.3} (need >= 0.9)", oracle.argmax),
    );
    assert!(pass);
}

#[test]
fn criterion_3_weight_regularization() {
    let phi = four_mode_phi();
    let spurious = vec![bump("spurious", vec![vec![10.0, 10.0]], 3.0, 0.02)];
    let escape = |omega: f64, seed: u64| {
        let mut cfg = TrainConfig::new(Mode::R0, k4(), spurious.clone());
        cfg.iterations = 1500;
        cfg.omega_reg = omega;
        cfg.seed = seed;
        let theta = train(&cfg, &FrozenNets::new(phi), &mut NoHooks).unwrap().theta;
        let s = draw(&theta, 1000, 2000 + seed);
        s.iter().filter(|x| x[0].hypot(x[1]) > 4.0).count() as f64 / s.len() as f64
    };
    let seeds = [0, 1, 2];
    let free: Vec<f64> = seeds.iter().map(|&s| escape(0.0, s)).collect();
    let anchored: Vec<f64> = seeds.iter().map(|&s| escape(1.0, s)).collect();
    let pass = free.iter().all(|e| *e >= 0.5) && anchored.iter().all(|e| *e <= 0.05);
    report(
        3,
        "weight regularization",
        pass,
        &format!("escape fraction omega_reg=0: {free:?} (need >= 0.5), omega_reg=1: {anchored:?} (need <= 0.05)"),
    );
    assert!(pass);
}

fn total(terms: &[RewardTerm], x: &[f64], weighting: Weighting) -> Vec<f64> {
    let mut ctx = GuidanceContext::new(stream(0, &[0]));
    combine(terms, x, None, &mut ctx, weighting).unwrap().total
}

#[test]
fn criterion_4_gradient_normalization() {
    // (a) exact arithmetic: gradients (-3, -4) and (0, 2) become unit directions
    let x = [3.0, 4.0];
    let exact = vec![
        RewardTerm::explicit("sat", ExplicitReward::anti_saturation(0.5), 1.0).unwrap(),
        RewardTerm::explicit("half", ExplicitReward::half_space(vec![0.0, 2.0], -8.0), 2.0).unwrap(),
    ];
    let t = total(&exact, &x, Weighting::Normalized { floor: 1e-8 });
    let exact_ok = (t[0] + 0.6).abs() < 1e-15 && (t[1] - 1.2).abs() < 1e-15;

    // (b) rescaling a reward leaves the combined direction unchanged
    let base = common_mode_terms();
    let scaled = vec![base[0].clone().scaled(1e6), base[1].clone().scaled(1e-3)];
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let p = normal_vec(&mut stream(5, &[i]), 2);
        let (u, v) = (
            total(&base, &p, Weighting::default()),
            total(&scaled, &p, Weighting::default()),
        );
        worst = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let invariance_ok = worst <= 1e-12;

    // (c) imbalanced pair
    let strong = RewardTerm::explicit("strong", ExplicitReward::half_space(vec![1.0, 0.0], 0.0), 1.0)
        .unwrap()
        .scaled(1000.0);
    let weak = bump("weak", vec![vec![1.5, 0.0]], 0.5, 1.0);
    let terms = vec![strong, weak];
    let grid = GridSpec::cube(2, -3.0, 3.0, 401).unwrap();
    let max_of = |t: &RewardTerm| grid_argmax(std::slice::from_ref(t), &[1.0], &grid).unwrap().max_value;
    let (max_strong, max_weak) = (max_of(&terms[0]), max_of(&terms[1]));
    let phi = four_mode_phi();
    let run = |weighting: Weighting| {
        let mut cfg = TrainConfig::new(Mode::R0, k4(), terms.clone());
        cfg.iterations = 1500;
        cfg.seed = 1;
        cfg.weighting = weighting;
        let out = train(&cfg, &FrozenNets::new(phi), &mut NoHooks).unwrap();
        let first = &out.log.records[0].terms;
        let ratio = first[0].raw_norm / first[1].raw_norm;
        let s = draw(&out.theta, 1000, 99);
        let mean = |t: &RewardTerm| s.iter().map(|x| eval_explicit(t, x, None).unwrap().0).sum::<f64>() / 1000.0;
        (mean(&terms[0]) / max_strong, mean(&terms[1]) / max_weak, ratio)
    };
    let (ns, nw, ratio) = run(Weighting::default());
    let (fs, fw, _) = run(Weighting::Fixed);
    let imbalance_ok = ns > 0.8 && nw > 0.8 && fw < 0.5;
    let pass = exact_ok && invariance_ok && imbalance_ok;
    report(
        4,
        "gradient normalization",
        pass,
        &format!(
            "exact {exact_ok}; rescaling drift {worst:.1e}; initial raw-norm ratio {ratio:.0}; \
             normalized strong {ns:.3} weak {nw:.3} of max; fixed strong {fs:.3} weak {fw:.3} of max"
        ),
    );
    assert!(pass);
}

/// Stops training once the full-chain combined reward reaches `target`.
struct Threshold {
    terms: Vec<RewardTerm>,
    target: f64,
    reached: Option<usize>,
}

impl TrainHooks for Threshold {
    fn after_iteration(&mut self, record: &IterationRecord, theta: &Denoiser) -> rewardgen::Result<Control> {
        let s = draw(theta, 64, 4242);
        let mean = s
            .iter()
            .map(|x| weighted_value(&self.terms, &[1.0, 1.0], x).unwrap())
            .sum::<f64>()
            / s.len() as f64;
        if mean >= self.target {
            self.reached = Some(record.iter + 1);
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    }
}

#[test]
fn criterion_5_r0plus_convergence() {
    let terms = common_mode_terms();
    let grid = GridSpec::cube(2, -3.0, 3.0, 401).unwrap();
    let target = 0.9 * grid_argmax(&terms, &[1.0, 1.0], &grid).unwrap().max_value;
    let phi = four_mode_phi();
    let cap = 3000;
    let iterations = |mode: Mode, seed: u64| {
        let mut cfg = TrainConfig::new(mode, k4(), terms.clone());
        cfg.iterations = cap;
        cfg.seed = seed;
        let mut hook = Threshold {
            terms: terms.clone(),
            target,
            reached: None,
        };
        train(&cfg, &FrozenNets::new(phi), &mut hook).unwrap();
        hook.reached.map_or(f64::INFINITY, |n| n as f64)
    };
    let r0: Vec<f64> = (0..5).map(|s| iterations(Mode::R0, s)).collect();
    let r0p: Vec<f64> = (0..5).map(|s| iterations(Mode::R0Plus, s)).collect();

    let mut depth_cfg = TrainConfig::new(Mode::R0, k4(), terms.clone());
    let depth_r0 = iteration_gradient(&depth_cfg, phi, &FrozenNets::new(phi), 0).unwrap().record.depth;
    depth_cfg.mode = Mode::R0Plus;
    let depth_r0p = iteration_gradient(&depth_cfg, phi, &FrozenNets::new(phi), 0).unwrap().record.depth;

    let (m0, mp) = (median(r0.clone()), median(r0p.clone()));
    let depth_ok = depth_r0 == 4 && depth_r0p == 1;
    let pass = mp <= m0 && depth_ok;
    report(
        5,
        "R0+ convergence",
        pass,
        &format!(
            "iterations to {target:.3}: R0 {r0:?} (median {m0}), R0+ {r0p:?} (median {mp}); \
             differentiable depth R0 {depth_r0}, R0+ {depth_r0p}"
        ),
    );
    assert!(depth_ok);
    assert!(mp <= m0, "R0+ median {mp} iterations vs R0 {m0}");
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn criterion_6_gradient_correctness() {
    let h = 1e-4;
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let rewards = [
        ExplicitReward::mode_proximity(vec![vec![1.0, 1.0], vec![-1.0, 0.5]], 0.7).unwrap(),
        ExplicitReward::half_space(vec![0.8, -0.3], 0.2),
        ExplicitReward::anti_saturation(0.3),
    ];
    let mut reward_err: f64 = 0.0;
    for r in &rewards {
        for i in 0..10 {
            let x = normal_vec(&mut stream(6, &[i]), 2);
            let (_, g) = r.value_and_gradient(&x).unwrap();
            let fd = finite_diff_gradient(|p| r.value_and_gradient(p).unwrap().0, &x, h).unwrap();
            reward_err = reward_err.max(rel_err(&g, &fd));
        }
    }
    worst.push(("rewards", reward_err));

    let arch = Architecture {
        input_dim: 2,
        cond_classes: 0,
        hidden: vec![8, 8],
        skip: true,
    };
    let phi = Denoiser::new(arch.clone(), &mut stream(1, &[1]));
    let theta = Denoiser::new(arch, &mut stream(2, &[1]));
    let g = weight_reg_gradient(&theta, &phi).unwrap();
    let idx: Vec<usize> = (0..theta.param_count()).step_by(7).collect();
    let mut fd = Vec::new();
    for &i in &idx {
        let f = |v: f64| {
            let mut t = theta.clone();
            t.params_mut()[i] = v;
            weight_reg(&t, &phi).unwrap()
        };
        let p = theta.params()[i];
        fd.push((f(p + h) - f(p - h)) / (2.0 * h));
    }
    let picked: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
    worst.push(("weight_reg", rel_err(&picked, &fd)));

    // CFG pullback against the analytic log class posterior of a labelled mixture
    let data = Dataset::mixture(vec![vec![1.0, 0.0], vec![-1.0, 0.5]], 0.3, None, None).unwrap();
    let cond = ExactDenoiser::conditional(data.clone());
    let mut cfg_err: f64 = 0.0;
    for i in 0..10 {
        let mut rng = stream(7, &[i]);
        let x = normal_vec(&mut rng, 2);
        let eps = normal_vec(&mut rng, 2);
        let sigma = 0.2 + 0.06 * i as f64;
        let a = (1.0 - sigma * sigma).sqrt();
        let g = cfg_pullback_with_draw(&cond, &x, 0, sigma, &eps).unwrap();
        let log_post = |p: &[f64]| {
            let xt: Vec<f64> = p.iter().zip(&eps).map(|(v, e)| a * v + sigma * e).collect();
            data.log_density(&xt, sigma, Some(0)) - data.log_density(&xt, sigma, None)
        };
        cfg_err = cfg_err.max(rel_err(&g, &finite_diff_gradient(log_post, &x, h).unwrap()));
    }
    worst.push(("cfg pullback", cfg_err));

    // one-step generator loss R(G_theta(z)) differentiated in reverse mode
    let sched = NoiseSchedule::new(1, LadderKind::Linear).unwrap();
    let reward = &rewards[0];
    let mut gen_err: f64 = 0.0;
    for i in 0..3 {
        let mut rng = stream(8, &[i]);
        let z = normal_vec(&mut rng, 2);
        let noise = ChainNoise::draw(EtaPolicy::Random, 1, 2, &mut rng);
        let loss = |net: &Denoiser| {
            let out = generate_traced(net, &z, &sched, &noise, None).unwrap().output;
            reward.value_and_gradient(&out).unwrap()
        };
        let chain = generate_traced(&theta, &z, &sched, &noise, None).unwrap();
        let (_, g_out) = loss(&theta);
        let mut grad = vec![0.0; theta.param_count()];
        chain.backward(&theta, &g_out, None, &mut grad);
        let mut fd = Vec::new();
        for &j in &idx {
            let mut tp = theta.clone();
            tp.params_mut()[j] += h;
            let mut tm = theta.clone();
            tm.params_mut()[j] -= h;
            fd.push((loss(&tp).0 - loss(&tm).0) / (2.0 * h));
        }
        let picked: Vec<f64> = idx.iter().map(|&j| grad[j]).collect();
        gen_err = gen_err.max(rel_err(&picked, &fd));
    }
    worst.push(("1-step generator", gen_err));

    let pass = worst.iter().all(|(_, e)| *e < 1e-4);
    report(6, "gradient correctness", pass, &format!("max relative errors {worst:?} (need < 1e-4)"));
    assert!(pass);
}

#[test]
fn criterion_7_density_ratio_guidance() {
    let sharp = Dataset::mixture(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], 0.1, None, None).unwrap();
    let smooth = sharp.with_component_std(0.5);
    let pretrain = |data: &Dataset, conditional: bool, seed: u64| {
        let mut pc = PretrainConfig::new(data.clone());
        pc.steps = 3000;
        pc.conditional = conditional;
        pretrain_denoiser(&pc, seed).unwrap().net
    };
    let phi = pretrain(&sharp, false, 7);
    let net_b = pretrain(&smooth, false, 8);
    let psi = pretrain(&sharp, true, 9);

    let mean_log_density = |net: &Denoiser, seed: u64| {
        let s = draw(net, 1000, seed);
        s.iter().map(|x| sharp.log_density(x, 0.0, None)).sum::<f64>() / s.len() as f64
    };
    let run = |guided: bool, seed: u64| {
        let terms = if guided {
            vec![RewardTerm::density_ratio("ratio", 1.0).unwrap()]
        } else {
            Vec::new()
        };
        let mut cfg = TrainConfig::new(Mode::R0, k4(), terms);
        cfg.omega_cfg = 1.0;
        cfg.cfg_class = Some(0);
        cfg.iterations = 1000;
        cfg.seed = seed;
        let mut nets = FrozenNets::new(&phi);
        nets.cfg = Some(&psi);
        nets.ratio = Some((&phi, &net_b));
        mean_log_density(&train(&cfg, &nets, &mut NoHooks).unwrap().theta, 3000 + seed)
    };
    let seeds = [0, 1, 2];
    let plain: Vec<f64> = seeds.iter().map(|&s| run(false, s)).collect();
    let guided: Vec<f64> = seeds.iter().map(|&s| run(true, s)).collect();
    let gain = median(guided.iter().zip(&plain).map(|(g, p)| g - p).collect());
    let pass = gain >= 0.5;
    report(
        7,
        "density-ratio guidance",
        pass,
        &format!(
            "mean log p_A at init {:.3}; unguided {plain:.3?}; guided {guided:.3?}; median gain {gain:.3} nats (need >= 0.5)",
            mean_log_density(&phi, 3000)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_score_learning() {
    let mut pc = PretrainConfig::new(Dataset::standard_normal(2).unwrap());
    pc.steps = 6000;
    let net = pretrain_denoiser(&pc, 5).unwrap().net;
    let mut rms = Vec::new();
    for sigma in [0.3, 0.6, 0.9] {
        let mut sq = 0.0;
        let mut n = 0.0;
        for i in 0..21 {
            for j in 0..21 {
                let x = [-2.0 + 0.2 * i as f64, -2.0 + 0.2 * j as f64];
                let s = score(&net, &x, sigma, None).unwrap();
                sq += (s[0] + x[0]).powi(2) + (s[1] + x[1]).powi(2);
                n += 1.0;
            }
        }
        rms.push((sq / n).sqrt());
    }
    let pass = rms.iter().all(|r| *r < 0.1);
    report(8, "score learning", pass, &format!("RMS score error at sigma 0.3/0.6/0.9: {rms:.4?} (need < 0.1)"));
    assert!(pass);
}

#[test]
fn criterion_9_reproducibility_and_persistence() {
    let arch = Architecture {
        input_dim: 2,
        cond_classes: 0,
        hidden: vec![16, 16],
        skip: true,
    };
    let phi = Denoiser::new(arch, &mut stream(3, &[3]));
    let run = |mode: Mode| {
        let mut cfg = TrainConfig::new(mode, k4(), common_mode_terms());
        cfg.iterations = 40;
        cfg.batch = 16;
        cfg.seed = 21;
        train(&cfg, &FrozenNets::new(&phi), &mut NoHooks).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    for mode in [Mode::R0, Mode::R0Plus] {
        let (a, b) = (run(mode), run(mode));
        let path = |n: &str| dir.path().join(format!("{mode}-{n}.ckpt"));
        Checkpoint::new("train", 21, a.theta.clone(), Some(k4())).save(&path("a")).unwrap();
        Checkpoint::new("train", 21, b.theta.clone(), Some(k4())).save(&path("b")).unwrap();
        identical &= a.log.to_csv(false) == b.log.to_csv(false);
        identical &= std::fs::read(path("a")).unwrap() == std::fs::read(path("b")).unwrap();
    }
    let round_trip = |p: &Path| {
        let bytes = std::fs::read(p).unwrap();
        Checkpoint::load(p).unwrap().to_bytes() == bytes
    };
    let exact = round_trip(&dir.path().join("R0-a.ckpt")) && round_trip(&dir.path().join("R0+-a.ckpt"));
    let pass = identical && exact;
    report(
        9,
        "reproducibility and persistence",
        pass,
        &format!("bit-identical run logs and checkpoints: {identical}; byte-exact round trip: {exact}"),
    );
    assert!(pass);
}
