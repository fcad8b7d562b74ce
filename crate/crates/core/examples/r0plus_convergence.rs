//! Compares end-to-end training against the single-step variant that detaches the
//! first `k` steps of the chain. Reports iterations to reach 90% of the oracle reward.

use rewardgen::data::Dataset;
use rewardgen::generator::{sample_batch, EtaPolicy};
use rewardgen::oracle::{grid_argmax, GridSpec};
use rewardgen::rewards::{weighted_value, ExplicitReward, RewardTerm};
use rewardgen::schedule::{LadderKind, NoiseSchedule};
use rewardgen::scorenet::{pretrain_denoiser, Denoiser, PretrainConfig};
use rewardgen::trainer::{train, Control, FrozenNets, IterationRecord, Mode, TrainConfig, TrainHooks};

struct Until {
    terms: Vec<RewardTerm>,
    schedule: NoiseSchedule,
    target: f64,
    reached: Option<usize>,
    depth: usize,
}

impl TrainHooks for Until {
    fn after_iteration(&mut self, record: &IterationRecord, theta: &Denoiser) -> rewardgen::Result<Control> {
        self.depth = record.depth;
        let samples = sample_batch(theta, &self.schedule, EtaPolicy::Random, None, 64, 17)?;
        let mut mean = 0.0;
        for t in &samples {
            mean += weighted_value(&self.terms, &[1.0, 1.0], t.sample())? / samples.len() as f64;
        }
        if mean < self.target {
            return Ok(Control::Continue);
        }
        self.reached = Some(record.iter + 1);
        Ok(Control::Stop)
    }
}

fn main() -> rewardgen::Result<()> {
    let means = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
    let mut pc = PretrainConfig::new(Dataset::mixture(means, 0.25, None, None)?);
    pc.steps = 3000;
    let phi = pretrain_denoiser(&pc, 7)?.net;
    let terms = vec![
        RewardTerm::explicit("top", ExplicitReward::mode_proximity(vec![vec![1.0, 1.0], vec![-1.0, 1.0]], 0.5)?, 1.0)?,
        RewardTerm::explicit("right", ExplicitReward::mode_proximity(vec![vec![1.0, 1.0], vec![1.0, -1.0]], 0.5)?, 1.0)?,
    ];
    let best = grid_argmax(&terms, &[1.0, 1.0], &GridSpec::cube(2, -3.0, 3.0, 201)?)?.max_value;
    let schedule = NoiseSchedule::new(4, LadderKind::Linear)?;

    for mode in [Mode::R0, Mode::R0Plus] {
        for seed in 0..3 {
            let mut cfg = TrainConfig::new(mode, schedule.clone(), terms.clone());
            cfg.iterations = 500;
            cfg.seed = seed;
            let mut hook = Until { terms: terms.clone(), schedule: schedule.clone(), target: 0.9 * best, reached: None, depth: 0 };
            let started = std::time::Instant::now();
            train(&cfg, &FrozenNets::new(&phi), &mut hook)?;
            println!(
                "{mode} seed {seed}: depth {}, iterations {:?}, {:.2}s",
                hook.depth,
                hook.reached,
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
