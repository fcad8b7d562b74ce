//! A reward bump far from the data drags samples away unless the squared weight
//! distance to the pretrained network holds them back.

use rewardgen::data::Dataset;
use rewardgen::generator::{sample_batch, EtaPolicy};
use rewardgen::rewards::{ExplicitReward, RewardTerm};
use rewardgen::schedule::{LadderKind, NoiseSchedule};
use rewardgen::scorenet::{pretrain_denoiser, PretrainConfig};
use rewardgen::trainer::{train, FrozenNets, Mode, NoHooks, TrainConfig};

fn main() -> rewardgen::Result<()> {
    let means = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
    let mut pc = PretrainConfig::new(Dataset::mixture(means, 0.25, None, None)?);
    pc.steps = 3000;
    let phi = pretrain_denoiser(&pc, 7)?.net;
    let far = RewardTerm::explicit("far", ExplicitReward::mode_proximity(vec![vec![10.0, 10.0]], 3.0)?, 0.02)?;
    let schedule = NoiseSchedule::new(4, LadderKind::Linear)?;

    for omega in [0.0, 0.1, 1.0] {
        let mut cfg = TrainConfig::new(Mode::R0, schedule.clone(), vec![far.clone()]);
        cfg.iterations = 1500;
        cfg.omega_reg = omega;
        let out = train(&cfg, &FrozenNets::new(&phi), &mut NoHooks)?;
        let samples = sample_batch(&out.theta, &schedule, EtaPolicy::Random, None, 1000, 2)?;
        let escaped = samples.iter().filter(|t| t.sample()[0].hypot(t.sample()[1]) > 4.0).count();
        let reg = out.log.records.last().map_or(0.0, |r| r.reg_loss);
        println!("omega_reg {omega}: {escaped}/1000 samples beyond radius 4, final regularization loss {reg:.3e}");
    }
    Ok(())
}
