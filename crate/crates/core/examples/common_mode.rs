//! Two rewards that each favour two of four mixture modes share exactly one mode.
//! Training the generator on both pulls nearly all samples onto the shared one.
//!
//! Run with `cargo run --release --example common_mode`.

use rewardgen::data::Dataset;
use rewardgen::generator::{sample_batch, EtaPolicy};
use rewardgen::oracle::{grid_argmax, mode_coverage, GridSpec};
use rewardgen::rewards::{ExplicitReward, RewardTerm};
use rewardgen::schedule::{LadderKind, NoiseSchedule};
use rewardgen::scorenet::{pretrain_denoiser, Denoiser, PretrainConfig};
use rewardgen::trainer::{train, FrozenNets, Mode, NoHooks, TrainConfig};

fn main() -> rewardgen::Result<()> {
    let means = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
    let data = Dataset::mixture(means, 0.25, None, None)?;
    let mut pc = PretrainConfig::new(data);
    pc.steps = 3000;
    let phi = pretrain_denoiser(&pc, 7)?.net;

    let terms = vec![
        RewardTerm::explicit(
            "top",
            ExplicitReward::mode_proximity(vec![vec![1.0, 1.0], vec![-1.0, 1.0]], 0.5)?,
            1.0,
        )?,
        RewardTerm::explicit(
            "right",
            ExplicitReward::mode_proximity(vec![vec![1.0, 1.0], vec![1.0, -1.0]], 0.5)?,
            1.0,
        )?,
    ];
    let oracle = grid_argmax(&terms, &[1.0, 1.0], &GridSpec::cube(2, -3.0, 3.0, 201)?)?;
    println!("grid oracle: argmax {:?}, value {:.3}", oracle.argmax, oracle.max_value);

    let schedule = NoiseSchedule::new(4, LadderKind::Linear)?;
    let mut cfg = TrainConfig::new(Mode::R0, schedule.clone(), terms);
    cfg.iterations = 1000;
    cfg.omega_reg = 0.1;
    let theta = train(&cfg, &FrozenNets::new(&phi), &mut NoHooks)?.theta;

    let coverage = |net: &Denoiser| -> rewardgen::Result<f64> {
        let samples: Vec<Vec<f64>> = sample_batch(net, &schedule, EtaPolicy::Random, None, 1000, 99)?
            .into_iter()
            .map(|t| t.sample().to_vec())
            .collect();
        Ok(mode_coverage(&samples, std::slice::from_ref(&oracle.argmax), 0.3)?.on_mode)
    };
    println!("fraction near the shared mode: pretrained {:.3}, fine-tuned {:.3}", coverage(&phi)?, coverage(&theta)?);
    Ok(())
}
