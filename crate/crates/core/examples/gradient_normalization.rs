//! A reward scaled by 1000 swamps a weak one under fixed weighting. Normalizing each
//! reward gradient before combining lets both be satisfied.

use rewardgen::data::Dataset;
use rewardgen::generator::{sample_batch, EtaPolicy};
use rewardgen::rewards::{eval_explicit, ExplicitReward, RewardTerm, Weighting};
use rewardgen::schedule::{LadderKind, NoiseSchedule};
use rewardgen::scorenet::{pretrain_denoiser, PretrainConfig};
use rewardgen::trainer::{train, FrozenNets, Mode, NoHooks, TrainConfig};

fn main() -> rewardgen::Result<()> {
    let means = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
    let mut pc = PretrainConfig::new(Dataset::mixture(means, 0.25, None, None)?);
    pc.steps = 3000;
    let phi = pretrain_denoiser(&pc, 7)?.net;

    let terms = vec![
        RewardTerm::explicit("strong", ExplicitReward::half_space(vec![1.0, 0.0], 0.0), 1.0)?.scaled(1000.0),
        RewardTerm::explicit("weak", ExplicitReward::mode_proximity(vec![vec![1.5, 0.0]], 0.5)?, 1.0)?,
    ];
    let schedule = NoiseSchedule::new(4, LadderKind::Linear)?;

    for (label, weighting) in [("normalized", Weighting::default()), ("fixed", Weighting::Fixed)] {
        let mut cfg = TrainConfig::new(Mode::R0, schedule.clone(), terms.clone());
        cfg.iterations = 1500;
        cfg.seed = 1;
        cfg.weighting = weighting;
        let out = train(&cfg, &FrozenNets::new(&phi), &mut NoHooks)?;
        let first = &out.log.records[0].terms;
        let samples = sample_batch(&out.theta, &schedule, EtaPolicy::Random, None, 1000, 3)?;
        let mut means = [0.0; 2];
        for t in &samples {
            for (m, term) in means.iter_mut().zip(&terms) {
                *m += eval_explicit(term, t.sample(), None)?.0 / samples.len() as f64;
            }
        }
        println!(
            "{label:>10}: initial gradient norms {:.1} vs {:.3}; mean rewards strong {:.1}, weak {:.3}",
            first[0].raw_norm, first[1].raw_norm, means[0], means[1]
        );
    }
    Ok(())
}
