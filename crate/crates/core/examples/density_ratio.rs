//! Classifier-free guidance toward class 0 drives samples far off the data. Adding a
//! density-ratio reward between a sharp model and a smoothed copy keeps them on the modes.

use rewardgen::data::Dataset;
use rewardgen::generator::{sample_batch, EtaPolicy};
use rewardgen::rewards::RewardTerm;
use rewardgen::schedule::{LadderKind, NoiseSchedule};
use rewardgen::scorenet::{pretrain_denoiser, Denoiser, PretrainConfig};
use rewardgen::trainer::{train, FrozenNets, Mode, NoHooks, TrainConfig};

fn pretrained(data: &Dataset, conditional: bool, seed: u64) -> rewardgen::Result<Denoiser> {
    let mut pc = PretrainConfig::new(data.clone());
    pc.steps = 3000;
    pc.conditional = conditional;
    Ok(pretrain_denoiser(&pc, seed)?.net)
}

fn main() -> rewardgen::Result<()> {
    let sharp = Dataset::mixture(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], 0.1, None, None)?;
    let smooth = sharp.with_component_std(0.5);
    let phi = pretrained(&sharp, false, 7)?;
    let blurred = pretrained(&smooth, false, 8)?;
    let psi = pretrained(&sharp, true, 9)?;
    let schedule = NoiseSchedule::new(4, LadderKind::Linear)?;

    let log_density = |net: &Denoiser| -> rewardgen::Result<f64> {
        let samples = sample_batch(net, &schedule, EtaPolicy::Random, None, 1000, 5)?;
        Ok(samples.iter().map(|t| sharp.log_density(t.sample(), 0.0, None)).sum::<f64>() / 1000.0)
    };
    println!("pretrained: mean log density {:.3}", log_density(&phi)?);

    for guided in [false, true] {
        let terms = if guided { vec![RewardTerm::density_ratio("ratio", 1.0)?] } else { Vec::new() };
        let mut cfg = TrainConfig::new(Mode::R0, schedule.clone(), terms);
        cfg.omega_cfg = 1.0;
        cfg.cfg_class = Some(0);
        cfg.iterations = 1000;
        let mut nets = FrozenNets::new(&phi);
        nets.cfg = Some(&psi);
        nets.ratio = Some((&phi, &blurred));
        let theta = train(&cfg, &nets, &mut NoHooks)?.theta;
        println!("ratio reward {guided}: mean log density {:.3}", log_density(&theta)?);
    }
    Ok(())
}
