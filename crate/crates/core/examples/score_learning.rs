//! Pretrains a denoiser on a standard normal, where the true score at every noise
//! level is `-x`, and reports the RMS score error on a grid.

use rewardgen::data::Dataset;
use rewardgen::scorenet::{pretrain_denoiser, score, PretrainConfig};

fn main() -> rewardgen::Result<()> {
    let mut pc = PretrainConfig::new(Dataset::standard_normal(2)?);
    pc.steps = 3000;
    let run = pretrain_denoiser(&pc, 5)?;
    println!("final pretraining loss {:.4}", run.losses.last().copied().unwrap_or(f64::NAN));

    for sigma in [0.1, 0.3, 0.6, 0.9] {
        let mut sq = 0.0;
        let mut n = 0.0;
        for i in 0..21 {
            for j in 0..21 {
                let x = [-2.0 + 0.2 * i as f64, -2.0 + 0.2 * j as f64];
                let s = score(&run.net, &x, sigma, None)?;
                sq += (s[0] + x[0]).powi(2) + (s[1] + x[1]).powi(2);
                n += 1.0;
            }
        }
        println!("sigma {sigma}: RMS score error {:.4}", (sq / n).sqrt());
    }
    Ok(())
}
