//! The guidance reward for class `c` is the log class posterior of a conditional model.
//! On a labelled mixture its gradient can be checked against the exact posterior.

use rewardgen::data::Dataset;
use rewardgen::oracle::finite_diff_gradient;
use rewardgen::rewards::cfg_pullback_with_draw;
use rewardgen::scorenet::ExactDenoiser;

fn main() -> rewardgen::Result<()> {
    let data = Dataset::mixture(vec![vec![1.0, 0.0], vec![-1.0, 0.5]], 0.3, None, None)?;
    let model = ExactDenoiser::conditional(data.clone());
    let (sigma, eps) = (0.5_f64, [0.3, -0.2]);
    let alpha = (1.0 - sigma * sigma).sqrt();

    for x in [[0.0, 0.0], [0.5, 0.5], [-1.0, 1.0]] {
        let pulled = cfg_pullback_with_draw(&model, &x, 0, sigma, &eps)?;
        let log_posterior = |p: &[f64]| {
            let xt: Vec<f64> = p.iter().zip(&eps).map(|(v, e)| alpha * v + sigma * e).collect();
            data.log_density(&xt, sigma, Some(0)) - data.log_density(&xt, sigma, None)
        };
        let fd = finite_diff_gradient(log_posterior, &x, 1e-5)?;
        println!("x = {x:?}: guidance gradient {pulled:.6?}, finite difference {fd:.6?}");
    }
    Ok(())
}
