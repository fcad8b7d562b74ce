use rand::Rng;

use super::mlp::{Architecture, Denoiser};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{normal_vec, stream, tag};
use crate::schedule::forward_diffuse;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub dataset: Dataset,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the condition with the null token.
    pub label_dropout: f64,
    /// Train a class-conditional net (one class per dataset label).
    pub conditional: bool,
    pub hidden: Vec<usize>,
    pub skip: bool,
    /// Learning rate reached at the last step by cosine decay (equal to `lr` for a constant rate).
    pub lr_final: f64,
}

impl PretrainConfig {
    pub fn new(dataset: Dataset) -> Self {
        PretrainConfig {
            dataset,
            steps: 4000,
            batch: 128,
            lr: 1e-3,
            label_dropout: 0.1,
            conditional: false,
            hidden: vec![64, 64, 64],
            skip: true,
            lr_final: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::invalid("pretraining needs steps >= 1 and batch >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_final > 0.0 && self.lr_final <= self.lr) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::invalid("label_dropout must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.dataset.dim(),
            cond_classes: if self.conditional {
                self.dataset.num_classes()
            } else {
                0
            },
            hidden: self.hidden.clone(),
            skip: self.skip,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub net: Denoiser,
    /// Mean denoising loss of every step's batch.
    pub losses: Vec<f64>,
}

/// Denoising regression `E ||f(x_t, sigma, c) - x0||^2` with `sigma ~ U(0, 1]`.
pub fn pretrain_denoiser(cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let arch = cfg.architecture();
    let mut net = Denoiser::new(arch, &mut stream(seed, &[tag::INIT]));
    let mut opt = Adam::new(net.param_count(), cfg.lr);
    let mut grad = vec![0.0; net.param_count()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let d = cfg.dataset.dim();
    let scale = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let mut rng = stream(seed, &[tag::PRETRAIN, step as u64]);
        grad.fill(0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let (x0, label) = cfg.dataset.sample(&mut rng);
            let sigma = 1.0 - rng.random::<f64>();
            let eps = normal_vec(&mut rng, d);
            let xt = forward_diffuse(&x0, sigma, &eps)?;
            let class = if cfg.conditional && rng.random::<f64>() >= cfg.label_dropout {
                Some(label)
            } else {
                None
            };
            let cache = net.forward(&xt, sigma, class)?;
            let resid: Vec<f64> = cache.output.iter().zip(&x0).map(|(f, x)| f - x).collect();
            loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
            let up: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
            net.backward(&cache, &up, Some(&mut grad));
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged {
                iteration: step,
                detail: format!("denoising loss {loss}"),
            });
        }
        losses.push(loss);
        let progress = step as f64 / cfg.steps.max(2).saturating_sub(1) as f64;
        opt.lr = cfg.lr_final
            + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step(net.params_mut(), &grad);
    }
    Ok(PretrainOutcome { net, losses })
}
