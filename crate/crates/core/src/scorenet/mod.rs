//! Denoisers, score conversion, guidance gradients and denoising pretraining.

mod mlp;
mod pretrain;

pub use mlp::{Architecture, Denoiser, ForwardCache};
pub use pretrain::{pretrain_denoiser, PretrainConfig, PretrainOutcome};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::schedule::alpha;

/// Anything that predicts the clean sample from a noised one.
pub trait DenoiseModel {
    fn dim(&self) -> usize;

    /// Number of condition classes; 0 for unconditional models.
    fn cond_classes(&self) -> usize;

    fn denoise(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Result<Vec<f64>>;
}

impl DenoiseModel for Denoiser {
    fn dim(&self) -> usize {
        Denoiser::dim(self)
    }

    fn cond_classes(&self) -> usize {
        Denoiser::cond_classes(self)
    }

    fn denoise(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Result<Vec<f64>> {
        Denoiser::denoise(self, x, sigma, class)
    }
}

/// Bayes-optimal denoiser of a registered dataset (posterior mean).
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    pub data: Dataset,
    conditional: bool,
}

impl ExactDenoiser {
    pub fn unconditional(data: Dataset) -> Self {
        ExactDenoiser {
            data,
            conditional: false,
        }
    }

    pub fn conditional(data: Dataset) -> Self {
        ExactDenoiser {
            data,
            conditional: true,
        }
    }
}

impl DenoiseModel for ExactDenoiser {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn cond_classes(&self) -> usize {
        if self.conditional {
            self.data.num_classes()
        } else {
            0
        }
    }

    fn denoise(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Result<Vec<f64>> {
        if x.len() != self.data.dim() {
            return Err(Error::invalid("dimension mismatch"));
        }
        if class.is_some() && !self.conditional {
            return Err(Error::invalid("condition supplied to an unconditional model"));
        }
        Ok(self.data.posterior_mean(x, sigma, class))
    }
}

/// `(x_t - sqrt(1 - sigma^2) * x0hat) / sigma`.
pub fn eps_from_x0(x_t: &[f64], sigma: f64, x0hat: &[f64]) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::invalid(format!("epsilon requested at noise level {sigma}")));
    }
    if x_t.len() != x0hat.len() {
        return Err(Error::invalid("dimension mismatch"));
    }
    let a = alpha(sigma);
    Ok(x_t.iter().zip(x0hat).map(|(x, f)| (x - a * f) / sigma).collect())
}

/// Marginal score `-(x_t - alpha * f(x_t)) / sigma^2`.
pub fn score<M: DenoiseModel + ?Sized>(
    net: &M,
    x_t: &[f64],
    sigma: f64,
    class: Option<usize>,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("score requested at the clean level"));
    }
    let f = net.denoise(x_t, sigma, class)?;
    let a = alpha(sigma);
    let s2 = sigma * sigma;
    Ok(x_t.iter().zip(&f).map(|(x, fi)| -(x - a * fi) / s2).collect())
}

/// Classifier-free estimate of `grad log p(c | x_t)`.
pub fn cfg_gradient<M: DenoiseModel + ?Sized>(
    net: &M,
    x_t: &[f64],
    sigma: f64,
    class: usize,
) -> Result<Vec<f64>> {
    if net.cond_classes() == 0 {
        return Err(Error::invalid("guidance gradient needs a conditional network"));
    }
    let cond = score(net, x_t, sigma, Some(class))?;
    let uncond = score(net, x_t, sigma, None)?;
    Ok(cond.iter().zip(&uncond).map(|(a, b)| a - b).collect())
}

/// Implicit classifier gradient `grad log p(x_t | A) - grad log p(x_t | B)`.
pub fn density_ratio_gradient<A, B>(net_a: &A, net_b: &B, x_t: &[f64], sigma: f64) -> Result<Vec<f64>>
where
    A: DenoiseModel + ?Sized,
    B: DenoiseModel + ?Sized,
{
    if net_a.dim() != net_b.dim() || net_a.dim() != x_t.len() {
        return Err(Error::invalid("dimension mismatch between density-ratio networks"));
    }
    let sa = score(net_a, x_t, sigma, None)?;
    let sb = score(net_b, x_t, sigma, None)?;
    Ok(sa.iter().zip(&sb).map(|(a, b)| a - b).collect())
}
