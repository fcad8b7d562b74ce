//! Registered synthetic distributions.
//!
//! Every dataset is an isotropic Gaussian mixture with labelled components. A one-point
//! dataset is a single component of zero width; the standard normal is one unit-width
//! component at the origin. Because the family is closed under Gaussian smoothing and
//! under forward diffusion, each dataset also provides its exact posterior-mean denoiser,
//! marginal score and log-density.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::alpha;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    dim: usize,
    components: Vec<Component>,
    num_classes: usize,
}

impl Dataset {
    pub fn point(x: Vec<f64>) -> Result<Self> {
        Self::mixture_named("point", vec![x], 0.0, None, None)
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::mixture_named("standard_normal", vec![vec![0.0; dim]], 1.0, None, None)
    }

    /// Equal-width mixture. Labels default to one class per component, weights to uniform.
    pub fn mixture(
        means: Vec<Vec<f64>>,
        std: f64,
        labels: Option<Vec<usize>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::mixture_named("mixture", means, std, labels, weights)
    }

    fn mixture_named(
        name: &str,
        means: Vec<Vec<f64>>,
        std: f64,
        labels: Option<Vec<usize>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::invalid("mixture means must share a positive dimension"));
        }
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("component std {std} must be finite and >= 0")));
        }
        let n = means.len();
        let labels = labels.unwrap_or_else(|| (0..n).collect());
        let weights = weights.unwrap_or_else(|| vec![1.0; n]);
        if labels.len() != n || weights.len() != n {
            return Err(Error::invalid("labels and weights must match the component count"));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("component weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        let num_classes = labels.iter().max().unwrap() + 1;
        let components = means
            .into_iter()
            .zip(labels)
            .zip(weights)
            .map(|((mean, label), w)| Component {
                mean,
                std,
                weight: w / total,
                label,
            })
            .collect();
        Ok(Dataset {
            name: name.to_string(),
            dim,
            components,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// The same data convolved with `N(0, extra_std^2 I)`.
    pub fn smoothed(&self, extra_std: f64) -> Dataset {
        let mut d = self.clone();
        for c in &mut d.components {
            c.std = (c.std * c.std + extra_std * extra_std).sqrt();
        }
        d.name = format!("{}+smooth", self.name);
        d
    }

    /// The data smoothed so that every component has width `target_std`.
    pub fn with_component_std(&self, target_std: f64) -> Dataset {
        let mut d = self.clone();
        for c in &mut d.components {
            c.std = target_std;
        }
        d
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                pick = c;
                break;
            }
        }
        let x = pick
            .mean
            .iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                m + pick.std * e
            })
            .collect();
        (x, pick.label)
    }

    fn selected(&self, class: Option<usize>) -> impl Iterator<Item = &Component> {
        self.components
            .iter()
            .filter(move |c| class.is_none_or(|k| c.label == k))
    }

    /// Log-weights and per-component quantities of the diffused marginal at `sigma`.
    fn responsibilities(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Vec<(f64, &Component, f64)> {
        let a = alpha(sigma);
        let d = self.dim as f64;
        let mut out: Vec<(f64, &Component, f64)> = self
            .selected(class)
            .map(|c| {
                let var = a * a * c.std * c.std + sigma * sigma;
                let sq: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
                let logp = c.weight.ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                    - 0.5 * sq / var;
                (logp, c, var)
            })
            .collect();
        let m = out.iter().map(|o| o.0).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = out.iter().map(|o| (o.0 - m).exp()).sum();
        for o in &mut out {
            o.0 = (o.0 - m).exp() / z;
        }
        out
    }

    /// Log-density of the marginal at noise level `sigma` (the data itself at `sigma = 0`).
    pub fn log_density(&self, x: &[f64], sigma: f64, class: Option<usize>) -> f64 {
        let a = alpha(sigma);
        let d = self.dim as f64;
        let terms: Vec<f64> = self
            .selected(class)
            .map(|c| {
                let var = a * a * c.std * c.std + sigma * sigma;
                let sq: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var
            })
            .collect();
        let wsum: f64 = self.selected(class).map(|c| c.weight).sum();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - wsum.ln()
    }

    /// Exact marginal score `grad_x log p_sigma(x | class)`.
    pub fn score(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Vec<f64> {
        let a = alpha(sigma);
        let mut s = vec![0.0; self.dim];
        for (r, c, var) in self.responsibilities(x, sigma, class) {
            for ((si, xi), mi) in s.iter_mut().zip(x).zip(&c.mean) {
                *si -= r * (xi - a * mi) / var;
            }
        }
        s
    }

    /// Exact posterior mean `E[x0 | x_sigma = x, class]`.
    pub fn posterior_mean(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Vec<f64> {
        let a = alpha(sigma);
        let mut m = vec![0.0; self.dim];
        for (r, c, var) in self.responsibilities(x, sigma, class) {
            let gain = if var > 0.0 { a * c.std * c.std / var } else { 0.0 };
            for ((mi, xi), ci) in m.iter_mut().zip(x).zip(&c.mean) {
                *mi += r * (ci + gain * (xi - a * ci));
            }
        }
        m
    }

    /// Distance from `x` to the nearest component mean.
    pub fn distance_to_support(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.mean
                    .iter()
                    .zip(x)
                    .map(|(m, xi)| (m - xi).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }
}
