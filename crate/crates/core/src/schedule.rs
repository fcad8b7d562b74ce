//! Noise ladders and the variance-preserving forward process.
//!
//! Every level satisfies `alpha(sigma)^2 + sigma^2 = 1`. The ladder runs from the clean
//! level `sigma_0 = 0` up to pure noise at `sigma_K = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LadderKind {
    #[default]
    Linear,
    Cosine,
}

impl std::str::FromStr for LadderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(LadderKind::Linear),
            "cosine" => Ok(LadderKind::Cosine),
            other => Err(Error::invalid(format!("unknown ladder kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for LadderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LadderKind::Linear => "linear",
            LadderKind::Cosine => "cosine",
        })
    }
}

/// Ordered noise levels `sigma_0 = 0 < sigma_1 < ... < sigma_K = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    kind: LadderKind,
}

/// Signal coefficient paired with a noise level.
#[inline]
pub fn alpha(sigma: f64) -> f64 {
    (1.0 - sigma * sigma).max(0.0).sqrt()
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: LadderKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let k = steps as f64;
        let mut sigmas: Vec<f64> = (0..=steps)
            .map(|i| {
                let t = i as f64 / k;
                match kind {
                    LadderKind::Linear => t,
                    LadderKind::Cosine => (t * std::f64::consts::FRAC_PI_2).sin(),
                }
            })
            .collect();
        sigmas[0] = 0.0;
        sigmas[steps] = 1.0;
        Ok(NoiseSchedule { sigmas, kind })
    }

    /// Rebuilds a schedule from a stored ladder, validating the invariants.
    pub fn from_sigmas(sigmas: Vec<f64>, kind: LadderKind) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::invalid("schedule needs at least two levels"));
        }
        if sigmas[0] != 0.0 || *sigmas.last().unwrap() != 1.0 {
            return Err(Error::invalid("schedule must start at 0 and end at 1"));
        }
        if sigmas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("schedule must be strictly increasing"));
        }
        Ok(NoiseSchedule { sigmas, kind })
    }

    /// Number of generator steps `K`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        alpha(self.sigmas[k])
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn kind(&self) -> LadderKind {
        self.kind
    }
}

/// `sqrt(1 - sigma^2) * x + sigma * eps`.
pub fn forward_diffuse(x: &[f64], sigma: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x.len() != eps.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: x has {} coordinates, eps has {}",
            x.len(),
            eps.len()
        )));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("noise level {sigma} outside [0, 1]")));
    }
    let a = alpha(sigma);
    Ok(x.iter().zip(eps).map(|(xi, ei)| a * xi + sigma * ei).collect())
}
