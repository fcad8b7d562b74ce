//! Feed-forward x0-prediction network with hand-written reverse mode.
//!
//! Input layout: `[x (d), sigma, sqrt(1 - sigma^2), one-hot condition (C)]`. The null
//! condition is the all-zero block. Hidden layers use `tanh`; the output layer is affine.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::alpha;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Number of condition classes; 0 means unconditional.
    pub cond_classes: usize,
    pub hidden: Vec<usize>,
    /// Adds `sqrt(1 - sigma^2) * x` to the network output.
    pub skip: bool,
}

impl Architecture {
    /// Three hidden layers of width 64 with the input skip.
    pub fn standard(input_dim: usize, cond_classes: usize) -> Self {
        Architecture {
            input_dim,
            cond_classes,
            hidden: vec![64, 64, 64],
            skip: true,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.input_dim + 2 + self.cond_classes
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.feature_dim());
        w.extend_from_slice(&self.hidden);
        w.push(self.input_dim);
        w
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.widths().windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    rows: usize,
    cols: usize,
    weight: usize,
    bias: usize,
}

/// Parameters of the denoising network stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Architecture,
    params: Vec<f64>,
}

/// Values cached by a forward pass and consumed by [`Denoiser::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs: features, then each hidden activation.
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Denoiser {
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut params = Vec::with_capacity(arch.param_count());
        for (rows, cols) in arch.layer_shapes() {
            let dist = Normal::new(0.0, (1.0 / cols as f64).sqrt()).unwrap();
            params.extend((0..rows * cols).map(|_| dist.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, rows));
        }
        Denoiser { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("denoiser parameters", "non-finite value"));
        }
        Ok(Denoiser { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn cond_classes(&self) -> usize {
        self.arch.cond_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let mut off = 0;
        self.arch
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let slot = LayerSlot {
                    rows,
                    cols,
                    weight: off,
                    bias: off + rows * cols,
                };
                off += rows * cols + rows;
                slot
            })
            .collect()
    }

    /// Named parameter blocks `(name, shape, values)` in storage order.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, s) in self.slots().into_iter().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                vec![s.rows, s.cols],
                &self.params[s.weight..s.bias],
            ));
            out.push((
                format!("layer{i}.bias"),
                vec![s.rows],
                &self.params[s.bias..s.bias + s.rows],
            ));
        }
        out
    }

    /// Adds `shift` to the output bias, translating every prediction by a constant vector.
    pub fn shift_output(&mut self, shift: &[f64]) {
        let last = *self.slots().last().unwrap();
        for (b, s) in self.params[last.bias..last.bias + last.rows].iter_mut().zip(shift) {
            *b += s;
        }
    }

    /// Zeroes the final affine layer, leaving only the input skip (if any).
    pub fn zero_output_layer(&mut self) {
        let last = *self.slots().last().unwrap();
        self.params[last.weight..].fill(0.0);
    }

    fn features(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Result<Vec<f64>> {
        if x.len() != self.arch.input_dim {
            return Err(Error::invalid(format!(
                "input has {} coordinates, network expects {}",
                x.len(),
                self.arch.input_dim
            )));
        }
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::invalid(format!("noise level {sigma} outside [0, 1]")));
        }
        let mut f = Vec::with_capacity(self.arch.feature_dim());
        f.extend_from_slice(x);
        f.push(sigma);
        f.push(alpha(sigma));
        let start = f.len();
        f.resize(self.arch.feature_dim(), 0.0);
        if let Some(c) = class {
            if self.arch.cond_classes == 0 {
                return Err(Error::invalid("condition supplied to an unconditional network"));
            }
            if c >= self.arch.cond_classes {
                return Err(Error::invalid(format!(
                    "class {c} out of range for {} classes",
                    self.arch.cond_classes
                )));
            }
            f[start + c] = 1.0;
        }
        Ok(f)
    }

    pub fn forward(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Result<ForwardCache> {
        let mut inputs = vec![self.features(x, sigma, class)?];
        let slots = self.slots();
        let n = slots.len();
        let mut output = Vec::new();
        for (li, s) in slots.iter().enumerate() {
            let input = inputs.last().unwrap();
            let w = &self.params[s.weight..s.bias];
            let b = &self.params[s.bias..s.bias + s.rows];
            let mut out: Vec<f64> = w
                .chunks_exact(s.cols)
                .zip(b)
                .map(|(row, bi)| bi + dot(row, input))
                .collect();
            if li + 1 < n {
                out.iter_mut().for_each(|v| *v = v.tanh());
                inputs.push(out);
            } else {
                output = out;
            }
        }
        if self.arch.skip {
            let a = alpha(sigma);
            output.iter_mut().zip(x).for_each(|(o, xi)| *o += a * xi);
        }
        Ok(ForwardCache { inputs, output })
    }

    pub fn denoise(&self, x: &[f64], sigma: f64, class: Option<usize>) -> Result<Vec<f64>> {
        Ok(self.forward(x, sigma, class)?.output)
    }

    /// Reverse pass for an upstream gradient on the output.
    ///
    /// Accumulates parameter gradients into `param_grad` when given and returns the
    /// gradient with respect to `x` (the first `d` input features).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let slots = self.slots();
        let mut g = grad_out.to_vec();
        for (li, s) in slots.iter().enumerate().rev() {
            let input = &cache.inputs[li];
            let w = &self.params[s.weight..s.bias];
            if let Some(pg) = param_grad.as_deref_mut() {
                let (gw, gb) = pg[s.weight..s.bias + s.rows].split_at_mut(s.rows * s.cols);
                for ((gi, gw_row), gb_i) in g.iter().zip(gw.chunks_exact_mut(s.cols)).zip(gb) {
                    *gb_i += gi;
                    for (a, inp) in gw_row.iter_mut().zip(input) {
                        *a += gi * inp;
                    }
                }
            }
            let mut gin = vec![0.0; s.cols];
            for (gi, row) in g.iter().zip(w.chunks_exact(s.cols)) {
                for (a, wij) in gin.iter_mut().zip(row) {
                    *a += gi * wij;
                }
            }
            if li > 0 {
                // input to this layer is tanh(pre) of the previous layer
                for (a, h) in gin.iter_mut().zip(input) {
                    *a *= 1.0 - h * h;
                }
            }
            g = gin;
        }
        g.truncate(self.arch.input_dim);
        if self.arch.skip {
            let a = cache.inputs[0][self.arch.input_dim + 1];
            g.iter_mut().zip(grad_out).for_each(|(gi, go)| *gi += a * go);
        }
        g
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators so the loop vectorizes
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (a4.remainder(), b4.remainder());
    let mut acc = [0.0; 4];
    for (x, y) in a4.zip(b4) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
