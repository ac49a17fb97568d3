//! Feedforward networks with hand-written reverse-mode gradients.
//!
//! Hidden layers use `tanh`, the output layer is linear. Parameters live in
//! one flat vector (per layer: row-major `out × in` weights, then biases) so
//! gradients and optimizer moments share a single layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::rng::SeedRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    // acts[0] is the input, acts[l] the output of layer l.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// `batch × output_size`, row-major.
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least input and output")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    /// `batch × input_size`, row-major.
    pub input: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut SeedRng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for l in 0..net.num_layers() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = net.layer_range(l);
            for p in &mut net.params[w] {
                *p = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(shape(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; n] })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(shape(format!("expected {} parameters, got {}", net.params.len(), params.len())));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index ranges of layer `l`'s weights and biases in the flat vector.
    fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.sizes.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum();
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).0]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).1]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layer_range(l).1;
        &mut self.params[r]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layer_range(l).0;
        &mut self.params[r]
    }

    /// Clamps every parameter to `[-c, c]`.
    pub fn clip(&mut self, c: f64) {
        for p in &mut self.params {
            *p = p.clamp(-c, c);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input, 1)?.output().to_vec())
    }

    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<ForwardCache> {
        if input.len() != batch * self.input_size() {
            return Err(shape(format!(
                "input has {} values, expected {batch} x {}",
                input.len(),
                self.input_size()
            )));
        }
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        for l in 0..self.num_layers() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = (self.weights(l), self.bias(l));
            let prev = &acts[l];
            let hidden = l + 1 < self.num_layers();
            let mut out = vec![0.0; batch * no];
            for r in 0..batch {
                let x = &prev[r * ni..(r + 1) * ni];
                for o in 0..no {
                    let row = &w[o * ni..(o + 1) * ni];
                    let s = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                    out[r * no + o] = if hidden { s.tanh() } else { s };
                }
            }
            acts.push(out);
        }
        Ok(ForwardCache { batch, acts })
    }

    /// Gradients of `⟨upstream, forward(input)⟩`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let cache = self.forward_batch(input, 1)?;
        self.backward_batch(&cache, upstream)
    }

    /// Gradients of `Σ_r ⟨upstream_r, output_r⟩`, parameters summed over the batch.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients> {
        let batch = cache.batch;
        if upstream.len() != batch * self.output_size() {
            return Err(shape(format!(
                "upstream has {} values, expected {batch} x {}",
                upstream.len(),
                self.output_size()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, br) = self.layer_range(l);
            let w = &self.params[wr.clone()];
            let prev = &cache.acts[l];
            {
                let (gw, gb) = grads[wr.start..br.end].split_at_mut(ni * no);
                for r in 0..batch {
                    let x = &prev[r * ni..(r + 1) * ni];
                    for o in 0..no {
                        let d = delta[r * no + o];
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        for (g, &xv) in gw[o * ni..(o + 1) * ni].iter_mut().zip(x) {
                            *g += d * xv;
                        }
                    }
                }
            }
            let mut back = vec![0.0; batch * ni];
            for r in 0..batch {
                let out = &mut back[r * ni..(r + 1) * ni];
                for o in 0..no {
                    let d = delta[r * no + o];
                    if d == 0.0 {
                        continue;
                    }
                    for (bv, &wv) in out.iter_mut().zip(&w[o * ni..(o + 1) * ni]) {
                        *bv += d * wv;
                    }
                }
            }
            if l > 0 {
                // prev holds tanh activations: d tanh = 1 - a².
                for (bv, &a) in back.iter_mut().zip(prev) {
                    *bv *= 1.0 - a * a;
                }
            }
            delta = back;
        }
        Ok(Gradients { params: grads, input: delta })
    }
}

/// Adam state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(net.params().len(), lr)
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam descent step on `net` along `grads`.
pub fn opt_step(net: &mut Mlp, grads: &[f64], state: &mut OptState) -> Result<()> {
    if grads.len() != net.params.len() || state.m.len() != grads.len() {
        return Err(shape("gradient and optimizer state must match the parameter count"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, &g), (m, v)) in net.params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    if net.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("parameter became non-finite".into()));
    }
    Ok(())
}
