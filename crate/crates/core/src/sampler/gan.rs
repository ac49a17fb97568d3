//! Conditional generator trained against an adversarial Sinkhorn loss.
//!
//! The generator maps `(z, noise)` to a pseudo response. Real pairs
//! `(w_i, z_i)` and fake pairs `(G(z_i, v_i), z_i)` of a minibatch are
//! compared with the debiased Sinkhorn divergence under the cost
//! `c(u, u') = ‖e(u) − e(u')‖²`, where the embedding
//! `e(w, z) = (w, √(λ/d_Z)·z, tanh(φ(w, z))/√k)` stacks the raw pair with the
//! squashed output of a learned network `φ` with `k` outputs. Training
//! alternates ascent steps on `φ` (the adversary, kept in a weight box) with
//! descent steps on the generator, after a short adversary warm-up.
//! Gradients of the divergence with respect to the costs are the optimal
//! couplings.
//!
//! Inputs and responses are z-scored internally; draws are mapped back to
//! the original response scale.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sinkhorn::{divergence_from_costs, DivergenceParts, EntropicOt};
use super::{ConditionalSampler, Fitted, SamplerFactory, TrainingSet};
use crate::error::{invalid, shape, Error, Result};
use crate::featbank::Side;
use crate::nn::{opt_step, ForwardCache, Mlp, OptState};
use crate::rng::SeedRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization.
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Adversary updates per generator update.
    pub cost_steps: usize,
    /// Adversary updates against the initial generator before training.
    pub cost_warmup: usize,
    pub noise_dim: usize,
    pub gen_lr: f64,
    pub cost_lr: f64,
    pub gen_hidden: Vec<usize>,
    pub cost_hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Adversary parameters are clamped to `[-cost_clip, cost_clip]`.
    pub cost_clip: f64,
    /// Weight λ of the raw `z` block in the embedding.
    pub z_weight: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            sinkhorn_iters: 100,
            batch_size: 128,
            epochs: 300,
            cost_steps: 1,
            cost_warmup: 100,
            noise_dim: 5,
            gen_lr: 1e-3,
            cost_lr: 1e-3,
            gen_hidden: vec![64, 64],
            cost_hidden: vec![64],
            embed_dim: 16,
            cost_clip: 0.05,
            z_weight: 1.0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(invalid("sinkhorn epsilon must be positive"));
        }
        if self.sinkhorn_iters < 1 {
            return Err(invalid("sinkhorn iterations must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be >= 2"));
        }
        if self.noise_dim < 1 || self.embed_dim < 1 {
            return Err(invalid("noise and embedding dimensions must be >= 1"));
        }
        if !(self.gen_lr > 0.0 && self.cost_lr > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(self.cost_clip > 0.0) || !(self.z_weight >= 0.0) {
            return Err(invalid("cost clip must be positive and z weight nonnegative"));
        }
        if self.gen_hidden.contains(&0) || self.cost_hidden.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

/// Column means and standard deviations of a row-major block.
fn column_scaler(data: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = data.len() / cols;
    let mut mean = vec![0.0; cols];
    for r in data.chunks_exact(cols) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut sd = vec![0.0; cols];
    for r in data.chunks_exact(cols) {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut sd {
        *s = (*s / (rows.max(2) - 1) as f64).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    (mean, sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSampler {
    generator: Mlp,
    noise_dim: usize,
    d_z: usize,
    z_mean: Vec<f64>,
    z_sd: Vec<f64>,
    w_mean: f64,
    w_sd: f64,
}

impl SinkhornSampler {
    pub fn generator(&self) -> &Mlp {
        &self.generator
    }

    fn scaled_z<'a>(&'a self, z: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        z.iter().zip(&self.z_mean).zip(&self.z_sd).map(|((v, m), s)| (v - m) / s)
    }

    const MAGIC: &'static [u8; 8] = b"DGCITGEN";

    /// Flat little-endian binary: magic, version, dimensions, layer sizes,
    /// scalers, then generator parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        let put_u64 = |buf: &mut Vec<u8>, v: u64| buf.extend_from_slice(&v.to_le_bytes());
        let put_f64 = |buf: &mut Vec<u8>, v: f64| buf.extend_from_slice(&v.to_le_bytes());
        put_u64(&mut buf, self.noise_dim as u64);
        put_u64(&mut buf, self.d_z as u64);
        put_u64(&mut buf, self.generator.sizes().len() as u64);
        for &s in self.generator.sizes() {
            put_u64(&mut buf, s as u64);
        }
        for &v in self.z_mean.iter().chain(&self.z_sd) {
            put_f64(&mut buf, v);
        }
        put_f64(&mut buf, self.w_mean);
        put_f64(&mut buf, self.w_sd);
        put_u64(&mut buf, self.generator.params().len() as u64);
        for &p in self.generator.params() {
            put_f64(&mut buf, p);
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = bytes.as_slice();
        let mut take = |k: usize| -> Result<&[u8]> {
            if cur.len() < k {
                return Err(Error::Format("truncated generator file".into()));
            }
            let (head, tail) = cur.split_at(k);
            cur = tail;
            Ok(head)
        };
        if take(8)? != Self::MAGIC {
            return Err(Error::Format("not a generator file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Format(format!("unsupported generator file version {version}")));
        }
        let mut u64_at = || -> Result<usize> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize) };
        let noise_dim = u64_at()?;
        let d_z = u64_at()?;
        let layers = u64_at()?;
        if layers > 64 {
            return Err(Error::Format("implausible layer count".into()));
        }
        let sizes: Vec<usize> = (0..layers).map(|_| u64_at()).collect::<Result<_>>()?;
        let mut f64_at = || -> Result<f64> { Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let z_mean: Vec<f64> = (0..d_z).map(|_| f64_at()).collect::<Result<_>>()?;
        let z_sd: Vec<f64> = (0..d_z).map(|_| f64_at()).collect::<Result<_>>()?;
        let w_mean = f64_at()?;
        let w_sd = f64_at()?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if count > bytes.len() {
            return Err(Error::Format("implausible parameter count".into()));
        }
        let params: Vec<f64> =
            (0..count).map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap()))).collect::<Result<_>>()?;
        if sizes.first() != Some(&(d_z + noise_dim)) || sizes.last() != Some(&1) {
            return Err(Error::Format("layer sizes do not match the sampler dimensions".into()));
        }
        let generator = Mlp::from_params(&sizes, params)?;
        Ok(Self { generator, noise_dim, d_z, z_mean, z_sd, w_mean, w_sd })
    }
}

impl ConditionalSampler for SinkhornSampler {
    fn z_dim(&self) -> usize {
        self.d_z
    }

    fn fill(&self, z: &[f64], out: &mut [f64], rng: &mut SeedRng) {
        let m = out.len();
        if m == 0 {
            return;
        }
        let width = self.d_z + self.noise_dim;
        let zs: Vec<f64> = self.scaled_z(z).collect();
        let mut input = Vec::with_capacity(m * width);
        for _ in 0..m {
            input.extend_from_slice(&zs);
            input.extend((0..self.noise_dim).map(|_| { let v: f64 = StandardNormal.sample(rng); v }));
        }
        let cache = self.generator.forward_batch(&input, m).expect("input sized from the generator");
        for (o, g) in out.iter_mut().zip(cache.output()) {
            *o = self.w_mean + self.w_sd * g;
        }
    }
}

/// Embedding of a batch of `(w, z)` pairs plus what backprop needs.
struct Embedded {
    rows: Vec<f64>,
    width: usize,
    cache: ForwardCache,
}

struct Trainer<'a> {
    cfg: &'a SinkhornConfig,
    d_z: usize,
    z_scale: f64,
    cost_net: Mlp,
}

impl Trainer<'_> {
    fn embed(&self, w: &[f64], z: &[f64]) -> Result<Embedded> {
        let b = w.len();
        let mut input = Vec::with_capacity(b * (1 + self.d_z));
        for (i, &wi) in w.iter().enumerate() {
            input.push(wi);
            input.extend_from_slice(&z[i * self.d_z..(i + 1) * self.d_z]);
        }
        let cache = self.cost_net.forward_batch(&input, b)?;
        let k = self.cfg.embed_dim;
        let width = 1 + self.d_z + k;
        let phi_scale = 1.0 / (k as f64).sqrt();
        let mut rows = Vec::with_capacity(b * width);
        for i in 0..b {
            rows.push(w[i]);
            rows.extend(z[i * self.d_z..(i + 1) * self.d_z].iter().map(|v| v * self.z_scale));
            rows.extend(cache.output()[i * k..(i + 1) * k].iter().map(|v| phi_scale * v.tanh()));
        }
        Ok(Embedded { rows, width, cache })
    }

    fn costs(a: &Embedded, b: &Embedded) -> Vec<f64> {
        let w = a.width;
        a.rows
            .chunks_exact(w)
            .flat_map(|u| b.rows.chunks_exact(w).map(move |v| super::sinkhorn::squared_euclidean(u, v)))
            .collect()
    }

    fn divergence(&self, real: &Embedded, fake: &Embedded) -> Result<DivergenceParts> {
        let n = real.rows.len() / real.width;
        let c_ab = Self::costs(real, fake);
        let c_aa = Self::costs(real, real);
        let c_bb = Self::costs(fake, fake);
        let parts = divergence_from_costs(&c_ab, &c_aa, &c_bb, n, n, self.cfg.epsilon, self.cfg.sinkhorn_iters)?;
        Ok(parts)
    }
}

impl Trainer<'_> {
    /// Divergence between the real batch and fresh generator output at the
    /// same `z`, with its gradient in the adversary parameters.
    fn cost_grad(&self, generator: &Mlp, wb: &[f64], zb: &[f64], rng: &mut SeedRng) -> Result<(f64, Vec<f64>)> {
        let (d_z, k) = (self.d_z, self.cfg.embed_dim);
        let b = wb.len();
        let (fake_w, _) = generate(generator, zb, d_z, self.cfg.noise_dim, rng)?;
        let real = self.embed(wb, zb)?;
        let fake = self.embed(&fake_w, zb)?;
        let parts = self.divergence(&real, &fake)?;
        let width = real.width;
        let mut g_real = vec![0.0; b * width];
        let mut g_fake = vec![0.0; b * width];
        accumulate_embedding_grads(&parts.ab, &real, &fake, 1.0, Some(&mut g_real), Some(&mut g_fake));
        let mut g_tmp = vec![0.0; b * width];
        accumulate_embedding_grads(&parts.aa, &real, &real, -0.5, Some(&mut g_real), Some(&mut g_tmp));
        for (a, t) in g_real.iter_mut().zip(&g_tmp) {
            *a += t;
        }
        g_tmp.fill(0.0);
        accumulate_embedding_grads(&parts.bb, &fake, &fake, -0.5, Some(&mut g_fake), Some(&mut g_tmp));
        for (a, t) in g_fake.iter_mut().zip(&g_tmp) {
            *a += t;
        }
        let (_, up_real) = split_grads(&g_real, &real, d_z, k);
        let (_, up_fake) = split_grads(&g_fake, &fake, d_z, k);
        let gr = self.cost_net.backward_batch(&real.cache, &up_real)?;
        let gf = self.cost_net.backward_batch(&fake.cache, &up_fake)?;
        Ok((parts.value, gr.params.iter().zip(&gf.params).map(|(a, c)| a + c).collect()))
    }

    /// One adversary update: ascent on the divergence, then clipping.
    fn ascent_step(&mut self, generator: &Mlp, wb: &[f64], zb: &[f64], opt: &mut OptState, rng: &mut SeedRng) -> Result<()> {
        let (_, grad) = self.cost_grad(generator, wb, zb, rng)?;
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        opt_step(&mut self.cost_net, &neg, opt)?;
        self.cost_net.clip(self.cfg.cost_clip);
        Ok(())
    }

    /// Divergence for fresh generator output and its gradient in the
    /// generator parameters.
    fn generator_grad(&self, generator: &Mlp, wb: &[f64], zb: &[f64], rng: &mut SeedRng) -> Result<(f64, Vec<f64>)> {
        let (d_z, k) = (self.d_z, self.cfg.embed_dim);
        let b = wb.len();
        let (fake_w, gen_cache) = generate(generator, zb, d_z, self.cfg.noise_dim, rng)?;
        let real = self.embed(wb, zb)?;
        let fake = self.embed(&fake_w, zb)?;
        let parts = self.divergence(&real, &fake)?;
        if !parts.value.is_finite() {
            return Err(Error::Numeric("non-finite divergence".into()));
        }
        let width = fake.width;
        let mut g_fake = vec![0.0; b * width];
        accumulate_embedding_grads(&parts.ab, &real, &fake, 1.0, None, Some(&mut g_fake));
        let mut g_tmp = vec![0.0; b * width];
        accumulate_embedding_grads(&parts.bb, &fake, &fake, -0.5, Some(&mut g_fake), Some(&mut g_tmp));
        for (a, t) in g_fake.iter_mut().zip(&g_tmp) {
            *a += t;
        }
        let (mut gw, up_phi) = split_grads(&g_fake, &fake, d_z, k);
        let through_phi = self.cost_net.backward_batch(&fake.cache, &up_phi)?;
        for (i, g) in gw.iter_mut().enumerate() {
            *g += through_phi.input[i * (1 + d_z)];
        }
        Ok((parts.value, generator.backward_batch(&gen_cache, &gw)?.params))
    }
}

/// Generator output for each row of `zb` with fresh noise.
fn generate(generator: &Mlp, zb: &[f64], d_z: usize, noise_dim: usize, rng: &mut SeedRng) -> Result<(Vec<f64>, ForwardCache)> {
    let b = zb.len() / d_z;
    let mut input = Vec::with_capacity(b * (d_z + noise_dim));
    for r in zb.chunks_exact(d_z) {
        input.extend_from_slice(r);
        input.extend((0..noise_dim).map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        }));
    }
    let cache = generator.forward_batch(&input, b)?;
    Ok((cache.output().to_vec(), cache))
}

/// Adds `weight · ∂OT/∂e` for the cost `‖e_a,i − e_b,j‖²` to the gradient
/// buffers of both sides.
fn accumulate_embedding_grads(
    ot: &EntropicOt,
    a: &Embedded,
    b: &Embedded,
    weight: f64,
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let w = a.width;
    let c = Trainer::costs(a, b);
    let plan = ot.plan(&c);
    let m = b.rows.len() / w;
    let mut ga = ga;
    let mut gb = gb;
    for (i, u) in a.rows.chunks_exact(w).enumerate() {
        for (j, v) in b.rows.chunks_exact(w).enumerate() {
            let p = weight * plan[i * m + j];
            if p == 0.0 {
                continue;
            }
            for k in 0..w {
                let d = 2.0 * p * (u[k] - v[k]);
                if let Some(ga) = ga.as_deref_mut() {
                    ga[i * w + k] += d;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[j * w + k] -= d;
                }
            }
        }
    }
}

/// Splits embedding gradients into the raw-`w` part and the upstream for the
/// (pre-squashing) outputs of `φ`.
fn split_grads(g: &[f64], emb: &Embedded, d_z: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let width = emb.width;
    let rows = g.len() / width;
    let phi_scale = 1.0 / (k as f64).sqrt();
    let mut gw = Vec::with_capacity(rows);
    let mut gphi = Vec::with_capacity(rows * k);
    for (gr, er) in g.chunks_exact(width).zip(emb.rows.chunks_exact(width)) {
        gw.push(gr[0]);
        for (gv, ev) in gr[1 + d_z..].iter().zip(&er[1 + d_z..]) {
            // e = s·tanh(o) ⇒ de/do = s·(1 − tanh²) = s − e²/s.
            gphi.push(gv * (phi_scale - ev * ev / phi_scale));
        }
    }
    (gw, gphi)
}

/// Trains a conditional generator for `W | Z` on `train`.
///
/// Returns the sampler and the per-epoch mean generator loss.
pub fn train_sinkhorn_sampler(
    train: &TrainingSet,
    cfg: &SinkhornConfig,
    rng: &mut SeedRng,
) -> Result<(SinkhornSampler, Vec<f64>)> {
    cfg.validate()?;
    let d_z = train.d_z;
    let n = train.len();
    if d_z == 0 || train.z.len() != n * d_z {
        return Err(shape("training rows do not match d_Z"));
    }
    if n < 4 {
        return Err(invalid(format!("need at least 4 training rows, got {n}")));
    }
    let (z_mean, z_sd) = column_scaler(&train.z, d_z);
    let (w_mean, w_sd) = column_scaler(&train.w, 1);
    let zs: Vec<f64> = train
        .z
        .chunks_exact(d_z)
        .flat_map(|r| r.iter().zip(&z_mean).zip(&z_sd).map(|((v, m), s)| (v - m) / s).collect::<Vec<_>>())
        .collect();
    let ws: Vec<f64> = train.w.iter().map(|v| (v - w_mean[0]) / w_sd[0]).collect();

    let mut gen_sizes = vec![d_z + cfg.noise_dim];
    gen_sizes.extend(&cfg.gen_hidden);
    gen_sizes.push(1);
    let mut cost_sizes = vec![1 + d_z];
    cost_sizes.extend(&cfg.cost_hidden);
    cost_sizes.push(cfg.embed_dim);

    let mut generator = Mlp::new(&gen_sizes, rng)?;
    let cost_net = Mlp::new(&cost_sizes, rng)?;
    let mut gen_opt = OptState::for_net(&generator, cfg.gen_lr);
    let mut cost_opt = OptState::for_net(&cost_net, cfg.cost_lr);
    let mut trainer = Trainer { cfg, d_z, z_scale: (cfg.z_weight / d_z as f64).sqrt(), cost_net };
    trainer.cost_net.clip(cfg.cost_clip);

    let batch = cfg.batch_size.min(n / 2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    if cfg.cost_warmup > 0 && cfg.epochs > 0 {
        order.shuffle(rng);
        let warm = |e: Error| match e {
            Error::Numeric(msg) => Error::Training { epoch: 0, msg },
            other => other,
        };
        for step in 0..cfg.cost_warmup {
            let start = (step * batch) % (n - batch + 1);
            let chunk = &order[start..start + batch];
            let wb: Vec<f64> = chunk.iter().map(|&i| ws[i]).collect();
            let zb: Vec<f64> = chunk.iter().flat_map(|&i| zs[i * d_z..(i + 1) * d_z].iter().copied()).collect();
            trainer.ascent_step(&generator, &wb, &zb, &mut cost_opt, rng).map_err(warm)?;
        }
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let wb: Vec<f64> = chunk.iter().map(|&i| ws[i]).collect();
            let zb: Vec<f64> = chunk.iter().flat_map(|&i| zs[i * d_z..(i + 1) * d_z].iter().copied()).collect();
            let fail = |e: Error| match e {
                Error::Numeric(msg) | Error::Training { msg, .. } => Error::Training { epoch, msg },
                other => other,
            };

            for _ in 0..cfg.cost_steps {
                trainer.ascent_step(&generator, &wb, &zb, &mut cost_opt, rng).map_err(fail)?;
            }

            let (value, grad) = trainer.generator_grad(&generator, &wb, &zb, rng).map_err(fail)?;
            opt_step(&mut generator, &grad, &mut gen_opt).map_err(fail)?;

            epoch_loss += value;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Training { epoch, msg: "non-finite loss".into() });
        }
        losses.push(mean);
    }

    let sampler = SinkhornSampler { generator, noise_dim: cfg.noise_dim, d_z, z_mean, z_sd, w_mean: w_mean[0], w_sd: w_sd[0] };
    Ok((sampler, losses))
}

#[derive(Debug, Clone)]
pub struct SinkhornFactory {
    pub cfg: SinkhornConfig,
}

impl SamplerFactory for SinkhornFactory {
    fn fit(&self, _side: Side, train: &TrainingSet, rng: &mut SeedRng) -> Result<Fitted> {
        let (sampler, losses) = train_sinkhorn_sampler(train, &self.cfg, rng)?;
        Ok(Fitted { sampler: Arc::new(sampler), losses })
    }
}
