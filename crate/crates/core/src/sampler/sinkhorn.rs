//! Entropic optimal transport between uniform empirical measures and the
//! debiased Sinkhorn divergence
//! `S(a, b) = OT_ε(a, b) − ½ OT_ε(a, a) − ½ OT_ε(b, b)`.
//!
//! Dual potentials are updated in the log domain with symmetric (averaged,
//! simultaneous) steps, so swapping the two measures transposes the
//! computation exactly and `S(a, b) == S(b, a)` bit for bit.

use crate::error::{invalid, shape, Error, Result};

/// Dual potentials of `OT_ε` between `n` and `m` uniformly weighted points.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropicOt {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `⟨a, f⟩ + ⟨b, g⟩`.
    pub value: f64,
    pub eps: f64,
}

fn check_cost(cost: &[f64], n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(invalid("transport needs nonempty sample sets"));
    }
    if cost.len() != n * m {
        return Err(shape(format!("cost has {} entries, expected {n} x {m}", cost.len())));
    }
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("non-finite cost at ({}, {})", k / m, k % m)));
    }
    Ok(())
}

/// Soft-min over each row: `-ε log Σ_j (1/m) exp((pot_j − C_ij)/ε)`.
fn softmin_rows(cost: &[f64], n: usize, m: usize, pot: &[f64], eps: f64, out: &mut [f64]) {
    let log_m = (m as f64).ln();
    let mut buf = vec![0.0; m];
    for i in 0..n {
        let row = &cost[i * m..(i + 1) * m];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m {
            let v = (pot[j] - row[j]) / eps;
            buf[j] = v;
            mx = mx.max(v);
        }
        let s: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
        out[i] = -eps * (mx + s.ln() - log_m);
    }
}

fn transpose(cost: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = cost[i * m + j];
        }
    }
    t
}

/// Rounds between absorptions of the scalings into the potentials.
const ABSORB_EVERY: usize = 10;

/// Scalings outside this range send the round back to the log domain.
const SCALE_MIN: f64 = 1e-150;
const SCALE_MAX: f64 = 1e150;

/// Kernel `exp((f_i + g_j − C_ij)/ε)` for the current potentials.
fn stabilized_kernel(cost: &[f64], n: usize, m: usize, f: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
    for i in 0..n {
        let row = &cost[i * m..(i + 1) * m];
        let k = &mut out[i * m..(i + 1) * m];
        for j in 0..m {
            k[j] = ((f[i] + g[j] - row[j]) / eps).exp();
        }
    }
}

/// `(K v)_i` per row and `(Kᵀ u)_j` accumulated in row order, so the
/// transposed problem performs the same additions.
fn kernel_products(kernel: &[f64], n: usize, m: usize, u: &[f64], v: &[f64], kv: &mut [f64], ktu: &mut [f64]) {
    ktu.fill(0.0);
    for i in 0..n {
        let row = &kernel[i * m..(i + 1) * m];
        let mut acc = 0.0;
        for j in 0..m {
            acc += row[j] * v[j];
            ktu[j] += row[j] * u[i];
        }
        kv[i] = acc;
    }
}

/// Moves the scalings into the potentials and resets them to one.
fn absorb(pot: &mut [f64], scale: &mut [f64], eps: f64) {
    for (a, s) in pot.iter_mut().zip(scale.iter_mut()) {
        *a += eps * s.ln();
        *s = 1.0;
    }
}

/// Solves `OT_ε` for an `n × m` row-major cost with `iters` update rounds.
///
/// Each round maps `f ← ½(f + T_C(g))`, `g ← ½(g + T_Cᵀ(f))` with the
/// log-domain soft-min `T`; the last round is undamped. Between exact
/// log-domain rounds, updates run on scalings `u, v` of a kernel stabilized
/// by the current potentials (`f + ε log u`, `g + ε log v`), re-absorbed
/// every few rounds. A round whose kernel products underflow is redone
/// exactly in the log domain.
pub fn entropic_ot(cost: &[f64], n: usize, m: usize, eps: f64, iters: usize) -> Result<EntropicOt> {
    if !(eps > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {eps}")));
    }
    if iters == 0 {
        return Err(invalid("at least one scaling round is required"));
    }
    check_cost(cost, n, m)?;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut ft = vec![0.0; n];
    let mut gt = vec![0.0; m];
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut kernel: Vec<f64> = Vec::new();
    let mut cost_t: Option<Vec<f64>> = None;
    let mut kernel_valid = false;
    let mut since_absorb = 0;
    let (inv_n, inv_m) = (1.0 / n as f64, 1.0 / m as f64);

    for it in 0..iters {
        let last = it + 1 == iters;
        // The first round is exact so that every kernel row carries mass.
        if it > 0 && (!kernel_valid || since_absorb == ABSORB_EVERY) {
            absorb(&mut f, &mut u, eps);
            absorb(&mut g, &mut v, eps);
            kernel.resize(n * m, 0.0);
            stabilized_kernel(cost, n, m, &f, &g, eps, &mut kernel);
            kernel_valid = true;
            since_absorb = 0;
        }
        if kernel_valid {
            kernel_products(&kernel, n, m, &u, &v, &mut kv, &mut ktu);
            kv.iter_mut().for_each(|k| *k *= inv_m);
            ktu.iter_mut().for_each(|k| *k *= inv_n);
            let step = |s: f64, k: f64| if last { 1.0 / k } else { (s / k).sqrt() };
            for (k, s) in kv.iter_mut().zip(&u) {
                *k = step(*s, *k);
            }
            for (k, s) in ktu.iter_mut().zip(&v) {
                *k = step(*s, *k);
            }
            if kv.iter().chain(ktu.iter()).all(|s| *s > SCALE_MIN && *s < SCALE_MAX) {
                std::mem::swap(&mut u, &mut kv);
                std::mem::swap(&mut v, &mut ktu);
                since_absorb += 1;
                continue;
            }
            absorb(&mut f, &mut u, eps);
            absorb(&mut g, &mut v, eps);
            kernel_valid = false;
        }
        log_round(cost, &mut cost_t, n, m, eps, &mut f, &mut g, &mut ft, &mut gt, last);
    }
    absorb(&mut f, &mut u, eps);
    absorb(&mut g, &mut v, eps);
    let value = f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("transport value is not finite".into()));
    }
    Ok(EntropicOt { f, g, value, eps })
}

/// One exact log-domain round.
#[allow(clippy::too_many_arguments)]
fn log_round(
    cost: &[f64],
    cost_t: &mut Option<Vec<f64>>,
    n: usize,
    m: usize,
    eps: f64,
    f: &mut [f64],
    g: &mut [f64],
    ft: &mut [f64],
    gt: &mut [f64],
    last: bool,
) {
    let ct = cost_t.get_or_insert_with(|| transpose(cost, n, m));
    softmin_rows(cost, n, m, g, eps, ft);
    softmin_rows(ct, m, n, f, eps, gt);
    if last {
        f.copy_from_slice(ft);
        g.copy_from_slice(gt);
    } else {
        for (a, b) in f.iter_mut().zip(ft.iter()) {
            *a = 0.5 * (*a + b);
        }
        for (a, b) in g.iter_mut().zip(gt.iter()) {
            *a = 0.5 * (*a + b);
        }
    }
}

impl EntropicOt {
    /// Coupling `π_ij = exp((f_i + g_j − C_ij)/ε) / (n m)`, row-major.
    pub fn plan(&self, cost: &[f64]) -> Vec<f64> {
        let (n, m) = (self.f.len(), self.g.len());
        let scale = 1.0 / (n * m) as f64;
        let mut p = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                p[i * m + j] = scale * ((self.f[i] + self.g[j] - cost[i * m + j]) / self.eps).exp();
            }
        }
        p
    }

    /// Largest relative deviation of the plan's marginals from uniform.
    pub fn marginal_error(&self, cost: &[f64]) -> f64 {
        let (n, m) = (self.f.len(), self.g.len());
        let p = self.plan(cost);
        let mut worst = 0.0f64;
        for i in 0..n {
            let r: f64 = p[i * m..(i + 1) * m].iter().sum();
            worst = worst.max((r * n as f64 - 1.0).abs());
        }
        for j in 0..m {
            let c: f64 = (0..n).map(|i| p[i * m + j]).sum();
            worst = worst.max((c * m as f64 - 1.0).abs());
        }
        worst
    }
}

/// The three transport problems behind one divergence evaluation.
#[derive(Debug, Clone)]
pub struct DivergenceParts {
    pub value: f64,
    pub ab: EntropicOt,
    pub aa: EntropicOt,
    pub bb: EntropicOt,
}

/// Debiased divergence from precomputed cost matrices
/// (`c_ab` is `n × m`, `c_aa` is `n × n`, `c_bb` is `m × m`).
pub fn divergence_from_costs(
    c_ab: &[f64],
    c_aa: &[f64],
    c_bb: &[f64],
    n: usize,
    m: usize,
    eps: f64,
    iters: usize,
) -> Result<DivergenceParts> {
    let ab = entropic_ot(c_ab, n, m, eps, iters)?;
    let aa = entropic_ot(c_aa, n, n, eps, iters)?;
    let bb = entropic_ot(c_bb, m, m, eps, iters)?;
    let value = ab.value - 0.5 * aa.value - 0.5 * bb.value;
    Ok(DivergenceParts { value, ab, aa, bb })
}

pub fn pairwise<T>(a: &[T], b: &[T], cost: &impl Fn(&T, &T) -> f64) -> Vec<f64> {
    a.iter().flat_map(|u| b.iter().map(move |v| cost(u, v))).collect()
}

/// Debiased Sinkhorn divergence between the uniform empirical measures on
/// `a` and `b`.
pub fn sinkhorn_divergence<T>(a: &[T], b: &[T], cost: impl Fn(&T, &T) -> f64, eps: f64, iters: usize) -> Result<f64> {
    let c_ab = pairwise(a, b, &cost);
    let c_aa = pairwise(a, a, &cost);
    let c_bb = pairwise(b, b, &cost);
    Ok(divergence_from_costs(&c_ab, &c_aa, &c_bb, a.len(), b.len(), eps, iters)?.value)
}

pub fn squared_euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}
