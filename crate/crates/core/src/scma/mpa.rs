//! Message passing decoder on the SCMA factor graph.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::codebook::{IndexMatrix, ScmaCodebookSet, ScmaSystem};
use super::graph::FactorGraph;
use crate::belief::GaussianBelief;
use crate::error::{Error, Result};

const MAX_DC: usize = 8;
const MAX_COMBOS: usize = 1 << 20;

/// Denominator of the Gaussian likelihood exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodScale {
    /// `exp(-|e|^2 / (2 sigma^2))`.
    #[default]
    DoubleVariance,
    /// `exp(-|e|^2 / sigma^2)`, the circular complex Gaussian.
    ComplexMl,
}

impl LikelihoodScale {
    fn denominator(self, sigma2: f64) -> f64 {
        match self {
            Self::DoubleVariance => 2.0 * sigma2,
            Self::ComplexMl => sigma2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageDomain {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpaConfig {
    pub iterations: usize,
    pub scale: LikelihoodScale,
    pub domain: MessageDomain,
}

impl Default for MpaConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            scale: LikelihoodScale::DoubleVariance,
            domain: MessageDomain::Linear,
        }
    }
}

/// Precomputed superimposed hypotheses per resource node.
#[derive(Debug, Clone)]
pub struct MpaDecoder {
    k: usize,
    users: usize,
    m_mod: usize,
    xi: Vec<Vec<usize>>,
    /// For user `j`: `(resource, slot of j within xi[resource])`.
    edges: Vec<Vec<(usize, usize)>>,
    /// `hyp[k][c]` with `c = sum_t digit_t M^t` over the users in `xi[k]`.
    hyp: Vec<Vec<Complex64>>,
    msg_offset: Vec<usize>,
    msg_len: usize,
    lik_offset: Vec<usize>,
    lik_len: usize,
}

/// Scratch buffers reused across blocks.
#[derive(Debug, Clone, Default)]
pub struct MpaWorkspace {
    lik: Vec<f64>,
    vn2fn: Vec<f64>,
    fn2vn: Vec<f64>,
}

impl MpaDecoder {
    pub fn new(graph: &FactorGraph, cb: &ScmaCodebookSet) -> Result<Self> {
        let (k, users, m_mod) = (graph.resources(), graph.users(), cb.m_mod);
        if graph.d_c() > MAX_DC {
            return Err(Error::InvalidGraph(format!(
                "d_c = {} exceeds the decoder limit {MAX_DC}",
                graph.d_c()
            )));
        }
        let combos = (m_mod as u128).pow(graph.d_c() as u32);
        if combos > MAX_COMBOS as u128 {
            return Err(Error::EnumerationTooLarge(combos));
        }
        let xi: Vec<Vec<usize>> = (0..k).map(|r| graph.xi(r).to_vec()).collect();
        let edges = (0..users)
            .map(|j| {
                graph
                    .zeta(j)
                    .iter()
                    .map(|&r| (r, xi[r].iter().position(|&u| u == j).unwrap()))
                    .collect()
            })
            .collect();
        let mut hyp = Vec::with_capacity(k);
        let (mut msg_offset, mut lik_offset) = (Vec::with_capacity(k), Vec::with_capacity(k));
        let (mut msg_len, mut lik_len) = (0, 0);
        for (r, users_r) in xi.iter().enumerate() {
            let dc = users_r.len();
            let n = m_mod.pow(dc as u32);
            let h: Vec<Complex64> = (0..n)
                .map(|c| {
                    let mut rem = c;
                    let mut s = Complex64::new(0.0, 0.0);
                    for &u in users_r {
                        s += cb.codebooks[u][rem % m_mod][r];
                        rem /= m_mod;
                    }
                    s
                })
                .collect();
            hyp.push(h);
            msg_offset.push(msg_len);
            lik_offset.push(lik_len);
            msg_len += dc * m_mod;
            lik_len += n;
        }
        Ok(Self {
            k,
            users,
            m_mod,
            xi,
            edges,
            hyp,
            msg_offset,
            msg_len,
            lik_offset,
            lik_len,
        })
    }

    pub fn m_mod(&self) -> usize {
        self.m_mod
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn resources(&self) -> usize {
        self.k
    }

    pub fn workspace(&self) -> MpaWorkspace {
        MpaWorkspace {
            lik: vec![0.0; self.lik_len],
            vn2fn: vec![0.0; self.msg_len],
            fn2vn: vec![0.0; self.msg_len],
        }
    }

    /// Per-user posteriors for one received block, returned as a
    /// `J * M_mod` row-major vector.
    pub fn decode_block(&self, y: &[Complex64], sigma2: f64, cfg: &MpaConfig) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.users * self.m_mod];
        self.decode_block_into(y, sigma2, cfg, &mut self.workspace(), &mut out, None)?;
        Ok(out)
    }

    /// As [`Self::decode_block`], also returning the posterior after every
    /// iteration.
    pub fn decode_block_traced(
        &self,
        y: &[Complex64],
        sigma2: f64,
        cfg: &MpaConfig,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![0.0; self.users * self.m_mod];
        let mut trace = Vec::with_capacity(cfg.iterations);
        self.decode_block_into(
            y,
            sigma2,
            cfg,
            &mut self.workspace(),
            &mut out,
            Some(&mut trace),
        )?;
        Ok(trace)
    }

    pub fn decode_block_into(
        &self,
        y: &[Complex64],
        sigma2: f64,
        cfg: &MpaConfig,
        ws: &mut MpaWorkspace,
        out: &mut [f64],
        mut trace: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<()> {
        if y.len() != self.k {
            return Err(Error::InvalidDims(format!(
                "block has {} entries, expected K = {}",
                y.len(),
                self.k
            )));
        }
        if y.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite(
                "received block contains a non-finite entry".into(),
            ));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::NonFinite(format!(
                "noise variance must be positive and finite, got {sigma2}"
            )));
        }
        if cfg.iterations == 0 {
            return Err(Error::Config("MPA needs at least one iteration".into()));
        }
        if ws.lik.len() != self.lik_len {
            *ws = self.workspace();
        }
        let log = cfg.domain == MessageDomain::Log;
        let den = cfg.scale.denominator(sigma2);
        for r in 0..self.k {
            let lik = &mut ws.lik[self.lik_offset[r]..self.lik_offset[r] + self.hyp[r].len()];
            let mut min = f64::INFINITY;
            for (l, h) in lik.iter_mut().zip(&self.hyp[r]) {
                *l = (y[r] - h).norm_sqr();
                min = min.min(*l);
            }
            for l in lik.iter_mut() {
                let e = -(*l - min) / den;
                *l = if log { e } else { e.exp() };
            }
        }
        let init = if log {
            -(self.m_mod as f64).ln()
        } else {
            1.0 / self.m_mod as f64
        };
        ws.vn2fn.iter_mut().for_each(|v| *v = init);

        for _ in 0..cfg.iterations {
            for r in 0..self.k {
                let dc = self.xi[r].len();
                let span = self.msg_offset[r]..self.msg_offset[r] + dc * self.m_mod;
                let lik = &ws.lik[self.lik_offset[r]..self.lik_offset[r] + self.hyp[r].len()];
                if log {
                    self.fn_update_log(dc, lik, &ws.vn2fn[span.clone()], &mut ws.fn2vn[span]);
                } else {
                    self.fn_update_linear(dc, lik, &ws.vn2fn[span.clone()], &mut ws.fn2vn[span]);
                }
            }
            for j in 0..self.users {
                self.vn_update(j, log, &ws.fn2vn, &mut ws.vn2fn);
            }
            if let Some(t) = trace.as_deref_mut() {
                let mut post = vec![0.0; self.users * self.m_mod];
                self.posterior(log, &ws.fn2vn, &mut post);
                t.push(post);
            }
        }
        self.posterior(log, &ws.fn2vn, out);
        Ok(())
    }

    fn fn_update_linear(&self, dc: usize, lik: &[f64], inp: &[f64], out: &mut [f64]) {
        let m = self.m_mod;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut digits = [0usize; MAX_DC];
        let mut pre = [1.0f64; MAX_DC + 1];
        for (c, &w) in lik.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut rem = c;
            for t in 0..dc {
                digits[t] = rem % m;
                rem /= m;
                pre[t + 1] = pre[t] * inp[t * m + digits[t]];
            }
            let mut suf = w;
            for t in (0..dc).rev() {
                out[t * m + digits[t]] += pre[t] * suf;
                suf *= inp[t * m + digits[t]];
            }
        }
        for t in 0..dc {
            normalize_linear(&mut out[t * m..(t + 1) * m]);
        }
    }

    fn fn_update_log(&self, dc: usize, lik: &[f64], inp: &[f64], out: &mut [f64]) {
        let m = self.m_mod;
        let mut max = vec![f64::NEG_INFINITY; dc * m];
        let mut sum = vec![0.0f64; dc * m];
        let mut digits = [0usize; MAX_DC];
        for (c, &w) in lik.iter().enumerate() {
            let mut rem = c;
            let mut total = w;
            for t in 0..dc {
                digits[t] = rem % m;
                rem /= m;
                total += inp[t * m + digits[t]];
            }
            for t in 0..dc {
                let slot = t * m + digits[t];
                let a = total - inp[slot];
                if a > max[slot] {
                    sum[slot] = sum[slot] * (max[slot] - a).exp() + 1.0;
                    max[slot] = a;
                } else {
                    sum[slot] += (a - max[slot]).exp();
                }
            }
        }
        for i in 0..dc * m {
            out[i] = max[i] + sum[i].ln();
        }
        for t in 0..dc {
            normalize_log(&mut out[t * m..(t + 1) * m]);
        }
    }

    fn vn_update(&self, j: usize, log: bool, fn2vn: &[f64], vn2fn: &mut [f64]) {
        let m = self.m_mod;
        let edges = &self.edges[j];
        for (e, &(r, slot)) in edges.iter().enumerate() {
            let dst = self.msg_offset[r] + slot * m;
            for q in 0..m {
                let mut acc = if log { 0.0 } else { 1.0 };
                for (e2, &(r2, slot2)) in edges.iter().enumerate() {
                    if e2 != e {
                        let v = fn2vn[self.msg_offset[r2] + slot2 * m + q];
                        if log {
                            acc += v;
                        } else {
                            acc *= v;
                        }
                    }
                }
                vn2fn[dst + q] = acc;
            }
            if log {
                normalize_log(&mut vn2fn[dst..dst + m]);
            } else {
                normalize_linear(&mut vn2fn[dst..dst + m]);
            }
        }
    }

    fn posterior(&self, log: bool, fn2vn: &[f64], out: &mut [f64]) {
        let m = self.m_mod;
        for j in 0..self.users {
            let p = &mut out[j * m..(j + 1) * m];
            for q in 0..m {
                let mut acc = if log { 0.0 } else { 1.0 };
                for &(r, slot) in &self.edges[j] {
                    let v = fn2vn[self.msg_offset[r] + slot * m + q];
                    if log {
                        acc += v;
                    } else {
                        acc *= v;
                    }
                }
                p[q] = acc;
            }
            if log {
                normalize_log(p);
                p.iter_mut().for_each(|v| *v = v.exp());
            }
            normalize_linear(p);
        }
    }
}

fn normalize_linear(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 && s.is_finite() {
        p.iter_mut().for_each(|v| *v /= s);
    } else {
        let u = 1.0 / p.len() as f64;
        p.iter_mut().for_each(|v| *v = u);
    }
}

fn normalize_log(p: &mut [f64]) {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let u = -(p.len() as f64).ln();
        p.iter_mut().for_each(|v| *v = u);
        return;
    }
    let lse = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    p.iter_mut().for_each(|v| *v -= lse);
}

/// Decodes one block `m_i` of length `K` for the given codebook and graph.
pub fn mpa_decode(
    cb: &ScmaCodebookSet,
    graph: &FactorGraph,
    m_i: &[Complex64],
    sigma2: f64,
    cfg: &MpaConfig,
) -> Result<Vec<Vec<f64>>> {
    let dec = MpaDecoder::new(graph, cb)?;
    let flat = dec.decode_block(m_i, sigma2, cfg)?;
    Ok(flat.chunks(cb.m_mod).map(|c| c.to_vec()).collect())
}

/// `P(X_{i,j} = (X_j)_m | m_i)` for every block `i`, user `j`, codeword `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    pub blocks: usize,
    pub users: usize,
    pub m_mod: usize,
    pub probs: Vec<f64>,
}

impl PosteriorSet {
    pub fn uniform(blocks: usize, users: usize, m_mod: usize) -> Self {
        Self {
            blocks,
            users,
            m_mod,
            probs: vec![1.0 / m_mod as f64; blocks * users * m_mod],
        }
    }

    pub fn get(&self, block: usize, user: usize) -> &[f64] {
        let o = (block * self.users + user) * self.m_mod;
        &self.probs[o..o + self.m_mod]
    }

    pub fn get_mut(&mut self, block: usize, user: usize) -> &mut [f64] {
        let o = (block * self.users + user) * self.m_mod;
        &mut self.probs[o..o + self.m_mod]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Per-block argmax, ties resolved to the smallest index.
pub fn select_codewords(post: &PosteriorSet) -> IndexMatrix {
    (0..post.blocks)
        .map(|i| {
            (0..post.users)
                .map(|j| {
                    let p = post.get(i, j);
                    let mut best = 0;
                    for (m, &v) in p.iter().enumerate().skip(1) {
                        if v > p[best] {
                            best = m;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// Result of decoding a whole DD frame.
#[derive(Debug, Clone)]
pub struct FrameDecode {
    pub posteriors: PosteriorSet,
    /// Posterior mean of each user's DD vector.
    pub means: Vec<Vec<Complex64>>,
    /// Posterior per-entry variance; zero off the user's active rows.
    pub vars: Vec<Vec<f64>>,
}

/// Runs the decoder over every block of `m_x` with the shared noise
/// variance `mean(m_x.var)` and forms per-user posterior moments.
pub fn decode_frame(
    sys: &ScmaSystem,
    m_x: &GaussianBelief,
    cfg: &MpaConfig,
) -> Result<FrameDecode> {
    let sigma2 = m_x.mean_var();
    decode_frame_with_sigma2(sys, &m_x.mean, sigma2, cfg)
}

pub fn decode_frame_with_sigma2(
    sys: &ScmaSystem,
    y: &[Complex64],
    sigma2: f64,
    cfg: &MpaConfig,
) -> Result<FrameDecode> {
    let k = sys.k();
    if !y.len().is_multiple_of(k) {
        return Err(Error::InvalidDims(format!(
            "frame length {} is not divisible by K = {k}",
            y.len()
        )));
    }
    let dec = sys.decoder();
    let (blocks, users, m) = (y.len() / k, sys.users(), sys.m_mod());
    let mut posteriors = PosteriorSet::uniform(blocks, users, m);
    let mut ws = dec.workspace();
    for i in 0..blocks {
        let o = i * users * m;
        dec.decode_block_into(
            &y[i * k..(i + 1) * k],
            sigma2,
            cfg,
            &mut ws,
            &mut posteriors.probs[o..o + users * m],
            None,
        )?;
    }
    let (means, vars) = posterior_moments(sys, &posteriors);
    Ok(FrameDecode {
        posteriors,
        means,
        vars,
    })
}

/// Posterior mean and per-entry variance of every user's DD vector.
pub fn posterior_moments(
    sys: &ScmaSystem,
    post: &PosteriorSet,
) -> (Vec<Vec<Complex64>>, Vec<Vec<f64>>) {
    let k = sys.k();
    let len = post.blocks * k;
    let mut means = vec![vec![Complex64::new(0.0, 0.0); len]; post.users];
    let mut vars = vec![vec![0.0; len]; post.users];
    for j in 0..post.users {
        let rows = sys.graph.zeta(j);
        for i in 0..post.blocks {
            let p = post.get(i, j);
            for &r in rows {
                let mut mean = Complex64::new(0.0, 0.0);
                let mut second = 0.0;
                for (q, &pq) in p.iter().enumerate() {
                    let x = sys.codebook.codebooks[j][q][r];
                    mean += x * pq;
                    second += x.norm_sqr() * pq;
                }
                means[j][i * k + r] = mean;
                vars[j][i * k + r] = (second - mean.norm_sqr()).max(0.0);
            }
        }
    }
    (means, vars)
}
