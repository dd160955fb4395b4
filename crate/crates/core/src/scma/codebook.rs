use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::FactorGraph;
use super::mpa::MpaDecoder;
use crate::error::{Error, Result};
use crate::otfs::GridDims;

const ZERO_TOL: f64 = 1e-12;

/// `J` codebooks, each holding `M_mod` codewords of length `K`.
/// Indexing is `codebooks[user][codeword][resource]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmaCodebookSet {
    pub k: usize,
    pub m_mod: usize,
    pub codebooks: Vec<Vec<Vec<Complex64>>>,
}

impl ScmaCodebookSet {
    pub fn users(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codeword(&self, user: usize, index: usize) -> &[Complex64] {
        &self.codebooks[user][index]
    }

    /// `Tr(X_j X_j^H) / M_mod`.
    pub fn power(&self, user: usize) -> f64 {
        self.codebooks[user]
            .iter()
            .flat_map(|cw| cw.iter())
            .map(|x| x.norm_sqr())
            .sum::<f64>()
            / self.m_mod as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            k: self.k,
            m_mod: self.m_mod,
            codebooks: self
                .codebooks
                .iter()
                .map(|cb| {
                    cb.iter()
                        .map(|cw| cw.iter().map(|x| x * s).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn bits_per_codeword(&self) -> usize {
        self.m_mod.trailing_zeros() as usize
    }

    /// Checks shape, the per-user power budget and that every codeword is
    /// supported exactly on the rows the graph assigns to its user.
    pub fn validate(&self, graph: &FactorGraph) -> Result<()> {
        if self.k != graph.resources() {
            return Err(Error::InvalidCodebook(format!(
                "K = {} but the indicator has {} rows",
                self.k,
                graph.resources()
            )));
        }
        if self.users() != graph.users() {
            return Err(Error::InvalidCodebook(format!(
                "{} codebooks for {} users",
                self.users(),
                graph.users()
            )));
        }
        if self.m_mod < 2 || !self.m_mod.is_power_of_two() {
            return Err(Error::InvalidCodebook(format!(
                "M_mod = {} must be a power of two >= 2",
                self.m_mod
            )));
        }
        for (j, cb) in self.codebooks.iter().enumerate() {
            if cb.len() != self.m_mod {
                return Err(Error::InvalidCodebook(format!(
                    "user {j} has {} codewords, expected {}",
                    cb.len(),
                    self.m_mod
                )));
            }
            for (m, cw) in cb.iter().enumerate() {
                if cw.len() != self.k {
                    return Err(Error::InvalidCodebook(format!(
                        "user {j} codeword {m} has length {}, expected {}",
                        cw.len(),
                        self.k
                    )));
                }
                if cw.iter().any(|x| !(x.re.is_finite() && x.im.is_finite())) {
                    return Err(Error::InvalidCodebook(format!(
                        "user {j} codeword {m} has a non-finite entry"
                    )));
                }
                for (k, x) in cw.iter().enumerate() {
                    if !graph.zeta(j).contains(&k) && x.norm() > ZERO_TOL {
                        return Err(Error::InvalidCodebook(format!(
                            "user {j} codeword {m} is nonzero on resource {k}, which the indicator leaves empty"
                        )));
                    }
                }
            }
            for &k in graph.zeta(j) {
                if cb.iter().all(|cw| cw[k].norm() <= ZERO_TOL) {
                    return Err(Error::InvalidCodebook(format!(
                        "user {j} never uses resource {k}, which the indicator assigns to it"
                    )));
                }
            }
            let p = self.power(j);
            if (p - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidCodebook(format!(
                    "user {j} has Tr(X X^H)/M_mod = {p}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Rotated-QPSK codebook over the given graph: user `j`'s first active
    /// row carries `e^{j(pi/4 + m pi/2)} e^{j phi_j}` with `phi_j = j pi / (2J)`,
    /// the next active row carries its conjugate, and so on alternately.
    /// The result is scaled to unit power per codebook.
    pub fn rotated_qpsk(graph: &FactorGraph) -> Self {
        let (k, users, m_mod) = (graph.resources(), graph.users(), 4);
        let amp = 1.0 / (graph.d_v() as f64).sqrt();
        let codebooks = (0..users)
            .map(|j| {
                let phi = j as f64 * PI / (2.0 * users as f64);
                (0..m_mod)
                    .map(|m| {
                        let point =
                            Complex64::from_polar(amp, PI / 4.0 + m as f64 * PI / 2.0 + phi);
                        let mut cw = vec![Complex64::new(0.0, 0.0); k];
                        for (r, &row) in graph.zeta(j).iter().enumerate() {
                            cw[row] = if r % 2 == 0 { point } else { point.conj() };
                        }
                        cw
                    })
                    .collect()
            })
            .collect();
        Self {
            k,
            m_mod,
            codebooks,
        }
    }

    /// Digest of the exact codeword values, used to key cached tables.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        h.update((self.m_mod as u64).to_le_bytes());
        h.update((self.users() as u64).to_le_bytes());
        for x in self.codebooks.iter().flatten().flatten() {
            h.update(x.re.to_le_bytes());
            h.update(x.im.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct CodebookFile {
    K: usize,
    J: usize,
    M_mod: usize,
    indicator: Vec<Vec<u8>>,
    codebooks: Vec<Vec<Vec<[f64; 2]>>>,
}

/// Reads `{"K","J","M_mod","indicator","codebooks"}`; the graph and the
/// codebook are both validated.
pub fn codebook_from_json(text: &str) -> Result<(FactorGraph, ScmaCodebookSet)> {
    let f: CodebookFile = serde_json::from_str(text)?;
    let graph = FactorGraph::new(f.indicator)?;
    if graph.resources() != f.K || graph.users() != f.J {
        return Err(Error::InvalidCodebook(format!(
            "header says K = {}, J = {} but the indicator is {} x {}",
            f.K,
            f.J,
            graph.resources(),
            graph.users()
        )));
    }
    let cb = ScmaCodebookSet {
        k: f.K,
        m_mod: f.M_mod,
        codebooks: f
            .codebooks
            .into_iter()
            .map(|u| {
                u.into_iter()
                    .map(|cw| {
                        cw.into_iter()
                            .map(|[re, im]| Complex64::new(re, im))
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    };
    cb.validate(&graph)?;
    Ok((graph, cb))
}

pub fn codebook_to_json(graph: &FactorGraph, cb: &ScmaCodebookSet) -> Result<String> {
    let f = CodebookFile {
        K: cb.k,
        J: cb.users(),
        M_mod: cb.m_mod,
        indicator: graph.indicator().to_vec(),
        codebooks: cb
            .codebooks
            .iter()
            .map(|u| {
                u.iter()
                    .map(|cw| cw.iter().map(|x| [x.re, x.im]).collect())
                    .collect()
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&f)?)
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<(FactorGraph, ScmaCodebookSet)> {
    codebook_from_json(&std::fs::read_to_string(path)?)
}

/// Codeword indices of a frame, `indices[block][user]`.
pub type IndexMatrix = Vec<Vec<usize>>;

/// Per-user DD vectors and their superposition.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocatedFrame {
    pub dims: GridDims,
    pub per_user: Vec<Vec<Complex64>>,
    pub sup: Vec<Complex64>,
    pub indices: IndexMatrix,
}

/// Places codeword blocks along the delay axis: block `i` occupies vector
/// indices `iK .. iK + K`.
pub fn encode_frame(
    cb: &ScmaCodebookSet,
    indices: &IndexMatrix,
    dims: GridDims,
) -> Result<AllocatedFrame> {
    let k = cb.k;
    let mn = dims.len();
    if !mn.is_multiple_of(k) {
        return Err(Error::InvalidDims(format!(
            "MN = {mn} is not divisible by K = {k}"
        )));
    }
    let blocks = mn / k;
    if indices.len() != blocks {
        return Err(Error::InvalidDims(format!(
            "{} index rows for {blocks} codeword blocks",
            indices.len()
        )));
    }
    let users = cb.users();
    let mut per_user = vec![vec![Complex64::new(0.0, 0.0); mn]; users];
    for (i, row) in indices.iter().enumerate() {
        if row.len() != users {
            return Err(Error::InvalidDims(format!(
                "block {i} has {} indices for {users} users",
                row.len()
            )));
        }
        for (j, &m) in row.iter().enumerate() {
            if m >= cb.m_mod {
                return Err(Error::IndexOutOfRange {
                    block: i,
                    user: j,
                    index: m,
                    m_mod: cb.m_mod,
                });
            }
            per_user[j][i * k..(i + 1) * k].copy_from_slice(cb.codeword(j, m));
        }
    }
    let mut sup = vec![Complex64::new(0.0, 0.0); mn];
    for x in &per_user {
        for (s, v) in sup.iter_mut().zip(x) {
            *s += v;
        }
    }
    Ok(AllocatedFrame {
        dims,
        per_user,
        sup,
        indices: indices.clone(),
    })
}

/// A validated graph and codebook together with the decoder tables.
///
/// `codebook` is the one used on air: when superimposed-power
/// normalization is on it is the loaded codebook scaled so that every
/// superimposed entry has unit average power.
#[derive(Debug, Clone)]
pub struct ScmaSystem {
    pub graph: FactorGraph,
    pub raw: ScmaCodebookSet,
    pub codebook: ScmaCodebookSet,
    pub scale: f64,
    decoder: MpaDecoder,
}

impl ScmaSystem {
    pub fn new(
        graph: FactorGraph,
        raw: ScmaCodebookSet,
        normalize_sup_power: bool,
    ) -> Result<Self> {
        raw.validate(&graph)?;
        let scale = if normalize_sup_power {
            let total: f64 = (0..raw.users()).map(|j| raw.power(j)).sum();
            (raw.k as f64 / total).sqrt()
        } else {
            1.0
        };
        let codebook = raw.scaled(scale);
        let decoder = MpaDecoder::new(&graph, &codebook)?;
        Ok(Self {
            graph,
            raw,
            codebook,
            scale,
            decoder,
        })
    }

    /// The 4 x 6 graph with the rotated-QPSK codebook, power-normalized.
    pub fn standard() -> Self {
        let g = FactorGraph::standard_4x6();
        let cb = ScmaCodebookSet::rotated_qpsk(&g);
        Self::new(g, cb, true).expect("built-in codebook is valid")
    }

    pub fn decoder(&self) -> &MpaDecoder {
        &self.decoder
    }

    pub fn k(&self) -> usize {
        self.codebook.k
    }

    pub fn users(&self) -> usize {
        self.codebook.users()
    }

    pub fn m_mod(&self) -> usize {
        self.codebook.m_mod
    }

    pub fn blocks(&self, dims: GridDims) -> Result<usize> {
        if !dims.len().is_multiple_of(self.k()) {
            return Err(Error::InvalidDims(format!(
                "MN = {} is not divisible by K = {}",
                dims.len(),
                self.k()
            )));
        }
        Ok(dims.len() / self.k())
    }

    pub fn encode(&self, indices: &IndexMatrix, dims: GridDims) -> Result<AllocatedFrame> {
        encode_frame(&self.codebook, indices, dims)
    }

    /// Bits carried by one user in one frame.
    pub fn bits_per_user(&self, dims: GridDims) -> Result<usize> {
        Ok(self.blocks(dims)? * self.codebook.bits_per_codeword())
    }
}

/// Number of differing bits between two codeword indices under the
/// natural binary mapping.
pub fn bit_errors(a: usize, b: usize) -> u32 {
    (a ^ b).count_ones()
}
