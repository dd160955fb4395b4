//! Scalar state evolution of the single-layer detector.
//!
//! The MPA is summarised by an empirical table `f_j(v)`: the per-entry
//! squared error of user `j`'s posterior mean when the superimposed
//! codeword is observed in complex Gaussian noise of variance `v`.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::belief::VarBounds;
use crate::channel::{complex_gaussian, TimeChannelMatrix};
use crate::detector::lmmse_gain_diagonal;
use crate::error::{Error, Result};
use crate::scma::{MpaConfig, ScmaSystem};

/// Relative change of `v_a_T` below which a trajectory is at its fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableParams {
    pub points: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for TableParams {
    fn default() -> Self {
        Self {
            points: 25,
            v_min: 1e-6,
            v_max: 1e2,
            trials: 20_000,
            seed: 0x5e7a_b1e5,
        }
    }
}

impl TableParams {
    pub fn grid(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.v_min];
        }
        let (a, b) = (self.v_min.ln(), self.v_max.ln());
        (0..self.points)
            .map(|i| (a + (b - a) * i as f64 / (self.points - 1) as f64).exp())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::Config("the error table grid is empty".into()));
        }
        if !(self.v_min > 0.0 && self.v_min <= self.v_max && self.v_max.is_finite()) {
            return Err(Error::Config(format!(
                "table grid needs 0 < v_min <= v_max, got {} and {}",
                self.v_min, self.v_max
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config(
                "table needs at least one trial per point".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpaErrorTable {
    pub codebook_hash: String,
    pub params: TableParams,
    pub mpa: MpaConfig,
    pub grid: Vec<f64>,
    /// Monte Carlo squared error, `[point][user]`.
    pub raw: Vec<Vec<f64>>,
    /// Mean posterior variance over the same trials, `[point][user]`.
    pub posterior_var: Vec<Vec<f64>>,
    /// `raw` made nondecreasing in `v` per user; used for lookups.
    pub smoothed: Vec<Vec<f64>>,
}

/// Builds the table over `params.grid()`, one independent RNG stream per
/// grid point.
pub fn build_mpa_error_table(
    sys: &ScmaSystem,
    params: &TableParams,
    mpa: &MpaConfig,
) -> Result<MpaErrorTable> {
    params.validate()?;
    let grid = params.grid();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = grid
        .par_iter()
        .enumerate()
        .map(|(p, &v)| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(p as u64);
            table_point(sys, v, params.trials, mpa, &mut rng)
        })
        .collect::<Result<_>>()?;
    let (raw, posterior_var): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let users = sys.users();
    let mut smoothed = raw.clone();
    for j in 0..users {
        let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
        for (row, v) in smoothed.iter_mut().zip(isotonic_nondecreasing(&col)) {
            row[j] = v;
        }
    }
    Ok(MpaErrorTable {
        codebook_hash: sys.codebook.hash_hex(),
        params: *params,
        mpa: *mpa,
        grid,
        raw,
        posterior_var,
        smoothed,
    })
}

fn table_point(
    sys: &ScmaSystem,
    v: f64,
    trials: usize,
    mpa: &MpaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (k, users, m) = (sys.k(), sys.users(), sys.m_mod());
    let dec = sys.decoder();
    let mut ws = dec.workspace();
    let mut post = vec![0.0; users * m];
    let mut err = vec![0.0; users];
    let mut pvar = vec![0.0; users];
    let mut idx = vec![0; users];
    let mut y = vec![Complex64::new(0.0, 0.0); k];
    for _ in 0..trials {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..m);
        }
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = (0..users)
                .map(|j| sys.codebook.codebooks[j][idx[j]][r])
                .sum::<Complex64>();
        }
        for yr in y.iter_mut() {
            *yr += complex_gaussian(rng, v);
        }
        dec.decode_block_into(&y, v, mpa, &mut ws, &mut post, None)?;
        for j in 0..users {
            let p = &post[j * m..(j + 1) * m];
            let rows = sys.graph.zeta(j);
            for &r in rows {
                let mut mean = Complex64::new(0.0, 0.0);
                let mut second = 0.0;
                for (q, &pq) in p.iter().enumerate() {
                    let x = sys.codebook.codebooks[j][q][r];
                    mean += x * pq;
                    second += x.norm_sqr() * pq;
                }
                err[j] +=
                    (sys.codebook.codebooks[j][idx[j]][r] - mean).norm_sqr() / rows.len() as f64;
                pvar[j] += (second - mean.norm_sqr()).max(0.0) / rows.len() as f64;
            }
        }
    }
    let n = trials as f64;
    Ok((
        err.iter().map(|e| e / n).collect(),
        pvar.iter().map(|e| e / n).collect(),
    ))
}

/// Least-squares nondecreasing fit (pool adjacent violators).
pub fn isotonic_nondecreasing(x: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(x.len());
    for &v in x {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks
        .iter()
        .flat_map(|&(v, n)| std::iter::repeat_n(v, n))
        .collect()
}

impl MpaErrorTable {
    pub fn users(&self) -> usize {
        self.smoothed.first().map_or(0, |r| r.len())
    }

    /// `f_j(v)`: linear interpolation in `log v`; proportional to `v` below
    /// the grid and constant above it.
    pub fn lookup(&self, user: usize, v: f64) -> f64 {
        let g = &self.grid;
        let f = |i: usize| self.smoothed[i][user];
        let last = g.len() - 1;
        if v <= g[0] {
            return f(0) * v / g[0];
        }
        if v >= g[last] {
            return f(last);
        }
        let i = g.partition_point(|&x| x <= v) - 1;
        let t = (v.ln() - g[i].ln()) / (g[i + 1].ln() - g[i].ln());
        f(i) + t * (f(i + 1) - f(i))
    }

    /// Cache file name for a given system and parameter set.
    pub fn cache_key(sys: &ScmaSystem, params: &TableParams, mpa: &MpaConfig) -> String {
        let mut h = Sha256::new();
        h.update(sys.codebook.hash_hex().as_bytes());
        h.update(serde_json::to_string(params).unwrap_or_default().as_bytes());
        h.update(serde_json::to_string(mpa).unwrap_or_default().as_bytes());
        format!("mpa_table_{}.json", &hex::encode(h.finalize())[..16])
    }

    /// Loads the cached table from `dir` if it matches, otherwise builds
    /// and stores it.
    pub fn load_or_build(
        dir: Option<&Path>,
        sys: &ScmaSystem,
        params: &TableParams,
        mpa: &MpaConfig,
    ) -> Result<Self> {
        let Some(dir) = dir else {
            return build_mpa_error_table(sys, params, mpa);
        };
        let path: PathBuf = dir.join(Self::cache_key(sys, params, mpa));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(t) = serde_json::from_str::<Self>(&text) {
                if t.codebook_hash == sys.codebook.hash_hex()
                    && t.params == *params
                    && t.mpa == *mpa
                {
                    return Ok(t);
                }
            }
        }
        let t = build_mpa_error_table(sys, params, mpa)?;
        std::fs::create_dir_all(dir)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string(&t)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(t)
    }
}

/// Average variances after one cross-domain iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeState {
    pub v_a_t: f64,
    pub v_p_t: f64,
    pub v_e_t: f64,
    pub v_a_dd: f64,
    pub v_p_dd_user: Vec<f64>,
    pub v_p_dd: f64,
    pub v_e_dd: f64,
}

fn scalar_extrinsic(v_p: f64, v_a: f64, bounds: VarBounds) -> f64 {
    let gain = 1.0 / v_p - 1.0 / v_a;
    if gain <= 1.0 / bounds.cap {
        bounds.cap
    } else {
        bounds.clamp(1.0 / gain)
    }
}

/// One iteration of the recursion from the time-domain prior variance
/// `v_a_t`.
pub fn se_step(
    v_a_t: f64,
    h: &TimeChannelMatrix,
    n0: f64,
    table: &MpaErrorTable,
    sys: &ScmaSystem,
    bounds: VarBounds,
) -> Result<SeState> {
    let n = h.size();
    let gain = lmmse_gain_diagonal(h, &vec![v_a_t; n], n0)?;
    let v_p_t = gain
        .iter()
        .map(|g| bounds.clamp(v_a_t - v_a_t * v_a_t * g))
        .sum::<f64>()
        / n as f64;
    // same unclamped evaluation as the detector's equalizer
    let g_bar = gain.iter().sum::<f64>() / n as f64;
    let rest = 1.0 - v_a_t * g_bar;
    let v_e_t = if rest > 0.0 && g_bar / rest > 1.0 / bounds.cap {
        bounds.clamp(rest / g_bar)
    } else {
        bounds.cap
    };
    let v_a_dd = v_e_t;
    let v_p_dd_user: Vec<f64> = (0..sys.users())
        .map(|j| bounds.clamp(table.lookup(j, v_a_dd)))
        .collect();
    let k = sys.k();
    let v_p_dd = (0..k)
        .map(|r| {
            bounds.clamp(
                1.0 / sys
                    .graph
                    .xi(r)
                    .iter()
                    .map(|&j| 1.0 / v_p_dd_user[j])
                    .sum::<f64>(),
            )
        })
        .sum::<f64>()
        / k as f64;
    let v_e_dd = scalar_extrinsic(v_p_dd, v_a_dd, bounds);
    Ok(SeState {
        v_a_t,
        v_p_t,
        v_e_t,
        v_a_dd,
        v_p_dd_user,
        v_p_dd,
        v_e_dd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeTrajectory {
    pub states: Vec<SeState>,
    pub converged: bool,
    /// `|v_p_dd - v_p_t| / v_p_t` at the fixed point.
    pub fixed_point_residual: Option<f64>,
}

impl SeTrajectory {
    /// Predicted MSE per iteration.
    pub fn mse(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.v_p_dd).collect()
    }
}

/// Iterates [`se_step`] from `v_a_t = 1` for at most `l_max` iterations.
pub fn run_se(
    h: &TimeChannelMatrix,
    n0: f64,
    table: &MpaErrorTable,
    sys: &ScmaSystem,
    l_max: usize,
    bounds: VarBounds,
) -> Result<SeTrajectory> {
    if table.users() != sys.users() {
        return Err(Error::Config(format!(
            "table covers {} users, system has {}",
            table.users(),
            sys.users()
        )));
    }
    let mut v_a = 1.0;
    let mut states = Vec::with_capacity(l_max);
    for _ in 0..l_max {
        let st = se_step(v_a, h, n0, table, sys, bounds)?;
        let next = st.v_e_dd;
        let done = (next - v_a).abs() / v_a < FIXED_POINT_TOL;
        let residual = (st.v_p_dd - st.v_p_t).abs() / st.v_p_t;
        states.push(st);
        if done {
            return Ok(SeTrajectory {
                states,
                converged: true,
                fixed_point_residual: Some(residual),
            });
        }
        v_a = next;
    }
    Ok(SeTrajectory {
        states,
        converged: false,
        fixed_point_residual: None,
    })
}
