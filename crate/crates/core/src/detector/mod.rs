//! Single-layer cross-domain detector and the two-stage baseline.
//!
//! One cross-domain iteration runs the time-domain L-MMSE equalizer, passes
//! its extrinsic belief into the DD domain, decodes every codeword block
//! with the MPA, rebuilds the superimposed symbols and sends the DD
//! extrinsic belief back as the next time-domain prior.

mod lmmse;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use self::lmmse::{lmmse_equalize, lmmse_gain_diagonal, lmmse_step, BandedSystem};
pub use crate::belief::{
    dd_to_time_belief, extrinsic, time_to_dd_belief, GaussianBelief, VarBounds,
};
use crate::channel::TimeChannelMatrix;
use crate::error::{Error, Result};
use crate::otfs::GridDims;
use crate::scma::{
    decode_frame, decode_frame_with_sigma2, select_codewords, FactorGraph, IndexMatrix, MpaConfig,
    PosteriorSet, ScmaSystem,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Maximum number of cross-domain iterations.
    pub l_max: usize,
    pub mpa: MpaConfig,
    /// Stop once the mean time-domain prior variance drops below this.
    pub stop_var: f64,
    pub var_floor: f64,
    pub var_cap: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let b = VarBounds::default();
        Self {
            l_max: 5,
            mpa: MpaConfig::default(),
            stop_var: 1e-3,
            var_floor: b.floor,
            var_cap: b.cap,
        }
    }
}

impl DetectorConfig {
    pub fn bounds(&self) -> VarBounds {
        VarBounds {
            floor: self.var_floor,
            cap: self.var_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_max == 0 {
            return Err(Error::Config("l_max must be >= 1".into()));
        }
        if self.mpa.iterations == 0 {
            return Err(Error::Config("MPA iterations must be >= 1".into()));
        }
        if self.stop_var.is_nan() {
            return Err(Error::Config("stop_var must be a number".into()));
        }
        self.bounds().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub indices: IndexMatrix,
    pub iters_run: usize,
    /// Mean DD-domain posterior variance of the superimposed symbols after
    /// each iteration.
    pub mse_trace: Vec<f64>,
    /// Mean time-domain L-MMSE posterior variance per iteration.
    pub lmmse_trace: Vec<f64>,
    pub converged: bool,
    /// Decisions after each iteration.
    pub snapshots: Vec<IndexMatrix>,
    /// `|mean(C_s^{p,T}) - v_x^{p,DD}| / v_x^{p,DD}` evaluated on the final
    /// prior, only for converged runs.
    pub fixed_point_residual: Option<f64>,
}

/// Superimposed-symbol belief from per-user posteriors: means add, and at
/// DD index `i` the precisions of the users active on resource `i mod K`
/// add.
pub fn combine_users(
    means: &[Vec<Complex64>],
    vars: &[Vec<f64>],
    graph: &FactorGraph,
    bounds: VarBounds,
) -> GaussianBelief {
    let k = graph.resources();
    let len = means.first().map_or(0, |m| m.len());
    let mut mean = vec![Complex64::new(0.0, 0.0); len];
    for m in means {
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc += v;
        }
    }
    let var = (0..len)
        .map(|i| {
            let precision: f64 = graph.xi(i % k).iter().map(|&j| 1.0 / vars[j][i]).sum();
            bounds.clamp(1.0 / precision)
        })
        .collect();
    GaussianBelief { mean, var }
}

/// Per-user detector state, advanced one half-iteration at a time so the
/// cooperative schemes can interleave consensus between the two halves.
#[derive(Debug, Clone)]
pub struct CrossDomainState {
    pub prior: GaussianBelief,
    /// Extrinsic output of the most recent equalization.
    pub ext_t: GaussianBelief,
    pub mse_trace: Vec<f64>,
    /// Mean L-MMSE posterior variance of each equalization.
    pub lmmse_trace: Vec<f64>,
    pub snapshots: Vec<IndexMatrix>,
    pub posteriors: Option<PosteriorSet>,
    pub converged: bool,
    pub iters_run: usize,
}

impl CrossDomainState {
    pub fn new(len: usize) -> Self {
        Self {
            prior: GaussianBelief::prior(len, 1.0),
            ext_t: GaussianBelief::prior(len, 1.0),
            mse_trace: Vec::new(),
            lmmse_trace: Vec::new(),
            snapshots: Vec::new(),
            posteriors: None,
            converged: false,
            iters_run: 0,
        }
    }

    pub fn done(&self, cfg: &DetectorConfig) -> bool {
        self.converged || self.iters_run >= cfg.l_max
    }

    /// L-MMSE on the current prior; stores and returns the extrinsic belief.
    pub fn equalize(
        &mut self,
        h: &TimeChannelMatrix,
        r: &[Complex64],
        n0: f64,
        cfg: &DetectorConfig,
    ) -> Result<&GaussianBelief> {
        let (post, ext) = lmmse_equalize(h, r, &self.prior, n0, cfg.bounds())?;
        self.lmmse_trace.push(post.mean_var());
        self.ext_t = ext;
        Ok(&self.ext_t)
    }

    /// DD-domain half: decode `ext_t` (possibly replaced by a cooperative
    /// estimate), rebuild the superimposed belief and form the next prior.
    pub fn decode(
        &mut self,
        ext_t: &GaussianBelief,
        sys: &ScmaSystem,
        dims: GridDims,
        cfg: &DetectorConfig,
    ) -> Result<()> {
        let bounds = cfg.bounds();
        let prior_dd = time_to_dd_belief(ext_t, dims);
        let dec = decode_frame(sys, &prior_dd, &cfg.mpa)?;
        let comb = combine_users(&dec.means, &dec.vars, &sys.graph, bounds);
        self.mse_trace.push(comb.mean_var());
        let post_t = dd_to_time_belief(&comb, dims);
        let next = extrinsic(&post_t, &ext_t.scalarized(), bounds);
        self.snapshots.push(select_codewords(&dec.posteriors));
        self.posteriors = Some(dec.posteriors);
        self.iters_run += 1;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "prior became non-finite after iteration {}",
                self.iters_run
            )));
        }
        self.converged = next.mean_var() < cfg.stop_var;
        self.prior = next;
        Ok(())
    }

    pub fn report(&self, residual: Option<f64>) -> DetectionReport {
        DetectionReport {
            indices: self.snapshots.last().cloned().unwrap_or_default(),
            iters_run: self.iters_run,
            mse_trace: self.mse_trace.clone(),
            lmmse_trace: self.lmmse_trace.clone(),
            converged: self.converged,
            snapshots: self.snapshots.clone(),
            fixed_point_residual: residual,
        }
    }

    /// Relative gap between the equalizer's mean posterior variance on the
    /// current prior and the last DD-domain posterior variance.
    pub fn fixed_point_residual(
        &self,
        h: &TimeChannelMatrix,
        r: &[Complex64],
        n0: f64,
        cfg: &DetectorConfig,
    ) -> Result<Option<f64>> {
        let Some(&v_dd) = self.mse_trace.last() else {
            return Ok(None);
        };
        let post = lmmse_step(h, r, &self.prior, n0, cfg.bounds())?;
        Ok(Some((post.mean_var() - v_dd).abs() / v_dd))
    }
}

/// Cross-domain detection of one received time-domain frame.
pub fn detect(
    h: &TimeChannelMatrix,
    r: &[Complex64],
    n0: f64,
    sys: &ScmaSystem,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    let (state, residual) = detect_state(h, r, n0, sys, cfg)?;
    Ok(state.report(residual))
}

/// As [`detect`], also returning the final per-user state.
pub fn detect_state(
    h: &TimeChannelMatrix,
    r: &[Complex64],
    n0: f64,
    sys: &ScmaSystem,
    cfg: &DetectorConfig,
) -> Result<(CrossDomainState, Option<f64>)> {
    cfg.validate()?;
    let dims = h.dims;
    sys.blocks(dims)?;
    let mut st = CrossDomainState::new(dims.len());
    while !st.done(cfg) {
        let ext = st.equalize(h, r, n0, cfg)?.clone();
        st.decode(&ext, sys, dims, cfg)?;
    }
    let residual = if st.converged {
        st.fixed_point_residual(h, r, n0, cfg)?
    } else {
        None
    };
    Ok((st, residual))
}

/// Non-iterative baseline: one DD-domain L-MMSE pass with the dense `H_DD`
/// (unit prior), then MPA decoding of the equalized symbols with the mean
/// posterior variance as noise level.
pub fn detect_two_stage(
    h_dd: &DMatrix<Complex64>,
    y: &[Complex64],
    n0: f64,
    sys: &ScmaSystem,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let n = y.len();
    if h_dd.nrows() != n || h_dd.ncols() != n {
        return Err(Error::InvalidDims(format!(
            "H_DD is {}x{}, frame has {n} entries",
            h_dd.nrows(),
            h_dd.ncols()
        )));
    }
    let a = h_dd * h_dd.adjoint() + DMatrix::<Complex64>::identity(n, n) * Complex64::new(n0, 0.0);
    let chol = a.cholesky().ok_or(Error::Singular {
        pivot: 0,
        value: 0.0,
    })?;
    let z = chol.solve(&DVector::from_column_slice(y));
    let mean: Vec<Complex64> = (h_dd.adjoint() * z).iter().cloned().collect();
    // diag(I - H^H A^{-1} H)
    let ainv_h = chol.solve(h_dd);
    let bounds = cfg.bounds();
    let var: Vec<f64> = (0..n)
        .map(|q| {
            let g: Complex64 = (0..n).map(|p| h_dd[(p, q)].conj() * ainv_h[(p, q)]).sum();
            bounds.clamp(1.0 - g.re)
        })
        .collect();
    two_stage_decode(&GaussianBelief { mean, var }, sys, cfg)
}

/// The same baseline computed through the sparse time-domain channel: with
/// a unit prior the DD-domain estimate is the transformed time-domain one
/// and the mean posterior variance is unchanged by the unitary map.
pub fn detect_two_stage_time(
    h: &TimeChannelMatrix,
    r: &[Complex64],
    n0: f64,
    sys: &ScmaSystem,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let post = lmmse_step(
        h,
        r,
        &GaussianBelief::prior(h.size(), 1.0),
        n0,
        cfg.bounds(),
    )?;
    two_stage_decode(&time_to_dd_belief(&post, h.dims), sys, cfg)
}

fn two_stage_decode(
    post_dd: &GaussianBelief,
    sys: &ScmaSystem,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    let dec = decode_frame_with_sigma2(sys, &post_dd.mean, post_dd.mean_var(), &cfg.mpa)?;
    let indices = select_codewords(&dec.posteriors);
    Ok(DetectionReport {
        indices: indices.clone(),
        iters_run: 1,
        mse_trace: vec![post_dd.mean_var()],
        lmmse_trace: vec![post_dd.mean_var()],
        converged: false,
        snapshots: vec![indices],
        fixed_point_residual: None,
    })
}
