//! Cooperative (multi-layer) detection across downlink users: Gaussian
//! belief consensus over a user graph and the joint / separate detector
//! structures built on it.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::belief::{time_to_dd_belief, GaussianBelief, VarBounds};
use crate::channel::TimeChannelMatrix;
use crate::detector::{detect_state, CrossDomainState, DetectionReport, DetectorConfig};
use crate::error::{Error, Result};
use crate::scma::{decode_frame, select_codewords, ScmaSystem};

/// Undirected user graph with Metropolis update rates.
#[derive(Debug, Clone, PartialEq)]
pub struct UserGraph {
    neighbors: Vec<Vec<usize>>,
    gamma: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    #[serde(rename = "J")]
    j: usize,
    neighbors: Vec<Vec<usize>>,
}

impl UserGraph {
    /// `neighbors[j]` lists the 0-based neighbors of user `j`.
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let j = neighbors.len();
        if j == 0 {
            return Err(Error::InvalidUserGraph("graph has no users".into()));
        }
        let mut adj = vec![vec![false; j]; j];
        for (a, list) in neighbors.iter().enumerate() {
            for &b in list {
                if b >= j {
                    return Err(Error::InvalidUserGraph(format!(
                        "user {a} lists neighbor {b}, only {j} users"
                    )));
                }
                if b == a {
                    return Err(Error::InvalidUserGraph(format!("user {a} lists itself")));
                }
                if adj[a][b] {
                    return Err(Error::InvalidUserGraph(format!(
                        "user {a} lists neighbor {b} twice"
                    )));
                }
                adj[a][b] = true;
            }
        }
        for a in 0..j {
            for b in 0..j {
                if adj[a][b] != adj[b][a] {
                    return Err(Error::InvalidUserGraph(format!(
                        "link {a}-{b} is not symmetric"
                    )));
                }
            }
        }
        let mut seen = vec![false; j];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for &b in &neighbors[a] {
                if !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidUserGraph("graph is not connected".into()));
        }
        let mut gamma = vec![vec![0.0; j]; j];
        for a in 0..j {
            for &b in &neighbors[a] {
                gamma[a][b] = 1.0 / neighbors[a].len().max(neighbors[b].len()) as f64;
            }
            gamma[a][a] = 1.0 - neighbors[a].iter().map(|&b| gamma[a][b]).sum::<f64>();
        }
        Ok(Self { neighbors, gamma })
    }

    /// The six-user ring-like graph used in the evaluation; every user has
    /// three neighbors.
    pub fn standard_six() -> Self {
        let one_based = [
            [6, 2, 3],
            [1, 3, 5],
            [1, 2, 4],
            [3, 5, 6],
            [2, 4, 6],
            [1, 4, 5],
        ];
        Self::new(
            one_based
                .iter()
                .map(|s| s.iter().map(|&g| g - 1).collect())
                .collect(),
        )
        .expect("valid graph")
    }

    pub fn users(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[j]
    }

    /// Update rate matrix, rows summing to one.
    pub fn gamma(&self) -> &[Vec<f64>] {
        &self.gamma
    }

    /// Second-largest eigenvalue modulus of the update rate matrix.
    pub fn second_eigenvalue_modulus(&self) -> f64 {
        let j = self.users();
        let m = DMatrix::from_fn(j, j, |a, b| self.gamma[a][b]);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev.get(1).copied().unwrap_or(0.0)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GraphFile = serde_json::from_str(text)?;
        if f.j != f.neighbors.len() {
            return Err(Error::InvalidUserGraph(format!(
                "J = {} but {} neighbor lists",
                f.j,
                f.neighbors.len()
            )));
        }
        Self::new(f.neighbors)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphFile {
            j: self.users(),
            neighbors: self.neighbors.clone(),
        })?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Consensus after every time-domain equalization (Sche. 1).
    #[default]
    Joint,
    /// Consensus once after local detection, then one more decode (Sche. 2).
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// Every node receives the exact network average in one round.
    Central,
    #[default]
    Perfect,
    /// Additive real Gaussian noise on every received component.
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoopConfig {
    pub scheme: Scheme,
    /// Consensus rounds per exchange.
    pub i_c: usize,
    pub link: LinkKind,
    /// Variance of each real noise component on noisy links.
    pub link_noise_var: f64,
    /// Base of the vanishing step `alpha0^c` on noisy links.
    pub alpha0: f64,
    /// Fraction of entries each user shares, most reliable first.
    pub sharing_rate: f64,
}

impl Default for CoopConfig {
    fn default() -> Self {
        Self::joint()
    }
}

impl CoopConfig {
    pub fn joint() -> Self {
        Self {
            scheme: Scheme::Joint,
            i_c: 2,
            link: LinkKind::Perfect,
            link_noise_var: 1.0,
            alpha0: 0.5,
            sharing_rate: 1.0,
        }
    }

    pub fn separate() -> Self {
        Self {
            scheme: Scheme::Separate,
            i_c: 10,
            ..Self::joint()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(Error::Config(format!(
                "alpha0 must be in (0, 1], got {}",
                self.alpha0
            )));
        }
        if !(0.0..=1.0).contains(&self.sharing_rate) {
            return Err(Error::Config(format!(
                "sharing_rate must be in [0, 1], got {}",
                self.sharing_rate
            )));
        }
        if !(self.link_noise_var >= 0.0 && self.link_noise_var.is_finite()) {
            return Err(Error::Config(format!(
                "link_noise_var must be finite and >= 0, got {}",
                self.link_noise_var
            )));
        }
        Ok(())
    }

    /// Step size of consensus round `c` (0-based).
    pub fn alpha(&self, c: usize) -> f64 {
        self.alpha0.powi(c as i32)
    }
}

/// Information-form parameters `[Re(m)/v, Im(m)/v, 1/v]` per entry.
pub type Theta = [f64; 3];

pub fn pack(b: &GaussianBelief) -> Vec<Theta> {
    b.mean
        .iter()
        .zip(&b.var)
        .map(|(m, v)| [m.re / v, m.im / v, 1.0 / v])
        .collect()
}

/// Back to moments. Entries whose precision is no longer positive (only
/// possible with link noise) fall back to `fallback`.
pub fn unpack(theta: &[Theta], fallback: &GaussianBelief, bounds: VarBounds) -> GaussianBelief {
    let mut out = fallback.clone();
    for (i, t) in theta.iter().enumerate() {
        if t[2] > 0.0 && t.iter().all(|x| x.is_finite()) {
            let v = bounds.clamp(1.0 / t[2]);
            out.var[i] = v;
            out.mean[i] = Complex64::new(t[0] / t[2], t[1] / t[2]);
        }
    }
    out
}

/// The entries a user shares: the `floor(len * r_c)` smallest variances,
/// ties broken by index.
pub fn reduce_shares(b: &GaussianBelief, r_c: f64) -> Vec<usize> {
    let count = ((b.len() as f64) * r_c).floor() as usize;
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&x, &y| b.var[x].total_cmp(&b.var[y]));
    order.truncate(count.min(b.len()));
    order
}

/// Per-user masks of shared entries.
pub fn share_masks(beliefs: &[GaussianBelief], r_c: f64) -> Vec<Vec<bool>> {
    beliefs
        .iter()
        .map(|b| {
            let mut mask = vec![false; b.len()];
            for i in reduce_shares(b, r_c) {
                mask[i] = true;
            }
            mask
        })
        .collect()
}

/// One synchronous consensus round. With `shared`, a neighbor that did not
/// share entry `i` contributes nothing there (the receiver keeps its own
/// value in that term).
pub fn consensus_round<R: Rng + ?Sized>(
    states: &[Vec<Theta>],
    g: &UserGraph,
    link: LinkKind,
    noise_var: f64,
    alpha: f64,
    shared: Option<&[Vec<bool>]>,
    rng: &mut R,
) -> Vec<Vec<Theta>> {
    let users = g.users();
    let len = states.first().map_or(0, |s| s.len());
    let sent = |g: usize, i: usize| shared.is_none_or(|s| s[g][i]);
    let mut out = states.to_vec();
    match link {
        LinkKind::Perfect => {
            for j in 0..users {
                let gamma = &g.gamma[j];
                for i in 0..len {
                    let own = states[j][i];
                    let mut acc = [0.0; 3];
                    for c in 0..3 {
                        acc[c] = gamma[j] * own[c];
                    }
                    for &n in &g.neighbors[j] {
                        let src = if sent(n, i) { states[n][i] } else { own };
                        for c in 0..3 {
                            acc[c] += gamma[n] * src[c];
                        }
                    }
                    out[j][i] = acc;
                }
            }
        }
        LinkKind::Noisy => {
            let noise = Normal::new(0.0, noise_var.sqrt()).expect("finite noise variance");
            for j in 0..users {
                let gamma = &g.gamma[j];
                for &n in &g.neighbors[j] {
                    for i in 0..len {
                        if !sent(n, i) {
                            continue;
                        }
                        for c in 0..3 {
                            let w: f64 = noise.sample(rng);
                            out[j][i][c] +=
                                alpha * gamma[n] * (states[n][i][c] + w - states[j][i][c]);
                        }
                    }
                }
            }
        }
        LinkKind::Central => {
            for i in 0..len {
                for j in 0..users {
                    let mut acc = [0.0; 3];
                    let mut count = 0.0;
                    for (n, st) in states.iter().enumerate() {
                        if n == j || sent(n, i) {
                            for c in 0..3 {
                                acc[c] += st[i][c];
                            }
                            count += 1.0;
                        }
                    }
                    out[j][i] = acc.map(|a| a / count);
                }
            }
        }
    }
    out
}

/// Runs `cfg.i_c` consensus rounds on the users' beliefs and returns each
/// user's fused belief.
pub fn run_consensus<R: Rng + ?Sized>(
    local: &[GaussianBelief],
    g: &UserGraph,
    cfg: &CoopConfig,
    bounds: VarBounds,
    rng: &mut R,
) -> Result<Vec<GaussianBelief>> {
    if local.len() != g.users() {
        return Err(Error::InvalidUserGraph(format!(
            "{} beliefs for a {}-user graph",
            local.len(),
            g.users()
        )));
    }
    let len = local.first().map_or(0, |b| b.len());
    if cfg.i_c == 0 || ((len as f64) * cfg.sharing_rate).floor() == 0.0 {
        return Ok(local.to_vec());
    }
    let masks = (cfg.sharing_rate < 1.0).then(|| share_masks(local, cfg.sharing_rate));
    let mut theta: Vec<Vec<Theta>> = local.iter().map(pack).collect();
    for c in 0..cfg.i_c {
        theta = consensus_round(
            &theta,
            g,
            cfg.link,
            cfg.link_noise_var,
            cfg.alpha(c),
            masks.as_deref(),
            rng,
        );
    }
    Ok(theta
        .iter()
        .zip(local)
        .map(|(t, b)| unpack(t, b, bounds))
        .collect())
}

/// One receiver: its time-domain channel and received frame.
#[derive(Debug, Clone)]
pub struct Receiver {
    pub h: TimeChannelMatrix,
    pub r: Vec<Complex64>,
}

/// Joint cooperative detection: after every equalization the users run
/// consensus on their time-domain extrinsic beliefs and continue with the
/// fused belief. A user that has stopped keeps contributing its last
/// extrinsic belief.
pub fn detect_multilayer_joint<R: Rng + ?Sized>(
    rx: &[Receiver],
    n0: f64,
    sys: &ScmaSystem,
    g: &UserGraph,
    det: &DetectorConfig,
    coop: &CoopConfig,
    rng: &mut R,
) -> Result<Vec<DetectionReport>> {
    det.validate()?;
    coop.validate()?;
    let dims = check_receivers(rx, g, sys)?;
    let mut states: Vec<CrossDomainState> = rx
        .iter()
        .map(|_| CrossDomainState::new(dims.len()))
        .collect();
    while states.iter().any(|s| !s.done(det)) {
        for (st, x) in states.iter_mut().zip(rx) {
            if !st.done(det) {
                st.equalize(&x.h, &x.r, n0, det)?;
            }
        }
        let ext: Vec<GaussianBelief> = states.iter().map(|s| s.ext_t.clone()).collect();
        let fused = run_consensus(&ext, g, coop, det.bounds(), rng)?;
        for (st, b) in states.iter_mut().zip(&fused) {
            if !st.done(det) {
                st.decode(b, sys, dims, det)?;
            }
        }
    }
    states
        .iter()
        .zip(rx)
        .map(|(st, x)| {
            let residual = if st.converged {
                st.fixed_point_residual(&x.h, &x.r, n0, det)?
            } else {
                None
            };
            Ok(st.report(residual))
        })
        .collect()
}

/// Separate cooperative detection: every user runs the single-layer
/// detector, the users run consensus once on their final time-domain
/// extrinsic beliefs, and each decodes the fused belief once more.
pub fn detect_multilayer_separate<R: Rng + ?Sized>(
    rx: &[Receiver],
    n0: f64,
    sys: &ScmaSystem,
    g: &UserGraph,
    det: &DetectorConfig,
    coop: &CoopConfig,
    rng: &mut R,
) -> Result<Vec<DetectionReport>> {
    det.validate()?;
    coop.validate()?;
    let dims = check_receivers(rx, g, sys)?;
    let mut reports = Vec::with_capacity(rx.len());
    let mut ext = Vec::with_capacity(rx.len());
    for x in rx {
        let (st, residual) = detect_state(&x.h, &x.r, n0, sys, det)?;
        reports.push(st.report(residual));
        ext.push(st.ext_t);
    }
    if coop.i_c == 0 {
        return Ok(reports);
    }
    let fused = run_consensus(&ext, g, coop, det.bounds(), rng)?;
    for (rep, b) in reports.iter_mut().zip(&fused) {
        let dec = decode_frame(sys, &time_to_dd_belief(b, dims), &det.mpa)?;
        rep.indices = select_codewords(&dec.posteriors);
        rep.snapshots.push(rep.indices.clone());
    }
    Ok(reports)
}

fn check_receivers(
    rx: &[Receiver],
    g: &UserGraph,
    sys: &ScmaSystem,
) -> Result<crate::otfs::GridDims> {
    if rx.len() != g.users() {
        return Err(Error::InvalidUserGraph(format!(
            "{} receivers for a {}-user graph",
            rx.len(),
            g.users()
        )));
    }
    let dims = rx[0].h.dims;
    for x in rx {
        if x.h.dims != dims || x.r.len() != dims.len() {
            return Err(Error::InvalidDims(
                "receivers disagree on the frame size".into(),
            ));
        }
    }
    sys.blocks(dims)?;
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_time_channel, generate_random_channel, transmit, ChannelParams};
    use crate::detector::detect;
    use crate::otfs::{GridDims, OtfsTransform};
    use crate::scma::IndexMatrix;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_states(x: &[f64]) -> Vec<Vec<Theta>> {
        x.iter().map(|&v| vec![[v, 0.0, 1.0]]).collect()
    }

    #[test]
    fn triangle_round() {
        let g = UserGraph::new(vec![vec![1, 2], vec![0, 2], vec![0, 1]]).unwrap();
        for (a, row) in g.gamma().iter().enumerate() {
            for (b, &w) in row.iter().enumerate() {
                assert_eq!(w, if a == b { 0.0 } else { 0.5 });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = consensus_round(
            &scalar_states(&[0.0, 1.0, 2.0]),
            &g,
            LinkKind::Perfect,
            0.0,
            1.0,
            None,
            &mut rng,
        );
        let v: Vec<f64> = out.iter().map(|s| s[0][0]).collect();
        assert_eq!(v, vec![1.5, 1.0, 0.5]);
        assert_eq!(v.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn two_neighbor_half_weights() {
        // With |S_j| = 2 everywhere and a 4-cycle, off-diagonals are 1/2 and
        // self weights zero.
        let g = UserGraph::new(vec![vec![1, 3], vec![0, 2], vec![1, 3], vec![0, 2]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = consensus_round(
            &scalar_states(&[0.0, 1.0, 2.0, 3.0]),
            &g,
            LinkKind::Perfect,
            0.0,
            1.0,
            None,
            &mut rng,
        );
        let v: Vec<f64> = out.iter().map(|s| s[0][0]).collect();
        assert_eq!(v, vec![2.0, 1.0, 2.0, 1.0]);
        assert_eq!(v.iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn standard_graph_weights() {
        let g = UserGraph::standard_six();
        for (a, row) in g.gamma().iter().enumerate() {
            assert_eq!(g.neighbors(a).len(), 3);
            assert_eq!(row[a], 0.0);
            for &b in g.neighbors(a) {
                assert_eq!(row[b], 1.0 / 3.0);
                assert_eq!(g.gamma()[b][a], row[b]);
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(g.second_eigenvalue_modulus() < 1.0);
        let back = UserGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert!(UserGraph::new(vec![vec![1], vec![]]).is_err());
        assert!(UserGraph::new(vec![vec![1], vec![0], vec![3], vec![2]]).is_err());
        assert!(UserGraph::new(vec![vec![0]]).is_err());
        assert!(UserGraph::new(vec![vec![5]]).is_err());
        assert!(UserGraph::from_json(r#"{"J":3,"neighbors":[[1],[0]]}"#).is_err());
    }

    #[test]
    fn noiseless_noisy_link_matches_perfect() {
        let g = UserGraph::standard_six();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<Theta>> = (0..6)
            .map(|_| {
                (0..5)
                    .map(|_| [rng.random(), rng.random(), rng.random_range(0.5..2.0)])
                    .collect()
            })
            .collect();
        let p = consensus_round(&x, &g, LinkKind::Perfect, 0.0, 1.0, None, &mut rng);
        let n = consensus_round(&x, &g, LinkKind::Noisy, 0.0, 1.0, None, &mut rng);
        for (a, b) in p.iter().flatten().zip(n.iter().flatten()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn contraction_bounded_by_second_eigenvalue() {
        let g = UserGraph::standard_six();
        let lambda = g.second_eigenvalue_modulus();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let avg = x.iter().sum::<f64>() / 6.0;
        let mut s = scalar_states(&x);
        let err = |s: &Vec<Vec<Theta>>| {
            s.iter()
                .map(|v| (v[0][0] - avg).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = err(&s);
        for _ in 0..20 {
            s = consensus_round(&s, &g, LinkKind::Perfect, 0.0, 1.0, None, &mut rng);
            let e = err(&s);
            if prev > 1e-12 {
                assert!(e / prev <= lambda + 1e-6);
            }
            prev = e;
        }
    }

    fn beliefs(rng: &mut ChaCha8Rng, users: usize, len: usize) -> Vec<GaussianBelief> {
        (0..users)
            .map(|_| GaussianBelief {
                mean: (0..len)
                    .map(|_| {
                        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    })
                    .collect(),
                var: (0..len).map(|_| rng.random_range(0.01..2.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn identical_inputs_are_fixed() {
        let g = UserGraph::standard_six();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = beliefs(&mut rng, 1, 16).pop().unwrap();
        let all = vec![one.clone(); 6];
        let cfg = CoopConfig {
            i_c: 7,
            ..CoopConfig::joint()
        };
        for out in run_consensus(&all, &g, &cfg, VarBounds::default(), &mut rng).unwrap() {
            for i in 0..16 {
                assert!((out.mean[i] - one.mean[i]).norm() < 1e-12);
                assert!((out.var[i] - one.var[i]).abs() < 1e-12 * one.var[i]);
            }
        }
    }

    #[test]
    fn central_and_long_perfect_agree() {
        let g = UserGraph::standard_six();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = beliefs(&mut rng, 6, 32);
        let central = CoopConfig {
            i_c: 1,
            link: LinkKind::Central,
            ..CoopConfig::joint()
        };
        let long = CoopConfig {
            i_c: 200,
            ..CoopConfig::joint()
        };
        let bounds = VarBounds::default();
        let c = run_consensus(&b, &g, &central, bounds, &mut rng).unwrap();
        let p = run_consensus(&b, &g, &long, bounds, &mut rng).unwrap();
        for i in 0..32 {
            let prec: f64 = b.iter().map(|x| 1.0 / x.var[i]).sum::<f64>() / 6.0;
            let info: Complex64 = b.iter().map(|x| x.mean[i] / x.var[i]).sum::<Complex64>() / 6.0;
            for j in 0..6 {
                assert!((c[j].var[i] - 1.0 / prec).abs() < 1e-12);
                assert!((c[j].mean[i] - info / prec).norm() < 1e-12);
                assert!((p[j].var[i] - c[j].var[i]).abs() < 1e-6);
                assert!((p[j].mean[i] - c[j].mean[i]).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn sharing_selects_smallest_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = beliefs(&mut rng, 1, 128).pop().unwrap();
        let idx = reduce_shares(&b, 0.5);
        assert_eq!(idx.len(), 64);
        let worst = idx.iter().map(|&i| b.var[i]).fold(0.0, f64::max);
        let excluded = (0..128)
            .filter(|i| !idx.contains(i))
            .map(|i| b.var[i])
            .fold(f64::INFINITY, f64::min);
        assert!(worst <= excluded);
        assert_eq!(reduce_shares(&b, 1.0).len(), 128);
        assert!(reduce_shares(&b, 0.0).is_empty());
    }

    #[test]
    fn full_mask_is_bit_identical() {
        let g = UserGraph::standard_six();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = beliefs(&mut rng, 6, 16);
        let theta: Vec<Vec<Theta>> = b.iter().map(pack).collect();
        let masks = share_masks(&b, 1.0);
        assert!(masks.iter().flatten().all(|&m| m));
        for link in [LinkKind::Perfect, LinkKind::Central] {
            let a = consensus_round(&theta, &g, link, 0.0, 1.0, None, &mut rng);
            let m = consensus_round(&theta, &g, link, 0.0, 1.0, Some(&masks), &mut rng);
            assert_eq!(a, m);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = consensus_round(&theta, &g, LinkKind::Noisy, 1.0, 0.5, None, &mut r1);
        let m = consensus_round(&theta, &g, LinkKind::Noisy, 1.0, 0.5, Some(&masks), &mut r2);
        assert_eq!(a, m);
    }

    #[test]
    fn unshared_entries_keep_local_values() {
        let g = UserGraph::standard_six();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = beliefs(&mut rng, 6, 8);
        let theta: Vec<Vec<Theta>> = b.iter().map(pack).collect();
        let none = vec![vec![false; 8]; 6];
        for link in [LinkKind::Noisy, LinkKind::Central] {
            let out = consensus_round(&theta, &g, link, 1.0, 1.0, Some(&none), &mut rng);
            assert_eq!(out, theta);
        }
        // perfect links rebuild gamma_jj * x + sum_g gamma_jg * x
        let out = consensus_round(
            &theta,
            &g,
            LinkKind::Perfect,
            0.0,
            1.0,
            Some(&none),
            &mut rng,
        );
        for (a, b) in out.iter().flatten().zip(theta.iter().flatten()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-15 * b[c].abs().max(1.0));
            }
        }
    }

    #[test]
    fn negative_precision_falls_back() {
        let local = GaussianBelief {
            mean: vec![Complex64::new(0.3, 0.0); 2],
            var: vec![0.5; 2],
        };
        let out = unpack(
            &[[1.0, 0.0, -2.0], [1.0, 1.0, 4.0]],
            &local,
            VarBounds::default(),
        );
        assert_eq!(out.var[0], 0.5);
        assert_eq!(out.mean[0], Complex64::new(0.3, 0.0));
        assert_eq!(out.var[1], 0.25);
        assert_eq!(out.mean[1], Complex64::new(0.25, 0.25));
    }

    proptest! {
        #[test]
        fn perfect_round_preserves_sum(x in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let g = UserGraph::standard_six();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = scalar_states(&x);
            let out = consensus_round(&s, &g, LinkKind::Perfect, 0.0, 1.0, None, &mut rng);
            let before: f64 = x.iter().sum();
            let after: f64 = out.iter().map(|v| v[0][0]).sum();
            prop_assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
        }
    }

    fn frame(
        sys: &ScmaSystem,
        dims: GridDims,
        rng: &mut ChaCha8Rng,
    ) -> (IndexMatrix, Vec<Complex64>) {
        let idx: IndexMatrix = (0..sys.blocks(dims).unwrap())
            .map(|_| {
                (0..sys.users())
                    .map(|_| rng.random_range(0..sys.m_mod()))
                    .collect()
            })
            .collect();
        let mut s = sys.encode(&idx, dims).unwrap().sup;
        OtfsTransform::cached(dims).dd_to_time_in_place(&mut s);
        (idx, s)
    }

    #[test]
    fn identical_receivers_reduce_to_single_layer() {
        let sys = ScmaSystem::standard();
        let dims = GridDims::new(16, 8).unwrap();
        let g = UserGraph::standard_six();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n0 = 0.05;
        let det = DetectorConfig::default();
        for _ in 0..3 {
            let ch =
                generate_random_channel(dims, ChannelParams::table_one(), n0, &mut rng).unwrap();
            let h = build_time_channel(&ch).unwrap();
            let (_, s) = frame(&sys, dims, &mut rng);
            let r = transmit(&h, n0, &s, &mut rng);
            let single = detect(&h, &r, n0, &sys, &det).unwrap();
            let rx = vec![
                Receiver {
                    h: h.clone(),
                    r: r.clone()
                };
                6
            ];
            for coop in [CoopConfig::joint(), CoopConfig::separate()] {
                let f = if coop.scheme == Scheme::Joint {
                    detect_multilayer_joint
                } else {
                    detect_multilayer_separate
                };
                for rep in f(&rx, n0, &sys, &g, &det, &coop, &mut rng).unwrap() {
                    assert_eq!(rep.indices, single.indices);
                }
            }
        }
    }

    #[test]
    fn zero_rounds_and_zero_sharing_are_single_layer() {
        let sys = ScmaSystem::standard();
        let dims = GridDims::new(16, 8).unwrap();
        let g = UserGraph::standard_six();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n0 = 0.1;
        let det = DetectorConfig::default();
        let (_, s) = frame(&sys, dims, &mut rng);
        let rx: Vec<Receiver> = (0..6)
            .map(|_| {
                let ch = generate_random_channel(dims, ChannelParams::table_one(), n0, &mut rng)
                    .unwrap();
                let h = build_time_channel(&ch).unwrap();
                let r = transmit(&h, n0, &s, &mut rng);
                Receiver { h, r }
            })
            .collect();
        let singles: Vec<DetectionReport> = rx
            .iter()
            .map(|x| detect(&x.h, &x.r, n0, &sys, &det).unwrap())
            .collect();
        let cases = [
            detect_multilayer_separate(
                &rx,
                n0,
                &sys,
                &g,
                &det,
                &CoopConfig {
                    i_c: 0,
                    ..CoopConfig::separate()
                },
                &mut rng,
            ),
            detect_multilayer_joint(
                &rx,
                n0,
                &sys,
                &g,
                &det,
                &CoopConfig {
                    sharing_rate: 0.0,
                    ..CoopConfig::joint()
                },
                &mut rng,
            ),
            detect_multilayer_joint(
                &rx,
                n0,
                &sys,
                &g,
                &det,
                &CoopConfig {
                    i_c: 0,
                    ..CoopConfig::joint()
                },
                &mut rng,
            ),
        ];
        for reps in cases {
            for (a, b) in reps.unwrap().iter().zip(&singles) {
                assert_eq!(a, b);
            }
        }
    }
}
