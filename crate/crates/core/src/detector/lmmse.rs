//! Time-domain L-MMSE equalization.
//!
//! With `D = diag(prior.var)` the system matrix `A = H D H^H + N0 I` is
//! cyclically banded: `H` has one cyclic diagonal per distinct delay, so
//! `A[q, q']` is nonzero only when `(q' - q) mod MN` lies within the delay
//! spread `b`. Ordering rows naturally, the lower triangle of `A` fits in an
//! envelope where row `q` starts at column `q - b`, except for the last `b`
//! rows which wrap around and start at column 0. An `L D L^H` factorization
//! creates no fill outside that envelope, and the selected inverse
//! (entries of `A^{-1}` on the envelope) gives the posterior variances
//! without ever forming `A^{-1}`.

use num_complex::Complex64;

use crate::belief::{GaussianBelief, VarBounds};
use crate::channel::TimeChannelMatrix;
use crate::error::{Error, Result};

const PIVOT_REL_TOL: f64 = 1e-14;

/// Hermitian matrix stored as the lower triangle of a row envelope.
#[derive(Debug, Clone)]
struct Envelope {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<Complex64>,
}

impl Envelope {
    fn cyclic_band(n: usize, b: usize) -> Self {
        let first: Vec<usize> = (0..n)
            .map(|q| if q + b >= n { 0 } else { q.saturating_sub(b) })
            .collect();
        let mut start = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for q in 0..n {
            start.push(acc);
            acc += q - first[q] + 1;
        }
        start.push(acc);
        Self {
            first,
            start,
            data: vec![Complex64::new(0.0, 0.0); acc],
        }
    }

    fn n(&self) -> usize {
        self.first.len()
    }

    /// Lower-triangle entry, `r >= c`, inside the envelope.
    #[inline]
    fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[self.start[r] + c - self.first[r]]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut Complex64 {
        &mut self.data[self.start[r] + c - self.first[r]]
    }

    /// Any entry of the Hermitian matrix inside the envelope.
    #[inline]
    fn herm(&self, r: usize, c: usize) -> Complex64 {
        if r >= c {
            self.at(r, c)
        } else {
            self.at(c, r).conj()
        }
    }
}

/// `L D L^H` factor of `H diag(d) H^H + N0 I` with its selected inverse.
#[derive(Debug, Clone)]
pub struct BandedSystem {
    l: Envelope,
    pivots: Vec<f64>,
    /// Rows `k > i` with a structural `L[k, i]`, per column `i`.
    col_rows: Vec<Vec<usize>>,
}

impl BandedSystem {
    pub fn factor(h: &TimeChannelMatrix, d: &[f64], n0: f64) -> Result<Self> {
        let n = h.size();
        assert_eq!(d.len(), n);
        let delays: Vec<usize> = h.taps.iter().map(|t| t.delay).collect();
        let b = match (delays.first(), delays.last()) {
            (Some(lo), Some(hi)) => (hi - lo).min(n.saturating_sub(1)),
            _ => 0,
        };
        let mut a = Envelope::cyclic_band(n, b);
        for q in 0..n {
            for t1 in &h.taps {
                let col = (q + n - t1.delay) % n;
                let left = t1.coeff[q] * d[col];
                for t2 in &h.taps {
                    let q2 = (col + t2.delay) % n;
                    if q2 <= q {
                        *a.at_mut(q, q2) += left * t2.coeff[q2].conj();
                    }
                }
            }
            *a.at_mut(q, q) += n0;
        }
        let max_diag = (0..n).map(|q| a.at(q, q).re).fold(0.0f64, f64::max);
        let tol = PIVOT_REL_TOL * max_diag.max(f64::MIN_POSITIVE);

        // Row-oriented envelope LDL^H; `a` is overwritten with `L D` on the
        // strict lower part while rows are processed, then scaled to `L`.
        let mut pivots = vec![0.0; n];
        for i in 0..n {
            let fi = a.first[i];
            for j in fi..i {
                let lo = fi.max(a.first[j]);
                let mut s = a.at(i, j);
                for k in lo..j {
                    s -= a.at(i, k) * a.at(j, k).conj();
                }
                *a.at_mut(i, j) = s;
            }
            // a(i, j) now holds u_ij = L_ij d_j
            let mut di = a.at(i, i).re;
            for j in fi..i {
                let u = a.at(i, j);
                di -= u.norm_sqr() / pivots[j];
                *a.at_mut(i, j) = u / pivots[j];
            }
            if !(di > tol) || !di.is_finite() {
                return Err(Error::Singular {
                    pivot: i,
                    value: di,
                });
            }
            pivots[i] = di;
            *a.at_mut(i, i) = Complex64::new(1.0, 0.0);
        }
        let mut col_rows = vec![Vec::new(); n];
        for k in 0..n {
            for i in a.first[k]..k {
                col_rows[i].push(k);
            }
        }
        Ok(Self {
            l: a,
            pivots,
            col_rows,
        })
    }

    pub fn size(&self) -> usize {
        self.l.n()
    }

    /// Solves `A z = rhs`.
    pub fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        let n = self.size();
        let mut z = rhs.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in self.l.first[i]..i {
                s -= self.l.at(i, k) * z[k];
            }
            z[i] = s;
        }
        for i in 0..n {
            z[i] /= self.pivots[i];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for &k in &self.col_rows[i] {
                s -= self.l.at(k, i).conj() * z[k];
            }
            z[i] = s;
        }
        z
    }

    /// Entries of `A^{-1}` on the envelope (Takahashi recurrences).
    fn selected_inverse(&self) -> Envelope {
        let n = self.size();
        let mut z = Envelope {
            first: self.l.first.clone(),
            start: self.l.start.clone(),
            data: vec![Complex64::new(0.0, 0.0); self.l.data.len()],
        };
        for i in (0..n).rev() {
            let rows = &self.col_rows[i];
            // Z[j, i] for j in rows (j > i), stored in row j
            for &j in rows.iter().rev() {
                let mut s = Complex64::new(0.0, 0.0);
                for &k in rows {
                    s -= self.l.at(k, i).conj() * z.herm(k, j);
                }
                // s = Z[i, j]; store the lower entry Z[j, i]
                *z.at_mut(j, i) = s.conj();
            }
            let mut s = Complex64::new(1.0 / self.pivots[i], 0.0);
            for &k in rows {
                s -= self.l.at(k, i).conj() * z.at(k, i);
            }
            *z.at_mut(i, i) = Complex64::new(s.re, 0.0);
        }
        z
    }
}

/// `diag(H^H (H D H^H + N0 I)^{-1} H)`.
pub fn lmmse_gain_diagonal(h: &TimeChannelMatrix, d: &[f64], n0: f64) -> Result<Vec<f64>> {
    let sys = BandedSystem::factor(h, d, n0)?;
    Ok(gain_diagonal(h, &sys))
}

fn gain_diagonal(h: &TimeChannelMatrix, sys: &BandedSystem) -> Vec<f64> {
    let n = h.size();
    let z = sys.selected_inverse();
    (0..n)
        .map(|q| {
            let mut g = 0.0;
            for t1 in &h.taps {
                let a1 = (q + t1.delay) % n;
                let c1 = t1.coeff[a1].conj();
                for t2 in &h.taps {
                    let a2 = (q + t2.delay) % n;
                    g += (c1 * z.herm(a1, a2) * t2.coeff[a2]).re;
                }
            }
            g
        })
        .collect()
}

/// L-MMSE posterior of `s` given `r = H s + n` and a diagonal Gaussian
/// prior; off-diagonal posterior covariance is dropped and variances are
/// clamped.
pub fn lmmse_step(
    h: &TimeChannelMatrix,
    r: &[Complex64],
    prior: &GaussianBelief,
    n0: f64,
    bounds: VarBounds,
) -> Result<GaussianBelief> {
    Ok(lmmse_equalize(h, r, prior, n0, bounds)?.0)
}

/// Posterior and extrinsic belief of one L-MMSE pass.
///
/// The extrinsic part is evaluated from the unclamped quantities,
/// `v_e = (1 - d g) / g` and `m_e = m_a + u / g` with `u = H^H A^{-1}(r - H m_a)`,
/// which equals `extrinsic(posterior, prior)` whenever no clamp fires but
/// stays informative when the posterior variance would be clamped up to a
/// prior sitting at the variance floor.
pub fn lmmse_equalize(
    h: &TimeChannelMatrix,
    r: &[Complex64],
    prior: &GaussianBelief,
    n0: f64,
    bounds: VarBounds,
) -> Result<(GaussianBelief, GaussianBelief)> {
    let n = h.size();
    if r.len() != n || prior.len() != n {
        return Err(Error::InvalidDims(format!(
            "channel is {n} x {n}, received {} samples, prior has {} entries",
            r.len(),
            prior.len()
        )));
    }
    if !(n0 >= 0.0 && n0.is_finite()) {
        return Err(Error::NonFinite(format!(
            "N0 must be finite and >= 0, got {n0}"
        )));
    }
    let d = &prior.var;
    let sys = BandedSystem::factor(h, d, n0)?;
    let hm = h.mul(&prior.mean);
    let resid: Vec<Complex64> = r.iter().zip(&hm).map(|(a, b)| a - b).collect();
    let z = sys.solve(&resid);
    let u = h.mul_adjoint(&z);
    let g = gain_diagonal(h, &sys);
    let mut post = GaussianBelief {
        mean: Vec::with_capacity(n),
        var: Vec::with_capacity(n),
    };
    let mut ext = GaussianBelief {
        mean: Vec::with_capacity(n),
        var: Vec::with_capacity(n),
    };
    for q in 0..n {
        let mp = prior.mean[q] + u[q] * d[q];
        post.mean.push(mp);
        post.var.push(bounds.clamp(d[q] - d[q] * d[q] * g[q]));
        let rest = 1.0 - d[q] * g[q];
        let gain = g[q] / rest;
        if !(rest > 0.0 && gain > 1.0 / bounds.cap) {
            ext.mean.push(mp);
            ext.var.push(bounds.cap);
        } else {
            ext.mean.push(prior.mean[q] + u[q] / g[q]);
            ext.var.push(bounds.clamp(rest / g[q]));
        }
    }
    Ok((post, ext))
}
