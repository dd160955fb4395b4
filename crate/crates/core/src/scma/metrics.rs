use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codebook::ScmaCodebookSet;
use super::graph::FactorGraph;
use crate::error::{Error, Result};

/// Largest number of superimposed codewords enumerated pairwise.
pub const MAX_TUPLES: u128 = 1 << 16;

const DIFF_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookMetrics {
    /// Minimum Euclidean distance between superimposed codewords.
    pub med: f64,
    /// Minimum product of per-resource distances over differing resources.
    pub mpd: f64,
}

/// Distances between all superimposed codewords `sum_j X_j` over distinct
/// index tuples. Identical superimposed codewords give zero for both.
pub fn codebook_metrics(cb: &ScmaCodebookSet, graph: &FactorGraph) -> Result<CodebookMetrics> {
    cb.validate_shape(graph)?;
    let (users, m, k) = (cb.users(), cb.m_mod, cb.k);
    let total = (m as u128).checked_pow(users as u32).unwrap_or(u128::MAX);
    if total > MAX_TUPLES {
        return Err(Error::EnumerationTooLarge(total));
    }
    let total = total as usize;
    let points: Vec<Vec<Complex64>> = (0..total)
        .map(|t| {
            let mut rem = t;
            let mut s = vec![Complex64::new(0.0, 0.0); k];
            for u in 0..users {
                for (r, v) in s.iter_mut().enumerate() {
                    *v += cb.codebooks[u][rem % m][r];
                }
                rem /= m;
            }
            s
        })
        .collect();
    let (med2, mpd) = (0..total)
        .into_par_iter()
        .map(|a| {
            let mut best = (f64::INFINITY, f64::INFINITY);
            for b in a + 1..total {
                let mut d2 = 0.0;
                let mut prod = 1.0;
                for r in 0..k {
                    let d = (points[a][r] - points[b][r]).norm();
                    d2 += d * d;
                    if d > DIFF_TOL {
                        prod *= d;
                    }
                }
                if d2 <= DIFF_TOL * DIFF_TOL {
                    prod = 0.0;
                }
                best.0 = best.0.min(d2);
                best.1 = best.1.min(prod);
            }
            best
        })
        .reduce(
            || (f64::INFINITY, f64::INFINITY),
            |x, y| (x.0.min(y.0), x.1.min(y.1)),
        );
    Ok(CodebookMetrics {
        med: med2.sqrt(),
        mpd,
    })
}

impl ScmaCodebookSet {
    /// Shape checks only (no power budget), for metrics on arbitrary sets.
    pub fn validate_shape(&self, graph: &FactorGraph) -> Result<()> {
        if self.k != graph.resources() || self.users() != graph.users() {
            return Err(Error::InvalidCodebook(format!(
                "codebook is {} users x K = {}, graph is {} x {}",
                self.users(),
                self.k,
                graph.users(),
                graph.resources()
            )));
        }
        for (j, cb) in self.codebooks.iter().enumerate() {
            if cb.len() != self.m_mod || cb.iter().any(|cw| cw.len() != self.k) {
                return Err(Error::InvalidCodebook(format!(
                    "user {j} codebook is not {} x {}",
                    self.k, self.m_mod
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_point_codebook() {
        let g = FactorGraph::new(vec![vec![1]]).unwrap();
        let cb = ScmaCodebookSet {
            k: 1,
            m_mod: 2,
            codebooks: vec![vec![vec![c(1.0, 0.0)], vec![c(-1.0, 0.0)]]],
        };
        let mt = codebook_metrics(&cb, &g).unwrap();
        assert!((mt.med - 2.0).abs() < 1e-15);
        assert!((mt.mpd - 2.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_codewords_collapse_distance() {
        let g = FactorGraph::new(vec![vec![1]]).unwrap();
        let cb = ScmaCodebookSet {
            k: 1,
            m_mod: 2,
            codebooks: vec![vec![vec![c(0.5, 0.5)], vec![c(0.5, 0.5)]]],
        };
        let mt = codebook_metrics(&cb, &g).unwrap();
        assert_eq!(mt.med, 0.0);
        assert_eq!(mt.mpd, 0.0);
    }

    #[test]
    fn default_codebook_distance() {
        let g = FactorGraph::standard_4x6();
        let cb = ScmaCodebookSet::rotated_qpsk(&g);
        let mt = codebook_metrics(&cb, &g).unwrap();
        assert!(mt.med > 0.6 && mt.med < 0.7, "{}", mt.med);
        assert!(mt.mpd > 0.0);
    }

    #[test]
    fn refuses_huge_enumerations() {
        let g = FactorGraph::new(vec![vec![1; 9]]).unwrap();
        let cw = |x: f64| vec![c(x, 0.0)];
        let cb = ScmaCodebookSet {
            k: 1,
            m_mod: 4,
            codebooks: vec![vec![cw(1.0), cw(-1.0), cw(0.5), cw(-0.5)]; 9],
        };
        assert!(matches!(
            codebook_metrics(&cb, &g),
            Err(Error::EnumerationTooLarge(_))
        ));
    }
}
