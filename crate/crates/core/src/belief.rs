//! Diagonal Gaussian beliefs and the message algebra used between the
//! time-domain equalizer, the delay-Doppler decoder and cooperating users.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::otfs::{GridDims, OtfsTransform};

/// Bounds applied to every variance leaving an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarBounds {
    pub floor: f64,
    pub cap: f64,
}

impl Default for VarBounds {
    fn default() -> Self {
        Self {
            floor: 1e-8,
            cap: 1e4,
        }
    }
}

impl VarBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor < self.cap && self.cap.is_finite()) {
            return Err(Error::Config(format!(
                "variance bounds need 0 < var_floor < var_cap < inf, got {} and {}",
                self.floor, self.cap
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        if v.is_nan() {
            self.cap
        } else {
            v.clamp(self.floor, self.cap)
        }
    }
}

/// Mean vector plus diagonal covariance over `MN` complex entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vec<Complex64>,
    pub var: Vec<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Vec<Complex64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::InvalidDims(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                var.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::NonFinite(format!(
                "variance entries must be finite and positive, found {v}"
            )));
        }
        Ok(Self { mean, var })
    }

    /// Zero mean, constant variance.
    pub fn prior(len: usize, var: f64) -> Self {
        Self {
            mean: vec![Complex64::new(0.0, 0.0); len],
            var: vec![var; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean_var(&self) -> f64 {
        if self.var.is_empty() {
            return 0.0;
        }
        self.var.iter().sum::<f64>() / self.var.len() as f64
    }

    /// Same mean, every variance replaced by the average variance.
    pub fn scalarized(&self) -> Self {
        let v = self.mean_var();
        Self {
            mean: self.mean.clone(),
            var: vec![v; self.len()],
        }
    }

    pub fn clamp(&mut self, bounds: VarBounds) {
        for v in &mut self.var {
            *v = bounds.clamp(*v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .all(|m| m.re.is_finite() && m.im.is_finite())
            && self.var.iter().all(|v| v.is_finite())
    }
}

/// Information-form subtraction of `prior` from `post`.
///
/// Where the precision gain is not above `1/cap` the result is the
/// uninformative message `(m_p, cap)`.
pub fn extrinsic(
    post: &GaussianBelief,
    prior: &GaussianBelief,
    bounds: VarBounds,
) -> GaussianBelief {
    assert_eq!(post.len(), prior.len());
    let mut mean = Vec::with_capacity(post.len());
    let mut var = Vec::with_capacity(post.len());
    for i in 0..post.len() {
        let (mp, vp) = (post.mean[i], post.var[i]);
        let (ma, va) = (prior.mean[i], prior.var[i]);
        let gain = 1.0 / vp - 1.0 / va;
        if gain.is_nan() || gain <= 1.0 / bounds.cap {
            mean.push(mp);
            var.push(bounds.cap);
        } else {
            let ve = bounds.clamp(1.0 / gain);
            mean.push((mp / vp - ma / va) * ve);
            var.push(ve);
        }
    }
    GaussianBelief { mean, var }
}

/// Product of two diagonal Gaussian messages (renormalized).
pub fn gaussian_product(a: &GaussianBelief, b: &GaussianBelief) -> GaussianBelief {
    assert_eq!(a.len(), b.len());
    let mut mean = Vec::with_capacity(a.len());
    let mut var = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let v = 1.0 / (1.0 / a.var[i] + 1.0 / b.var[i]);
        mean.push((a.mean[i] / a.var[i] + b.mean[i] / b.var[i]) * v);
        var.push(v);
    }
    GaussianBelief { mean, var }
}

/// Carry a time-domain belief into the DD domain: the mean goes through
/// `F_N ⊗ I_M`, the variance is replaced by its average.
pub fn time_to_dd_belief(b: &GaussianBelief, dims: GridDims) -> GaussianBelief {
    assert_eq!(b.len(), dims.len());
    let mut mean = b.mean.clone();
    OtfsTransform::cached(dims).time_to_dd_in_place(&mut mean);
    GaussianBelief {
        mean,
        var: vec![b.mean_var(); b.len()],
    }
}

/// Mirror of [`time_to_dd_belief`] through `F_N^H ⊗ I_M`.
pub fn dd_to_time_belief(b: &GaussianBelief, dims: GridDims) -> GaussianBelief {
    assert_eq!(b.len(), dims.len());
    let mut mean = b.mean.clone();
    OtfsTransform::cached(dims).dd_to_time_in_place(&mut mean);
    GaussianBelief {
        mean,
        var: vec![b.mean_var(); b.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn extrinsic_substitution() {
        let post = GaussianBelief::new(vec![c(1.0, 0.0)], vec![0.5]).unwrap();
        let prior = GaussianBelief::new(vec![c(0.0, 0.0)], vec![1.0]).unwrap();
        let e = extrinsic(&post, &prior, VarBounds::default());
        assert!((e.var[0] - 1.0).abs() < 1e-15);
        assert!((e.mean[0] - c(2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn extrinsic_without_gain_is_uninformative() {
        let b = VarBounds::default();
        let post = GaussianBelief::new(vec![c(0.3, -0.2)], vec![0.7]).unwrap();
        let e = extrinsic(&post, &post, b);
        assert_eq!(e.var[0], b.cap);
        assert_eq!(e.mean[0], post.mean[0]);
        // posterior less certain than the prior
        let prior = GaussianBelief::new(vec![c(0.0, 0.0)], vec![0.5]).unwrap();
        let e = extrinsic(&post, &prior, b);
        assert_eq!(e.var[0], b.cap);
    }

    #[test]
    fn scalarization_examples() {
        let dims = GridDims::new(4, 2).unwrap();
        let mut var = vec![1.0; 8];
        var[7] = 3.0;
        let b = GaussianBelief::new(vec![c(1.0, 2.0); 8], var).unwrap();
        let dd = time_to_dd_belief(&b, dims);
        for v in &dd.var {
            assert!((v - 10.0 / 8.0).abs() < 1e-15);
        }
        let t = dd_to_time_belief(&b, dims);
        for v in &t.var {
            assert!((v - 10.0 / 8.0).abs() < 1e-15);
        }
        let flat = GaussianBelief::prior(8, 0.25);
        assert!(time_to_dd_belief(&flat, dims)
            .var
            .iter()
            .all(|&v| v == 0.25));
        assert!(dd_to_time_belief(&flat, dims)
            .var
            .iter()
            .all(|&v| v == 0.25));
        // idempotent
        assert_eq!(dd.scalarized(), dd);
    }

    #[test]
    fn clamp_handles_nan() {
        let b = VarBounds::default();
        assert_eq!(b.clamp(f64::NAN), b.cap);
        assert_eq!(b.clamp(0.0), b.floor);
        assert_eq!(b.clamp(1e9), b.cap);
        assert!(VarBounds {
            floor: 1.0,
            cap: 0.5
        }
        .validate()
        .is_err());
    }

    fn belief(len: usize) -> impl Strategy<Value = GaussianBelief> {
        (
            prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), len),
            prop::collection::vec(0.01f64..5.0, len),
        )
            .prop_map(|(m, v)| GaussianBelief {
                mean: m.into_iter().map(|(a, b)| c(a, b)).collect(),
                var: v,
            })
    }

    proptest! {
        #[test]
        fn extrinsic_inverts_product(prior in belief(16), ext in belief(16)) {
            let post = gaussian_product(&prior, &ext);
            let back = extrinsic(&post, &prior, VarBounds::default());
            for i in 0..16 {
                prop_assert!((back.var[i] - ext.var[i]).abs() <= 1e-9 * ext.var[i].max(1.0));
                prop_assert!((back.mean[i] - ext.mean[i]).norm() <= 1e-9 * (1.0 + ext.mean[i].norm()) * ext.var[i].max(1.0));
                let recomposed = gaussian_product(&prior, &back);
                prop_assert!((recomposed.var[i] - post.var[i]).abs() <= 1e-9);
                prop_assert!((recomposed.mean[i] - post.mean[i]).norm() <= 1e-9);
            }
        }

        #[test]
        fn extrinsic_identity_by_recomputation(post in belief(16), prior in belief(16)) {
            let b = VarBounds::default();
            let e = extrinsic(&post, &prior, b);
            for i in 0..16 {
                let gain = 1.0 / post.var[i] - 1.0 / prior.var[i];
                if gain > 1.0 / b.cap && 1.0 / gain >= b.floor {
                    prop_assert_eq!(e.var[i], 1.0 / gain);
                    prop_assert_eq!(e.mean[i], (post.mean[i] / post.var[i] - prior.mean[i] / prior.var[i]) * e.var[i]);
                } else {
                    prop_assert!(e.var[i] >= b.floor && e.var[i] <= b.cap);
                }
            }
        }

        #[test]
        fn mean_round_trip(b in belief(32)) {
            let dims = GridDims::new(8, 4).unwrap();
            let back = dd_to_time_belief(&time_to_dd_belief(&b, dims), dims);
            for i in 0..32 {
                prop_assert!((back.mean[i] - b.mean[i]).norm() <= 1e-12);
            }
        }
    }
}
