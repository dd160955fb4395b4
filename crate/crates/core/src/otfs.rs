//! Delay-Doppler, time and time-frequency grids and the unitary transforms
//! between them.
//!
//! Vectors are column-major with the delay index fastest: grid entry
//! `X[m, n]` lives at `n * M + m`. With that layout `(F_N ⊗ I_M)` is a batch
//! of `M` independent length-`N` DFTs over strided slices, which is how the
//! transforms are computed (no `MN x MN` matrix is ever formed). All DFTs are
//! unitary (`1/sqrt(len)` on both directions).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// Grid size: `m` delay bins (subcarriers) by `n` Doppler bins (time slots).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GridDims {
    pub m: usize,
    pub n: usize,
}

impl GridDims {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidDims(format!(
                "grid must be non-empty, got {m}x{n}"
            )));
        }
        Ok(Self { m, n })
    }

    /// Vector length `M * N`.
    #[inline]
    pub fn len(&self) -> usize {
        self.m * self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vector index of grid entry `[delay, doppler]`.
    #[inline]
    pub fn index(&self, delay: usize, doppler: usize) -> usize {
        doppler * self.m + delay
    }
}

/// A delay-Doppler domain symbol vector `x = vec(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdFrame {
    pub dims: GridDims,
    pub data: Vec<Complex64>,
}

/// A time domain sample vector `s = vec(S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFrame {
    pub dims: GridDims,
    pub data: Vec<Complex64>,
}

fn check_len(dims: GridDims, len: usize) -> Result<()> {
    if len != dims.len() {
        return Err(Error::InvalidDims(format!(
            "vector of length {len} does not match {}x{} grid",
            dims.m, dims.n
        )));
    }
    Ok(())
}

impl DdFrame {
    pub fn new(dims: GridDims, data: Vec<Complex64>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: GridDims) -> Self {
        Self {
            dims,
            data: vec![Complex64::new(0.0, 0.0); dims.len()],
        }
    }

    /// Builds the frame from a row-major `M x N` grid (`grid[m][n]`).
    pub fn from_grid(grid: &[Vec<Complex64>]) -> Result<Self> {
        let m = grid.len();
        let n = grid.first().map_or(0, Vec::len);
        let dims = GridDims::new(m, n)?;
        let mut data = vec![Complex64::new(0.0, 0.0); dims.len()];
        for (mi, row) in grid.iter().enumerate() {
            check_len(GridDims { m: 1, n }, row.len())?;
            for (ni, &v) in row.iter().enumerate() {
                data[dims.index(mi, ni)] = v;
            }
        }
        Ok(Self { dims, data })
    }

    /// Inverse of [`DdFrame::from_grid`].
    pub fn to_grid(&self) -> Vec<Vec<Complex64>> {
        (0..self.dims.m)
            .map(|m| {
                (0..self.dims.n)
                    .map(|n| self.data[self.dims.index(m, n)])
                    .collect()
            })
            .collect()
    }
}

impl TimeFrame {
    pub fn new(dims: GridDims, data: Vec<Complex64>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }
}

/// Planned FFTs for one grid size.
///
/// Cheap to clone; the plans are shared.
#[derive(Clone)]
pub struct OtfsTransform {
    dims: GridDims,
    fwd_n: Arc<dyn Fft<f64>>,
    inv_n: Arc<dyn Fft<f64>>,
    fwd_m: Arc<dyn Fft<f64>>,
    inv_m: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for OtfsTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OtfsTransform")
            .field("dims", &self.dims)
            .finish()
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<GridDims, OtfsTransform>> = RefCell::new(HashMap::new());
}

impl OtfsTransform {
    pub fn new(dims: GridDims) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dims,
            fwd_n: planner.plan_fft(dims.n, FftDirection::Forward),
            inv_n: planner.plan_fft(dims.n, FftDirection::Inverse),
            fwd_m: planner.plan_fft(dims.m, FftDirection::Forward),
            inv_m: planner.plan_fft(dims.m, FftDirection::Inverse),
        }
    }

    /// Per-thread cached plan for `dims`.
    pub fn cached(dims: GridDims) -> Self {
        PLANS.with(|p| {
            p.borrow_mut()
                .entry(dims)
                .or_insert_with(|| Self::new(dims))
                .clone()
        })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    /// In place `(F_N ⊗ I_M) v` (time -> DD).
    pub fn time_to_dd_in_place(&self, v: &mut [Complex64]) {
        self.doppler_dft(v, &self.fwd_n);
    }

    /// In place `(F_N^H ⊗ I_M) v` (DD -> time).
    pub fn dd_to_time_in_place(&self, v: &mut [Complex64]) {
        self.doppler_dft(v, &self.inv_n);
    }

    fn doppler_dft(&self, v: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let GridDims { m, n } = self.dims;
        assert_eq!(v.len(), m * n, "vector length does not match grid");
        if n == 1 {
            return;
        }
        // gather each delay row into a contiguous length-N chunk
        let mut buf = vec![Complex64::new(0.0, 0.0); m * n];
        for ni in 0..n {
            for mi in 0..m {
                buf[mi * n + ni] = v[ni * m + mi];
            }
        }
        fft.process(&mut buf);
        let scale = 1.0 / (n as f64).sqrt();
        for ni in 0..n {
            for mi in 0..m {
                v[ni * m + mi] = buf[mi * n + ni] * scale;
            }
        }
    }

    /// `F_M X F_N^H` on a vectorized grid, in place.
    pub fn dd_to_tf_in_place(&self, v: &mut [Complex64]) {
        self.dd_to_time_in_place(v);
        self.delay_dft(v, &self.fwd_m);
    }

    /// `F_M^H X_TF F_N` on a vectorized grid, in place.
    pub fn tf_to_dd_in_place(&self, v: &mut [Complex64]) {
        self.delay_dft(v, &self.inv_m);
        self.time_to_dd_in_place(v);
    }

    fn delay_dft(&self, v: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let m = self.dims.m;
        assert_eq!(
            v.len(),
            self.dims.len(),
            "vector length does not match grid"
        );
        if m == 1 {
            return;
        }
        // columns are already contiguous
        fft.process(v);
        let scale = 1.0 / (m as f64).sqrt();
        v.iter_mut().for_each(|z| *z *= scale);
    }
}

/// `s = (F_N^H ⊗ I_M) x`.
pub fn dd_to_time(x: &DdFrame) -> TimeFrame {
    let mut data = x.data.clone();
    OtfsTransform::cached(x.dims).dd_to_time_in_place(&mut data);
    TimeFrame { dims: x.dims, data }
}

/// `y = (F_N ⊗ I_M) r`.
pub fn time_to_dd(s: &TimeFrame) -> DdFrame {
    let mut data = s.data.clone();
    OtfsTransform::cached(s.dims).time_to_dd_in_place(&mut data);
    DdFrame { dims: s.dims, data }
}

/// ISFFT: the time-frequency grid `X_TF = F_M X F_N^H`, vectorized with the
/// same layout (subcarrier index fastest).
pub fn dd_to_tf(x: &DdFrame) -> Vec<Complex64> {
    let mut data = x.data.clone();
    OtfsTransform::cached(x.dims).dd_to_tf_in_place(&mut data);
    data
}

/// SFFT, the inverse of [`dd_to_tf`].
pub fn tf_to_dd(dims: GridDims, tf: &[Complex64]) -> Result<DdFrame> {
    check_len(dims, tf.len())?;
    let mut data = tf.to_vec();
    OtfsTransform::cached(dims).tf_to_dd_in_place(&mut data);
    Ok(DdFrame { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn norm2(v: &[Complex64]) -> f64 {
        v.iter().map(|z| z.norm_sqr()).sum()
    }

    // Direct O(N^2) unitary DFT matrix, sign -1 for forward.
    fn dft_matrix(len: usize, sign: f64) -> Vec<Vec<Complex64>> {
        (0..len)
            .map(|k| {
                (0..len)
                    .map(|t| {
                        Complex64::from_polar(
                            1.0 / (len as f64).sqrt(),
                            sign * 2.0 * PI * (k * t) as f64 / len as f64,
                        )
                    })
                    .collect()
            })
            .collect()
    }

    // Kronecker product (F ⊗ I_M) applied by explicit summation.
    fn kron_apply(f: &[Vec<Complex64>], m: usize, x: &[Complex64]) -> Vec<Complex64> {
        let n = f.len();
        let mut out = vec![c(0.0, 0.0); m * n];
        for row in 0..m * n {
            let (ni, mi) = (row / m, row % m);
            for nj in 0..n {
                out[row] += f[ni][nj] * x[nj * m + mi];
            }
        }
        out
    }

    fn random_vec(len: usize, seed: u64) -> Vec<Complex64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect()
    }

    #[test]
    fn one_by_one_is_identity() {
        let dims = GridDims::new(1, 1).unwrap();
        let x = DdFrame::new(dims, vec![c(0.3, -1.2)]).unwrap();
        assert_eq!(dd_to_time(&x).data, x.data);
        let s = TimeFrame::new(dims, vec![c(0.3, -1.2)]).unwrap();
        assert_eq!(time_to_dd(&s).data, s.data);
        assert_eq!(dd_to_tf(&x), x.data);
    }

    #[test]
    fn impulse_two_by_two() {
        let dims = GridDims::new(2, 2).unwrap();
        let mut x = DdFrame::zeros(dims);
        x.data[0] = c(1.0, 0.0);
        let s = dd_to_time(&x);
        let h = 1.0 / 2f64.sqrt();
        let want = [c(h, 0.0), c(0.0, 0.0), c(h, 0.0), c(0.0, 0.0)];
        for (a, b) in s.data.iter().zip(want) {
            assert!((a - b).norm() < 1e-15);
        }
        let back = time_to_dd(&TimeFrame::new(dims, want.to_vec()).unwrap());
        assert!((back.data[0] - c(1.0, 0.0)).norm() < 1e-15);
        assert!(back.data[1..].iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn matches_kronecker_oracle() {
        for &(m, n) in &[(4usize, 8usize), (16, 8), (3, 5)] {
            let dims = GridDims::new(m, n).unwrap();
            let x = random_vec(m * n, 7);
            let want = kron_apply(&dft_matrix(n, 1.0), m, &x);
            let got = dd_to_time(&DdFrame::new(dims, x.clone()).unwrap());
            for (a, b) in got.data.iter().zip(&want) {
                assert!((a - b).norm() < 1e-12);
            }
            let want = kron_apply(&dft_matrix(n, -1.0), m, &x);
            let got = time_to_dd(&TimeFrame::new(dims, x).unwrap());
            for (a, b) in got.data.iter().zip(&want) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn tf_grid_matches_matrix_form() {
        let (m, n) = (4, 3);
        let dims = GridDims::new(m, n).unwrap();
        let x = random_vec(m * n, 11);
        let fm = dft_matrix(m, -1.0);
        let fnh = dft_matrix(n, 1.0); // F_N^H[k][t] = conj(F_N[t][k]) = F_N^H by symmetry
        let mut want = vec![c(0.0, 0.0); m * n];
        for l in 0..m {
            for k in 0..n {
                let mut acc = c(0.0, 0.0);
                for mi in 0..m {
                    for ni in 0..n {
                        acc += fm[l][mi] * x[ni * m + mi] * fnh[ni][k];
                    }
                }
                want[k * m + l] = acc;
            }
        }
        let got = dd_to_tf(&DdFrame::new(dims, x.clone()).unwrap());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).norm() < 1e-12);
        }
        let back = tf_to_dd(dims, &got).unwrap();
        for (a, b) in back.data.iter().zip(&x) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn tf_of_zero_is_zero() {
        let dims = GridDims::new(4, 4).unwrap();
        assert!(dd_to_tf(&DdFrame::zeros(dims))
            .iter()
            .all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn rectangular_pulse_time_signal_is_column_idft_of_tf() {
        // vec(F_M^H X_TF) == dd_to_time(x)
        let dims = GridDims::new(8, 4).unwrap();
        let x = DdFrame::new(dims, random_vec(32, 3)).unwrap();
        let mut tf = dd_to_tf(&x);
        let t = OtfsTransform::new(dims);
        t.delay_dft(&mut tf, &t.inv_m);
        let s = dd_to_time(&x);
        for (a, b) in tf.iter().zip(&s.data) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn grid_round_trip() {
        let grid = vec![
            vec![c(1.0, 0.0), c(2.0, 0.0)],
            vec![c(3.0, 0.0), c(4.0, 0.0)],
            vec![c(5.0, 0.0), c(6.0, 0.0)],
        ];
        let f = DdFrame::from_grid(&grid).unwrap();
        assert_eq!(f.dims, GridDims { m: 3, n: 2 });
        assert_eq!(f.data[f.dims.index(2, 1)], c(6.0, 0.0));
        assert_eq!(f.data[1], c(3.0, 0.0));
        assert_eq!(f.to_grid(), grid);
    }

    #[test]
    fn rejects_bad_lengths() {
        let dims = GridDims::new(2, 2).unwrap();
        assert!(DdFrame::new(dims, vec![c(0.0, 0.0); 3]).is_err());
        assert!(GridDims::new(0, 4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(seed in any::<u64>(), mi in 1usize..20, ni in 1usize..20) {
            let dims = GridDims::new(mi, ni).unwrap();
            let x = DdFrame::new(dims, random_vec(dims.len(), seed)).unwrap();
            let s = dd_to_time(&x);
            let e = norm2(&x.data);
            prop_assert!((norm2(&s.data) - e).abs() <= 1e-10 * e.max(1e-300));
            let back = time_to_dd(&s);
            for (a, b) in back.data.iter().zip(&x.data) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }
    }
}
