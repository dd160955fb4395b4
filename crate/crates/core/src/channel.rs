//! Delay-Doppler multipath channel: path model, the sparse time-domain
//! channel matrix, the dense DD-domain channel matrix, random channel
//! generation and AWGN.

use std::f64::consts::PI;
use std::path::Path as FsPath;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::otfs::{GridDims, OtfsTransform, TimeFrame};

/// One propagation path: gain `h`, delay index `l`, integer Doppler index `k`
/// and fractional Doppler `kappa` in `[-1/2, 1/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub gain: Complex64,
    pub delay: usize,
    pub doppler_int: i64,
    pub doppler_frac: f64,
}

impl Path {
    /// Total (integer + fractional) Doppler shift in bins.
    pub fn doppler(&self) -> f64 {
        self.doppler_int as f64 + self.doppler_frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub dims: GridDims,
    pub paths: Vec<Path>,
    /// Per complex sample noise variance `N0`.
    pub noise_psd: f64,
}

impl ChannelModel {
    pub fn new(dims: GridDims, paths: Vec<Path>, noise_psd: f64) -> Result<Self> {
        let ch = Self {
            dims,
            paths,
            noise_psd,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::InvalidChannel(
                "at least one path is required".into(),
            ));
        }
        if !(self.noise_psd >= 0.0 && self.noise_psd.is_finite()) {
            return Err(Error::InvalidChannel(format!(
                "noise PSD must be finite and >= 0, got {}",
                self.noise_psd
            )));
        }
        let mn = self.dims.len();
        for (i, p) in self.paths.iter().enumerate() {
            if p.delay >= mn {
                return Err(Error::InvalidChannel(format!(
                    "path {i}: delay index {} >= MN = {mn}",
                    p.delay
                )));
            }
            if !(p.doppler_frac.abs() <= 0.5) {
                return Err(Error::InvalidChannel(format!(
                    "path {i}: fractional Doppler {} outside [-1/2, 1/2]",
                    p.doppler_frac
                )));
            }
            if p.doppler_int.unsigned_abs() as usize > mn / 2 {
                return Err(Error::InvalidChannel(format!(
                    "path {i}: Doppler index {} exceeds MN/2",
                    p.doppler_int
                )));
            }
            if !(p.gain.re.is_finite() && p.gain.im.is_finite()) {
                return Err(Error::InvalidChannel(format!("path {i}: non-finite gain")));
            }
        }
        Ok(())
    }

    /// Channel with a single unit-gain path of zero delay and Doppler.
    pub fn identity(dims: GridDims, noise_psd: f64) -> Self {
        Self {
            dims,
            paths: vec![Path {
                gain: Complex64::new(1.0, 0.0),
                delay: 0,
                doppler_int: 0,
                doppler_frac: 0.0,
            }],
            noise_psd,
        }
    }

    /// Stable digest of the realization (paths only), used to prove that
    /// schemes under comparison saw the same draws.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.paths {
            feed(p.gain.re.to_bits());
            feed(p.gain.im.to_bits());
            feed(p.delay as u64);
            feed(p.doppler_int as u64);
            feed(p.doppler_frac.to_bits());
        }
        h
    }
}

/// Sparse `H_T`: one cyclic diagonal per distinct delay.
///
/// For a tap with delay `l`, `H[q, (q - l) mod MN] = coeff[q]`. Taps are
/// sorted by delay and delays are distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeChannelMatrix {
    pub dims: GridDims,
    pub taps: Vec<Tap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub delay: usize,
    pub coeff: Vec<Complex64>,
}

impl TimeChannelMatrix {
    pub fn size(&self) -> usize {
        self.dims.len()
    }

    /// `H s`.
    pub fn mul(&self, s: &[Complex64]) -> Vec<Complex64> {
        let n = self.size();
        assert_eq!(s.len(), n);
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for tap in &self.taps {
            let l = tap.delay;
            for q in 0..n {
                out[q] += tap.coeff[q] * s[(q + n - l) % n];
            }
        }
        out
    }

    /// `H^H y`.
    pub fn mul_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        let n = self.size();
        assert_eq!(y.len(), n);
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for tap in &self.taps {
            let l = tap.delay;
            for q in 0..n {
                out[(q + n - l) % n] += tap.coeff[q].conj() * y[q];
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let n = self.size();
        let mut h = DMatrix::zeros(n, n);
        for tap in &self.taps {
            for q in 0..n {
                h[(q, (q + n - tap.delay) % n)] += tap.coeff[q];
            }
        }
        h
    }

    /// Number of structurally nonzero entries in every row (and column).
    pub fn nonzeros_per_row(&self) -> usize {
        self.taps.len()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.taps
            .iter()
            .flat_map(|t| t.coeff.iter())
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// `H_T = sum_i h_i e^{-j2pi(k_i+kappa_i) l_i/MN} Delta^{k_i+kappa_i} Pi^{l_i}`.
pub fn build_time_channel(ch: &ChannelModel) -> Result<TimeChannelMatrix> {
    ch.validate()?;
    let n = ch.dims.len();
    let mut taps: Vec<Tap> = Vec::new();
    for p in &ch.paths {
        let nu = p.doppler();
        let slot = match taps.iter().position(|t| t.delay == p.delay) {
            Some(i) => i,
            None => {
                taps.push(Tap {
                    delay: p.delay,
                    coeff: vec![Complex64::new(0.0, 0.0); n],
                });
                taps.len() - 1
            }
        };
        let coeff = &mut taps[slot].coeff;
        for (q, c) in coeff.iter_mut().enumerate() {
            let phase = 2.0 * PI * nu * (q as f64 - p.delay as f64) / n as f64;
            *c += p.gain * Complex64::from_polar(1.0, phase);
        }
    }
    taps.sort_by_key(|t| t.delay);
    Ok(TimeChannelMatrix {
        dims: ch.dims,
        taps,
    })
}

/// `H_DD = (F_N ⊗ I_M) H_T (F_N^H ⊗ I_M)`, computed column by column with
/// batched FFTs.
pub fn build_dd_channel(ch: &ChannelModel) -> Result<DMatrix<Complex64>> {
    let ht = build_time_channel(ch)?;
    Ok(dd_channel_from_time(&ht))
}

pub fn dd_channel_from_time(ht: &TimeChannelMatrix) -> DMatrix<Complex64> {
    let n = ht.size();
    let tr = OtfsTransform::cached(ht.dims);
    let mut out = DMatrix::zeros(n, n);
    let mut e = vec![Complex64::new(0.0, 0.0); n];
    for col in 0..n {
        e.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        e[col] = Complex64::new(1.0, 0.0);
        tr.dd_to_time_in_place(&mut e);
        let mut y = ht.mul(&e);
        tr.time_to_dd_in_place(&mut y);
        for (row, v) in y.into_iter().enumerate() {
            out[(row, col)] = v;
        }
    }
    out
}

/// Circularly symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Parameters for [`generate_random_channel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub paths: usize,
    pub l_max: usize,
    pub k_max: usize,
    pub fractional: bool,
}

impl ChannelParams {
    /// 4 paths, delay index up to 3, Doppler index up to 6, fractional Doppler.
    pub fn table_one() -> Self {
        Self {
            paths: 4,
            l_max: 3,
            k_max: 6,
            fractional: true,
        }
    }

    pub fn validate(&self, dims: GridDims) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::InvalidChannel("number of paths must be >= 1".into()));
        }
        if self.l_max >= dims.m {
            return Err(Error::InvalidChannel(format!(
                "l_max = {} must be < M = {}",
                self.l_max, dims.m
            )));
        }
        if self.k_max > dims.len() / 2 {
            return Err(Error::InvalidChannel(format!(
                "k_max = {} exceeds MN/2",
                self.k_max
            )));
        }
        Ok(())
    }
}

/// Uniform power-delay profile (each gain `CN(0, 1/P)`), path 0 pinned to
/// delay 0, delays uniform on `0..=l_max`, Doppler indices uniform on
/// `-k_max..=k_max`, fractional parts uniform on `[-1/2, 1/2]`.
pub fn generate_random_channel<R: Rng + ?Sized>(
    dims: GridDims,
    params: ChannelParams,
    noise_psd: f64,
    rng: &mut R,
) -> Result<ChannelModel> {
    params.validate(dims)?;
    let var = 1.0 / params.paths as f64;
    let k = params.k_max as i64;
    let paths = (0..params.paths)
        .map(|i| {
            let delay = if i == 0 {
                0
            } else {
                rng.random_range(0..=params.l_max)
            };
            let doppler_int = rng.random_range(-k..=k);
            let doppler_frac = if params.fractional {
                rng.random_range(-0.5..=0.5)
            } else {
                0.0
            };
            let gain = complex_gaussian(rng, var);
            Path {
                gain,
                delay,
                doppler_int,
                doppler_frac,
            }
        })
        .collect();
    ChannelModel::new(dims, paths, noise_psd)
}

/// `r = H_T s + n`.
pub fn apply_channel<R: Rng + ?Sized>(
    ch: &ChannelModel,
    s: &TimeFrame,
    rng: &mut R,
) -> Result<TimeFrame> {
    if s.dims != ch.dims {
        return Err(Error::InvalidDims("signal and channel grids differ".into()));
    }
    let ht = build_time_channel(ch)?;
    Ok(TimeFrame {
        dims: s.dims,
        data: transmit(&ht, ch.noise_psd, &s.data, rng),
    })
}

/// `H s + n` for an already built channel matrix.
pub fn transmit<R: Rng + ?Sized>(
    ht: &TimeChannelMatrix,
    n0: f64,
    s: &[Complex64],
    rng: &mut R,
) -> Vec<Complex64> {
    let mut r = ht.mul(s);
    if n0 > 0.0 {
        for v in r.iter_mut() {
            *v += complex_gaussian(rng, n0);
        }
    }
    r
}

#[derive(Debug, Serialize, Deserialize)]
struct PathRecord {
    re: f64,
    im: f64,
    delay: usize,
    doppler_int: i64,
    doppler_frac: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChannelFile {
    paths: Vec<PathRecord>,
    n0: f64,
}

impl ChannelModel {
    /// JSON form: `{"paths":[{"re","im","delay","doppler_int","doppler_frac"}], "n0": ...}`.
    pub fn to_json(&self) -> Result<String> {
        let file = ChannelFile {
            paths: self
                .paths
                .iter()
                .map(|p| PathRecord {
                    re: p.gain.re,
                    im: p.gain.im,
                    delay: p.delay,
                    doppler_int: p.doppler_int,
                    doppler_frac: p.doppler_frac,
                })
                .collect(),
            n0: self.noise_psd,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(dims: GridDims, text: &str) -> Result<Self> {
        let file: ChannelFile = serde_json::from_str(text)?;
        let paths = file
            .paths
            .into_iter()
            .map(|r| Path {
                gain: Complex64::new(r.re, r.im),
                delay: r.delay,
                doppler_int: r.doppler_int,
                doppler_frac: r.doppler_frac,
            })
            .collect();
        Self::new(dims, paths, file.n0)
    }

    pub fn load(dims: GridDims, path: impl AsRef<FsPath>) -> Result<Self> {
        Self::from_json(dims, &std::fs::read_to_string(path)?)
    }
}
