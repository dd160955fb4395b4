//! Monte Carlo driver: per-frame draws, scheme dispatch, Eb/N0 sweeps,
//! the SE report and CSV output.
//!
//! Every frame draws from its own ChaCha8 stream (seeded from the master
//! seed and the Eb/N0 point, stream = frame index), so results do not
//! depend on the worker count and all schemes see the same channels,
//! symbols and noise.

mod config;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use self::config::*;
use crate::belief::VarBounds;
use crate::channel::{
    build_dd_channel, build_time_channel, generate_random_channel, transmit, ChannelModel,
    TimeChannelMatrix,
};
use crate::cooperation::{
    detect_multilayer_joint, detect_multilayer_separate, Receiver, Scheme, UserGraph,
};
use crate::detector::{detect, detect_two_stage, DetectionReport, DetectorConfig};
use crate::error::{Error, Result};
use crate::otfs::{GridDims, OtfsTransform};
use crate::scma::{bit_errors, IndexMatrix, ScmaSystem};
use crate::state_evolution::{run_se, MpaErrorTable};

/// First line of every CSV written by the harness.
pub const RESULTS_VERSION_LINE: &str = "# otfs-scma results v1";
pub const SE_VERSION_LINE: &str = "# otfs-scma se-report v1";
/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "OTFS_SCMA_WORKERS";

const LINK_SALT: u64 = 0x6c69_6e6b_6e6f_6973;
const SE_SALT: u64 = 0x7374_6174_6565_766f;

/// `N0` for a given `Eb/N0` in dB. Each block of `K` entries carries
/// `J log2 M` bits with total energy `sum_j Tr(X_j X_j^H)/M`, which is `K`
/// for power-normalized codebooks, so `Eb = K / (J log2 M)`.
pub fn ebn0_to_n0(eb_n0_db: f64, sys: &ScmaSystem) -> f64 {
    let energy: f64 = (0..sys.users()).map(|j| sys.codebook.power(j)).sum();
    let bits = sys.users() as f64 * (sys.m_mod() as f64).log2();
    energy / bits * 10f64.powf(-eb_n0_db / 10.0)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of Eb/N0 point `point` under master seed `seed`.
pub fn point_seed(seed: u64, point: usize) -> u64 {
    splitmix(splitmix(seed) ^ point as u64)
}

fn frame_rng(seed: u64, frame: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);
    rng
}

/// Thread pool sized from `OTFS_SCMA_WORKERS` (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| {
            Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        if n == 0 {
            return Err(Error::Config(format!("{WORKERS_ENV} must be positive")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

/// Everything drawn for one frame: one channel and received frame per
/// receiver, and the transmitted codeword indices.
#[derive(Debug, Clone)]
pub struct FrameDraw {
    pub channels: Vec<ChannelModel>,
    pub h: Vec<TimeChannelMatrix>,
    pub indices: IndexMatrix,
    pub received: Vec<Vec<Complex64>>,
}

impl FrameDraw {
    /// Combined fingerprint of all receivers' channels.
    pub fn channel_fingerprint(&self) -> u64 {
        self.channels
            .iter()
            .fold(0u64, |acc, c| splitmix(acc ^ c.fingerprint()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameOutcome {
    pub bit_errors: u64,
    /// Summed over receivers.
    pub iters: u64,
    /// Final MSE summed over receivers.
    pub mse_final: f64,
    pub channel_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub eb_n0_db: f64,
    pub scheme: &'static str,
    pub frames: u64,
    pub bit_errors: u64,
    pub total_bits: u64,
    pub ber: f64,
    /// Standard error of `ber` from the frame-to-frame spread.
    pub ber_std_err: f64,
    pub avg_iters: f64,
    pub avg_mse_final: f64,
    pub seed: u64,
    /// Kept out of the CSV so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameLogRow {
    pub eb_n0_db: f64,
    pub scheme: &'static str,
    pub frame: u64,
    pub channel_fingerprint: String,
    pub bit_errors: u64,
}

/// A validated configuration with everything loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub sys: ScmaSystem,
    pub graph: UserGraph,
    pub dims: GridDims,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let sys = cfg.system()?;
        let graph = cfg.user_graph()?;
        let dims = cfg.dims()?;
        Ok(Self {
            cfg,
            sys,
            graph,
            dims,
        })
    }

    /// Receivers in a frame: one per user.
    pub fn receivers(&self) -> usize {
        self.sys.users()
    }

    pub fn bits_per_frame(&self) -> u64 {
        (self.receivers() * self.sys.bits_per_user(self.dims).expect("validated dims")) as u64
    }

    /// Draw order per frame stream: channels of every receiver, codeword
    /// indices, then the noise of every receiver.
    pub fn draw_frame(&self, seed: u64, frame: u64, n0: f64) -> Result<FrameDraw> {
        let mut rng = frame_rng(seed, frame);
        let users = self.receivers();
        let channels: Vec<ChannelModel> = (0..users)
            .map(|_| match self.cfg.channel.kind {
                ChannelKind::Random => {
                    generate_random_channel(self.dims, self.cfg.channel.params(), n0, &mut rng)
                }
                ChannelKind::Identity => Ok(ChannelModel::identity(self.dims, n0)),
            })
            .collect::<Result<_>>()?;
        let blocks = self.sys.blocks(self.dims)?;
        let m = self.sys.m_mod();
        let indices: IndexMatrix = (0..blocks)
            .map(|_| {
                (0..self.sys.users())
                    .map(|_| rng.random_range(0..m))
                    .collect()
            })
            .collect();
        let mut s = self.sys.encode(&indices, self.dims)?.sup;
        OtfsTransform::cached(self.dims).dd_to_time_in_place(&mut s);
        let h: Vec<TimeChannelMatrix> = channels
            .iter()
            .map(build_time_channel)
            .collect::<Result<_>>()?;
        let received = h.iter().map(|h| transmit(h, n0, &s, &mut rng)).collect();
        Ok(FrameDraw {
            channels,
            h,
            indices,
            received,
        })
    }

    /// Runs `scheme` on one frame. Receiver `j` is scored on user `j`'s
    /// codewords.
    pub fn run_frame(
        &self,
        scheme: SchemeKind,
        seed: u64,
        frame: u64,
        n0: f64,
    ) -> Result<FrameOutcome> {
        let draw = self.draw_frame(seed, frame, n0)?;
        let reports = self.detect_frame(scheme, &draw, seed, frame, n0)?;
        let mut out = FrameOutcome {
            bit_errors: 0,
            iters: 0,
            mse_final: 0.0,
            channel_fingerprint: draw.channel_fingerprint(),
        };
        for (j, rep) in reports.iter().enumerate() {
            out.bit_errors += draw
                .indices
                .iter()
                .zip(&rep.indices)
                .map(|(t, d)| bit_errors(t[j], d[j]) as u64)
                .sum::<u64>();
            out.iters += rep.iters_run as u64;
            out.mse_final += rep.mse_trace.last().copied().unwrap_or(0.0);
        }
        Ok(out)
    }

    pub fn detect_frame(
        &self,
        scheme: SchemeKind,
        draw: &FrameDraw,
        seed: u64,
        frame: u64,
        n0: f64,
    ) -> Result<Vec<DetectionReport>> {
        let det = &self.cfg.detector;
        match scheme {
            SchemeKind::TwoStage => draw
                .channels
                .iter()
                .zip(&draw.received)
                .map(|(ch, r)| {
                    let hdd = build_dd_channel(ch)?;
                    let mut y = r.clone();
                    OtfsTransform::cached(self.dims).time_to_dd_in_place(&mut y);
                    detect_two_stage(&hdd, &y, n0, &self.sys, det)
                })
                .collect(),
            SchemeKind::Single => draw
                .h
                .iter()
                .zip(&draw.received)
                .map(|(h, r)| detect(h, r, n0, &self.sys, det))
                .collect(),
            SchemeKind::Separate | SchemeKind::Joint => {
                let rx: Vec<Receiver> = draw
                    .h
                    .iter()
                    .zip(&draw.received)
                    .map(|(h, r)| Receiver {
                        h: h.clone(),
                        r: r.clone(),
                    })
                    .collect();
                let mut link_rng = frame_rng(seed ^ LINK_SALT, frame);
                if scheme == SchemeKind::Joint {
                    let coop = self.cfg.coop.config(Scheme::Joint);
                    detect_multilayer_joint(
                        &rx,
                        n0,
                        &self.sys,
                        &self.graph,
                        det,
                        &coop,
                        &mut link_rng,
                    )
                } else {
                    let coop = self.cfg.coop.config(Scheme::Separate);
                    detect_multilayer_separate(
                        &rx,
                        n0,
                        &self.sys,
                        &self.graph,
                        det,
                        &coop,
                        &mut link_rng,
                    )
                }
            }
        }
    }

    /// Frames of one Eb/N0 point until the bit-error threshold or the frame
    /// budget is reached. Frames run in parallel chunks but are accumulated
    /// in order, so the stopping frame does not depend on the worker count.
    pub fn run_point(
        &self,
        scheme: SchemeKind,
        point: usize,
        pool: &rayon::ThreadPool,
    ) -> Result<(ResultRow, Vec<FrameLogRow>)> {
        let start = Instant::now();
        let db = self.cfg.ebn0_db[point];
        let n0 = ebn0_to_n0(db, &self.sys);
        let seed = point_seed(self.cfg.seed, point);
        let budget = self.cfg.budget;
        let mut per_frame: Vec<u64> = Vec::new();
        let mut log = Vec::new();
        let (mut errors, mut iters, mut mse) = (0u64, 0u64, 0.0f64);
        let mut next = 0u64;
        'outer: while next < budget.max_frames {
            let end = (next + budget.chunk as u64).min(budget.max_frames);
            let outcomes: Vec<Result<FrameOutcome>> = pool.install(|| {
                (next..end)
                    .into_par_iter()
                    .map(|f| self.run_frame(scheme, seed, f, n0))
                    .collect()
            });
            for (f, o) in (next..end).zip(outcomes) {
                let o = o?;
                errors += o.bit_errors;
                iters += o.iters;
                mse += o.mse_final;
                per_frame.push(o.bit_errors);
                log.push(FrameLogRow {
                    eb_n0_db: db,
                    scheme: scheme.name(),
                    frame: f,
                    channel_fingerprint: format!("{:016x}", o.channel_fingerprint),
                    bit_errors: o.bit_errors,
                });
                if errors >= budget.max_bit_errors {
                    break 'outer;
                }
            }
            next = end;
        }
        let frames = per_frame.len() as u64;
        let bits = self.bits_per_frame();
        let total_bits = frames * bits;
        let ber = errors as f64 / total_bits as f64;
        let ber_std_err = if frames > 1 {
            let mean = errors as f64 / frames as f64;
            let var = per_frame
                .iter()
                .map(|&e| (e as f64 - mean).powi(2))
                .sum::<f64>()
                / (frames - 1) as f64;
            (var / frames as f64).sqrt() / bits as f64
        } else {
            0.0
        };
        let receivers = (frames * self.receivers() as u64) as f64;
        let row = ResultRow {
            eb_n0_db: db,
            scheme: scheme.name(),
            frames,
            bit_errors: errors,
            total_bits,
            ber,
            ber_std_err,
            avg_iters: iters as f64 / receivers,
            avg_mse_final: mse / receivers,
            seed: self.cfg.seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok((row, log))
    }

    /// Every configured Eb/N0 point for each of `schemes`.
    pub fn run(&self, schemes: &[SchemeKind]) -> Result<(Vec<ResultRow>, Vec<FrameLogRow>)> {
        let pool = worker_pool()?;
        let mut rows = Vec::new();
        let mut log = Vec::new();
        for &s in schemes {
            for p in 0..self.cfg.ebn0_db.len() {
                let (row, l) = self.run_point(s, p, &pool)?;
                rows.push(row);
                log.extend(l);
            }
        }
        Ok((rows, log))
    }
}

/// Runs the configured schemes over the Eb/N0 list.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let exp = Experiment::new(cfg.clone())?;
    Ok(exp.run(&cfg.schemes)?.0)
}

/// All four schemes on common random numbers.
pub fn run_scheme_comparison(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let exp = Experiment::new(cfg.clone())?;
    Ok(exp.run(&SchemeKind::ALL)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeReportRow {
    pub eb_n0_db: f64,
    /// 1-based cross-domain iteration.
    pub iteration: usize,
    pub channels: usize,
    pub sim_mse: f64,
    pub se_mse: f64,
    pub mse_ratio: f64,
    pub sim_lmmse_var: f64,
    pub se_lmmse_var: f64,
    pub lmmse_rel_err: f64,
}

/// Simulated vs predicted MSE per iteration, averaged over channel
/// realizations. Early stopping is disabled so every trace has the same
/// length; an SE trajectory that reaches its fixed point early is held
/// there.
pub fn run_se_report(cfg: &ExperimentConfig) -> Result<Vec<SeReportRow>> {
    let exp = Experiment::new(cfg.clone())?;
    let se = &cfg.se;
    let table = MpaErrorTable::load_or_build(
        se.cache_dir.as_deref(),
        &exp.sys,
        &se.table,
        &cfg.detector.mpa,
    )?;
    let det = DetectorConfig {
        l_max: se.iterations,
        stop_var: 0.0,
        ..cfg.detector
    };
    let bounds: VarBounds = det.bounds();
    let pool = worker_pool()?;
    let mut rows = Vec::new();
    for (p, &db) in cfg.ebn0_db.iter().enumerate() {
        let n0 = ebn0_to_n0(db, &exp.sys);
        let seed = point_seed(cfg.seed ^ SE_SALT, p);
        let per: Vec<Result<[Vec<f64>; 4]>> = pool.install(|| {
            (0..se.channels as u64)
                .into_par_iter()
                .map(|c| {
                    let draw = exp.draw_frame(seed, c, n0)?;
                    let rep = detect(&draw.h[0], &draw.received[0], n0, &exp.sys, &det)?;
                    let tr = run_se(&draw.h[0], n0, &table, &exp.sys, se.iterations, bounds)?;
                    let hold = |l: usize| &tr.states[l.min(tr.states.len() - 1)];
                    let se_mse = (0..se.iterations).map(|l| hold(l).v_p_dd).collect();
                    let se_lmmse = (0..se.iterations).map(|l| hold(l).v_p_t).collect();
                    Ok([rep.mse_trace, se_mse, rep.lmmse_trace, se_lmmse])
                })
                .collect()
        });
        let per: Vec<[Vec<f64>; 4]> = per.into_iter().collect::<Result<_>>()?;
        let n = per.len() as f64;
        for l in 0..se.iterations {
            let avg = |k: usize| per.iter().map(|x| x[k][l]).sum::<f64>() / n;
            let (sim, pred, sim_t, pred_t) = (avg(0), avg(1), avg(2), avg(3));
            rows.push(SeReportRow {
                eb_n0_db: db,
                iteration: l + 1,
                channels: se.channels,
                sim_mse: sim,
                se_mse: pred,
                mse_ratio: sim / pred,
                sim_lmmse_var: sim_t,
                se_lmmse_var: pred_t,
                lmmse_rel_err: (sim_t - pred_t).abs() / pred_t,
            });
        }
    }
    Ok(rows)
}

fn csv_string<T: Serialize>(version: &str, rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(format!(
        "{version}\n{}",
        String::from_utf8(body).expect("csv output is utf-8")
    ))
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String> {
    let header = [
        "eb_n0_db",
        "scheme",
        "frames",
        "bit_errors",
        "total_bits",
        "ber",
        "ber_std_err",
        "avg_iters",
        "avg_mse_final",
        "seed",
    ];
    csv_string(RESULTS_VERSION_LINE, rows, &header)
}

pub fn frame_log_csv(rows: &[FrameLogRow]) -> Result<String> {
    csv_string(
        RESULTS_VERSION_LINE,
        rows,
        &[
            "eb_n0_db",
            "scheme",
            "frame",
            "channel_fingerprint",
            "bit_errors",
        ],
    )
}

pub fn se_report_csv(rows: &[SeReportRow]) -> Result<String> {
    let header = [
        "eb_n0_db",
        "iteration",
        "channels",
        "sim_mse",
        "se_mse",
        "mse_ratio",
        "sim_lmmse_var",
        "se_lmmse_var",
        "lmmse_rel_err",
    ];
    csv_string(SE_VERSION_LINE, rows, &header)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Wall times, kept beside the CSV rather than in it.
pub fn timing_json(rows: &[ResultRow]) -> Result<String> {
    #[derive(Serialize)]
    struct T<'a> {
        scheme: &'a str,
        eb_n0_db: f64,
        frames: u64,
        wall_time_s: f64,
    }
    let t: Vec<T> = rows
        .iter()
        .map(|r| T {
            scheme: r.scheme,
            eb_n0_db: r.eb_n0_db,
            frames: r.frames,
            wall_time_s: r.wall_time_s,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&t)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(schemes: Vec<SchemeKind>) -> ExperimentConfig {
        ExperimentConfig {
            ebn0_db: vec![8.0],
            schemes,
            grid: GridConfig { m: 8, n: 4 },
            budget: BudgetConfig {
                max_frames: 6,
                max_bit_errors: 1_000_000,
                chunk: 4,
            },
            ..Default::default()
        }
    }

    #[test]
    fn ebn0_mapping() {
        let sys = ScmaSystem::standard();
        assert!((ebn0_to_n0(0.0, &sys) - 1.0 / 3.0).abs() < 1e-12);
        assert!((ebn0_to_n0(10.0, &sys) - ebn0_to_n0(0.0, &sys) / 10.0).abs() < 1e-15);
        assert!(ebn0_to_n0(3.0, &sys) > ebn0_to_n0(3.1, &sys));
    }

    #[test]
    fn draws_are_scheme_independent_and_reproducible() {
        let exp = Experiment::new(quick(vec![SchemeKind::Single])).unwrap();
        let a = exp.draw_frame(9, 3, 0.1).unwrap();
        let b = exp.draw_frame(9, 3, 0.1).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.received, b.received);
        assert_eq!(a.channel_fingerprint(), b.channel_fingerprint());
        let c = exp.draw_frame(9, 4, 0.1).unwrap();
        assert_ne!(a.channel_fingerprint(), c.channel_fingerprint());
        assert_eq!(a.channels.len(), 6);
    }

    #[test]
    fn bit_accounting_and_log() {
        let exp = Experiment::new(quick(SchemeKind::ALL.to_vec())).unwrap();
        let (rows, log) = exp.run(&SchemeKind::ALL).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.frames, 6);
            assert_eq!(r.total_bits, 6 * 8 * 6 * 2);
            assert_eq!(r.ber, r.bit_errors as f64 / r.total_bits as f64);
        }
        // same frames, same channels, whatever the scheme
        for f in 0..6u64 {
            let prints: Vec<&String> = log
                .iter()
                .filter(|l| l.frame == f)
                .map(|l| &l.channel_fingerprint)
                .collect();
            assert_eq!(prints.len(), 4);
            assert!(prints.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn early_stop_on_errors() {
        let mut cfg = quick(vec![SchemeKind::TwoStage]);
        cfg.ebn0_db = vec![-5.0];
        cfg.budget = BudgetConfig {
            max_frames: 1000,
            max_bit_errors: 50,
            chunk: 8,
        };
        let rows = run_experiment(&cfg).unwrap();
        assert!(rows[0].bit_errors >= 50);
        assert!(rows[0].frames < 8, "{}", rows[0].frames);
    }

    #[test]
    fn csv_has_version_line() {
        let rows = run_experiment(&quick(vec![SchemeKind::Single])).unwrap();
        let text = results_csv(&rows).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(RESULTS_VERSION_LINE));
        assert!(lines.next().unwrap().starts_with("eb_n0_db,scheme,frames"));
        assert_eq!(text.lines().count(), 3);
        assert!(!text.contains("wall_time"));
    }
}
