use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::cooperation::{CoopConfig, LinkKind, Scheme, UserGraph};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::otfs::GridDims;
use crate::scma::{load_codebook, FactorGraph, ScmaCodebookSet, ScmaSystem};
use crate::state_evolution::TableParams;

/// Detection scheme evaluated by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// DD-domain L-MMSE followed by one MPA pass.
    TwoStage,
    /// Single-layer cross-domain detector at every receiver.
    Single,
    /// Cooperative, consensus once after local detection.
    Separate,
    /// Cooperative, consensus inside every iteration.
    Joint,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::TwoStage,
        SchemeKind::Single,
        SchemeKind::Separate,
        SchemeKind::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TwoStage => "two_stage",
            Self::Single => "single",
            Self::Separate => "separate",
            Self::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    #[default]
    Random,
    /// Single unit path: pure AWGN.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Delay bins.
    pub m: usize,
    /// Doppler bins.
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { m: 16, n: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub paths: usize,
    pub l_max: usize,
    pub k_max: usize,
    pub fractional: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let p = ChannelParams::table_one();
        Self {
            kind: ChannelKind::Random,
            paths: p.paths,
            l_max: p.l_max,
            k_max: p.k_max,
            fractional: p.fractional,
        }
    }
}

impl ChannelConfig {
    pub fn params(&self) -> ChannelParams {
        ChannelParams {
            paths: self.paths,
            l_max: self.l_max,
            k_max: self.k_max,
            fractional: self.fractional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    /// JSON codebook file; the built-in 4 x 6 codebook when absent.
    pub path: Option<PathBuf>,
    pub normalize_sup_power: bool,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            path: None,
            normalize_sup_power: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoopSection {
    /// JSON user graph; the built-in six-user graph when absent.
    pub graph: Option<PathBuf>,
    pub link: LinkKind,
    pub link_noise_var: f64,
    pub alpha0: f64,
    pub sharing_rate: f64,
    /// Consensus rounds per cross-domain iteration (joint scheme).
    pub i_c_joint: usize,
    /// Consensus rounds after local detection (separate scheme).
    pub i_c_separate: usize,
}

impl Default for CoopSection {
    fn default() -> Self {
        let (j, s) = (CoopConfig::joint(), CoopConfig::separate());
        Self {
            graph: None,
            link: j.link,
            link_noise_var: j.link_noise_var,
            alpha0: j.alpha0,
            sharing_rate: j.sharing_rate,
            i_c_joint: j.i_c,
            i_c_separate: s.i_c,
        }
    }
}

impl CoopSection {
    pub fn config(&self, scheme: Scheme) -> CoopConfig {
        let i_c = match scheme {
            Scheme::Joint => self.i_c_joint,
            Scheme::Separate => self.i_c_separate,
        };
        CoopConfig {
            scheme,
            i_c,
            link: self.link,
            link_noise_var: self.link_noise_var,
            alpha0: self.alpha0,
            sharing_rate: self.sharing_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub max_frames: u64,
    /// A point stops once this many bit errors have accumulated.
    pub max_bit_errors: u64,
    /// Frames handed to the worker pool at a time.
    pub chunk: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_frames: 20_000,
            max_bit_errors: 5_000,
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeReportConfig {
    /// Channel realizations per Eb/N0 point.
    pub channels: usize,
    pub iterations: usize,
    pub table: TableParams,
    /// Directory for cached MPA error tables.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SeReportConfig {
    fn default() -> Self {
        Self {
            channels: 50,
            iterations: 5,
            table: TableParams::default(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ebn0_db: Vec<f64>,
    /// Schemes run by `simulate`; `compare` always runs all four.
    pub schemes: Vec<SchemeKind>,
    pub grid: GridConfig,
    pub channel: ChannelConfig,
    pub codebook: CodebookConfig,
    pub detector: DetectorConfig,
    pub coop: CoopSection,
    pub budget: BudgetConfig,
    pub se: SeReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            ebn0_db: vec![10.0],
            schemes: vec![SchemeKind::Single],
            grid: GridConfig::default(),
            channel: ChannelConfig::default(),
            codebook: CodebookConfig::default(),
            detector: DetectorConfig::default(),
            coop: CoopSection::default(),
            budget: BudgetConfig::default(),
            se: SeReportConfig::default(),
        }
    }
}

/// Sets `a.b.c = value` in a TOML tree; `value` is parsed as a TOML value
/// and taken as a bare string if that fails.
fn set_dotted(root: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), parsed);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text and applies `key=value` overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut root, k.trim(), v.trim())?;
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.codebook.path);
        fix(&mut cfg.coop.graph);
        fix(&mut cfg.se.cache_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dims(&self) -> Result<GridDims> {
        GridDims::new(self.grid.m, self.grid.n)
    }

    pub fn system(&self) -> Result<ScmaSystem> {
        let (graph, raw): (FactorGraph, ScmaCodebookSet) = match &self.codebook.path {
            Some(p) => load_codebook(p)?,
            None => {
                let g = FactorGraph::standard_4x6();
                let cb = ScmaCodebookSet::rotated_qpsk(&g);
                (g, cb)
            }
        };
        ScmaSystem::new(graph, raw, self.codebook.normalize_sup_power)
    }

    pub fn user_graph(&self) -> Result<UserGraph> {
        match &self.coop.graph {
            Some(p) => UserGraph::load(p),
            None => Ok(UserGraph::standard_six()),
        }
    }

    /// Checks every section and that referenced files load.
    pub fn validate(&self) -> Result<()> {
        if self.ebn0_db.is_empty() {
            return Err(Error::Config("ebn0_db must list at least one point".into()));
        }
        if let Some(x) = self.ebn0_db.iter().find(|x| !x.is_finite()) {
            return Err(Error::Config(format!("Eb/N0 value {x} is not finite")));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config(
                "schemes must list at least one scheme".into(),
            ));
        }
        let dims = self.dims()?;
        if self.channel.kind == ChannelKind::Random {
            self.channel.params().validate(dims)?;
        }
        let sys = self.system()?;
        sys.blocks(dims)?;
        self.detector.validate()?;
        let g = self.user_graph()?;
        let needs_graph = self
            .schemes
            .iter()
            .any(|s| matches!(s, SchemeKind::Joint | SchemeKind::Separate));
        if g.users() != sys.users() && needs_graph {
            return Err(Error::Config(format!(
                "user graph has {} users, codebook has {}",
                g.users(),
                sys.users()
            )));
        }
        self.coop.config(Scheme::Joint).validate()?;
        if self.budget.max_frames == 0 || self.budget.chunk == 0 {
            return Err(Error::Config(
                "max_frames and chunk must be positive".into(),
            ));
        }
        if self.se.channels == 0 || self.se.iterations == 0 {
            return Err(Error::Config(
                "se.channels and se.iterations must be positive".into(),
            ));
        }
        self.se.table.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\n[detector]\nl_max = 2\n",
            &[
                "detector.l_max=4".into(),
                "ebn0_db=[8.0, 12.0]".into(),
                "coop.link=noisy".into(),
                "schemes=[\"joint\", \"two_stage\"]".into(),
                "channel.kind = identity".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.detector.l_max, 4);
        assert_eq!(cfg.ebn0_db, vec![8.0, 12.0]);
        assert_eq!(cfg.coop.link, LinkKind::Noisy);
        assert_eq!(cfg.schemes, vec![SchemeKind::Joint, SchemeKind::TwoStage]);
        assert_eq!(cfg.channel.kind, ChannelKind::Identity);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("bogus = 1", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["nokey".into()]).is_err());
        let bad = [
            ExperimentConfig {
                ebn0_db: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                grid: GridConfig { m: 3, n: 1 },
                ..Default::default()
            },
            ExperimentConfig {
                codebook: CodebookConfig {
                    path: Some("/nonexistent.json".into()),
                    normalize_sup_power: true,
                },
                ..Default::default()
            },
            ExperimentConfig {
                detector: DetectorConfig {
                    l_max: 0,
                    ..Default::default()
                },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
