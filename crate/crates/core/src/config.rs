//! The single TOML file that drives every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dopf::{DopfModel, DopfParams};
use crate::market::MarketConfig;
use crate::microgrid::MicrogridSpec;
use crate::network::{load_network, CaseFormat, NetworkTopology};
use crate::scenario::SamplingRanges;
use crate::surrogate::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Case file; relative paths resolve against the config file's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub hours: usize,
    /// Multiplier on every bus's base active load, per hour.
    pub load_profile: Vec<f64>,
    /// Power factor applied to all feeder loads.
    pub power_factor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Case2Section {
    /// Market/operator rounds per hour before the last accepted values stand.
    pub max_rounds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub network: NetworkSection,
    pub horizon: HorizonSection,
    pub market: MarketConfig,
    pub dopf: DopfParams,
    pub case2: Case2Section,
    pub sampling: SamplingRanges,
    pub training: TrainConfig,
    #[serde(rename = "microgrid")]
    pub microgrids: Vec<MicrogridSpec>,
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if cfg.network.path.is_relative() {
            if let Some(dir) = origin.parent() {
                cfg.network.path = dir.join(&cfg.network.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.horizon.hours == 0 {
            return bad("horizon.hours must be at least 1".into());
        }
        if self.horizon.load_profile.is_empty() || self.horizon.load_profile.iter().any(|v| !(*v >= 0.0)) {
            return bad("horizon.load_profile must be non-empty and non-negative".into());
        }
        if !(self.horizon.power_factor > 0.0 && self.horizon.power_factor <= 1.0) {
            return bad("horizon.power_factor must lie in (0, 1]".into());
        }
        if self.case2.max_rounds == 0 {
            return bad("case2.max_rounds must be at least 1".into());
        }
        if self.microgrids.is_empty() {
            return bad("at least one [[microgrid]] is required".into());
        }
        for mg in &self.microgrids {
            mg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let mut buses: Vec<_> = self.microgrids.iter().map(|m| m.bus).collect();
        buses.sort_unstable();
        buses.dedup();
        if buses.len() != self.microgrids.len() {
            return bad("two microgrids share a bus".into());
        }
        self.market.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dopf.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampling.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.training.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// The feeder with a P2P variable at every microgrid bus, capped at the
    /// largest exchange that microgrid could ever propose.
    pub fn topology(&self) -> Result<NetworkTopology, ConfigError> {
        let base = load_network(&self.network.path, CaseFormat::Tabular)?;
        let caps: Vec<_> = self.microgrids.iter().map(|m| (m.bus, m.max_exchange())).collect();
        Ok(base.with_p2p_caps(&caps)?)
    }

    pub fn load_scale_at(&self, hour: usize) -> f64 {
        let p = &self.horizon.load_profile;
        p[hour % p.len()]
    }
}

/// Active and reactive feeder loads (kW, kVAr) for a load multiplier and a
/// uniform power factor.
pub fn scaled_loads(topo: &NetworkTopology, scale: f64, pf: f64) -> (Vec<f64>, Vec<f64>) {
    let tan = (1.0 - pf * pf).max(0.0).sqrt() / pf;
    let p: Vec<f64> = topo.buses.iter().map(|b| b.p_load_base * scale).collect();
    let q = p.iter().map(|p| p * tan).collect();
    (p, q)
}

/// Network, operator model and microgrid positions assembled from a config.
#[derive(Clone)]
pub struct Setup {
    pub config: Config,
    pub topo: NetworkTopology,
    pub dopf: DopfModel,
    /// Bus position of each microgrid, in config order.
    pub mg_positions: Vec<usize>,
}

impl Setup {
    pub fn new(config: Config) -> Result<Self, ConfigError> {
        config.validate()?;
        let topo = config.topology()?;
        let mg_positions = config
            .microgrids
            .iter()
            .map(|m| topo.bus_index(m.bus))
            .collect::<Result<Vec<_>, _>>()?;
        let dopf = DopfModel::new(&topo);
        Ok(Self {
            config,
            topo,
            dopf,
            mg_positions,
        })
    }

    pub fn specs(&self) -> &[MicrogridSpec] {
        &self.config.microgrids
    }

    /// Per-bus vector with the microgrid values at their positions.
    pub fn scatter(&self, per_mg: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.topo.n_buses()];
        for (&pos, v) in self.mg_positions.iter().zip(per_mg) {
            out[pos] = *v;
        }
        out
    }

    pub fn gather(&self, per_bus: &[f64]) -> Vec<f64> {
        self.mg_positions.iter().map(|&p| per_bus[p]).collect()
    }
}
