//! Experiment configuration, read from TOML. Every field has a default, so
//! an empty file is a valid configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dpnoise::{laplace_scale, NoiseHook};
use crate::keyexchange::DhParams;
use crate::protocol::{Capture, Mode, Op, ProtocolParams, Seeds};
use crate::regression::TrainConfig;
use crate::ring::FixedPointParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Which constant stands for `α` in the noise scale `2 / (n k α ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleAlpha {
    LearningRate,
    RegAlpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    pub frac_bits: u32,
    pub int_bits: u32,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        let d = FixedPointParams::default();
        FixedPointConfig {
            frac_bits: d.frac_bits(),
            int_bits: d.int_bits(),
        }
    }
}

/// Per-message delay added on top of a link's base latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JitterConfig {
    None,
    /// Uniform on `[0, max_ms]`.
    Uniform { max_ms: f64 },
    /// `exp(N(mu, sigma))` milliseconds.
    LogNormal { mu: f64, sigma: f64 },
}

/// One latency profile: each client's link to the server gets a base
/// one-way delay drawn uniformly from `[min_ms, max_ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub min_ms: f64,
    pub max_ms: f64,
    pub jitter: JitterConfig,
}

pub fn default_profiles() -> BTreeMap<String, LatencyProfile> {
    BTreeMap::from([
        (
            "metro".to_string(),
            LatencyProfile {
                min_ms: 0.2,
                max_ms: 5.0,
                jitter: JitterConfig::Uniform { max_ms: 0.1 },
            },
        ),
        (
            "transatlantic".to_string(),
            LatencyProfile {
                min_ms: 35.0,
                max_ms: 45.0,
                jitter: JitterConfig::LogNormal { mu: -1.0, sigma: 0.5 },
            },
        ),
        (
            "global".to_string(),
            LatencyProfile {
                min_ms: 20.0,
                max_ms: 150.0,
                jitter: JitterConfig::LogNormal { mu: 0.0, sigma: 0.75 },
            },
        ),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Fixed constants; reproducible across hosts.
    Synthetic,
    /// Micro-benchmarked once at start-up.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub kind: CostKind,
    /// Per-operation nanosecond overrides applied after the base table.
    pub override_ns: BTreeMap<Op, u64>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            kind: CostKind::Synthetic,
            override_ns: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    NonOblivious,
    Naive,
    Random,
    Diff,
    Mean,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::NonOblivious,
        Scenario::Naive,
        Scenario::Random,
        Scenario::Diff,
        Scenario::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::NonOblivious => "NON_OBLIVIOUS",
            Scenario::Naive => "NAIVE",
            Scenario::Random => "RANDOM",
            Scenario::Diff => "DIFF",
            Scenario::Mean => "MEAN",
        }
    }

    /// The protocol mode a transcript must come from.
    pub fn mode(self) -> Mode {
        match self {
            Scenario::NonOblivious => Mode::NonOblivious,
            _ => Mode::Oblivious,
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub honest: u32,
    /// Consecutive protocol rounds observed.
    pub iterations: u32,
    pub scenarios: Vec<Scenario>,
    pub histogram_bins: usize,
    /// Seed for the RANDOM scenario's guesses.
    pub guess_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            honest: 0,
            iterations: 1000,
            scenarios: vec![Scenario::Naive, Scenario::Random, Scenario::Diff, Scenario::Mean],
            histogram_bins: 40,
            guess_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub clients: Vec<usize>,
    /// Runs per cell; replicate `r` offsets every seed by `r`.
    pub replicates: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            epsilons: vec![5e-4, 5e-5, 1e-5, 5e-6, 5e-7],
            clients: vec![50, 100, 200, 500],
            replicates: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub rounds: u32,
    pub local_iterations: usize,
    pub epsilon: f64,
    pub reg_alpha: f64,
    pub learning_rate: f64,
    pub scale_alpha: ScaleAlpha,
    pub local_size: usize,
    pub test_fraction: f64,
    pub mode: Mode,
    pub latency_profile: String,
    pub dh_group: String,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub noise_hook: NoiseHook,
    /// Weight whose private randomness is captured for attacks.
    pub tracked_weight: u32,
    pub seeds: Seeds,
    pub fixed_point: FixedPointConfig,
    pub costs: CostConfig,
    pub network: BTreeMap<String, LatencyProfile>,
    pub attack: AttackConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_clients: 100,
            rounds: 20,
            local_iterations: 50,
            epsilon: 5e-4,
            reg_alpha: 1e-4,
            learning_rate: 0.5,
            scale_alpha: ScaleAlpha::LearningRate,
            local_size: 200,
            test_fraction: 0.25,
            mode: Mode::Oblivious,
            latency_profile: "metro".into(),
            dh_group: "modp2048".into(),
            dataset: PathBuf::from("data/adult.csv"),
            output_dir: PathBuf::from("out"),
            noise_hook: NoiseHook::Live,
            tracked_weight: 0,
            seeds: Seeds::default(),
            fixed_point: FixedPointConfig::default(),
            costs: CostConfig::default(),
            network: default_profiles(),
            attack: AttackConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Canonical TOML with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// First 16 hex digits of SHA-256 over the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_clients < 2 {
            return bad(format!("n_clients must be at least 2, got {}", self.n_clients));
        }
        if self.rounds == 0 || self.local_iterations == 0 || self.local_size == 0 {
            return bad("rounds, local_iterations and local_size must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.reg_alpha > 0.0 && self.reg_alpha.is_finite()) {
            return bad(format!("reg_alpha must be positive, got {}", self.reg_alpha));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if !self.network.contains_key(&self.latency_profile) {
            return bad(format!("unknown latency profile {:?}", self.latency_profile));
        }
        for (name, p) in &self.network {
            if !(p.min_ms > 0.0 && p.min_ms <= p.max_ms && p.max_ms.is_finite()) {
                return bad(format!("profile {name}: need 0 < min_ms <= max_ms"));
            }
            let jitter_ok = match p.jitter {
                JitterConfig::None => true,
                JitterConfig::Uniform { max_ms } => max_ms >= 0.0 && max_ms.is_finite(),
                JitterConfig::LogNormal { mu, sigma } => mu.is_finite() && sigma >= 0.0 && sigma.is_finite(),
            };
            if !jitter_ok {
                return bad(format!("profile {name}: bad jitter parameters"));
            }
        }
        if self.tracked_weight as usize >= 1 << 16 {
            return bad(format!("tracked_weight {} out of range", self.tracked_weight));
        }
        if self.attack.honest as usize >= self.n_clients {
            return bad(format!(
                "attack.honest is {} but there are {} clients",
                self.attack.honest, self.n_clients
            ));
        }
        self.fixed_point_params()?;
        Ok(())
    }

    pub fn fixed_point_params(&self) -> Result<FixedPointParams> {
        FixedPointParams::new(self.fixed_point.frac_bits, self.fixed_point.int_bits)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            iterations: self.local_iterations,
            reg_alpha: self.reg_alpha,
        }
    }

    /// `α` as selected by `scale_alpha`.
    pub fn dp_alpha(&self) -> f64 {
        match self.scale_alpha {
            ScaleAlpha::LearningRate => self.learning_rate,
            ScaleAlpha::RegAlpha => self.reg_alpha,
        }
    }

    pub fn laplace_scale(&self) -> Result<f64> {
        laplace_scale(self.epsilon, self.dp_alpha(), self.n_clients, self.local_size)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn dh_params(&self) -> Result<DhParams> {
        DhParams::by_name(&self.dh_group).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn protocol_params(&self, n_weights: u32, capture: Capture) -> Result<ProtocolParams> {
        self.protocol_params_with(n_weights, capture, Arc::new(self.dh_params()?))
    }

    /// As [`Self::protocol_params`] with an already constructed group.
    pub fn protocol_params_with(&self, n_weights: u32, capture: Capture, dh: Arc<DhParams>) -> Result<ProtocolParams> {
        let p = ProtocolParams {
            n: self.n_clients,
            mode: self.mode,
            rounds: self.rounds,
            n_weights,
            fixed_point: self.fixed_point_params()?,
            laplace_scale: self.laplace_scale()?,
            hook: self.noise_hook,
            dh,
            train: self.train_config(),
            local_size: self.local_size,
            capture,
        };
        p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(p)
    }

    /// Relative paths resolve against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.dataset.is_relative() {
            self.dataset = base.join(&self.dataset);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }
}
