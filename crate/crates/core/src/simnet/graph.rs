use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal};

use super::{Result, SimError};
use crate::config::{JitterConfig, LatencyProfile};
use crate::protocol::Endpoint;
use crate::PartyId;

const NS_PER_MS: f64 = 1e6;

#[derive(Debug, Clone)]
enum Jitter {
    None,
    Uniform(u64),
    LogNormal(LogNormal<f64>),
}

/// Star-topology latency model: one symmetric link per client.
#[derive(Debug, Clone)]
pub struct LatencyGraph {
    profile: String,
    base_ns: Vec<u64>,
    jitter: Jitter,
    rng: ChaCha20Rng,
}

/// Draws every link's base delay. Jitter is drawn per message from a stream
/// seeded alongside.
pub fn build_graph(name: &str, profile: &LatencyProfile, n: usize, seed: u64) -> Result<LatencyGraph> {
    if !(profile.min_ms > 0.0 && profile.min_ms <= profile.max_ms && profile.max_ms.is_finite()) {
        return Err(SimError::InvalidProfile(name.to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let base_ns = (0..n)
        .map(|_| {
            let ms = if profile.min_ms == profile.max_ms {
                profile.min_ms
            } else {
                rng.random_range(profile.min_ms..profile.max_ms)
            };
            (ms * NS_PER_MS).round() as u64
        })
        .collect();
    let jitter = match profile.jitter {
        JitterConfig::None => Jitter::None,
        JitterConfig::Uniform { max_ms } => Jitter::Uniform((max_ms * NS_PER_MS).round() as u64),
        JitterConfig::LogNormal { mu, sigma } => {
            Jitter::LogNormal(LogNormal::new(mu, sigma).map_err(|_| SimError::InvalidProfile(name.to_string()))?)
        }
    };
    rng.set_stream(1);
    Ok(LatencyGraph {
        profile: name.to_string(),
        base_ns,
        jitter,
        rng,
    })
}

/// [`build_graph`] by name from a set of configured profiles.
pub fn build_named_graph(
    profiles: &std::collections::BTreeMap<String, LatencyProfile>,
    name: &str,
    n: usize,
    seed: u64,
) -> Result<LatencyGraph> {
    let profile = profiles.get(name).ok_or_else(|| SimError::UnknownProfile(name.to_string()))?;
    build_graph(name, profile, n, seed)
}

impl LatencyGraph {
    pub fn profile(&self) -> &str {
        &self.profile
    }

    pub fn clients(&self) -> usize {
        self.base_ns.len()
    }

    pub fn base_ns(&self, client: PartyId) -> u64 {
        self.base_ns[client as usize]
    }

    pub fn sample_jitter(&mut self) -> u64 {
        match &self.jitter {
            Jitter::None => 0,
            Jitter::Uniform(0) => 0,
            Jitter::Uniform(max) => self.rng.random_range(0..=*max),
            Jitter::LogNormal(d) => (d.sample(&mut self.rng) * NS_PER_MS).round() as u64,
        }
    }

    /// One-way delay of a message between the two endpoints.
    pub fn sample_delay(&mut self, from: Endpoint, to: Endpoint) -> u64 {
        let client = match (from, to) {
            (Endpoint::Client(c), _) | (_, Endpoint::Client(c)) => c,
            (Endpoint::Server, Endpoint::Server) => return 0,
        };
        self.base_ns(client) + self.sample_jitter()
    }

    /// Mean base delay over all links.
    pub fn mean_base_ns(&self) -> f64 {
        self.base_ns.iter().map(|&b| b as f64).sum::<f64>() / self.base_ns.len().max(1) as f64
    }
}
