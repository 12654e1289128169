//! Client and server state machines for masked federated averaging.
//!
//! Every weight of every round is one aggregation instance, run strictly in
//! weight order: each client uploads its noise pairs (oblivious mode), the
//! server forwards them permuted, each client sends one masked value, and
//! the server broadcasts the decoded average. Parties only react to
//! messages, so any driver that preserves per-party delivery order yields
//! the same outputs.

mod client;
mod federation;
mod messages;
mod server;
mod transcript;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dpnoise::{NoiseError, NoiseHook};
use crate::keyexchange::{DhParams, KeyExchangeError};
use crate::regression::{RegressionError, TrainConfig};
use crate::ring::{FixedPointParams, RingError};
use crate::PartyId;

pub use client::{client_round1, ClientPhase, ClientState};
pub use federation::{Federation, RoundOutcome};
pub use messages::{Endpoint, Message, MessageKind, WireError, BROADCAST};
pub use server::{permute_pairs, server_forward_noise, Forwarded, ServerState};
pub use transcript::{
    HashSink, MemorySink, NullSink, PartyLog, RoundTranscript, ServerLog, TranscriptSink, WireRecord,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{at} received unexpected {kind:?}: {detail}")]
    Unexpected {
        at: Endpoint,
        kind: MessageKind,
        detail: String,
    },

    #[error("client {party} received a second key from {peer}")]
    DuplicateKey { party: PartyId, peer: PartyId },

    #[error("unknown party {0}")]
    UnknownParty(PartyId),

    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),

    #[error("protocol stalled: {0}")]
    Stalled(String),

    #[error(transparent)]
    KeyExchange(#[from] KeyExchangeError),

    #[error(transparent)]
    Noise(#[from] NoiseError),

    #[error(transparent)]
    Ring(#[from] RingError),

    #[error(transparent)]
    Regression(#[from] RegressionError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    NonOblivious,
    Oblivious,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::NonOblivious => "non_oblivious",
            Mode::Oblivious => "oblivious",
        }
    }
}

/// Compute categories charged by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    DhSetup,
    Encryption,
    Training,
    ServerAgg,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::DhSetup,
        Category::Encryption,
        Category::Training,
        Category::ServerAgg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::DhSetup => "DH_SETUP",
            Category::Encryption => "ENCRYPTION",
            Category::Training => "TRAINING",
            Category::ServerAgg => "SERVER_AGG",
        }
    }
}

/// Primitive operations a handler reports; the simulator prices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    /// One modular exponentiation in the DH group.
    ModExp,
    /// One hash seeding a key or a mask stream.
    KeyDerive,
    /// One 64-bit mask word drawn from a stream.
    MaskWord,
    GammaDraw,
    /// One fixed-point encode or decode.
    Encode,
    RingAdd,
    /// One pass over a single training row (forward and gradient).
    GradientRow,
    /// One noise pair swapped and placed.
    Shuffle,
}

impl Op {
    pub const ALL: [Op; 8] = [
        Op::ModExp,
        Op::KeyDerive,
        Op::MaskWord,
        Op::GammaDraw,
        Op::Encode,
        Op::RingAdd,
        Op::GradientRow,
        Op::Shuffle,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Work {
    pub category: Category,
    pub op: Op,
    pub count: u64,
}

/// What one handler invocation produced.
#[derive(Debug, Default)]
pub struct Step {
    pub out: Vec<(Endpoint, Message)>,
    pub work: Vec<Work>,
}

impl Step {
    fn charge(&mut self, category: Category, op: Op, count: u64) {
        if count > 0 {
            self.work.push(Work { category, op, count });
        }
    }

    fn send(&mut self, to: Endpoint, msg: Message) {
        self.out.push((to, msg));
    }

    fn extend(&mut self, other: Step) {
        self.out.extend(other.out);
        self.work.extend(other.work);
    }
}

/// Which weights have their private randomness and traffic captured.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Capture {
    #[default]
    Nothing,
    Weights(BTreeSet<u32>),
    Everything,
}

impl Capture {
    pub fn wants(&self, weight: u32) -> bool {
        match self {
            Capture::Nothing => false,
            Capture::Weights(set) => set.contains(&weight),
            Capture::Everything => true,
        }
    }

    pub fn any(&self) -> bool {
        !matches!(self, Capture::Nothing)
    }
}

/// Public parameters shared by every party.
#[derive(Debug, Clone)]
pub struct ProtocolParams {
    pub n: usize,
    pub mode: Mode,
    pub rounds: u32,
    pub n_weights: u32,
    pub fixed_point: FixedPointParams,
    /// Scale of the aggregate Laplace noise; unused in plain mode.
    pub laplace_scale: f64,
    pub hook: NoiseHook,
    pub dh: Arc<DhParams>,
    pub train: TrainConfig,
    pub local_size: usize,
    pub capture: Capture,
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProtocolError::InvalidParams(m));
        if self.n < 2 {
            return bad(format!("need at least two clients, got {}", self.n));
        }
        if self.n >= 1 << 24 {
            return bad(format!("at most 2^24 - 1 clients, got {}", self.n));
        }
        if self.rounds == 0 || self.rounds >= 1 << 24 {
            return bad(format!("rounds must be in [1, 2^24), got {}", self.rounds));
        }
        if self.n_weights == 0 || self.n_weights > u32::from(u16::MAX) {
            return bad(format!("weight count must be in [1, 65535], got {}", self.n_weights));
        }
        if self.mode != Mode::Plain && !(self.laplace_scale > 0.0 && self.laplace_scale.is_finite()) {
            return bad(format!("noise scale must be positive, got {}", self.laplace_scale));
        }
        if self.local_size == 0 {
            return bad("local sample size must be positive".into());
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Independent ChaCha20 stream for `(seed, domain, index)`.
pub fn derive_rng(seed: u64, domain: &str, index: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"ppfl/rng/v1");
    h.update((domain.len() as u32).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Subsystem seeds of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub protocol: u64,
    pub network: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            protocol: 2,
            network: 3,
        }
    }
}
