//! Distributed Laplace noise built from gamma differences.
//!
//! Laplace(λ) is infinitely divisible: the sum of `n` independent
//! `Gamma(1/n, λ) - Gamma(1/n, λ)` draws is exactly Laplace(λ). Each party can
//! therefore contribute one share, either added locally (the non-oblivious
//! baseline) or handed to a peer as a masked pair of candidates from which the
//! peer picks one blindly (the oblivious mechanism).

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::ops::Range;

use crate::keyexchange::{LocalSeed, MaskLabel, MaskStream};
use crate::ring::{encode, FixedPointParams, RingElem, RingError};
use crate::PartyId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("a noise pair cannot be addressed to its own sender {0}")]
    SelfAddressed(PartyId),

    #[error("need at least two parties, got {0}")]
    TooFewParties(usize),

    #[error(transparent)]
    Encode(#[from] RingError),
}

fn positive(name: &'static str, value: f64) -> Result<f64, NoiseError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(NoiseError::NonPositive { name, value })
    }
}

/// Inputs of the sensitivity bound `2 / (n k α)` and the privacy loss ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    /// The α of the sensitivity bound.
    pub alpha: f64,
    pub n_parties: usize,
    /// Size of the smallest local dataset.
    pub k_min: usize,
}

impl DpParams {
    pub fn new(epsilon: f64, alpha: f64, n_parties: usize, k_min: usize) -> Result<Self, NoiseError> {
        positive("epsilon", epsilon)?;
        positive("alpha", alpha)?;
        if n_parties < 2 {
            return Err(NoiseError::TooFewParties(n_parties));
        }
        positive("k_min", k_min as f64)?;
        Ok(Self {
            epsilon,
            alpha,
            n_parties,
            k_min,
        })
    }

    pub fn laplace_scale(&self) -> f64 {
        laplace_scale(self.epsilon, self.alpha, self.n_parties, self.k_min)
            .expect("validated on construction")
    }

    /// Shape of each party's gamma share, `1/n`.
    pub fn share_shape(&self) -> f64 {
        1.0 / self.n_parties as f64
    }
}

/// `2 / (n k α ε)`.
pub fn laplace_scale(epsilon: f64, alpha: f64, n: usize, k: usize) -> Result<f64, NoiseError> {
    positive("epsilon", epsilon)?;
    positive("alpha", alpha)?;
    positive("n", n as f64)?;
    positive("k", k as f64)?;
    Ok(2.0 / (n as f64 * k as f64 * alpha * epsilon))
}

/// Gamma(shape, scale) draws. Shapes below one are handled exactly by
/// `rand_distr` through the `U^(1/shape)` boost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSampler {
    shape: f64,
    scale: f64,
    inner: Gamma<f64>,
}

impl GammaSampler {
    pub fn new(shape: f64, scale: f64) -> Result<Self, NoiseError> {
        positive("shape", shape)?;
        positive("scale", scale)?;
        let inner = Gamma::new(shape, scale).map_err(|_| NoiseError::NonPositive { name: "shape", value: shape })?;
        Ok(Self { shape, scale, inner })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.inner.sample(rng)
    }

    /// One `Gamma - Gamma` difference with this shape and scale.
    pub fn sample_difference<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sample(rng) - self.sample(rng)
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64, NoiseError> {
    Ok(GammaSampler::new(shape, scale)?.sample(rng))
}

/// One party's additive share of Laplace(scale) when `n` parties each add
/// their own share: `Gamma(1/n, scale) - Gamma(1/n, scale)`.
pub fn local_laplace_share<R: Rng + ?Sized>(scale: f64, n: usize, rng: &mut R) -> Result<f64, NoiseError> {
    positive("n", n as f64)?;
    let sampler = GammaSampler::new(1.0 / n as f64, scale)?;
    Ok(sampler.sample_difference(rng))
}

/// Two masked candidate noises from `sender` for `receiver`:
/// `eta_b = s + encode(γ^b - γ̄^b)` with one mask `s` known only to the sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoisePair {
    pub eta0: RingElem,
    pub eta1: RingElem,
    pub sender: PartyId,
    pub receiver: PartyId,
}

impl NoisePair {
    pub fn swapped(self) -> Self {
        NoisePair {
            eta0: self.eta1,
            eta1: self.eta0,
            ..self
        }
    }

    pub fn pick(&self, bit: bool) -> RingElem {
        if bit {
            self.eta1
        } else {
            self.eta0
        }
    }
}

/// A receiver's private choice bits, one per received pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseChoice {
    pub bits: Vec<bool>,
}

impl NoiseChoice {
    pub fn sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        NoiseChoice {
            bits: (0..len).map(|_| rng.random::<bool>()).collect(),
        }
    }
}

/// Test hook for the noise draws. `Zero` forces every gamma variate to 0 so
/// that masking can be checked in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseHook {
    #[default]
    Live,
    Zero,
}

/// Cleartext record of the four gamma variates behind one noise pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub sender: PartyId,
    pub receiver: PartyId,
    pub weight_index: u32,
    /// γ⁰, γ̄⁰, γ¹, γ̄¹ in that order.
    pub gammas: [f64; 4],
}

impl NoiseDraw {
    pub fn diff0(&self) -> f64 {
        self.gammas[0] - self.gammas[1]
    }

    pub fn diff1(&self) -> f64 {
        self.gammas[2] - self.gammas[3]
    }
}

/// One pair `s + encode(γ⁰ - γ̄⁰)`, `s + encode(γ¹ - γ̄¹)` under the given mask.
#[allow(clippy::too_many_arguments)]
pub fn masked_pair<R: Rng + ?Sized>(
    sender: PartyId,
    receiver: PartyId,
    weight_index: u32,
    s: RingElem,
    sampler: &GammaSampler,
    rng: &mut R,
    fixed_point: &FixedPointParams,
    hook: NoiseHook,
) -> Result<(NoisePair, NoiseDraw), NoiseError> {
    if receiver == sender {
        return Err(NoiseError::SelfAddressed(sender));
    }
    let gammas = match hook {
        NoiseHook::Live => [
            sampler.sample(rng),
            sampler.sample(rng),
            sampler.sample(rng),
            sampler.sample(rng),
        ],
        NoiseHook::Zero => [0.0; 4],
    };
    let draw = NoiseDraw {
        sender,
        receiver,
        weight_index,
        gammas,
    };
    let pair = NoisePair {
        eta0: s + encode(draw.diff0(), fixed_point)?,
        eta1: s + encode(draw.diff1(), fixed_point)?,
        sender,
        receiver,
    };
    Ok((pair, draw))
}

/// Builds the masked noise pairs `sender` hands to each of `receivers` for
/// one `(round, weight_index)`.
#[allow(clippy::too_many_arguments)]
pub fn make_noise_pairs<R: Rng + ?Sized>(
    sender: PartyId,
    receivers: &[PartyId],
    sampler: &GammaSampler,
    mask_source: &LocalSeed,
    rng: &mut R,
    round: u32,
    weight_index: u32,
    fixed_point: &FixedPointParams,
    hook: NoiseHook,
    log: Option<&mut Vec<NoiseDraw>>,
) -> Result<Vec<NoisePair>, NoiseError> {
    let mut per_weight = make_noise_pairs_for_weights(
        sender,
        receivers,
        sampler,
        mask_source,
        rng,
        round,
        weight_index..weight_index + 1,
        fixed_point,
        hook,
        log,
    )?;
    Ok(per_weight.pop().unwrap_or_default())
}

/// [`make_noise_pairs`] for a contiguous range of weights at once, outer
/// index by weight. Draws are taken weight by weight, receiver by receiver.
#[allow(clippy::too_many_arguments)]
pub fn make_noise_pairs_for_weights<R: Rng + ?Sized>(
    sender: PartyId,
    receivers: &[PartyId],
    sampler: &GammaSampler,
    mask_source: &LocalSeed,
    rng: &mut R,
    round: u32,
    weights: Range<u32>,
    fixed_point: &FixedPointParams,
    hook: NoiseHook,
    mut log: Option<&mut Vec<NoiseDraw>>,
) -> Result<Vec<Vec<NoisePair>>, NoiseError> {
    if receivers.contains(&sender) {
        return Err(NoiseError::SelfAddressed(sender));
    }
    let mut masks: Vec<MaskStream> = receivers
        .iter()
        .map(|&j| MaskStream::new(mask_source, &MaskLabel::noise(round, weights.start, sender, j)))
        .collect();
    let mut out = Vec::with_capacity(weights.len());
    for weight_index in weights {
        let mut pairs = Vec::with_capacity(receivers.len());
        for (&receiver, mask) in receivers.iter().zip(masks.iter_mut()) {
            let s = mask.next().expect("mask streams are unbounded");
            let (pair, draw) = masked_pair(sender, receiver, weight_index, s, sampler, rng, fixed_point, hook)?;
            pairs.push(pair);
            if let Some(log) = log.as_deref_mut() {
                log.push(draw);
            }
        }
        out.push(pairs);
    }
    Ok(out)
}
