//! Pairwise Diffie-Hellman agreement and labelled mask derivation.
//!
//! The DH output is never used as a mask directly. It is hashed into a
//! 32-byte [`SharedKey`], and every pairwise mask `r` is a PRF of that key
//! applied to a [`MaskLabel`] naming the round, the weight and the pair.
//! Advancing the round in the label is the local key update between
//! protocol iterations; no extra messages are exchanged.
//!
//! The sender-only masks `s` use the same PRF keyed by a party's private
//! [`LocalSeed`].

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ring::RingElem;
use crate::PartyId;

const RFC3526_MODP_2048: &str = "\
    FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1\
    29024E088A67CC74020BBEA63B139B22514A08798E3404DD\
    EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245\
    E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
    EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D\
    C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
    83655D23DCA3AD961C62F356208552BB9ED529077096966D\
    670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
    E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9\
    DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
    15728E5A8AACAA68FFFFFFFFFFFFFFFF";

const SHARED_KEY_DOMAIN: &[u8] = b"ppfl/dh-shared/v1";
const MASK_DOMAIN: &[u8] = b"ppfl/mask/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyExchangeError {
    #[error("unknown Diffie-Hellman group '{0}'")]
    UnknownGroup(String),

    #[error("invalid group parameters: {0}")]
    InvalidParams(&'static str),

    #[error("peer public element is outside [2, p-2]")]
    InvalidPeerPublic,

    #[error("encoded public element has {got} bytes, expected at most {max}")]
    BadEncoding { got: usize, max: usize },
}

/// A multiplicative group modulo a prime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhParams {
    name: String,
    prime: BigUint,
    generator: BigUint,
    /// Order of the subgroup generated by `generator`.
    order: BigUint,
    private_bits: u32,
}

impl DhParams {
    pub fn new(
        name: impl Into<String>,
        prime: BigUint,
        generator: BigUint,
        order: BigUint,
        private_bits: u32,
    ) -> Result<Self, KeyExchangeError> {
        if prime <= BigUint::from(3u32) {
            return Err(KeyExchangeError::InvalidParams("prime too small"));
        }
        let p_minus_one = &prime - 1u32;
        if generator.is_zero() || generator.is_one() || generator >= p_minus_one {
            return Err(KeyExchangeError::InvalidParams("generator must lie in [2, p-2]"));
        }
        if order < BigUint::from(4u32) || order > p_minus_one {
            return Err(KeyExchangeError::InvalidParams("subgroup order out of range"));
        }
        if !generator.modpow(&order, &prime).is_one() {
            return Err(KeyExchangeError::InvalidParams("generator^order != 1"));
        }
        if private_bits < 2 {
            return Err(KeyExchangeError::InvalidParams("private_bits must be at least 2"));
        }
        Ok(Self {
            name: name.into(),
            prime,
            generator,
            order,
            private_bits,
        })
    }

    /// RFC 3526 group 14: a 2048-bit safe prime with generator 2, which
    /// generates the subgroup of prime order (p-1)/2.
    pub fn modp2048() -> Self {
        let prime = BigUint::parse_bytes(RFC3526_MODP_2048.as_bytes(), 16)
            .expect("RFC 3526 constant parses");
        let order = (&prime - 1u32) >> 1;
        Self::new("modp2048", prime, BigUint::from(2u32), order, 256)
            .expect("RFC 3526 group is valid")
    }

    /// p = 23, g = 5. Five is a primitive root, so the group order is 22.
    #[cfg(any(test, feature = "toy-group"))]
    pub fn toy() -> Self {
        Self::new(
            "toy23",
            BigUint::from(23u32),
            BigUint::from(5u32),
            BigUint::from(22u32),
            5,
        )
        .expect("toy group is valid")
    }

    pub fn by_name(name: &str) -> Result<Self, KeyExchangeError> {
        match name {
            "modp2048" => Ok(Self::modp2048()),
            #[cfg(any(test, feature = "toy-group"))]
            "toy23" => Ok(Self::toy()),
            other => Err(KeyExchangeError::UnknownGroup(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn prime(&self) -> &BigUint {
        &self.prime
    }

    pub fn generator(&self) -> &BigUint {
        &self.generator
    }

    pub fn order(&self) -> &BigUint {
        &self.order
    }

    pub fn private_bits(&self) -> u32 {
        self.private_bits
    }

    /// Width of a fixed-size big-endian group element.
    pub fn element_len(&self) -> usize {
        (self.prime.bits() as usize).div_ceil(8)
    }

    /// Largest exponent that may be sampled.
    fn private_max(&self) -> BigUint {
        let by_order = &self.order - 2u32;
        let by_bits = (BigUint::one() << self.private_bits) - 1u32;
        by_order.min(by_bits)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct DhPrivate(BigUint);

impl DhPrivate {
    pub fn from_exponent(exp: BigUint) -> Self {
        DhPrivate(exp)
    }

    pub fn exponent(&self) -> &BigUint {
        &self.0
    }
}

impl std::fmt::Debug for DhPrivate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DhPrivate(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DhPublic(BigUint);

impl DhPublic {
    pub fn element(&self) -> &BigUint {
        &self.0
    }

    /// Fixed-width big-endian encoding.
    pub fn to_bytes(&self, params: &DhParams) -> Vec<u8> {
        fixed_be(&self.0, params.element_len())
    }

    pub fn from_bytes(bytes: &[u8], params: &DhParams) -> Result<Self, KeyExchangeError> {
        if bytes.len() > params.element_len() {
            return Err(KeyExchangeError::BadEncoding {
                got: bytes.len(),
                max: params.element_len(),
            });
        }
        Ok(DhPublic(BigUint::from_bytes_be(bytes)))
    }
}

fn fixed_be(x: &BigUint, len: usize) -> Vec<u8> {
    let raw = x.to_bytes_be();
    let mut out = vec![0u8; len.saturating_sub(raw.len())];
    out.extend_from_slice(&raw);
    out
}

/// Uniform in `[2, max]` by rejection on the bit length of `max`.
fn sample_exponent<R: RngCore + ?Sized>(max: &BigUint, rng: &mut R) -> BigUint {
    let bits = max.bits();
    let nbytes = (bits as usize).div_ceil(8);
    let excess = (nbytes as u64 * 8 - bits) as u32;
    let mut buf = vec![0u8; nbytes];
    let two = BigUint::from(2u32);
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let candidate = BigUint::from_bytes_be(&buf);
        // Degenerate exponents 0 and 1 are resampled.
        if candidate >= two && &candidate <= max {
            return candidate;
        }
    }
}

/// `generator^private mod prime`.
pub fn dh_public(params: &DhParams, private: &DhPrivate) -> DhPublic {
    DhPublic(params.generator.modpow(&private.0, &params.prime))
}

/// Resamples until the public element passes the peer guard, which only
/// matters in tiny groups.
pub fn dh_keygen<R: RngCore + ?Sized>(params: &DhParams, rng: &mut R) -> (DhPrivate, DhPublic) {
    let upper = &params.prime - 2u32;
    loop {
        let private = DhPrivate(sample_exponent(&params.private_max(), rng));
        let public = dh_public(params, &private);
        if public.0 <= upper {
            return (private, public);
        }
    }
}

/// Raw shared group element `peer^private mod prime`, after the
/// small-subgroup guard.
pub fn dh_shared_element(
    private: &DhPrivate,
    peer: &DhPublic,
    params: &DhParams,
) -> Result<BigUint, KeyExchangeError> {
    let upper = &params.prime - 2u32;
    if peer.0 < BigUint::from(2u32) || peer.0 > upper {
        return Err(KeyExchangeError::InvalidPeerPublic);
    }
    Ok(peer.0.modpow(&private.0, &params.prime))
}

pub fn dh_shared(
    private: &DhPrivate,
    peer: &DhPublic,
    params: &DhParams,
) -> Result<SharedKey, KeyExchangeError> {
    let raw = dh_shared_element(private, peer, params)?;
    let mut hasher = Sha256::new();
    hasher.update(SHARED_KEY_DOMAIN);
    hasher.update((params.element_len() as u32).to_le_bytes());
    hasher.update(fixed_be(&raw, params.element_len()));
    Ok(SharedKey(hasher.finalize().into()))
}

/// Anything that can key the mask PRF.
pub trait MaskKey {
    fn material(&self) -> &[u8; 32];
}

/// Hash of a pairwise DH secret. Known to exactly the two parties of a pair.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SharedKey([u8; 32]);

impl SharedKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SharedKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl MaskKey for SharedKey {
    fn material(&self) -> &[u8; 32] {
        &self.0
    }
}

impl std::fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SharedKey({}..)", hex::encode(&self.0[..4]))
    }
}

/// A party's private seed for its noise masks `s`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LocalSeed([u8; 32]);

impl LocalSeed {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        LocalSeed(bytes)
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        LocalSeed(bytes)
    }
}

impl MaskKey for LocalSeed {
    fn material(&self) -> &[u8; 32] {
        &self.0
    }
}

impl std::fmt::Debug for LocalSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LocalSeed(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskKind {
    /// Pairwise mask `r`, shared by both ends of an unordered pair.
    PairwiseR,
    /// Sender-only mask `s` hiding a noise pair.
    NoiseS,
}

impl MaskKind {
    fn tag(self) -> u8 {
        match self {
            MaskKind::PairwiseR => 1,
            MaskKind::NoiseS => 2,
        }
    }
}

/// Names exactly one ring mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskLabel {
    pub kind: MaskKind,
    pub round: u32,
    pub weight_index: u32,
    pub pair: (PartyId, PartyId),
}

impl MaskLabel {
    /// Pairwise labels are canonical: smaller id first.
    pub fn pairwise(round: u32, weight_index: u32, a: PartyId, b: PartyId) -> Self {
        MaskLabel {
            kind: MaskKind::PairwiseR,
            round,
            weight_index,
            pair: (a.min(b), a.max(b)),
        }
    }

    /// Noise labels keep direction: `(sender, receiver)`.
    pub fn noise(round: u32, weight_index: u32, sender: PartyId, receiver: PartyId) -> Self {
        MaskLabel {
            kind: MaskKind::NoiseS,
            round,
            weight_index,
            pair: (sender, receiver),
        }
    }

    /// The same mask slot one round later.
    pub fn next_round(self) -> Self {
        MaskLabel {
            round: self.round + 1,
            ..self
        }
    }

    /// Everything but the weight index: the labels that share one stream.
    fn stream_bytes(self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[0] = self.kind.tag();
        out[1..5].copy_from_slice(&self.round.to_le_bytes());
        out[5..9].copy_from_slice(&self.pair.0.to_le_bytes());
        out[9..13].copy_from_slice(&self.pair.1.to_le_bytes());
        out
    }
}

/// The masks of every weight for one `(kind, round, pair)`, in weight order.
///
/// A ChaCha20 keystream seeded with SHA-256(domain || key || kind || round ||
/// pair); the mask for weight `w` is its little-endian 64-bit word `w`.
#[derive(Debug, Clone)]
pub struct MaskStream(ChaCha20Rng);

impl MaskStream {
    pub fn new<K: MaskKey + ?Sized>(key: &K, label: &MaskLabel) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(MASK_DOMAIN);
        hasher.update(key.material());
        hasher.update(label.stream_bytes());
        let mut rng = ChaCha20Rng::from_seed(hasher.finalize().into());
        rng.set_word_pos(2 * u128::from(label.weight_index));
        MaskStream(rng)
    }
}

impl Iterator for MaskStream {
    type Item = RingElem;

    fn next(&mut self) -> Option<RingElem> {
        Some(RingElem(self.0.next_u64()))
    }
}

/// PRF from `(key, label)` onto the ring.
pub fn derive_mask<K: MaskKey + ?Sized>(key: &K, label: &MaskLabel) -> RingElem {
    RingElem(MaskStream::new(key, label).0.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn toy_private(x: u32) -> DhPrivate {
        DhPrivate::from_exponent(BigUint::from(x))
    }

    /// Repeated multiplication, independent of `modpow`.
    fn brute_pow(base: u64, exp: u64, modulus: u64) -> u64 {
        (0..exp).fold(1u64, |acc, _| acc * base % modulus)
    }

    #[test]
    fn toy_public_values() {
        let params = DhParams::toy();
        assert_eq!(brute_pow(5, 6, 23), 8);
        assert_eq!(brute_pow(5, 15, 23), 19);
        assert_eq!(dh_public(&params, &toy_private(6)).element(), &BigUint::from(8u32));
        assert_eq!(dh_public(&params, &toy_private(15)).element(), &BigUint::from(19u32));
    }

    #[test]
    fn toy_shared_values_agree() {
        let params = DhParams::toy();
        assert_eq!(brute_pow(19, 6, 23), 2);
        assert_eq!(brute_pow(8, 15, 23), 2);
        let pub_a = dh_public(&params, &toy_private(6));
        let pub_b = dh_public(&params, &toy_private(15));
        let raw_a = dh_shared_element(&toy_private(6), &pub_b, &params).unwrap();
        let raw_b = dh_shared_element(&toy_private(15), &pub_a, &params).unwrap();
        assert_eq!(raw_a, BigUint::from(2u32));
        assert_eq!(raw_a, raw_b);
        assert_eq!(
            dh_shared(&toy_private(6), &pub_b, &params).unwrap(),
            dh_shared(&toy_private(15), &pub_a, &params).unwrap()
        );
    }

    #[test]
    fn keygen_never_yields_degenerate_exponents() {
        let params = DhParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (private, public) = dh_keygen(&params, &mut rng);
            let e = private.exponent();
            assert!(*e >= BigUint::from(2u32) && *e <= BigUint::from(20u32));
            assert_eq!(public, dh_public(&params, &private));
        }
    }

    #[test]
    fn small_subgroup_guard() {
        let params = DhParams::toy();
        let private = toy_private(6);
        for bad in [0u32, 1, 22, 23, 40] {
            let peer = DhPublic(BigUint::from(bad));
            assert_eq!(
                dh_shared(&private, &peer, &params),
                Err(KeyExchangeError::InvalidPeerPublic)
            );
        }
    }

    #[test]
    fn parameter_sanity() {
        let p = BigUint::from(23u32);
        for g in [0u32, 1, 22] {
            assert!(DhParams::new("bad", p.clone(), BigUint::from(g), BigUint::from(22u32), 5).is_err());
        }
        assert!(DhParams::by_name("nope").is_err());
    }

    #[test]
    fn modp2048_pair_agrees() {
        let params = DhParams::modp2048();
        assert_eq!(params.element_len(), 256);
        assert_eq!(params.private_bits(), 256);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let (a, pa) = dh_keygen(&params, &mut rng);
        let (b, pb) = dh_keygen(&params, &mut rng);
        let bytes = pa.to_bytes(&params);
        assert_eq!(bytes.len(), 256);
        let pa = DhPublic::from_bytes(&bytes, &params).unwrap();
        assert_eq!(
            dh_shared(&a, &pb, &params).unwrap(),
            dh_shared(&b, &pa, &params).unwrap()
        );
    }

    #[test]
    fn mask_derivation_is_deterministic_and_label_separated() {
        let key = SharedKey::from_bytes([7u8; 32]);
        let l0 = MaskLabel::pairwise(0, 3, 1, 2);
        assert_eq!(derive_mask(&key, &l0), derive_mask(&key, &l0));
        assert_ne!(derive_mask(&key, &l0), derive_mask(&key, &l0.next_round()));
        assert_ne!(
            derive_mask(&key, &l0),
            derive_mask(&key, &MaskLabel::pairwise(0, 4, 1, 2))
        );
        // Pairwise labels are symmetric, noise labels are not.
        assert_eq!(MaskLabel::pairwise(0, 0, 5, 2), MaskLabel::pairwise(0, 0, 2, 5));
        assert_ne!(MaskLabel::noise(0, 0, 5, 2), MaskLabel::noise(0, 0, 2, 5));
        let seed = LocalSeed::from_bytes([7u8; 32]);
        let ln = MaskLabel::noise(0, 3, 1, 2);
        assert_ne!(derive_mask(&seed, &ln), derive_mask(&key, &l0));
    }

    #[test]
    fn stream_matches_pointwise_derivation() {
        let key = SharedKey::from_bytes([9u8; 32]);
        let base = MaskLabel::pairwise(4, 0, 3, 8);
        let streamed: Vec<RingElem> = MaskStream::new(&key, &base).take(105).collect();
        for (w, m) in streamed.iter().enumerate() {
            let label = MaskLabel { weight_index: w as u32, ..base };
            assert_eq!(*m, derive_mask(&key, &label));
        }
        let offset: Vec<RingElem> =
            MaskStream::new(&key, &MaskLabel { weight_index: 100, ..base }).take(5).collect();
        assert_eq!(offset, streamed[100..]);
    }

    #[test]
    fn derived_mask_bytes_are_uniform() {
        let key = SharedKey::from_bytes([5u8; 32]);
        let mut counts = [0u64; 256];
        for i in 0..100_000u32 {
            let label = MaskLabel::pairwise(i / 105, i % 105, 0, 1);
            for b in derive_mask(&key, &label).to_le_bytes() {
                counts[b as usize] += 1;
            }
        }
        let expected = 800_000.0 / 256.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(255.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi-square {stat}, p {p}");
    }
}
