use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::dpnoise::{GammaSampler, NoisePair};
use crate::keyexchange::{dh_keygen, DhParams, LocalSeed, MaskLabel, MaskStream};
use crate::protocol::{server_forward_noise, Op, Work};
use crate::regression::{loss_and_gradient, synthetic};
use crate::ring::{encode, FixedPointParams, RingElem};

/// Simulated nanoseconds per primitive operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostTable {
    ns: BTreeMap<Op, u64>,
}

impl CostTable {
    /// Host-independent constants, roughly the order of magnitude of a
    /// current desktop core.
    pub fn synthetic() -> Self {
        CostTable {
            ns: BTreeMap::from([
                (Op::ModExp, 1_000_000),
                (Op::KeyDerive, 1_000),
                (Op::MaskWord, 20),
                (Op::GammaDraw, 100),
                (Op::Encode, 10),
                (Op::RingAdd, 2),
                (Op::GradientRow, 300),
                (Op::Shuffle, 30),
            ]),
        }
    }

    pub fn uniform(ns: u64) -> Self {
        CostTable {
            ns: Op::ALL.into_iter().map(|op| (op, ns)).collect(),
        }
    }

    /// Times each primitive on this host. Takes a few hundred milliseconds.
    pub fn calibrated(dh: &DhParams, n_features: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let per = |reps: u32, mut f: Box<dyn FnMut() + '_>| {
            let t = Instant::now();
            for _ in 0..reps {
                f();
            }
            ((t.elapsed().as_nanos() / u128::from(reps)) as u64).max(1)
        };
        let mod_exp = per(8, Box::new(|| {
            black_box(dh_keygen(dh, &mut rng));
        }));
        let seed = LocalSeed::from_bytes([7; 32]);
        let mut round = 0u32;
        let key_derive = per(2_000, Box::new(|| {
            round += 1;
            black_box(MaskStream::new(&seed, &MaskLabel::noise(round, 0, 0, 1)));
        }));
        let mut stream = MaskStream::new(&seed, &MaskLabel::noise(0, 0, 0, 1));
        let mask_word = per(100_000, Box::new(|| {
            black_box(stream.next());
        }));
        let sampler = GammaSampler::new(0.01, 1.0).expect("valid sampler");
        let mut grng = ChaCha20Rng::seed_from_u64(1);
        let gamma = per(100_000, Box::new(|| {
            black_box(sampler.sample(&mut grng));
        }));
        let fp = FixedPointParams::default();
        let mut x = 0.0f64;
        let enc = per(100_000, Box::new(|| {
            x += 1e-3;
            black_box(encode(black_box(x), &fp).ok());
        }));
        let mut acc = RingElem::default();
        let add = per(1_000_000, Box::new(|| {
            acc += black_box(RingElem(3));
        }));
        black_box(acc);
        let data = synthetic(200, n_features.max(2), 3).expect("synthetic data");
        let w = vec![0.01; n_features.max(2)];
        let grad = per(20, Box::new(|| {
            black_box(loss_and_gradient(&w, &data, 1e-4).ok());
        }));
        let pairs: Vec<NoisePair> = (0..1000)
            .map(|j| NoisePair {
                eta0: RingElem(j),
                eta1: RingElem(j + 1),
                sender: j as u32 + 1,
                receiver: 0,
            })
            .collect();
        let mut srng = ChaCha20Rng::seed_from_u64(2);
        let shuffle = per(20, Box::new(|| {
            black_box(server_forward_noise(&pairs, &mut srng));
        }));
        CostTable {
            ns: BTreeMap::from([
                (Op::ModExp, mod_exp),
                (Op::KeyDerive, key_derive),
                (Op::MaskWord, mask_word),
                (Op::GammaDraw, gamma),
                (Op::Encode, enc),
                (Op::RingAdd, add),
                (Op::GradientRow, (grad / 200).max(1)),
                (Op::Shuffle, (shuffle / 1000).max(1)),
            ]),
        }
    }

    pub fn with_overrides(mut self, overrides: &BTreeMap<Op, u64>) -> Self {
        self.ns.extend(overrides.iter().map(|(&op, &ns)| (op, ns)));
        self
    }

    pub fn ns(&self, op: Op) -> u64 {
        self.ns.get(&op).copied().unwrap_or(0)
    }

    pub fn cost(&self, work: &Work) -> u64 {
        self.ns(work.op).saturating_mul(work.count)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Op, u64)> + '_ {
        self.ns.iter().map(|(&op, &ns)| (op, ns))
    }
}
