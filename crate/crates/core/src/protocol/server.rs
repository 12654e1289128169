use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{
    derive_rng, Category, Endpoint, Message, Mode, Op, ProtocolError, ProtocolParams, Result, Seeds, ServerLog,
    Step, BROADCAST,
};
use crate::dpnoise::NoisePair;
use crate::ring::{decode_sum, ring_sum, RingElem};
use crate::PartyId;

/// A receiver's bundle after permutation, with the server's secrets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forwarded {
    pub pairs: Vec<(RingElem, RingElem)>,
    /// Original sender of each output position.
    pub senders: Vec<PartyId>,
    /// Whether the pair at each output position was swapped.
    pub swaps: Vec<bool>,
}

/// Applies fixed choices: output `k` is input `order[k]`, swapped when
/// `swap[order[k]]`.
pub fn permute_pairs(pairs: &[NoisePair], swap: &[bool], order: &[usize]) -> Forwarded {
    let mut out = Forwarded {
        pairs: Vec::with_capacity(order.len()),
        senders: Vec::with_capacity(order.len()),
        swaps: Vec::with_capacity(order.len()),
    };
    for &i in order {
        let p = if swap[i] { pairs[i].swapped() } else { pairs[i] };
        out.pairs.push((p.eta0, p.eta1));
        out.senders.push(p.sender);
        out.swaps.push(swap[i]);
    }
    out
}

/// Swaps each pair with probability 1/2 and shuffles the list uniformly.
/// The ring values themselves are never altered.
pub fn server_forward_noise<R: Rng + ?Sized>(pairs: &[NoisePair], rng: &mut R) -> Forwarded {
    let swap: Vec<bool> = (0..pairs.len()).map(|_| rng.random::<bool>()).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    permute_pairs(pairs, &swap, &order)
}

pub struct ServerState {
    params: Arc<ProtocolParams>,
    rng: ChaCha20Rng,
    keys_seen: Vec<bool>,
    round: u32,
    weight: u32,
    uploads: Vec<Option<Vec<NoisePair>>>,
    n_uploads: usize,
    forwarded: bool,
    ys: Vec<Option<RingElem>>,
    n_ys: usize,
    forwarding_log: Vec<(PartyId, Vec<PartyId>, Vec<bool>)>,
    global: Vec<f64>,
    completed: Vec<(u32, Vec<f64>)>,
    logs: Vec<ServerLog>,
}

impl std::fmt::Debug for ServerState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerState")
            .field("round", &self.round)
            .field("weight", &self.weight)
            .field("uploads", &self.n_uploads)
            .field("masked", &self.n_ys)
            .finish_non_exhaustive()
    }
}

impl ServerState {
    pub fn new(params: Arc<ProtocolParams>, seeds: &Seeds) -> Result<Self> {
        params.validate()?;
        let n = params.n;
        Ok(ServerState {
            rng: derive_rng(seeds.protocol, "server", 0),
            keys_seen: vec![false; n],
            round: 0,
            weight: 0,
            uploads: vec![None; n],
            n_uploads: 0,
            forwarded: false,
            ys: vec![None; n],
            n_ys: 0,
            forwarding_log: Vec::new(),
            global: Vec::with_capacity(params.n_weights as usize),
            completed: Vec::new(),
            logs: Vec::new(),
            params,
        })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn weight(&self) -> u32 {
        self.weight
    }

    pub fn is_done(&self) -> bool {
        self.round == self.params.rounds
    }

    /// Rounds whose every weight has been broadcast since the last call.
    pub fn take_completed(&mut self) -> Vec<(u32, Vec<f64>)> {
        std::mem::take(&mut self.completed)
    }

    pub fn drain_logs(&mut self) -> Vec<ServerLog> {
        std::mem::take(&mut self.logs)
    }

    /// Which party the server is still waiting on, for stall reports.
    pub fn waiting_on(&self) -> String {
        fn missing<T>(have: &[Option<T>]) -> Vec<usize> {
            have.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect()
        }
        if self.keys_seen.iter().any(|&s| !s) {
            let absent: Vec<usize> = self.keys_seen.iter().enumerate().filter(|(_, &s)| !s).map(|(i, _)| i).collect();
            return format!("setup: no public key from clients {absent:?}");
        }
        if self.params.mode == Mode::Oblivious && !self.forwarded {
            return format!(
                "round {} weight {}: noise uploads missing from clients {:?}",
                self.round,
                self.weight,
                missing(&self.uploads)
            );
        }
        format!(
            "round {} weight {}: masked values missing from clients {:?}",
            self.round,
            self.weight,
            missing(&self.ys)
        )
    }

    fn unexpected(&self, msg: &Message, detail: impl Into<String>) -> ProtocolError {
        ProtocolError::Unexpected {
            at: Endpoint::Server,
            kind: msg.kind(),
            detail: detail.into(),
        }
    }

    fn check_sender(&self, sender: PartyId) -> Result<usize> {
        if (sender as usize) < self.params.n {
            Ok(sender as usize)
        } else {
            Err(ProtocolError::UnknownParty(sender))
        }
    }

    pub fn handle(&mut self, msg: Message) -> Result<Step> {
        if self.is_done() {
            return Err(self.unexpected(&msg, "protocol already finished"));
        }
        if let Some(slot) = msg.slot() {
            if slot != (self.round, self.weight) {
                return Err(self.unexpected(
                    &msg,
                    format!("for {slot:?} while aggregating {:?}", (self.round, self.weight)),
                ));
            }
        }
        match msg {
            Message::DhPubKey {
                sender,
                recipient,
                public,
            } => {
                let i = self.check_sender(sender)?;
                if recipient != BROADCAST || self.keys_seen[i] {
                    return Err(ProtocolError::DuplicateKey {
                        party: sender,
                        peer: recipient,
                    });
                }
                self.keys_seen[i] = true;
                let mut step = Step::default();
                for j in (0..self.params.n as PartyId).filter(|&j| j != sender) {
                    step.send(
                        Endpoint::Client(j),
                        Message::DhPubKey {
                            sender,
                            recipient: j,
                            public: public.clone(),
                        },
                    );
                }
                Ok(step)
            }
            Message::NoiseUpload { sender, ref pairs, .. } => {
                if self.params.mode != Mode::Oblivious {
                    return Err(self.unexpected(&msg, "noise pairs outside oblivious mode"));
                }
                let i = self.check_sender(sender)?;
                if self.uploads[i].is_some() {
                    return Err(self.unexpected(&msg, format!("second upload from {sender}")));
                }
                let mut targets = vec![false; self.params.n];
                for p in pairs {
                    let j = p.receiver as usize;
                    if j >= self.params.n {
                        return Err(ProtocolError::UnknownParty(p.receiver));
                    }
                    if p.sender != sender || j == i || std::mem::replace(&mut targets[j], true) {
                        return Err(self.unexpected(&msg, format!("malformed pair {}->{}", p.sender, p.receiver)));
                    }
                }
                if pairs.len() != self.params.n - 1 {
                    return Err(self.unexpected(&msg, format!("{} pairs, expected {}", pairs.len(), self.params.n - 1)));
                }
                let Message::NoiseUpload { pairs, .. } = msg else { unreachable!() };
                self.uploads[i] = Some(pairs);
                self.n_uploads += 1;
                if self.n_uploads < self.params.n {
                    return Ok(Step::default());
                }
                Ok(self.forward_all())
            }
            Message::MaskedWeight { sender, y, .. } => {
                let i = self.check_sender(sender)?;
                if self.params.mode == Mode::Oblivious && !self.forwarded {
                    return Err(self.unexpected(&msg, "masked value before noise was forwarded"));
                }
                if self.ys[i].is_some() {
                    return Err(self.unexpected(&msg, format!("second masked value from {sender}")));
                }
                self.ys[i] = Some(y);
                self.n_ys += 1;
                if self.n_ys < self.params.n {
                    return Ok(Step::default());
                }
                self.aggregate()
            }
            other => Err(self.unexpected(&other, "the server does not accept this")),
        }
    }

    fn forward_all(&mut self) -> Step {
        let n = self.params.n;
        let mut inbound: Vec<Vec<NoisePair>> = (0..n).map(|_| Vec::with_capacity(n - 1)).collect();
        for upload in self.uploads.iter_mut() {
            for p in upload.take().expect("all uploads present") {
                inbound[p.receiver as usize].push(p);
            }
        }
        self.n_uploads = 0;
        self.forwarded = true;
        let capture = self.params.capture.wants(self.weight);
        let mut step = Step::default();
        for (j, pairs) in inbound.iter().enumerate() {
            let fwd = server_forward_noise(pairs, &mut self.rng);
            if capture {
                self.forwarding_log.push((j as PartyId, fwd.senders, fwd.swaps));
            }
            step.send(
                Endpoint::Client(j as PartyId),
                Message::NoiseBundle {
                    round: self.round,
                    weight: self.weight,
                    receiver: j as PartyId,
                    pairs: fwd.pairs,
                },
            );
        }
        step.charge(Category::ServerAgg, Op::Shuffle, (n * (n - 1)) as u64);
        step
    }

    /// Sums the masked values, decodes, divides by `n` and broadcasts.
    fn aggregate(&mut self) -> Result<Step> {
        let n = self.params.n;
        let ys: Vec<RingElem> = self.ys.iter_mut().map(|y| y.take().expect("all present")).collect();
        let sum = ring_sum(&ys);
        let value = decode_sum(sum, &self.params.fixed_point, n * (n + 1))? / n as f64;
        self.n_ys = 0;
        self.forwarded = false;

        let mut step = Step::default();
        step.charge(Category::ServerAgg, Op::RingAdd, n as u64);
        step.charge(Category::ServerAgg, Op::Encode, 1);
        for j in 0..n as PartyId {
            step.send(
                Endpoint::Client(j),
                Message::GlobalWeight {
                    round: self.round,
                    weight: self.weight,
                    value,
                },
            );
        }
        if self.params.capture.wants(self.weight) {
            self.logs.push(ServerLog {
                round: self.round,
                weight: self.weight,
                forwarding: std::mem::take(&mut self.forwarding_log),
                sum,
                value,
            });
        }
        self.global.push(value);
        self.weight += 1;
        if self.weight == self.params.n_weights {
            let done = std::mem::replace(&mut self.global, Vec::with_capacity(self.params.n_weights as usize));
            self.completed.push((self.round, done));
            self.round += 1;
            self.weight = 0;
        }
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn pair(sender: PartyId, a: u64, b: u64) -> NoisePair {
        NoisePair {
            eta0: RingElem(a),
            eta1: RingElem(b),
            sender,
            receiver: 0,
        }
    }

    #[test]
    fn forced_swap_bits() {
        let p = [pair(1, 10, 20)];
        assert_eq!(permute_pairs(&p, &[false], &[0]).pairs, vec![(RingElem(10), RingElem(20))]);
        let swapped = permute_pairs(&p, &[true], &[0]);
        assert_eq!(swapped.pairs, vec![(RingElem(20), RingElem(10))]);
        assert_eq!(swapped.swaps, vec![true]);
        assert_eq!(swapped.senders, vec![1]);
    }

    #[test]
    fn forwarding_preserves_the_multiset_of_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let inbound: Vec<NoisePair> = (1..=99).map(|j| pair(j, rng.random(), rng.random())).collect();
        let out = server_forward_noise(&inbound, &mut rng);
        assert_eq!(out.pairs.len(), 99);
        let canon = |a: RingElem, b: RingElem| if a <= b { (a, b) } else { (b, a) };
        let mut want: Vec<_> = inbound.iter().map(|p| canon(p.eta0, p.eta1)).collect();
        let mut got: Vec<_> = out.pairs.iter().map(|&(a, b)| canon(a, b)).collect();
        want.sort();
        got.sort();
        assert_eq!(want, got);
        for (k, &(a, b)) in out.pairs.iter().enumerate() {
            let orig = inbound.iter().find(|p| p.sender == out.senders[k]).unwrap();
            let expect = if out.swaps[k] { (orig.eta1, orig.eta0) } else { (orig.eta0, orig.eta1) };
            assert_eq!((a, b), expect);
        }
        let swaps = out.swaps.iter().filter(|&&s| s).count();
        assert!((25..=75).contains(&swaps), "{swaps} swaps");
        assert_ne!(out.senders, (1..=99).collect::<Vec<_>>());
    }
}
