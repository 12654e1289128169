use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    derive_rng, Category, Endpoint, Message, Mode, Op, PartyLog, ProtocolError, ProtocolParams, Result, Seeds,
    Step, BROADCAST,
};
use crate::dpnoise::{local_laplace_share, masked_pair, GammaSampler, NoiseChoice, NoiseHook};
use crate::exec;
use crate::keyexchange::{
    dh_keygen, dh_shared, DhPrivate, DhPublic, LocalSeed, MaskLabel, MaskStream, SharedKey,
};
use crate::regression::{local_train, sample_local, Dataset, Weights};
use crate::ring::{encode, RingElem};
use crate::PartyId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    AwaitingKeys,
    AwaitingBundle,
    AwaitingGlobal,
    Done,
}

/// The masked value of one weight:
/// `encode(w) + Σ_{j>i} r_ij - Σ_{j<i} r_ji + Σ chosen η - Σ_j s_ij (+ encode(share))`.
pub fn client_round1(
    encoded_weight: RingElem,
    r_above: RingElem,
    r_below: RingElem,
    chosen: &[RingElem],
    own_masks: RingElem,
    share: Option<RingElem>,
) -> RingElem {
    encoded_weight + r_above - r_below + chosen.iter().sum::<RingElem>() - own_masks + share.unwrap_or_default()
}

/// Gamma stream of one `(round, receiver)` under a client's noise seed,
/// consumed weight by weight.
fn noise_rng(seed: &[u8; 32], round: u32, receiver: PartyId) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    rng.set_stream(u64::from(round) << 32 | u64::from(receiver));
    rng
}

pub struct ClientState {
    id: PartyId,
    params: Arc<ProtocolParams>,
    sampler: Option<GammaSampler>,
    private: DhPrivate,
    peer_keys: BTreeMap<PartyId, DhPublic>,
    shared: Vec<Option<SharedKey>>,
    local_seed: LocalSeed,
    noise_seed: [u8; 32],
    choice_rng: ChaCha20Rng,
    share_rng: ChaCha20Rng,
    data_rng: ChaCha20Rng,
    train_data: Arc<Dataset>,
    phase: ClientPhase,
    round: u32,
    weight: u32,
    start: Weights,
    local: Weights,
    global: Weights,
    /// Pairwise mask streams with the sign of their contribution.
    r_streams: Vec<(PartyId, MaskStream, bool)>,
    s_streams: Vec<(PartyId, MaskStream, ChaCha20Rng)>,
    s_sum: RingElem,
    draft: Option<PartyLog>,
    logs: Vec<PartyLog>,
}

impl std::fmt::Debug for ClientState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientState")
            .field("id", &self.id)
            .field("phase", &self.phase)
            .field("round", &self.round)
            .field("weight", &self.weight)
            .finish_non_exhaustive()
    }
}

impl ClientState {
    /// Key generation; the returned step carries this client's public key.
    pub fn setup(
        id: PartyId,
        params: Arc<ProtocolParams>,
        seeds: &Seeds,
        train_data: Arc<Dataset>,
    ) -> Result<(Self, Step)> {
        params.validate()?;
        if id as usize >= params.n {
            return Err(ProtocolError::UnknownParty(id));
        }
        if train_data.n_cols() != params.n_weights as usize {
            return Err(ProtocolError::InvalidParams(format!(
                "data has {} columns but the model has {} weights",
                train_data.n_cols(),
                params.n_weights
            )));
        }
        let mut rng = derive_rng(seeds.protocol, "client", u64::from(id));
        let (private, public) = dh_keygen(&params.dh, &mut rng);
        let local_seed = LocalSeed::random(&mut rng);
        let mut noise_seed = [0u8; 32];
        rng.fill_bytes(&mut noise_seed);
        let sampler = match params.mode {
            Mode::Plain => None,
            _ => Some(GammaSampler::new(1.0 / params.n as f64, params.laplace_scale)?),
        };
        let m = params.n_weights as usize;
        let mut step = Step::default();
        step.charge(Category::DhSetup, Op::ModExp, 1);
        step.send(
            Endpoint::Server,
            Message::DhPubKey {
                sender: id,
                recipient: BROADCAST,
                public: public.to_bytes(&params.dh),
            },
        );
        let state = ClientState {
            id,
            sampler,
            private,
            peer_keys: BTreeMap::new(),
            shared: vec![None; params.n],
            local_seed,
            noise_seed,
            choice_rng: derive_rng(seeds.protocol, "client-choice", u64::from(id)),
            share_rng: derive_rng(seeds.protocol, "client-share", u64::from(id)),
            data_rng: derive_rng(seeds.data, "client-data", u64::from(id)),
            train_data,
            phase: ClientPhase::AwaitingKeys,
            round: 0,
            weight: 0,
            start: vec![0.0; m],
            local: Vec::new(),
            global: Vec::new(),
            r_streams: Vec::new(),
            s_streams: Vec::new(),
            s_sum: RingElem::default(),
            draft: None,
            logs: Vec::new(),
            params,
        };
        Ok((state, step))
    }

    pub fn id(&self) -> PartyId {
        self.id
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Weights trained locally in the current round.
    pub fn local_weights(&self) -> &[f64] {
        &self.local
    }

    /// Starting point of the current round's training.
    pub fn start_weights(&self) -> &[f64] {
        &self.start
    }

    pub fn shared_key_count(&self) -> usize {
        self.shared.iter().flatten().count()
    }

    pub fn shared_key(&self, peer: PartyId) -> Option<&SharedKey> {
        self.shared.get(peer as usize).and_then(Option::as_ref)
    }

    pub fn drain_logs(&mut self) -> Vec<PartyLog> {
        std::mem::take(&mut self.logs)
    }

    fn peers(&self) -> impl Iterator<Item = PartyId> + '_ {
        (0..self.params.n as PartyId).filter(move |&j| j != self.id)
    }

    fn unexpected(&self, msg: &Message, detail: impl Into<String>) -> ProtocolError {
        ProtocolError::Unexpected {
            at: Endpoint::Client(self.id),
            kind: msg.kind(),
            detail: detail.into(),
        }
    }

    pub fn handle(&mut self, msg: Message) -> Result<Step> {
        match (&msg, self.phase) {
            (Message::DhPubKey { .. }, ClientPhase::AwaitingKeys) => {
                let Message::DhPubKey {
                    sender,
                    recipient,
                    public,
                } = msg
                else {
                    unreachable!()
                };
                self.on_key(sender, recipient, &public)
            }
            (Message::NoiseBundle { round, weight, receiver, pairs }, ClientPhase::AwaitingBundle) => {
                if (*round, *weight) != (self.round, self.weight) || *receiver != self.id {
                    return Err(self.unexpected(
                        &msg,
                        format!("bundle for round {round} weight {weight} receiver {receiver}"),
                    ));
                }
                if pairs.len() != self.params.n - 1 {
                    return Err(self.unexpected(&msg, format!("{} pairs, expected {}", pairs.len(), self.params.n - 1)));
                }
                let Message::NoiseBundle { pairs, .. } = msg else { unreachable!() };
                self.emit_masked(Some(pairs))
            }
            (&Message::GlobalWeight { round, weight, value }, ClientPhase::AwaitingGlobal) => {
                if (round, weight) != (self.round, self.weight) {
                    return Err(self.unexpected(&msg, format!("global for round {round} weight {weight}")));
                }
                self.on_global(value)
            }
            (_, phase) => Err(self.unexpected(&msg, format!("in phase {phase:?}"))),
        }
    }

    fn on_key(&mut self, sender: PartyId, recipient: PartyId, public: &[u8]) -> Result<Step> {
        if recipient != self.id || sender == self.id || sender as usize >= self.params.n {
            return Err(ProtocolError::UnknownParty(sender));
        }
        if self.peer_keys.contains_key(&sender) {
            return Err(ProtocolError::DuplicateKey {
                party: self.id,
                peer: sender,
            });
        }
        self.peer_keys.insert(sender, DhPublic::from_bytes(public, &self.params.dh)?);
        if self.peer_keys.len() < self.params.n - 1 {
            return Ok(Step::default());
        }

        let peers: Vec<(PartyId, DhPublic)> = std::mem::take(&mut self.peer_keys).into_iter().collect();
        let (private, dh) = (&self.private, &self.params.dh);
        let keys = exec::map(&peers, |(_, public)| dh_shared(private, public, dh));
        for ((peer, _), key) in peers.iter().zip(keys) {
            self.shared[*peer as usize] = Some(key?);
        }
        let mut step = Step::default();
        step.charge(Category::DhSetup, Op::ModExp, peers.len() as u64);
        step.charge(Category::DhSetup, Op::KeyDerive, peers.len() as u64);
        step.extend(self.start_round()?);
        Ok(step)
    }

    fn start_round(&mut self) -> Result<Step> {
        let mut step = Step::default();
        let p = Arc::clone(&self.params);
        let sample = sample_local(&self.train_data, p.local_size, 1, &mut self.data_rng)?
            .pop()
            .expect("one sample requested");
        self.local = local_train(&sample, &self.start, &p.train)?;
        step.charge(Category::Training, Op::GradientRow, (p.train.iterations * p.local_size) as u64);

        let peers: Vec<PartyId> = self.peers().collect();
        self.r_streams = peers
            .iter()
            .map(|&j| {
                let key = self.shared[j as usize].as_ref().expect("keys established before training");
                (j, MaskStream::new(key, &MaskLabel::pairwise(self.round, 0, self.id, j)), j > self.id)
            })
            .collect();
        step.charge(Category::Encryption, Op::KeyDerive, peers.len() as u64);
        if p.mode == Mode::Oblivious {
            self.s_streams = peers
                .iter()
                .map(|&j| {
                    (
                        j,
                        MaskStream::new(&self.local_seed, &MaskLabel::noise(self.round, 0, self.id, j)),
                        noise_rng(&self.noise_seed, self.round, j),
                    )
                })
                .collect();
            step.charge(Category::Encryption, Op::KeyDerive, peers.len() as u64);
        }
        self.weight = 0;
        self.global = Vec::with_capacity(p.n_weights as usize);
        step.extend(self.begin_weight()?);
        Ok(step)
    }

    fn begin_weight(&mut self) -> Result<Step> {
        let p = Arc::clone(&self.params);
        let k = self.weight as usize;
        self.draft = p
            .capture
            .wants(self.weight)
            .then(|| PartyLog::new(self.round, self.weight, self.id, self.local[k]));
        if p.mode != Mode::Oblivious {
            return self.emit_masked(None);
        }

        let sampler = self.sampler.expect("oblivious mode has a sampler");
        let (id, round, weight) = (self.id, self.round, self.weight);
        let made = exec::map_mut(&mut self.s_streams, |(j, stream, rng)| {
            let s = stream.next().expect("mask streams are unbounded");
            masked_pair(id, *j, weight, s, &sampler, rng, &p.fixed_point, p.hook).map(|(pair, draw)| (pair, draw, s))
        });
        let mut pairs = Vec::with_capacity(made.len());
        self.s_sum = RingElem::default();
        for item in made {
            let (pair, draw, s) = item?;
            self.s_sum += s;
            if let Some(log) = self.draft.as_mut() {
                log.draws.push(draw);
                log.s_masks.push((pair.receiver, s));
            }
            pairs.push(pair);
        }

        let mut step = Step::default();
        let peers = pairs.len() as u64;
        if p.hook == NoiseHook::Live {
            step.charge(Category::Encryption, Op::GammaDraw, 4 * peers);
        }
        step.charge(Category::Encryption, Op::MaskWord, peers);
        step.charge(Category::Encryption, Op::Encode, 2 * peers);
        step.charge(Category::Encryption, Op::RingAdd, 3 * peers);
        step.send(
            Endpoint::Server,
            Message::NoiseUpload {
                round,
                weight,
                sender: id,
                pairs,
            },
        );
        self.phase = ClientPhase::AwaitingBundle;
        Ok(step)
    }

    fn emit_masked(&mut self, bundle: Option<Vec<(RingElem, RingElem)>>) -> Result<Step> {
        let p = Arc::clone(&self.params);
        let mut step = Step::default();
        let encoded = encode(self.local[self.weight as usize], &p.fixed_point)?;
        let (mut above, mut below) = (RingElem::default(), RingElem::default());
        for (j, stream, is_above) in &mut self.r_streams {
            let r = stream.next().expect("mask streams are unbounded");
            if let Some(log) = self.draft.as_mut() {
                log.r_masks.push((*j, r));
            }
            if *is_above {
                above += r;
            } else {
                below += r;
            }
        }
        step.charge(Category::Encryption, Op::MaskWord, self.r_streams.len() as u64);

        let mut chosen = Vec::new();
        if let Some(pairs) = bundle {
            let choice = NoiseChoice::sample(pairs.len(), &mut self.choice_rng);
            chosen = pairs
                .iter()
                .zip(&choice.bits)
                .map(|(&(eta0, eta1), &b)| if b { eta1 } else { eta0 })
                .collect();
            if let Some(log) = self.draft.as_mut() {
                log.bits = choice.bits;
                log.received = pairs;
            }
        }
        let share = if p.mode == Mode::NonOblivious {
            let x = match p.hook {
                NoiseHook::Live => local_laplace_share(p.laplace_scale, p.n, &mut self.share_rng)?,
                NoiseHook::Zero => 0.0,
            };
            if let Some(log) = self.draft.as_mut() {
                log.local_share = Some(x);
            }
            step.charge(Category::Encryption, Op::GammaDraw, 2);
            step.charge(Category::Encryption, Op::Encode, 1);
            Some(encode(x, &p.fixed_point)?)
        } else {
            None
        };
        let s_sum = if p.mode == Mode::Oblivious { self.s_sum } else { RingElem::default() };
        let y = client_round1(encoded, above, below, &chosen, s_sum, share);
        step.charge(Category::Encryption, Op::Encode, 1);
        step.charge(
            Category::Encryption,
            Op::RingAdd,
            (self.r_streams.len() + chosen.len() + 2) as u64,
        );
        if let Some(mut log) = self.draft.take() {
            log.y = y;
            self.logs.push(log);
        }
        step.send(
            Endpoint::Server,
            Message::MaskedWeight {
                round: self.round,
                weight: self.weight,
                sender: self.id,
                y,
            },
        );
        self.phase = ClientPhase::AwaitingGlobal;
        Ok(step)
    }

    fn on_global(&mut self, value: f64) -> Result<Step> {
        self.global.push(value);
        self.weight += 1;
        if self.weight < self.params.n_weights {
            return self.begin_weight();
        }
        self.output_and_ratchet()
    }

    /// Adopts the global model, moves every mask label to the next round
    /// and drops the consumed streams.
    fn output_and_ratchet(&mut self) -> Result<Step> {
        self.start = std::mem::take(&mut self.global);
        self.r_streams.clear();
        self.s_streams.clear();
        self.round += 1;
        if self.round == self.params.rounds {
            self.phase = ClientPhase::Done;
            return Ok(Step::default());
        }
        self.start_round()
    }
}
