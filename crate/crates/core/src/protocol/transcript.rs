use sha2::{Digest, Sha256};

use super::{Endpoint, Message};
use crate::dpnoise::NoiseDraw;
use crate::ring::RingElem;
use crate::PartyId;

#[derive(Debug, Clone, PartialEq)]
pub struct WireRecord {
    /// Send time in simulated nanoseconds; the plain driver uses a counter.
    pub time_ns: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub message: Message,
}

/// One party's private view of one `(round, weight)` instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyLog {
    pub round: u32,
    pub weight: u32,
    pub party: PartyId,
    /// The locally trained weight before encoding.
    pub weight_value: f64,
    /// Draws behind the pairs this party generated, by receiver.
    pub draws: Vec<NoiseDraw>,
    pub s_masks: Vec<(PartyId, RingElem)>,
    /// Pairwise masks used in the masked value, by peer.
    pub r_masks: Vec<(PartyId, RingElem)>,
    /// The forwarded bundle as received, and the bits chosen over it.
    pub received: Vec<(RingElem, RingElem)>,
    pub bits: Vec<bool>,
    pub local_share: Option<f64>,
    pub y: RingElem,
}

impl PartyLog {
    pub fn new(round: u32, weight: u32, party: PartyId, weight_value: f64) -> Self {
        PartyLog {
            round,
            weight,
            party,
            weight_value,
            draws: Vec::new(),
            s_masks: Vec::new(),
            r_masks: Vec::new(),
            received: Vec::new(),
            bits: Vec::new(),
            local_share: None,
            y: RingElem::default(),
        }
    }

    /// `(chosen, other)` for every received pair.
    pub fn chosen(&self) -> impl Iterator<Item = (RingElem, RingElem)> + '_ {
        self.received
            .iter()
            .zip(&self.bits)
            .map(|(&(eta0, eta1), &b)| if b { (eta1, eta0) } else { (eta0, eta1) })
    }
}

/// The server's view of one `(round, weight)` instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerLog {
    pub round: u32,
    pub weight: u32,
    /// Per receiver: original sender of each forwarded position, and whether
    /// that pair was swapped.
    pub forwarding: Vec<(PartyId, Vec<PartyId>, Vec<bool>)>,
    pub sum: RingElem,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundTranscript {
    pub round: u32,
    /// Setup traffic is filed under round 0.
    pub messages: Vec<WireRecord>,
    pub parties: Vec<PartyLog>,
    pub server: Vec<ServerLog>,
    pub global: Vec<f64>,
}

impl RoundTranscript {
    pub fn party(&self, weight: u32, party: PartyId) -> Option<&PartyLog> {
        self.parties.iter().find(|l| l.weight == weight && l.party == party)
    }

    pub fn server_log(&self, weight: u32) -> Option<&ServerLog> {
        self.server.iter().find(|l| l.weight == weight)
    }
}

/// Receives captured records in a deterministic order.
pub trait TranscriptSink {
    fn record_message(&mut self, record: WireRecord);
    fn record_party(&mut self, log: PartyLog);
    fn record_server(&mut self, log: ServerLog);
    fn end_round(&mut self, round: u32, global: &[f64]);
}

#[derive(Debug, Default)]
pub struct NullSink;

impl TranscriptSink for NullSink {
    fn record_message(&mut self, _: WireRecord) {}
    fn record_party(&mut self, _: PartyLog) {}
    fn record_server(&mut self, _: ServerLog) {}
    fn end_round(&mut self, _: u32, _: &[f64]) {}
}

/// Assembles [`RoundTranscript`]s and hands each one to `on_round`.
pub struct MemorySink<F: FnMut(RoundTranscript)> {
    current: RoundTranscript,
    on_round: F,
}

impl<F: FnMut(RoundTranscript)> MemorySink<F> {
    pub fn new(on_round: F) -> Self {
        MemorySink {
            current: RoundTranscript::default(),
            on_round,
        }
    }
}

impl<F: FnMut(RoundTranscript)> TranscriptSink for MemorySink<F> {
    fn record_message(&mut self, record: WireRecord) {
        self.current.messages.push(record);
    }

    fn record_party(&mut self, log: PartyLog) {
        self.current.parties.push(log);
    }

    fn record_server(&mut self, log: ServerLog) {
        self.current.server.push(log);
    }

    fn end_round(&mut self, round: u32, global: &[f64]) {
        let mut done = std::mem::take(&mut self.current);
        done.round = round;
        done.global = global.to_vec();
        (self.on_round)(done);
        self.current.round = round + 1;
    }
}

/// SHA-256 over a canonical byte serialisation of every record.
#[derive(Debug, Clone, Default)]
pub struct HashSink {
    hasher: Sha256,
    records: u64,
}

impl HashSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }

    fn put(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
    }

    fn endpoint(&mut self, e: Endpoint) {
        match e {
            Endpoint::Server => self.put(&[0]),
            Endpoint::Client(id) => {
                self.put(&[1]);
                self.put(&id.to_le_bytes());
            }
        }
    }
}

impl TranscriptSink for HashSink {
    fn record_message(&mut self, record: WireRecord) {
        self.records += 1;
        self.put(b"M");
        self.put(&record.time_ns.to_le_bytes());
        self.endpoint(record.from);
        self.endpoint(record.to);
        self.put(&record.message.encode());
    }

    fn record_party(&mut self, log: PartyLog) {
        self.records += 1;
        self.put(b"P");
        for v in [log.round, log.weight, log.party] {
            self.put(&v.to_le_bytes());
        }
        self.put(&log.weight_value.to_bits().to_le_bytes());
        for d in &log.draws {
            self.put(&d.receiver.to_le_bytes());
            for g in d.gammas {
                self.put(&g.to_bits().to_le_bytes());
            }
        }
        for (j, s) in &log.s_masks {
            self.put(&j.to_le_bytes());
            self.put(&s.to_le_bytes());
        }
        for (j, r) in &log.r_masks {
            self.put(&j.to_le_bytes());
            self.put(&r.to_le_bytes());
        }
        for (a, b) in &log.received {
            self.put(&a.to_le_bytes());
            self.put(&b.to_le_bytes());
        }
        let bits: Vec<u8> = log.bits.iter().map(|&b| b as u8).collect();
        self.put(&bits);
        if let Some(x) = log.local_share {
            self.put(&x.to_bits().to_le_bytes());
        }
        self.put(&log.y.to_le_bytes());
    }

    fn record_server(&mut self, log: ServerLog) {
        self.records += 1;
        self.put(b"S");
        self.put(&log.round.to_le_bytes());
        self.put(&log.weight.to_le_bytes());
        for (receiver, senders, swaps) in &log.forwarding {
            self.put(&receiver.to_le_bytes());
            for s in senders {
                self.put(&s.to_le_bytes());
            }
            let bits: Vec<u8> = swaps.iter().map(|&b| b as u8).collect();
            self.put(&bits);
        }
        self.put(&log.sum.to_le_bytes());
        self.put(&log.value.to_bits().to_le_bytes());
    }

    fn end_round(&mut self, round: u32, global: &[f64]) {
        self.put(b"R");
        self.put(&round.to_le_bytes());
        for w in global {
            self.put(&w.to_bits().to_le_bytes());
        }
    }
}
