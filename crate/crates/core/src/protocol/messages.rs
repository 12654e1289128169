//! Wire messages of the star topology and their byte encoding.
//!
//! Each record is `len: u32 | kind: u8 | body`, all integers little-endian.
//! Ring elements are 8 bytes, ids and indices 4 bytes, reals are IEEE-754
//! bit patterns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpnoise::NoisePair;
use crate::ring::RingElem;
use crate::PartyId;

/// Recipient id meaning "relay to every other client".
pub const BROADCAST: PartyId = PartyId::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("record truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },

    #[error("unknown message kind {0}")]
    UnknownKind(u8),

    #[error("{0} trailing bytes after record")]
    Trailing(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Server,
    Client(PartyId),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Server => write!(f, "server"),
            Endpoint::Client(id) => write!(f, "client-{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Client to server with `recipient == BROADCAST`, server to client otherwise.
    DhPubKey {
        sender: PartyId,
        recipient: PartyId,
        public: Vec<u8>,
    },
    /// One sender's pairs for every receiver, for one `(round, weight)`.
    NoiseUpload {
        round: u32,
        weight: u32,
        sender: PartyId,
        pairs: Vec<NoisePair>,
    },
    /// The pairs addressed to one receiver after the server's permutation.
    /// Sender ids are stripped.
    NoiseBundle {
        round: u32,
        weight: u32,
        receiver: PartyId,
        pairs: Vec<(RingElem, RingElem)>,
    },
    MaskedWeight {
        round: u32,
        weight: u32,
        sender: PartyId,
        y: RingElem,
    },
    GlobalWeight {
        round: u32,
        weight: u32,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    DhPubKey,
    NoiseUpload,
    NoiseBundle,
    MaskedWeight,
    GlobalWeight,
}

impl MessageKind {
    fn tag(self) -> u8 {
        match self {
            MessageKind::DhPubKey => 1,
            MessageKind::NoiseUpload => 2,
            MessageKind::NoiseBundle => 3,
            MessageKind::MaskedWeight => 4,
            MessageKind::GlobalWeight => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::DhPubKey => "DH_PUBKEY",
            MessageKind::NoiseUpload | MessageKind::NoiseBundle => "NOISE_PAIRS",
            MessageKind::MaskedWeight => "MASKED_WEIGHT",
            MessageKind::GlobalWeight => "GLOBAL_WEIGHT",
        }
    }
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::DhPubKey { .. } => MessageKind::DhPubKey,
            Message::NoiseUpload { .. } => MessageKind::NoiseUpload,
            Message::NoiseBundle { .. } => MessageKind::NoiseBundle,
            Message::MaskedWeight { .. } => MessageKind::MaskedWeight,
            Message::GlobalWeight { .. } => MessageKind::GlobalWeight,
        }
    }

    /// `(round, weight)` for per-weight traffic.
    pub fn slot(&self) -> Option<(u32, u32)> {
        match *self {
            Message::DhPubKey { .. } => None,
            Message::NoiseUpload { round, weight, .. }
            | Message::NoiseBundle { round, weight, .. }
            | Message::MaskedWeight { round, weight, .. }
            | Message::GlobalWeight { round, weight, .. } => Some((round, weight)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = vec![self.kind().tag()];
        match self {
            Message::DhPubKey {
                sender,
                recipient,
                public,
            } => {
                put_u32(&mut body, *sender);
                put_u32(&mut body, *recipient);
                put_u32(&mut body, public.len() as u32);
                body.extend_from_slice(public);
            }
            Message::NoiseUpload {
                round,
                weight,
                sender,
                pairs,
            } => {
                put_u32(&mut body, *round);
                put_u32(&mut body, *weight);
                put_u32(&mut body, *sender);
                put_u32(&mut body, pairs.len() as u32);
                for p in pairs {
                    put_u32(&mut body, p.receiver);
                    body.extend_from_slice(&p.eta0.to_le_bytes());
                    body.extend_from_slice(&p.eta1.to_le_bytes());
                }
            }
            Message::NoiseBundle {
                round,
                weight,
                receiver,
                pairs,
            } => {
                put_u32(&mut body, *round);
                put_u32(&mut body, *weight);
                put_u32(&mut body, *receiver);
                put_u32(&mut body, pairs.len() as u32);
                for (a, b) in pairs {
                    body.extend_from_slice(&a.to_le_bytes());
                    body.extend_from_slice(&b.to_le_bytes());
                }
            }
            Message::MaskedWeight {
                round,
                weight,
                sender,
                y,
            } => {
                put_u32(&mut body, *round);
                put_u32(&mut body, *weight);
                put_u32(&mut body, *sender);
                body.extend_from_slice(&y.to_le_bytes());
            }
            Message::GlobalWeight {
                round,
                weight,
                value,
            } => {
                put_u32(&mut body, *round);
                put_u32(&mut body, *weight);
                body.extend_from_slice(&value.to_bits().to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(4 + body.len());
        put_u32(&mut out, body.len() as u32);
        out.extend_from_slice(&body);
        out
    }

    /// Size of [`Message::encode`]'s output without building it.
    pub fn encoded_len(&self) -> usize {
        5 + match self {
            Message::DhPubKey { public, .. } => 12 + public.len(),
            Message::NoiseUpload { pairs, .. } => 16 + 20 * pairs.len(),
            Message::NoiseBundle { pairs, .. } => 16 + 16 * pairs.len(),
            Message::MaskedWeight { .. } => 20,
            Message::GlobalWeight { .. } => 16,
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader { bytes, at: 0 };
        let len = r.u32()? as usize;
        r.need(len)?;
        if bytes.len() > 4 + len {
            return Err(WireError::Trailing(bytes.len() - 4 - len));
        }
        let msg = match r.u8()? {
            1 => {
                let sender = r.u32()?;
                let recipient = r.u32()?;
                let n = r.u32()? as usize;
                Message::DhPubKey {
                    sender,
                    recipient,
                    public: r.take(n)?.to_vec(),
                }
            }
            2 => {
                let (round, weight, sender) = (r.u32()?, r.u32()?, r.u32()?);
                let n = r.u32()? as usize;
                r.need(n.saturating_mul(20))?;
                let pairs = (0..n)
                    .map(|_| {
                        let receiver = r.u32()?;
                        Ok(NoisePair {
                            eta0: r.ring()?,
                            eta1: r.ring()?,
                            sender,
                            receiver,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                Message::NoiseUpload {
                    round,
                    weight,
                    sender,
                    pairs,
                }
            }
            3 => {
                let (round, weight, receiver) = (r.u32()?, r.u32()?, r.u32()?);
                let n = r.u32()? as usize;
                r.need(n.saturating_mul(16))?;
                let pairs = (0..n)
                    .map(|_| Ok((r.ring()?, r.ring()?)))
                    .collect::<Result<_, WireError>>()?;
                Message::NoiseBundle {
                    round,
                    weight,
                    receiver,
                    pairs,
                }
            }
            4 => Message::MaskedWeight {
                round: r.u32()?,
                weight: r.u32()?,
                sender: r.u32()?,
                y: r.ring()?,
            },
            5 => Message::GlobalWeight {
                round: r.u32()?,
                weight: r.u32()?,
                value: f64::from_bits(r.u64()?),
            },
            other => return Err(WireError::UnknownKind(other)),
        };
        if r.at != bytes.len() {
            return Err(WireError::Trailing(bytes.len() - r.at));
        }
        Ok(msg)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<(), WireError> {
        let have = self.bytes.len() - self.at;
        if have < n {
            Err(WireError::Truncated { need: n, have })
        } else {
            Ok(())
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        self.need(n)?;
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn ring(&mut self) -> Result<RingElem, WireError> {
        Ok(RingElem(self.u64()?))
    }
}
