use std::collections::VecDeque;
use std::sync::Arc;

use super::{
    ClientPhase, ClientState, Endpoint, Message, ProtocolError, ProtocolParams, Result, Seeds, ServerState, Step,
    TranscriptSink, WireRecord,
};
use crate::exec;
use crate::regression::Dataset;
use crate::PartyId;

/// Outputs of one completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    /// What the server broadcast.
    pub global: Vec<f64>,
    /// Noise-free mean of the clients' trained weights, for evaluation only.
    pub exact_average: Vec<f64>,
}

/// All parties of one run, addressable by endpoint.
pub struct Federation {
    params: Arc<ProtocolParams>,
    clients: Vec<ClientState>,
    server: ServerState,
}

impl Federation {
    /// Builds every party; the returned steps carry the public keys.
    pub fn setup(
        params: Arc<ProtocolParams>,
        seeds: &Seeds,
        train: Arc<Dataset>,
    ) -> Result<(Self, Vec<(Endpoint, Step)>)> {
        params.validate()?;
        let server = ServerState::new(Arc::clone(&params), seeds)?;
        let made = exec::map_range(params.n, |i| {
            ClientState::setup(i as PartyId, Arc::clone(&params), seeds, Arc::clone(&train))
        });
        let mut clients = Vec::with_capacity(params.n);
        let mut steps = Vec::with_capacity(params.n);
        for (i, item) in made.into_iter().enumerate() {
            let (client, step) = item?;
            clients.push(client);
            steps.push((Endpoint::Client(i as PartyId), step));
        }
        Ok((
            Federation {
                params,
                clients,
                server,
            },
            steps,
        ))
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn client(&self, id: PartyId) -> &ClientState {
        &self.clients[id as usize]
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn deliver(&mut self, to: Endpoint, msg: Message) -> Result<Step> {
        match to {
            Endpoint::Server => self.server.handle(msg),
            Endpoint::Client(id) => self
                .clients
                .get_mut(id as usize)
                .ok_or(ProtocolError::UnknownParty(id))?
                .handle(msg),
        }
    }

    /// Moves private logs produced by `at` into `sink`.
    pub fn flush_logs(&mut self, at: Endpoint, sink: &mut dyn TranscriptSink) {
        match at {
            Endpoint::Server => self.server.drain_logs().into_iter().for_each(|l| sink.record_server(l)),
            Endpoint::Client(id) => self.clients[id as usize]
                .drain_logs()
                .into_iter()
                .for_each(|l| sink.record_party(l)),
        }
    }

    /// Rounds the server finished since the last call.
    pub fn take_completed(&mut self) -> Vec<RoundOutcome> {
        let m = self.params.n_weights as usize;
        self.server
            .take_completed()
            .into_iter()
            .map(|(round, global)| {
                let mut exact_average = vec![0.0; m];
                for c in &self.clients {
                    debug_assert_eq!(c.round(), round);
                    for (acc, w) in exact_average.iter_mut().zip(c.local_weights()) {
                        *acc += w;
                    }
                }
                for v in &mut exact_average {
                    *v /= self.clients.len() as f64;
                }
                RoundOutcome {
                    round,
                    global,
                    exact_average,
                }
            })
            .collect()
    }

    pub fn is_done(&self) -> bool {
        self.server.is_done() && self.clients.iter().all(|c| c.phase() == ClientPhase::Done)
    }

    pub fn stall_report(&self) -> String {
        let lagging: Vec<String> = self
            .clients
            .iter()
            .filter(|c| c.phase() != ClientPhase::Done)
            .take(5)
            .map(|c| format!("client {} in {:?} at round {}", c.id(), c.phase(), c.round()))
            .collect();
        format!("{}; {}", self.server.waiting_on(), lagging.join(", "))
    }

    /// Whether `msg` belongs to a captured instance.
    pub fn captures(&self, msg: &Message) -> bool {
        match msg.slot() {
            Some((_, weight)) => self.params.capture.wants(weight),
            None => self.params.capture.any(),
        }
    }

    /// Delivers messages in FIFO order until nothing is left. Times in the
    /// transcript are send sequence numbers.
    pub fn run_fifo(
        &mut self,
        initial: Vec<(Endpoint, Step)>,
        sink: &mut dyn TranscriptSink,
        mut on_round: impl FnMut(&RoundOutcome),
    ) -> Result<Vec<RoundOutcome>> {
        let mut queue: VecDeque<(Endpoint, Message)> = VecDeque::new();
        let mut sent = 0u64;
        let mut outcomes = Vec::new();
        let mut enqueue = |fed: &Federation, from: Endpoint, step: Step, queue: &mut VecDeque<_>, sink: &mut dyn TranscriptSink| {
            for (to, msg) in step.out {
                if fed.captures(&msg) {
                    sink.record_message(WireRecord {
                        time_ns: sent,
                        from,
                        to,
                        message: msg.clone(),
                    });
                }
                sent += 1;
                queue.push_back((to, msg));
            }
        };
        for (from, step) in initial {
            enqueue(self, from, step, &mut queue, sink);
        }
        while let Some((to, msg)) = queue.pop_front() {
            let step = self.deliver(to, msg)?;
            self.flush_logs(to, sink);
            enqueue(self, to, step, &mut queue, sink);
            for outcome in self.take_completed() {
                sink.end_round(outcome.round, &outcome.global);
                on_round(&outcome);
                outcomes.push(outcome);
            }
        }
        if !self.is_done() {
            return Err(ProtocolError::Stalled(self.stall_report()));
        }
        Ok(outcomes)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, HashSet};

    use super::*;
    use crate::dpnoise::NoiseHook;
    use crate::keyexchange::{DhParams, MaskLabel, MaskStream};
    use crate::protocol::{
        Capture, HashSink, MemorySink, MessageKind, Mode, NullSink, PartyLog, RoundTranscript, ServerLog,
    };
    use crate::regression::{synthetic, TrainConfig};
    use crate::ring::{decode_sum, ring_sum, FixedPointParams};

    fn params(n: usize, mode: Mode, hook: NoiseHook, rounds: u32, n_weights: u32, dh: DhParams) -> ProtocolParams {
        ProtocolParams {
            n,
            mode,
            rounds,
            n_weights,
            fixed_point: FixedPointParams::default(),
            laplace_scale: 0.5,
            hook,
            dh: Arc::new(dh),
            train: TrainConfig {
                learning_rate: 0.5,
                iterations: 5,
                reg_alpha: 1e-4,
            },
            local_size: 20,
            capture: Capture::Everything,
        }
    }

    fn run(p: ProtocolParams, sink: &mut dyn TranscriptSink) -> Vec<RoundOutcome> {
        let data = Arc::new(synthetic(200, p.n_weights as usize, 9).unwrap());
        let (mut fed, initial) = Federation::setup(Arc::new(p), &Seeds::default(), data).unwrap();
        fed.run_fifo(initial, sink, |_| {}).unwrap()
    }

    fn transcripts(p: ProtocolParams) -> Vec<RoundTranscript> {
        let mut out = Vec::new();
        let mut sink = MemorySink::new(|t| out.push(t));
        run(p, &mut sink);
        drop(sink);
        out
    }

    #[derive(Default)]
    struct Counter {
        by_kind: BTreeMap<MessageKind, usize>,
        into_client: BTreeMap<(MessageKind, PartyId), usize>,
    }

    impl TranscriptSink for Counter {
        fn record_message(&mut self, r: WireRecord) {
            *self.by_kind.entry(r.message.kind()).or_default() += 1;
            if let Endpoint::Client(c) = r.to {
                *self.into_client.entry((r.message.kind(), c)).or_default() += 1;
            }
        }
        fn record_party(&mut self, _: PartyLog) {}
        fn record_server(&mut self, _: ServerLog) {}
        fn end_round(&mut self, _: u32, _: &[f64]) {}
    }

    #[test]
    fn plain_matches_exact_average() {
        let out = run(params(5, Mode::Plain, NoiseHook::Live, 3, 4, DhParams::toy()), &mut NullSink);
        assert_eq!(out.len(), 3);
        for o in &out {
            for (g, e) in o.global.iter().zip(&o.exact_average) {
                assert!((g - e).abs() <= 2f64.powi(-20), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn zero_noise_modes_are_bit_identical() {
        let plain = run(params(4, Mode::Plain, NoiseHook::Live, 3, 3, DhParams::toy()), &mut NullSink);
        for mode in [Mode::NonOblivious, Mode::Oblivious] {
            let other = run(params(4, mode, NoiseHook::Zero, 3, 3, DhParams::toy()), &mut NullSink);
            for (a, b) in plain.iter().zip(&other) {
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.global), bits(&b.global), "{mode:?}");
            }
        }
    }

    #[test]
    fn live_noise_moves_the_output() {
        let plain = run(params(4, Mode::Plain, NoiseHook::Live, 1, 3, DhParams::toy()), &mut NullSink);
        let noisy = run(params(4, Mode::Oblivious, NoiseHook::Live, 1, 3, DhParams::toy()), &mut NullSink);
        assert_ne!(plain[0].global, noisy[0].global);
        assert_eq!(plain[0].exact_average, noisy[0].exact_average);
    }

    #[test]
    fn message_counts_follow_the_round_structure() {
        let (n, rounds, m) = (4usize, 2u32, 3u32);
        let mut c = Counter::default();
        run(params(n, Mode::Oblivious, NoiseHook::Live, rounds, m, DhParams::toy()), &mut c);
        let per = (rounds * m) as usize;
        assert_eq!(c.by_kind[&MessageKind::DhPubKey], n + n * (n - 1));
        assert_eq!(c.by_kind[&MessageKind::NoiseUpload], n * per);
        assert_eq!(c.by_kind[&MessageKind::NoiseBundle], n * per);
        assert_eq!(c.by_kind[&MessageKind::MaskedWeight], n * per);
        assert_eq!(c.by_kind[&MessageKind::GlobalWeight], n * per);
        for i in 0..n as PartyId {
            assert_eq!(c.into_client[&(MessageKind::DhPubKey, i)], n - 1);
            assert_eq!(c.into_client[&(MessageKind::NoiseBundle, i)], per);
            assert_eq!(c.into_client[&(MessageKind::GlobalWeight, i)], per);
        }

        let mut plain = Counter::default();
        run(params(n, Mode::Plain, NoiseHook::Live, rounds, m, DhParams::toy()), &mut plain);
        assert!(!plain.by_kind.contains_key(&MessageKind::NoiseUpload));
        assert!(!plain.by_kind.contains_key(&MessageKind::NoiseBundle));
        assert_eq!(plain.by_kind[&MessageKind::MaskedWeight], n * per);
    }

    #[test]
    fn two_clients_exchange_one_pair_each_way() {
        let t = transcripts(params(2, Mode::Oblivious, NoiseHook::Live, 1, 2, DhParams::toy()));
        for rec in &t[0].messages {
            match &rec.message {
                Message::NoiseUpload { pairs, .. } => assert_eq!(pairs.len(), 1),
                Message::NoiseBundle { pairs, .. } => assert_eq!(pairs.len(), 1),
                _ => {}
            }
        }
        let data = Arc::new(synthetic(50, 2, 1).unwrap());
        let p = params(2, Mode::Oblivious, NoiseHook::Live, 1, 2, DhParams::toy());
        let (mut fed, initial) = Federation::setup(Arc::new(p), &Seeds::default(), data).unwrap();
        fed.run_fifo(initial, &mut NullSink, |_| {}).unwrap();
        assert!(fed.clients().iter().all(|c| c.shared_key_count() == 1));
    }

    #[test]
    fn replaying_masked_values_reproduces_the_output() {
        let n = 4;
        let p = params(n, Mode::Oblivious, NoiseHook::Live, 2, 3, DhParams::toy());
        let fp = p.fixed_point;
        for t in transcripts(p) {
            for w in 0..3 {
                let ys: Vec<_> = t
                    .messages
                    .iter()
                    .filter_map(|r| match r.message {
                        Message::MaskedWeight { weight, y, .. } if weight == w => Some(y),
                        _ => None,
                    })
                    .collect();
                assert_eq!(ys.len(), n);
                let log = t.server_log(w).unwrap();
                assert_eq!(ring_sum(&ys), log.sum);
                let replayed = decode_sum(ring_sum(&ys), &fp, n * (n + 1)).unwrap() / n as f64;
                assert_eq!(replayed.to_bits(), log.value.to_bits());
                assert_eq!(t.global[w as usize].to_bits(), log.value.to_bits());
            }
        }
    }

    #[test]
    fn masks_cancel_leaving_only_chosen_noise() {
        let n = 5;
        let p = params(n, Mode::Oblivious, NoiseHook::Live, 2, 2, DhParams::toy());
        let fp = p.fixed_point;
        for t in transcripts(p) {
            for w in 0..2 {
                let log = t.server_log(w).unwrap();
                let mut expect = crate::ring::RingElem::default();
                for i in 0..n as PartyId {
                    let party = t.party(w, i).unwrap();
                    let chosen: crate::ring::RingElem = party.chosen().map(|(c, _)| c).sum();
                    let s: crate::ring::RingElem = party.s_masks.iter().map(|&(_, s)| s).sum();
                    expect += crate::ring::encode(party.weight_value, &fp).unwrap() + chosen - s;
                }
                assert_eq!(expect, log.sum);
            }
        }
    }

    #[test]
    fn pairwise_masks_agree_and_advance_with_the_round() {
        let n = 3;
        let data = Arc::new(synthetic(100, 2, 4).unwrap());
        let p = Arc::new(params(n, Mode::Plain, NoiseHook::Live, 3, 2, DhParams::toy()));
        let (mut fed, initial) = Federation::setup(Arc::clone(&p), &Seeds::default(), data).unwrap();
        let mut ts = Vec::new();
        let mut sink = MemorySink::new(|t| ts.push(t));
        fed.run_fifo(initial, &mut sink, |_| {}).unwrap();
        drop(sink);
        for t in &ts {
            for w in 0..2u32 {
                for i in 0..n as PartyId {
                    for &(j, r) in &t.party(w, i).unwrap().r_masks {
                        let key = fed.client(i).shared_key(j).unwrap();
                        let label = MaskLabel::pairwise(t.round, w, i, j);
                        assert_eq!(MaskStream::new(key, &label).next().unwrap(), r);
                        let theirs = t.party(w, j).unwrap().r_masks.iter().find(|&&(k, _)| k == i).unwrap().1;
                        assert_eq!(theirs, r);
                    }
                }
            }
        }
    }

    #[test]
    fn no_mask_repeats_over_twenty_rounds() {
        let (n, rounds, m) = (10usize, 20u32, 105u32);
        let mut p = params(n, Mode::Oblivious, NoiseHook::Live, rounds, m, DhParams::modp2048());
        p.train.iterations = 1;
        p.capture = Capture::Everything;
        let mut r_seen = HashSet::new();
        let mut s_seen = HashSet::new();
        let mut r_total = 0usize;
        let mut sink = MemorySink::new(|t: RoundTranscript| {
            for log in &t.parties {
                for &(j, r) in &log.r_masks {
                    if j > log.party {
                        r_total += 1;
                        assert!(r_seen.insert(r.0), "pairwise mask repeated");
                    }
                }
                for &(_, s) in &log.s_masks {
                    assert!(s_seen.insert(s.0), "noise mask repeated");
                }
            }
        });
        run(p, &mut sink);
        drop(sink);
        assert_eq!(r_total, rounds as usize * m as usize * n * (n - 1) / 2);
        assert_eq!(s_seen.len(), rounds as usize * m as usize * n * (n - 1));
    }

    #[test]
    fn identical_seeds_give_identical_transcripts() {
        let hash = || {
            let mut sink = HashSink::new();
            run(params(4, Mode::Oblivious, NoiseHook::Live, 2, 3, DhParams::toy()), &mut sink);
            sink.finish()
        };
        assert_eq!(hash(), hash());
    }

    #[test]
    fn missing_key_stalls_with_a_report() {
        let data = Arc::new(synthetic(50, 2, 1).unwrap());
        let p = Arc::new(params(3, Mode::Plain, NoiseHook::Live, 1, 2, DhParams::toy()));
        let (mut fed, mut initial) = Federation::setup(p, &Seeds::default(), data).unwrap();
        initial.remove(1);
        match fed.run_fifo(initial, &mut NullSink, |_| {}) {
            Err(ProtocolError::Stalled(why)) => assert!(why.contains("[1]"), "{why}"),
            other => panic!("expected a stall, got {other:?}"),
        }
    }

    #[test]
    fn out_of_place_messages_are_rejected() {
        let data = Arc::new(synthetic(50, 2, 1).unwrap());
        let p = Arc::new(params(3, Mode::Plain, NoiseHook::Live, 1, 2, DhParams::toy()));
        let (mut fed, _) = Federation::setup(p, &Seeds::default(), data).unwrap();
        let global = Message::GlobalWeight {
            round: 0,
            weight: 0,
            value: 1.0,
        };
        assert!(matches!(
            fed.deliver(Endpoint::Server, global.clone()),
            Err(ProtocolError::Unexpected { .. })
        ));
        assert!(matches!(
            fed.deliver(Endpoint::Client(0), global),
            Err(ProtocolError::Unexpected { .. })
        ));
        assert!(matches!(
            fed.deliver(Endpoint::Client(7), Message::GlobalWeight { round: 0, weight: 0, value: 0.0 }),
            Err(ProtocolError::UnknownParty(7))
        ));
    }
}
