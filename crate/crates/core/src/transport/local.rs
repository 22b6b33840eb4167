//! Deterministic in-process transport.
//!
//! Parties start in ascending id order and every frame passes through one
//! FIFO queue, so the same seed and inputs yield byte-identical transcripts.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use super::{
    Direction, InstanceOutput, InstanceRecord, InstanceSpec, LocalNote, ObservedFrame, PartyRound,
    SumInstance, SumTransport, Topology, Transcript, WireMessage,
};
use crate::error::{Error, ProtocolError, Result};
use crate::ring::{ParticipantId, RingVec};

#[derive(Debug, Clone)]
pub struct LocalBus {
    seed: u64,
    round: u32,
    topology: Topology,
    recording: bool,
    transcript: Transcript,
    dropouts: BTreeMap<u32, BTreeSet<ParticipantId>>,
}

impl LocalBus {
    pub fn new(seed: u64) -> Self {
        LocalBus {
            seed,
            round: 0,
            topology: Topology::AllToAll,
            recording: false,
            transcript: Transcript::default(),
            dropouts: BTreeMap::new(),
        }
    }

    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = topology;
        self.transcript.topology = topology;
        self
    }

    pub fn recording(mut self, on: bool) -> Self {
        self.recording = on;
        self
    }

    /// Numbers the first exchange `round` instead of 0.
    pub fn starting_at(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Makes `id` go silent from `round` onward.
    pub fn schedule_dropout(&mut self, id: ParticipantId, round: u32) {
        self.dropouts.entry(round).or_default().insert(id);
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    fn silent(&self, round: u32) -> BTreeSet<ParticipantId> {
        self.dropouts
            .range(..=round)
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect()
    }
}

/// Validates a batch and turns it into shared specs plus per-party inputs.
pub(crate) type PreparedBatch = (
    Vec<Arc<InstanceSpec>>,
    BTreeMap<ParticipantId, HashMap<(u8, u16), RingVec>>,
);

pub(crate) fn prepare_batch(batch: Vec<SumInstance>, round: u32) -> Result<PreparedBatch> {
    if batch.is_empty() {
        return Err(Error::arg("exchange called with an empty batch"));
    }
    let mut specs = Vec::with_capacity(batch.len());
    let mut inputs: BTreeMap<ParticipantId, HashMap<(u8, u16), RingVec>> = BTreeMap::new();
    let mut keys = BTreeSet::new();
    for inst in batch {
        let (spec, per_party) = InstanceSpec::split(inst, round)?;
        if !keys.insert(spec.key()) {
            return Err(Error::arg(format!(
                "two instances share layer {} group {}",
                spec.layer_tag, spec.group_tag
            )));
        }
        for (id, v) in per_party {
            inputs.entry(id).or_default().insert(spec.key(), v);
        }
        specs.push(spec);
    }
    Ok((specs, inputs))
}

pub(crate) fn collect_outputs(
    specs: &[Arc<InstanceSpec>],
    mut results: BTreeMap<ParticipantId, Vec<((u8, u16), RingVec)>>,
) -> Vec<InstanceOutput> {
    specs
        .iter()
        .map(|spec| {
            let delivered = spec
                .delivery
                .iter()
                .filter_map(|id| {
                    let rs = results.get_mut(id)?;
                    let at = rs.iter().position(|(k, _)| *k == spec.key())?;
                    Some((*id, rs.swap_remove(at).1))
                })
                .collect();
            InstanceOutput {
                layer_tag: spec.layer_tag,
                group_tag: spec.group_tag,
                delivered,
            }
        })
        .collect()
}

pub(crate) fn instance_records(specs: &[Arc<InstanceSpec>], round: u32) -> Vec<InstanceRecord> {
    specs
        .iter()
        .map(|s| InstanceRecord {
            round,
            layer_tag: s.layer_tag,
            group_tag: s.group_tag,
            mode: s.mode,
            contributors: s.contributors.clone(),
            delivery: s.delivery.clone(),
            len: s.len,
        })
        .collect()
}

impl SumTransport for LocalBus {
    fn exchange(&mut self, batch: Vec<SumInstance>) -> Result<Vec<InstanceOutput>> {
        let round = self.round;
        self.round += 1;
        let (specs, mut inputs) = prepare_batch(batch, round)?;
        let silent = self.silent(round);

        let mut parties: BTreeMap<ParticipantId, PartyRound> = BTreeMap::new();
        for spec in &specs {
            for id in spec.parties(self.topology) {
                parties.entry(id).or_insert_with(|| {
                    PartyRound::new(
                        id,
                        round,
                        self.topology,
                        self.seed,
                        &specs,
                        inputs.remove(&id).unwrap_or_default(),
                    )
                });
            }
        }

        let mut frames: BTreeMap<ParticipantId, Vec<ObservedFrame>> = BTreeMap::new();
        let mut queue: VecDeque<WireMessage> = VecDeque::new();
        for (id, party) in parties.iter_mut() {
            if !silent.contains(id) {
                queue.extend(party.start()?);
            }
        }
        while let Some(msg) = queue.pop_front() {
            // frames only round-trip through bytes when someone records them
            let bytes = self.recording.then(|| msg.encode());
            if let Some(b) = &bytes {
                frames.entry(msg.sender).or_default().push(ObservedFrame {
                    direction: Direction::Sent,
                    bytes: b.clone(),
                });
            }
            if silent.contains(&msg.recipient) {
                continue;
            }
            let Some(party) = parties.get_mut(&msg.recipient) else {
                return Err(ProtocolError::Unexpected {
                    round,
                    detail: format!("frame for unknown party {}", msg.recipient),
                }
                .into());
            };
            let msg = match bytes {
                Some(b) => {
                    let decoded = WireMessage::decode(&b)?;
                    frames.entry(msg.recipient).or_default().push(ObservedFrame {
                        direction: Direction::Received,
                        bytes: b,
                    });
                    decoded
                }
                None => msg,
            };
            queue.extend(party.handle(msg)?);
        }

        let stalled: Vec<ParticipantId> = parties
            .iter()
            .filter(|(id, p)| !silent.contains(id) && !p.complete())
            .map(|(id, _)| *id)
            .collect();
        if !stalled.is_empty() || parties.keys().any(|id| silent.contains(id)) {
            let missing = parties.keys().filter(|id| silent.contains(id)).copied().collect();
            return Err(ProtocolError::Dropout { round, missing }.into());
        }

        if self.recording {
            for (id, party) in &parties {
                let fs = frames.remove(id).unwrap_or_default();
                self.transcript.absorb_party(*id, fs, party.local_records());
            }
            self.transcript.instances.extend(instance_records(&specs, round));
        }
        let results = parties.iter_mut().map(|(id, p)| (*id, p.take_results())).collect();
        Ok(collect_outputs(&specs, results))
    }

    fn round(&self) -> u32 {
        self.round
    }

    fn topology(&self) -> Topology {
        self.topology
    }

    fn transcript(&self) -> Option<&Transcript> {
        self.recording.then_some(&self.transcript)
    }

    fn note(&mut self, owner: ParticipantId, note: LocalNote) {
        if self.recording {
            self.transcript.notes.entry(owner).or_default().push(note);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::ring::{self, FixedPointCodec};
    use crate::transport::{MessageKind, SumMode};

    fn ids(n: u16) -> Vec<ParticipantId> {
        (0..n).map(ParticipantId).collect()
    }

    fn instance(inputs: Vec<RingVec>, mode: SumMode) -> SumInstance {
        let n = inputs.len() as u16;
        SumInstance {
            layer_tag: 1,
            group_tag: 0,
            mode,
            inputs: ids(n).into_iter().zip(inputs).collect(),
            delivery: ids(n),
        }
    }

    fn plain_sum(inputs: &[RingVec]) -> RingVec {
        ring::reconstruct(inputs).unwrap()
    }

    #[test]
    fn single_participant_gets_its_input() {
        let mut bus = LocalBus::new(1);
        let x = RingVec::new(vec![5, 6, 7]);
        let out = bus.exchange(vec![instance(vec![x.clone()], SumMode::Secure)]).unwrap();
        assert_eq!(out[0].delivered[&ParticipantId(0)], x);
    }

    #[test]
    fn zeros_sum_to_zero() {
        let mut bus = LocalBus::new(1);
        let out = bus
            .exchange(vec![instance(vec![RingVec::zeros(4); 3], SumMode::Secure)])
            .unwrap();
        for v in out[0].delivered.values() {
            assert_eq!(v, &RingVec::zeros(4));
        }
    }

    #[test]
    fn topologies_agree_bit_for_bit() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut a = LocalBus::new(3);
        let mut b = LocalBus::new(4).with_topology(Topology::Aggregator(ParticipantId(0)));
        let mut c = LocalBus::new(5).with_topology(Topology::Aggregator(ParticipantId(99)));
        for _ in 0..100 {
            let inputs: Vec<RingVec> = (0..4).map(|_| RingVec::random(6, &mut rng)).collect();
            let expected = plain_sum(&inputs);
            for bus in [&mut a, &mut b, &mut c] {
                let out = bus.exchange(vec![instance(inputs.clone(), SumMode::Secure)]).unwrap();
                assert_eq!(out[0].delivered.len(), 4);
                for v in out[0].delivered.values() {
                    assert_eq!(v, &expected);
                }
            }
        }
    }

    #[test]
    fn secure_sum_decodes_plain_sum() {
        let codec = FixedPointCodec::default();
        let inputs: BTreeMap<ParticipantId, Vec<f64>> = ids(3)
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, vec![i as f64 * 0.5, -1.25]))
            .collect();
        let mut bus = LocalBus::new(0);
        let sum = ring::secure_sum(&inputs, &codec, &mut bus).unwrap();
        assert_eq!(sum, vec![1.5, -3.75]);
    }

    #[test]
    fn transcripts_are_deterministic() {
        let run = |seed| {
            let mut bus = LocalBus::new(seed).recording(true);
            let inputs = vec![RingVec::new(vec![1, 2]); 3];
            bus.exchange(vec![instance(inputs, SumMode::Secure)]).unwrap();
            bus.into_transcript().frames
        };
        assert_eq!(run(8), run(8));
        assert_ne!(run(8), run(9));
    }

    #[test]
    fn aggregator_observer_message_counts() {
        let mut bus = LocalBus::new(2)
            .with_topology(Topology::Aggregator(ParticipantId(9)))
            .recording(true);
        let inputs = vec![RingVec::new(vec![3]); 3];
        bus.exchange(vec![instance(inputs, SumMode::Secure)]).unwrap();
        let t = bus.transcript().unwrap();
        let seen = t.observed(ParticipantId(1));
        let count = |dir, kind| seen.iter().filter(|(d, m)| *d == dir && m.kind == kind).count();
        assert_eq!(count(Direction::Received, MessageKind::Share), 2);
        assert_eq!(count(Direction::Sent, MessageKind::Share), 2);
        assert_eq!(count(Direction::Sent, MessageKind::Partial), 1);
        assert_eq!(count(Direction::Received, MessageKind::Partial), 0);
        assert_eq!(count(Direction::Received, MessageKind::Result), 1);
    }

    #[test]
    fn replaying_partials_gives_result() {
        let mut bus = LocalBus::new(6).recording(true);
        let inputs = vec![RingVec::new(vec![10, 20]), RingVec::new(vec![1, 2]), RingVec::new(vec![7, 7])];
        let out = bus.exchange(vec![instance(inputs, SumMode::Secure)]).unwrap();
        let t = bus.transcript().unwrap();
        let me = ParticipantId(2);
        let mut partials: Vec<RingVec> = t
            .observed(me)
            .into_iter()
            .filter(|(d, m)| *d == Direction::Received && m.kind == MessageKind::Partial)
            .map(|(_, m)| m.payload)
            .collect();
        // its own partial never goes on the wire: own input share plus received shares
        let local = &t.locals[&me][0];
        let mut own = local.self_share.clone().unwrap();
        for (d, m) in t.observed(me) {
            if d == Direction::Received && m.kind == MessageKind::Share {
                own.add_assign(&m.payload);
            }
        }
        partials.push(own);
        assert_eq!(ring::reconstruct(&partials).unwrap(), out[0].delivered[&me]);
    }

    #[test]
    fn shares_never_equal_the_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut bus = LocalBus::new(4).recording(true);
        let mut inputs_by_round = Vec::new();
        for _ in 0..1000 {
            let inputs: Vec<RingVec> = (0..3).map(|_| RingVec::random(4, &mut rng)).collect();
            bus.exchange(vec![instance(inputs.clone(), SumMode::Secure)]).unwrap();
            inputs_by_round.push(inputs);
        }
        let t = bus.transcript().unwrap();
        for (id, frames) in &t.frames {
            for f in frames {
                let m = f.message();
                if f.direction == Direction::Sent && m.kind == MessageKind::Share {
                    assert_ne!(m.payload, inputs_by_round[m.round as usize][id.0 as usize]);
                }
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut bus = LocalBus::new(1);
        let err = bus
            .exchange(vec![instance(
                vec![RingVec::zeros(2), RingVec::zeros(3)],
                SumMode::Secure,
            )])
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Protocol(ProtocolError::LengthMismatch { round: 0, .. })
        ));
    }

    #[test]
    fn dropout_aborts_with_round() {
        let mut bus = LocalBus::new(1);
        bus.schedule_dropout(ParticipantId(1), 2);
        let inst = || instance(vec![RingVec::zeros(1); 3], SumMode::Secure);
        bus.exchange(vec![inst()]).unwrap();
        bus.exchange(vec![inst()]).unwrap();
        let err = bus.exchange(vec![inst()]).unwrap_err();
        match err {
            Error::Protocol(ProtocolError::Dropout { round, missing }) => {
                assert_eq!(round, 2);
                assert_eq!(missing, vec![ParticipantId(1)]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn delivery_set_limits_results() {
        let mut bus = LocalBus::new(1).recording(true);
        let mut inst = instance(vec![RingVec::new(vec![1]); 4], SumMode::Secure);
        inst.delivery = vec![ParticipantId(0), ParticipantId(2)];
        let out = bus.exchange(vec![inst]).unwrap();
        assert_eq!(
            out[0].delivered.keys().copied().collect::<Vec<_>>(),
            vec![ParticipantId(0), ParticipantId(2)]
        );
        let t = bus.transcript().unwrap();
        assert!(t.locals[&ParticipantId(1)][0].result.is_none());
        assert!(t
            .observed(ParticipantId(1))
            .iter()
            .all(|(d, m)| !(*d == Direction::Received && m.kind == MessageKind::Partial)));
    }

    #[test]
    fn plain_mode_sends_inputs_in_clear() {
        let mut bus = LocalBus::new(1).recording(true);
        let inputs = vec![RingVec::new(vec![5]), RingVec::new(vec![6])];
        bus.exchange(vec![instance(inputs.clone(), SumMode::Plain)]).unwrap();
        let t = bus.transcript().unwrap();
        let sent: Vec<WireMessage> = t
            .observed(ParticipantId(0))
            .into_iter()
            .filter(|(d, m)| *d == Direction::Sent && m.kind != MessageKind::Barrier)
            .map(|(_, m)| m)
            .collect();
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].kind, MessageKind::Partial);
        assert_eq!(sent[0].payload, inputs[0]);
    }
}
