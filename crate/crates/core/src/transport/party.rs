//! Per-party protocol state machine for one exchange round.
//!
//! Secure mode, per instance with contributor set C and delivery set D:
//!
//! 1. each contributor splits its input into |C| shares and sends one SHARE
//!    to every other contributor, keeping its own;
//! 2. once it holds all |C| shares, a contributor adds them into a PARTIAL
//!    and sends it to every member of D (all-to-all) or to the aggregator;
//! 3. D members (or the aggregator) add the |C| partials. The aggregator then
//!    sends a RESULT to every member of D.
//!
//! Plain mode skips step 1: the input itself is the PARTIAL. After all of a
//! party's instances finish it sends a BARRIER to every other party in the
//! round and waits for theirs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::{LocalRecord, MessageKind, SumInstance, SumMode, Topology, WireMessage};
use crate::error::{Error, ProtocolError, Result};
use crate::ring::{self, ParticipantId, RingVec};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct InstanceSpec {
    pub layer_tag: u8,
    pub group_tag: u16,
    pub mode: SumMode,
    pub contributors: Vec<ParticipantId>,
    pub delivery: Vec<ParticipantId>,
    pub len: usize,
}

impl InstanceSpec {
    pub fn key(&self) -> (u8, u16) {
        (self.layer_tag, self.group_tag)
    }

    /// Validates a caller-supplied instance and splits it into the public
    /// spec and the private per-party inputs.
    pub fn split(
        inst: SumInstance,
        round: u32,
    ) -> Result<(Arc<InstanceSpec>, BTreeMap<ParticipantId, RingVec>)> {
        let Some(len) = inst.inputs.first().map(|(_, v)| v.len()) else {
            return Err(Error::arg("sum instance without contributors"));
        };
        if inst.delivery.is_empty() {
            return Err(Error::arg("sum instance with an empty delivery set"));
        }
        let mut inputs = BTreeMap::new();
        for (id, v) in inst.inputs {
            if v.len() != len {
                return Err(ProtocolError::LengthMismatch {
                    round,
                    expected: len,
                    got: v.len(),
                }
                .into());
            }
            if inputs.insert(id, v).is_some() {
                return Err(Error::arg(format!("{id} contributes twice to one instance")));
            }
        }
        let mut delivery = inst.delivery;
        delivery.sort();
        delivery.dedup();
        let spec = InstanceSpec {
            layer_tag: inst.layer_tag,
            group_tag: inst.group_tag,
            mode: inst.mode,
            contributors: inputs.keys().copied().collect(),
            delivery,
            len,
        };
        Ok((Arc::new(spec), inputs))
    }

    pub fn parties(&self, topology: Topology) -> BTreeSet<ParticipantId> {
        let mut all: BTreeSet<_> = self.contributors.iter().copied().collect();
        all.extend(self.delivery.iter().copied());
        if let Topology::Aggregator(a) = topology {
            all.insert(a);
        }
        all
    }
}

/// Ring sum of validated, equal-length vectors.
fn sum_all(parts: &BTreeMap<ParticipantId, RingVec>) -> RingVec {
    let mut it = parts.values();
    let mut acc = it.next().expect("at least one contributor").clone();
    for p in it {
        acc.add_assign(p);
    }
    acc
}

struct PartyInstance {
    spec: Arc<InstanceSpec>,
    input: Option<RingVec>,
    self_share: Option<RingVec>,
    shares: BTreeMap<ParticipantId, RingVec>,
    partial_sent: bool,
    partials: BTreeMap<ParticipantId, RingVec>,
    aggregate_sent: bool,
    result: Option<RingVec>,
}

pub(crate) struct PartyRound {
    me: ParticipantId,
    round: u32,
    topology: Topology,
    seed: u64,
    instances: Vec<PartyInstance>,
    index: HashMap<(u8, u16), usize>,
    peers: BTreeSet<ParticipantId>,
    barrier_sent: bool,
    barriers: BTreeSet<ParticipantId>,
}

impl PartyRound {
    pub fn new(
        me: ParticipantId,
        round: u32,
        topology: Topology,
        seed: u64,
        specs: &[Arc<InstanceSpec>],
        mut inputs: HashMap<(u8, u16), RingVec>,
    ) -> Self {
        let mut peers = BTreeSet::new();
        let mut instances = Vec::new();
        let mut index = HashMap::new();
        for spec in specs {
            let parties = spec.parties(topology);
            peers.extend(parties.iter().copied());
            if parties.contains(&me) {
                index.insert(spec.key(), instances.len());
                instances.push(PartyInstance {
                    spec: Arc::clone(spec),
                    input: inputs.remove(&spec.key()),
                    self_share: None,
                    shares: BTreeMap::new(),
                    partial_sent: false,
                    partials: BTreeMap::new(),
                    aggregate_sent: false,
                    result: None,
                });
            }
        }
        peers.remove(&me);
        PartyRound {
            me,
            round,
            topology,
            seed,
            instances,
            index,
            peers,
            barrier_sent: false,
            barriers: BTreeSet::new(),
        }
    }

    pub fn start(&mut self) -> Result<Vec<WireMessage>> {
        let mut out = Vec::new();
        for idx in 0..self.instances.len() {
            let spec = Arc::clone(&self.instances[idx].spec);
            if let Some(input) = self.instances[idx].input.as_ref() {
                match spec.mode {
                    SumMode::Secure => {
                        let tag = (u32::from(spec.layer_tag) << 16) | u32::from(spec.group_tag);
                        let mut rng = substream(self.seed, Purpose::Share, self.me, self.round, tag);
                        let set = ring::share(input, &spec.contributors, &mut rng)?;
                        for (to, s) in set.into_map() {
                            if to == self.me {
                                self.instances[idx].self_share = Some(s);
                            } else {
                                out.push(self.msg(&spec, MessageKind::Share, to, s));
                            }
                        }
                    }
                    SumMode::Plain => {
                        self.instances[idx].self_share = Some(input.clone());
                    }
                }
            }
            out.extend(self.progress(idx));
        }
        out.extend(self.maybe_barrier());
        Ok(out)
    }

    pub fn handle(&mut self, msg: WireMessage) -> Result<Vec<WireMessage>> {
        let round = self.round;
        let unexpected = |detail: String| -> Error { ProtocolError::Unexpected { round, detail }.into() };
        if msg.round != self.round {
            return Err(unexpected(format!("{:?} for round {}", msg.kind, msg.round)));
        }
        if msg.recipient != self.me {
            return Err(unexpected(format!("frame addressed to {}", msg.recipient)));
        }
        if msg.kind == MessageKind::Barrier {
            if !self.peers.contains(&msg.sender) || !self.barriers.insert(msg.sender) {
                return Err(unexpected(format!("stray BARRIER from {}", msg.sender)));
            }
            return Ok(Vec::new());
        }
        let Some(&idx) = self.index.get(&(msg.layer_tag, msg.group_tag)) else {
            return Err(unexpected(format!(
                "no instance with layer {} group {}",
                msg.layer_tag, msg.group_tag
            )));
        };
        let me = self.me;
        let topology = self.topology;
        let inst = &mut self.instances[idx];
        let spec = Arc::clone(&inst.spec);
        if msg.payload.len() != spec.len {
            return Err(ProtocolError::LengthMismatch {
                round,
                expected: spec.len,
                got: msg.payload.len(),
            }
            .into());
        }
        let from_contributor = spec.contributors.binary_search(&msg.sender).is_ok();
        match msg.kind {
            MessageKind::Share => {
                if spec.mode != SumMode::Secure || inst.input.is_none() || !from_contributor {
                    return Err(unexpected(format!("SHARE from {}", msg.sender)));
                }
                if inst.shares.insert(msg.sender, msg.payload).is_some() {
                    return Err(unexpected(format!("duplicate SHARE from {}", msg.sender)));
                }
            }
            MessageKind::Partial => {
                let collects = match topology {
                    Topology::AllToAll => spec.delivery.binary_search(&me).is_ok(),
                    Topology::Aggregator(a) => a == me,
                };
                if !collects || !from_contributor {
                    return Err(unexpected(format!("PARTIAL from {}", msg.sender)));
                }
                if inst.partials.insert(msg.sender, msg.payload).is_some() {
                    return Err(unexpected(format!("duplicate PARTIAL from {}", msg.sender)));
                }
            }
            MessageKind::Result => {
                let ok = matches!(topology, Topology::Aggregator(a) if a == msg.sender)
                    && spec.delivery.binary_search(&me).is_ok()
                    && inst.result.is_none();
                if !ok {
                    return Err(unexpected(format!("RESULT from {}", msg.sender)));
                }
                inst.result = Some(msg.payload);
            }
            MessageKind::Barrier => unreachable!(),
        }
        let mut out = self.progress(idx);
        out.extend(self.maybe_barrier());
        Ok(out)
    }

    fn msg(&self, spec: &InstanceSpec, kind: MessageKind, to: ParticipantId, payload: RingVec) -> WireMessage {
        WireMessage {
            kind,
            round: self.round,
            layer_tag: spec.layer_tag,
            group_tag: spec.group_tag,
            sender: self.me,
            recipient: to,
            payload,
        }
    }

    fn progress(&mut self, idx: usize) -> Vec<WireMessage> {
        let mut out = Vec::new();
        let me = self.me;
        let spec = Arc::clone(&self.instances[idx].spec);
        let in_delivery = spec.delivery.binary_search(&me).is_ok();

        // step 2: partial
        let ready = {
            let inst = &self.instances[idx];
            let expected = match spec.mode {
                SumMode::Secure => spec.contributors.len() - 1,
                SumMode::Plain => 0,
            };
            inst.input.is_some() && !inst.partial_sent && inst.shares.len() == expected
        };
        if ready {
            let inst = &mut self.instances[idx];
            let mut partial = inst.self_share.clone().expect("contributor keeps a share");
            for s in inst.shares.values() {
                partial.add_assign(s);
            }
            inst.partial_sent = true;
            let targets: Vec<ParticipantId> = match self.topology {
                Topology::AllToAll => spec.delivery.clone(),
                Topology::Aggregator(a) => vec![a],
            };
            for to in targets {
                if to == me {
                    self.instances[idx].partials.insert(me, partial.clone());
                } else {
                    out.push(self.msg(&spec, MessageKind::Partial, to, partial.clone()));
                }
            }
        }

        // step 3: reconstruction
        let inst = &mut self.instances[idx];
        let all_partials = inst.partials.len() == spec.contributors.len();
        match self.topology {
            Topology::AllToAll => {
                if in_delivery && all_partials && inst.result.is_none() {
                    inst.result = Some(sum_all(&inst.partials));
                }
            }
            Topology::Aggregator(a) => {
                if a == me && all_partials && !inst.aggregate_sent {
                    let sum = sum_all(&inst.partials);
                    inst.aggregate_sent = true;
                    for &to in &spec.delivery {
                        if to == me {
                            self.instances[idx].result = Some(sum.clone());
                        } else {
                            out.push(self.msg(&spec, MessageKind::Result, to, sum.clone()));
                        }
                    }
                }
            }
        }
        out
    }

    fn instance_done(&self, inst: &PartyInstance) -> bool {
        let spec = &inst.spec;
        let contributed = inst.input.is_none() || inst.partial_sent;
        let delivered = spec.delivery.binary_search(&self.me).is_err() || inst.result.is_some();
        let aggregated = match self.topology {
            Topology::Aggregator(a) if a == self.me => inst.aggregate_sent,
            _ => true,
        };
        contributed && delivered && aggregated
    }

    fn maybe_barrier(&mut self) -> Vec<WireMessage> {
        if self.barrier_sent || !self.instances.iter().all(|i| self.instance_done(i)) {
            return Vec::new();
        }
        self.barrier_sent = true;
        self.peers
            .iter()
            .map(|&to| WireMessage::barrier(self.round, self.me, to))
            .collect()
    }

    /// Human-readable description of what keeps the round open.
    pub fn waiting_on(&self) -> String {
        if !self.barrier_sent {
            let open: Vec<String> = self
                .instances
                .iter()
                .filter(|i| !self.instance_done(i))
                .map(|i| format!("layer {} group {}", i.spec.layer_tag, i.spec.group_tag))
                .collect();
            return format!("protocol messages for {}", open.join(", "));
        }
        let missing: Vec<String> = self
            .peers
            .difference(&self.barriers)
            .map(|p| p.to_string())
            .collect();
        format!("BARRIER from {}", missing.join(", "))
    }

    pub fn complete(&self) -> bool {
        self.barrier_sent && self.barriers.len() == self.peers.len()
    }

    /// Moves out the results this party holds, keyed by (layer, group).
    pub fn take_results(&mut self) -> Vec<((u8, u16), RingVec)> {
        self.instances
            .iter_mut()
            .filter_map(|i| i.result.take().map(|r| (i.spec.key(), r)))
            .collect()
    }

    pub fn local_records(&self) -> Vec<LocalRecord> {
        self.instances
            .iter()
            .map(|i| LocalRecord {
                round: self.round,
                layer_tag: i.spec.layer_tag,
                group_tag: i.spec.group_tag,
                input: i.input.clone(),
                self_share: match i.spec.mode {
                    SumMode::Secure => i.self_share.clone(),
                    SumMode::Plain => None,
                },
                result: i.result.clone(),
            })
            .collect()
    }
}
