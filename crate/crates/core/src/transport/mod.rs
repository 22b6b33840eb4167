//! Message substrate for secure-sum exchanges.
//!
//! A caller hands a [`SumTransport`] a batch of [`SumInstance`]s (one per
//! layer / group sum needed this round). The transport runs the additive
//! sharing protocol among the contributors of each instance and returns the
//! ring sum at every member of the instance's delivery set. Two backends
//! exist: [`LocalBus`], a deterministic single-threaded router, and
//! [`TcpSession`], which runs every party on its own thread and socket.
//! Both drive the same per-party state machine, so their transcripts agree.

mod local;
mod party;
mod tcp;
pub mod wire;

use std::collections::BTreeMap;

pub use local::LocalBus;
pub use tcp::{EndpointMap, TcpSession};
pub use wire::{MessageKind, WireMessage};

use crate::error::Result;
use crate::ring::{ParticipantId, RingVec};

/// Who reconstructs the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Topology {
    /// Every contributor broadcasts its partial; delivery members reconstruct.
    #[default]
    AllToAll,
    /// Partials go to one node, which fans the RESULT out to the delivery set.
    Aggregator(ParticipantId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumMode {
    /// Inputs are additively shared before any partial leaves a party.
    Secure,
    /// Inputs travel in the clear (traditional federated SGD baseline).
    Plain,
}

/// One sum to evaluate in an exchange.
#[derive(Debug, Clone)]
pub struct SumInstance {
    pub layer_tag: u8,
    pub group_tag: u16,
    pub mode: SumMode,
    pub inputs: Vec<(ParticipantId, RingVec)>,
    pub delivery: Vec<ParticipantId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceOutput {
    pub layer_tag: u8,
    pub group_tag: u16,
    pub delivered: BTreeMap<ParticipantId, RingVec>,
}

pub trait SumTransport {
    /// Runs one synchronous round containing every instance in `batch`.
    fn exchange(&mut self, batch: Vec<SumInstance>) -> Result<Vec<InstanceOutput>>;

    /// Round index the next exchange will carry.
    fn round(&self) -> u32;

    fn topology(&self) -> Topology;

    /// Recorded transcript, if recording is enabled.
    fn transcript(&self) -> Option<&Transcript>;

    /// Records party-local knowledge (never transmitted) for post-hoc analysis.
    fn note(&mut self, owner: ParticipantId, note: LocalNote);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Exact bytes one observer put on, or took off, the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedFrame {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

impl ObservedFrame {
    pub fn message(&self) -> WireMessage {
        WireMessage::decode(&self.bytes).expect("transcripts only hold valid frames")
    }
}

/// Party-local protocol state for one instance: what it fed in, the share it
/// kept for itself, and what it reconstructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalRecord {
    pub round: u32,
    pub layer_tag: u8,
    pub group_tag: u16,
    pub input: Option<RingVec>,
    pub self_share: Option<RingVec>,
    pub result: Option<RingVec>,
}

/// Model knowledge a party held while computing its input for `round`.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalNote {
    /// The single global model every participant updates (traditional FL).
    SharedModel { round: u32, weights: Vec<f64> },
    /// The party's own confined model.
    ConfinedModel { round: u32, weights: Vec<f64> },
}

/// Public shape of one instance as every party knows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRecord {
    pub round: u32,
    pub layer_tag: u8,
    pub group_tag: u16,
    pub mode: SumMode,
    pub contributors: Vec<ParticipantId>,
    pub delivery: Vec<ParticipantId>,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub frames: BTreeMap<ParticipantId, Vec<ObservedFrame>>,
    pub locals: BTreeMap<ParticipantId, Vec<LocalRecord>>,
    pub notes: BTreeMap<ParticipantId, Vec<LocalNote>>,
    pub instances: Vec<InstanceRecord>,
    pub topology: Topology,
}

impl Transcript {
    /// Messages observed by `observer`, in delivery order.
    pub fn observed(&self, observer: ParticipantId) -> Vec<(Direction, WireMessage)> {
        self.frames
            .get(&observer)
            .map(|fs| fs.iter().map(|f| (f.direction, f.message())).collect())
            .unwrap_or_default()
    }

    pub fn rounds(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.instances.iter().map(|i| i.round).collect();
        r.dedup();
        r
    }

    pub(crate) fn absorb_party(
        &mut self,
        id: ParticipantId,
        frames: Vec<ObservedFrame>,
        locals: Vec<LocalRecord>,
    ) {
        self.frames.entry(id).or_default().extend(frames);
        self.locals.entry(id).or_default().extend(locals);
    }
}

pub(crate) use party::{InstanceSpec, PartyRound};
