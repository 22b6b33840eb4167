//! Adversary views of secure-sum transcripts and their simulation.
//!
//! A coalition of at most `m − 2` participants (optionally joined by the
//! aggregator) sees its members' own inputs and every frame they send or
//! receive. [`simulate_view`] rebuilds such a view from the members' inputs
//! and the per-instance honest sums alone, by running the real protocol with
//! pseudorandom honest inputs constrained to those sums.
//! [`views_indistinguishable`] compares a real view with a simulated one.

pub mod audit;
pub mod leakage;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::ring::{ParticipantId, RingVec};
use crate::rng::{substream, Purpose};
use crate::transport::{
    Direction, InstanceRecord, LocalBus, LocalNote, LocalRecord, MessageKind, SumInstance, SumMode, SumTransport,
    Topology, Transcript, WireMessage,
};

pub use audit::{audit, AuditConfig, PrivacyVerdict};
pub use leakage::{
    leakage_extract_linreg, observations_from_view, relative_error, scan_model_payloads, Observation, PayloadHit,
    PayloadScan, Recovered,
};

/// Significance level of the share-uniformity tests before correction.
pub const UNIFORMITY_ALPHA: f64 = 0.01;

/// `(round, layer_tag, group_tag)`.
pub type InstanceKey = (u32, u8, u16);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coalition {
    members: BTreeSet<ParticipantId>,
    includes_aggregator: bool,
}

impl Coalition {
    /// At most `m − 2` of the `m` participants may collude.
    pub fn new(members: impl IntoIterator<Item = ParticipantId>, includes_aggregator: bool, m: usize) -> Result<Self> {
        let members: BTreeSet<_> = members.into_iter().collect();
        let limit = m.saturating_sub(2);
        if members.len() > limit {
            return Err(Error::arg(format!(
                "coalition of {} exceeds the threshold t = m - 2 = {limit}",
                members.len()
            )));
        }
        Ok(Coalition {
            members,
            includes_aggregator,
        })
    }

    pub fn members(&self) -> &BTreeSet<ParticipantId> {
        &self.members
    }

    pub fn includes_aggregator(&self) -> bool {
        self.includes_aggregator
    }
}

/// What one colluding party knows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemberView {
    pub frames: Vec<(Direction, WireMessage)>,
    pub locals: Vec<LocalRecord>,
    pub notes: Vec<LocalNote>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryView {
    pub coalition: Coalition,
    pub topology: Topology,
    /// Public structure of every instance in the run.
    pub instances: Vec<InstanceRecord>,
    /// Keyed by party; includes the aggregator when it colludes.
    pub members: BTreeMap<ParticipantId, MemberView>,
}

fn aggregator_of(topology: Topology) -> Option<ParticipantId> {
    match topology {
        Topology::Aggregator(a) => Some(a),
        Topology::AllToAll => None,
    }
}

/// Filters a recorded transcript down to what the coalition observes.
pub fn capture_view(t: &Transcript, coalition: &Coalition) -> Result<AdversaryView> {
    if t.instances.is_empty() {
        return Err(Error::arg("transcript was not recorded or holds no rounds"));
    }
    let mut parties: Vec<ParticipantId> = coalition.members.iter().copied().collect();
    if coalition.includes_aggregator {
        let a = aggregator_of(t.topology)
            .ok_or_else(|| Error::arg("coalition includes an aggregator but the topology has none"))?;
        parties.push(a);
    }
    let mut members = BTreeMap::new();
    for p in parties {
        if !t.locals.contains_key(&p) && !t.frames.contains_key(&p) {
            return Err(Error::arg(format!("{p} took no part in the transcript")));
        }
        members.insert(
            p,
            MemberView {
                frames: t.observed(p),
                locals: t.locals.get(&p).cloned().unwrap_or_default(),
                notes: t.notes.get(&p).cloned().unwrap_or_default(),
            },
        );
    }
    Ok(AdversaryView {
        coalition: coalition.clone(),
        topology: t.topology,
        instances: t.instances.clone(),
        members,
    })
}

impl AdversaryView {
    fn is_colluding(&self, p: ParticipantId) -> bool {
        self.members.contains_key(&p)
    }

    /// Inputs the colluding contributors fed into each instance.
    pub fn member_inputs(&self) -> BTreeMap<InstanceKey, BTreeMap<ParticipantId, RingVec>> {
        let mut out: BTreeMap<InstanceKey, BTreeMap<ParticipantId, RingVec>> = BTreeMap::new();
        for (&p, v) in &self.members {
            for r in &v.locals {
                if let Some(x) = &r.input {
                    out.entry((r.round, r.layer_tag, r.group_tag)).or_default().insert(p, x.clone());
                }
            }
        }
        out
    }

    /// The instance sums the coalition learns: members' results, or for a
    /// colluding aggregator the sum of the partials it collected.
    pub fn sums(&self) -> BTreeMap<InstanceKey, RingVec> {
        let mut out = BTreeMap::new();
        for v in self.members.values() {
            for r in &v.locals {
                if let Some(x) = &r.result {
                    out.insert((r.round, r.layer_tag, r.group_tag), x.clone());
                }
            }
        }
        if let Some(a) = aggregator_of(self.topology).filter(|a| self.is_colluding(*a)) {
            for (_, m) in self.members[&a].frames.iter().filter(|(d, m)| *d == Direction::Sent && m.kind == MessageKind::Result) {
                out.insert((m.round, m.layer_tag, m.group_tag), m.payload.clone());
            }
        }
        out
    }

    /// `sum − Σ member inputs` per instance: the honest parties' total, the
    /// only nonconstant quantity the coalition can derive.
    pub fn honest_residuals(&self) -> BTreeMap<InstanceKey, RingVec> {
        let inputs = self.member_inputs();
        self.sums()
            .into_iter()
            .map(|(k, mut s)| {
                if let Some(own) = inputs.get(&k) {
                    for x in own.values() {
                        s.sub_assign(x);
                    }
                }
                (k, s)
            })
            .collect()
    }

    /// Payloads that originate at honest parties: SHAREs and PARTIALs
    /// received from non-members. A PARTIAL broadcast to several members is
    /// counted once.
    pub fn honest_payloads(&self) -> Vec<&RingVec> {
        let mut seen = BTreeSet::new();
        self.members
            .values()
            .flat_map(|v| v.frames.iter())
            .filter(|(d, m)| {
                *d == Direction::Received
                    && matches!(m.kind, MessageKind::Share | MessageKind::Partial)
                    && !self.is_colluding(m.sender)
            })
            .filter(|(_, m)| {
                let to = if m.kind == MessageKind::Share { m.recipient } else { m.sender };
                seen.insert((m.kind, m.round, m.layer_tag, m.group_tag, m.sender, to))
            })
            .map(|(_, m)| &m.payload)
            .collect()
    }

    pub fn rounds(&self) -> BTreeSet<u32> {
        self.instances.iter().map(|i| i.round).collect()
    }
}

/// Rebuilds a coalition view from the members' inputs and the honest sums.
///
/// Every instance of `instances` is re-executed on an in-process bus: members
/// contribute their true inputs, and honest contributors contribute
/// pseudorandom vectors `η` whose ring sum equals `z` for that instance.
/// Instances no member can observe get `z = 0`.
pub fn simulate_view(
    coalition: &Coalition,
    topology: Topology,
    instances: &[InstanceRecord],
    member_inputs: &BTreeMap<InstanceKey, BTreeMap<ParticipantId, RingVec>>,
    z: &BTreeMap<InstanceKey, RingVec>,
    seed: u64,
) -> Result<AdversaryView> {
    let mut by_round: BTreeMap<u32, Vec<&InstanceRecord>> = BTreeMap::new();
    for inst in instances {
        by_round.entry(inst.round).or_default().push(inst);
    }
    let Some(&first) = by_round.keys().next() else {
        return Err(Error::arg("nothing to simulate"));
    };
    let mut bus = LocalBus::new(seed).with_topology(topology).recording(true).starting_at(first);
    let colluding = |p: &ParticipantId| coalition.members.contains(p);
    for (round, insts) in by_round {
        if bus.round() != round {
            return Err(Error::arg(format!("rounds are not consecutive at {round}")));
        }
        let mut batch = Vec::with_capacity(insts.len());
        for inst in insts {
            let key = (round, inst.layer_tag, inst.group_tag);
            let honest: Vec<ParticipantId> = inst.contributors.iter().copied().filter(|p| !colluding(p)).collect();
            let mut inputs = Vec::with_capacity(inst.contributors.len());
            for &p in inst.contributors.iter().filter(|p| colluding(p)) {
                let x = member_inputs
                    .get(&key)
                    .and_then(|m| m.get(&p))
                    .ok_or_else(|| Error::arg(format!("no input of member {p} for instance {key:?}")))?;
                if x.len() != inst.len {
                    return Err(Error::shape("member input", inst.len, x.len()));
                }
                inputs.push((p, x.clone()));
            }
            if let Some((&last, rest)) = honest.split_last() {
                let mut remainder = match z.get(&key) {
                    Some(v) if v.len() != inst.len => return Err(Error::shape("honest sum", inst.len, v.len())),
                    Some(v) => v.clone(),
                    None => RingVec::zeros(inst.len),
                };
                let tag = (u32::from(inst.layer_tag) << 16) | u32::from(inst.group_tag);
                for &h in rest {
                    let mut rng = substream(seed, Purpose::Simulator, h, round, tag);
                    let eta = RingVec::random(inst.len, &mut rng);
                    remainder.sub_assign(&eta);
                    inputs.push((h, eta));
                }
                inputs.push((last, remainder));
            } else if z.get(&key).is_some_and(|v| v.as_slice().iter().any(|&e| e != 0)) {
                return Err(Error::arg(format!("nonzero honest sum for {key:?} without honest contributors")));
            }
            batch.push(SumInstance {
                layer_tag: inst.layer_tag,
                group_tag: inst.group_tag,
                mode: inst.mode,
                inputs,
                delivery: inst.delivery.clone(),
            });
        }
        bus.exchange(batch)?;
    }
    let mut view = capture_view(&bus.into_transcript(), coalition)?;
    // the simulator has no access to the members' private notes
    for v in view.members.values_mut() {
        v.notes.clear();
    }
    Ok(view)
}

/// Simulates `real` from exactly the inputs the simulator is entitled to.
pub fn simulate_from(real: &AdversaryView, seed: u64) -> Result<AdversaryView> {
    simulate_view(
        &real.coalition,
        real.topology,
        &real.instances,
        &real.member_inputs(),
        &real.honest_residuals(),
        seed,
    )
}

/// One per-byte-lane chi-square test of uniformity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformityTest {
    pub view: &'static str,
    /// Byte position inside the little-endian u32, 0 = least significant.
    pub lane: u8,
    pub bins: usize,
    pub samples: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndistinguishabilityReport {
    pub structure_equal: bool,
    pub aggregates_equal: bool,
    pub real_consistent: bool,
    pub sim_consistent: bool,
    pub uniformity: Vec<UniformityTest>,
    pub issues: Vec<String>,
    pub indistinguishable: bool,
}

type Shape = (Direction, MessageKind, u32, u8, u16, ParticipantId, ParticipantId, usize);

fn direction_rank(d: Direction) -> u8 {
    match d {
        Direction::Sent => 0,
        Direction::Received => 1,
    }
}

fn shapes(v: &MemberView) -> Vec<Shape> {
    let mut s: Vec<Shape> = v
        .frames
        .iter()
        .map(|(d, m)| (*d, m.kind, m.round, m.layer_tag, m.group_tag, m.sender, m.recipient, m.payload.len()))
        .collect();
    s.sort_by_key(|x| (direction_rank(x.0), x.1 as u8, x.2, x.3, x.4, x.5, x.6, x.7));
    s
}

/// Internal arithmetic a correct execution satisfies, checked per member.
pub fn consistency_issues(view: &AdversaryView) -> Vec<String> {
    let mut issues = Vec::new();
    let modes: BTreeMap<InstanceKey, (SumMode, &InstanceRecord)> = view
        .instances
        .iter()
        .map(|i| ((i.round, i.layer_tag, i.group_tag), (i.mode, i)))
        .collect();
    let aggregator = aggregator_of(view.topology);
    for (&p, v) in &view.members {
        let mut sent: BTreeMap<(InstanceKey, MessageKind), Vec<&RingVec>> = BTreeMap::new();
        let mut recv: BTreeMap<(InstanceKey, MessageKind), Vec<&RingVec>> = BTreeMap::new();
        for (d, m) in &v.frames {
            if m.kind == MessageKind::Barrier {
                continue;
            }
            let k = ((m.round, m.layer_tag, m.group_tag), m.kind);
            match d {
                Direction::Sent => sent.entry(k).or_default().push(&m.payload),
                Direction::Received => recv.entry(k).or_default().push(&m.payload),
            }
        }
        let sum = |xs: Option<&Vec<&RingVec>>, len: usize| {
            let mut acc = RingVec::zeros(len);
            for x in xs.into_iter().flatten() {
                acc.add_assign(x);
            }
            acc
        };
        for r in &v.locals {
            let key = (r.round, r.layer_tag, r.group_tag);
            let Some(&(mode, inst)) = modes.get(&key) else {
                issues.push(format!("{p}: record for unknown instance {key:?}"));
                continue;
            };
            let len = inst.len;
            let partials_out = sent.get(&(key, MessageKind::Partial));
            if let Some(outs) = partials_out {
                if outs.windows(2).any(|w| w[0] != w[1]) {
                    issues.push(format!("{p}: sent different PARTIALs in {key:?}"));
                }
            }
            let my_partial = if let Some(input) = &r.input {
                let partial = match mode {
                    SumMode::Secure => {
                        let Some(own) = &r.self_share else {
                            issues.push(format!("{p}: no retained share in {key:?}"));
                            continue;
                        };
                        let mut dealt = own.clone();
                        dealt.add_assign(&sum(sent.get(&(key, MessageKind::Share)), len));
                        if &dealt != input {
                            issues.push(format!("{p}: dealt shares do not add up to its input in {key:?}"));
                        }
                        let mut partial = own.clone();
                        partial.add_assign(&sum(recv.get(&(key, MessageKind::Share)), len));
                        partial
                    }
                    SumMode::Plain => input.clone(),
                };
                if let Some(out) = partials_out.and_then(|o| o.first()) {
                    if **out != partial {
                        issues.push(format!("{p}: PARTIAL in {key:?} is not the sum of the shares it held"));
                    }
                }
                Some(partial)
            } else {
                None
            };
            match aggregator {
                None => {
                    if let Some(res) = &r.result {
                        let mut total = sum(recv.get(&(key, MessageKind::Partial)), len);
                        if let Some(mine) = &my_partial {
                            total.add_assign(mine);
                        }
                        if &total != res {
                            issues.push(format!("{p}: result in {key:?} differs from the partials received"));
                        }
                    }
                }
                Some(a) if a == p => {
                    let total = sum(recv.get(&(key, MessageKind::Partial)), len);
                    for out in sent.get(&(key, MessageKind::Result)).into_iter().flatten() {
                        if **out != total {
                            issues.push(format!("aggregator RESULT in {key:?} differs from the partials"));
                        }
                    }
                }
                Some(_) => {
                    if let (Some(res), Some(got)) = (&r.result, recv.get(&(key, MessageKind::Result))) {
                        if got.iter().any(|g| *g != res) {
                            issues.push(format!("{p}: RESULT frame in {key:?} differs from its result"));
                        }
                    }
                }
            }
        }
    }
    issues
}

/// Chi-square uniformity of one byte lane of a u32 pool. Uses all 256 byte
/// values when every bin expects at least five samples, otherwise the 16
/// high-nibble values; returns `None` below that.
pub fn lane_chi_square(values: &[u32], lane: u8) -> Option<(usize, f64, f64)> {
    let n = values.len();
    let bins = if n >= 5 * 256 {
        256
    } else if n >= 5 * 16 {
        16
    } else {
        return None;
    };
    let mut counts = vec![0u64; bins];
    for &v in values {
        let byte = (v >> (8 * u32::from(lane))) & 0xff;
        let b = if bins == 256 { byte } else { byte >> 4 };
        counts[b as usize] += 1;
    }
    let expected = n as f64 / bins as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new((bins - 1) as f64).expect("positive degrees of freedom");
    Some((bins, stat, dist.sf(stat)))
}

fn uniformity(view: &AdversaryView, label: &'static str) -> Vec<UniformityTest> {
    let pool: Vec<u32> = view
        .honest_payloads()
        .into_iter()
        .flat_map(|p| p.as_slice().iter().copied())
        .collect();
    (0..4u8)
        .filter_map(|lane| {
            lane_chi_square(&pool, lane).map(|(bins, statistic, p_value)| UniformityTest {
                view: label,
                lane,
                bins,
                samples: pool.len(),
                statistic,
                p_value,
                pass: true,
            })
        })
        .collect()
}

/// Exact equality of everything the coalition can derive, internal
/// consistency of both views, and uniformity of honest-origin payloads at
/// [`UNIFORMITY_ALPHA`].
pub fn views_indistinguishable(real: &AdversaryView, sim: &AdversaryView) -> IndistinguishabilityReport {
    views_indistinguishable_at(real, sim, UNIFORMITY_ALPHA)
}

/// As [`views_indistinguishable`], with the lane tests Bonferroni-corrected
/// so that their family-wise false-alarm rate is `alpha`.
pub fn views_indistinguishable_at(real: &AdversaryView, sim: &AdversaryView, alpha: f64) -> IndistinguishabilityReport {
    let mut issues = Vec::new();
    let mut structure_equal = real.coalition == sim.coalition
        && real.topology == sim.topology
        && real.instances == sim.instances
        && real.members.keys().eq(sim.members.keys());
    if !structure_equal {
        issues.push("coalition, topology, or instance structure differs".into());
    } else {
        for (p, rv) in &real.members {
            if shapes(rv) != shapes(&sim.members[p]) {
                structure_equal = false;
                issues.push(format!("{p}: frame structure differs"));
            }
        }
    }
    let aggregates_equal = real.sums() == sim.sums() && real.honest_residuals() == sim.honest_residuals();
    if !aggregates_equal {
        issues.push("derivable sums differ".into());
    }
    let real_issues = consistency_issues(real);
    let sim_issues = consistency_issues(sim);
    let real_consistent = real_issues.is_empty();
    let sim_consistent = sim_issues.is_empty();
    issues.extend(real_issues.into_iter().map(|i| format!("real: {i}")));
    issues.extend(sim_issues.into_iter().map(|i| format!("sim: {i}")));
    let mut tests = uniformity(real, "real");
    tests.extend(uniformity(sim, "sim"));
    let per_test = alpha / tests.len().max(1) as f64;
    for t in &mut tests {
        t.pass = t.p_value >= per_test;
    }
    for t in tests.iter().filter(|t| !t.pass) {
        issues.push(format!(
            "{} view lane {} fails uniformity (chi2 = {:.1}, p = {:.2e})",
            t.view, t.lane, t.statistic, t.p_value
        ));
    }
    let uniform = tests.iter().all(|t| t.pass);
    IndistinguishabilityReport {
        structure_equal,
        aggregates_equal,
        real_consistent,
        sim_consistent,
        indistinguishable: structure_equal && aggregates_equal && real_consistent && sim_consistent && uniform,
        uniformity: tests,
        issues,
    }
}

/// Replaces the first honest SHARE a member received with `plaintext`, as if
/// the simulator had leaked an honest party's input.
pub fn leak_into(view: &mut AdversaryView, plaintext: &RingVec) -> Result<()> {
    let members: BTreeSet<ParticipantId> = view.members.keys().copied().collect();
    for v in view.members.values_mut() {
        for (d, m) in v.frames.iter_mut() {
            if *d == Direction::Received && m.kind == MessageKind::Share && !members.contains(&m.sender) {
                if plaintext.len() != m.payload.len() {
                    return Err(Error::shape("leaked payload", m.payload.len(), plaintext.len()));
                }
                m.payload = plaintext.clone();
                return Ok(());
            }
        }
    }
    Err(Error::arg("view holds no honest SHARE to replace"))
}

/// Mean of `count` simulated honest shares' elements, for the uniformity
/// heuristic on individual shares.
pub fn simulated_share_mean(count: usize, len: usize, seed: u64) -> f64 {
    let mut total = 0f64;
    for k in 0..count {
        let mut rng = substream(seed, Purpose::Simulator, ParticipantId(0), k as u32, 0);
        let eta = RingVec::random(len, &mut rng);
        total += eta.as_slice().iter().map(|&e| f64::from(e)).sum::<f64>();
    }
    total / (count * len) as f64
}
