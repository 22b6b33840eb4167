//! End-to-end privacy audit on a synthetic linear-regression federation.
//!
//! Records CGD runs under both topologies and checks, for every coalition
//! size up to `m − 2`, that the simulated view matches the real one. Two
//! negative controls must be flagged: a simulator that leaks an honest input,
//! and plain federated SGD. The leakage extractor is run on a secure-sum
//! federated SGD transcript and on CGD transcripts, and CGD frames are
//! scanned for model payloads.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::leakage::proxy_observations;
use super::{
    capture_view, leak_into, leakage_extract_linreg, observations_from_view, relative_error, scan_model_payloads,
    simulate_from, simulate_view, views_indistinguishable, views_indistinguishable_at, Coalition, UNIFORMITY_ALPHA,
};
use crate::baselines::{fedsgd_train, FedOptions};
use crate::data::{apply_partition, synthetic_linreg, Dataset, GridShards, PartitionPlan};
use crate::engine::{run_cgd, CgdOptions, CgdParticipant, InitPolicy, RateSchedule};
use crate::error::{Error, Result};
use crate::linalg::{Architecture, Matrix};
use crate::ring::{FixedPointCodec, ParticipantId};
use crate::transport::{
    InstanceRecord, LocalBus, MessageKind, ObservedFrame, SumMode, Topology, Transcript, WireMessage,
};

/// Relative recovery error the extractor must reach on federated SGD.
pub const EXTRACTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct AuditConfig {
    pub participants: u16,
    pub rounds: u32,
    pub rows_per_participant: usize,
    pub features: usize,
    pub alpha: f64,
    pub delta: f64,
    pub frac_bits: u32,
    pub clip: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            participants: 5,
            rounds: 50,
            rows_per_participant: 40,
            features: 4,
            alpha: 0.15,
            delta: 0.1,
            frac_bits: 24,
            clip: 8.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoalitionCheck {
    pub topology: String,
    pub members: usize,
    pub aggregator: bool,
    pub indistinguishable: bool,
    pub min_p_value: f64,
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractionCheck {
    pub observations: usize,
    pub gram_rel_error: f64,
    pub cross_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrivacyVerdict {
    pub config: AuditConfig,
    pub coalitions: Vec<CoalitionCheck>,
    pub simulation_pass: bool,
    pub leak_control_flagged: bool,
    pub plain_control_flagged: bool,
    pub fedsgd_extraction: ExtractionCheck,
    pub fedsgd_extraction_pass: bool,
    /// Error the extractor reports on a CGD view.
    pub cgd_extraction: String,
    pub cgd_extraction_fails: bool,
    /// Using the colluder's own confined model as a stand-in.
    pub cgd_proxy_attack: Option<ExtractionCheck>,
    pub scanned_frames: usize,
    pub model_payload_hits: usize,
    pub scan_control_hits: usize,
    pub pass: bool,
}

impl PrivacyVerdict {
    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "privacy audit: m={} rounds={} n/participant={} d={} frac_bits={}",
            c.participants, c.rounds, c.rows_per_participant, c.features, c.frac_bits
        );
        for k in &self.coalitions {
            let _ = writeln!(
                s,
                "  simulation {:<11} |C|={} aggregator={:<5} {} (min p = {:.3})",
                k.topology,
                k.members,
                k.aggregator,
                if k.indistinguishable { "indistinguishable" } else { "DISTINGUISHED" },
                k.min_p_value
            );
            for i in k.issues.iter().take(3) {
                let _ = writeln!(s, "    {i}");
            }
        }
        let _ = writeln!(s, "  control: leaked honest input flagged = {}", self.leak_control_flagged);
        let _ = writeln!(s, "  control: plain federated SGD flagged = {}", self.plain_control_flagged);
        let e = &self.fedsgd_extraction;
        let _ = writeln!(
            s,
            "  federated SGD extraction from {} rounds: XtX rel err {:.2e}, Xty rel err {:.2e}",
            e.observations, e.gram_rel_error, e.cross_rel_error
        );
        let _ = writeln!(s, "  CGD extraction: {}", self.cgd_extraction);
        if let Some(p) = &self.cgd_proxy_attack {
            let _ = writeln!(
                s,
                "  CGD with own model as proxy: XtX rel err {:.2e}, Xty rel err {:.2e}",
                p.gram_rel_error, p.cross_rel_error
            );
        }
        let _ = writeln!(
            s,
            "  model payloads in {} CGD frames: {} (planted control: {})",
            self.scanned_frames, self.model_payload_hits, self.scan_control_hits
        );
        let _ = writeln!(s, "verdict: {}", if self.pass { "PASS" } else { "FAIL" });
        s
    }
}

struct Federation {
    shards: GridShards,
    arch: Architecture,
    codec: FixedPointCodec,
    init: InitPolicy,
    schedule: RateSchedule,
}

fn pid(i: u16) -> ParticipantId {
    ParticipantId(i)
}

impl Federation {
    fn new(cfg: &AuditConfig) -> Result<Self> {
        let m = cfg.participants;
        if m < 3 {
            return Err(Error::arg("the audit needs at least 3 participants"));
        }
        if cfg.rounds == 0 {
            return Err(Error::arg("the audit needs at least one round"));
        }
        let n = usize::from(m) * cfg.rows_per_participant;
        let task = synthetic_linreg(n, cfg.features, 0.1, cfg.seed)?;
        // Feature j is scaled by 2^(-j/2). With isotropic features every
        // direction contracts at the same rate, the descent iterates stay
        // near a line, and the least-squares recovery is ill conditioned.
        let x = Matrix::from_fn(n, cfg.features, |r, c| task.data.x.get(r, c) * 0.5f64.powf(c as f64 / 2.0));
        let data = Dataset::new("audit", x, task.data.y)?;
        let plan = PartitionPlan::contiguous(n, cfg.features, m, 1)?;
        Ok(Federation {
            shards: apply_partition(&data, &plan)?,
            arch: Architecture::linear_regression(),
            codec: FixedPointCodec::new(cfg.frac_bits, cfg.clip)?,
            init: InitPolicy::new(cfg.delta, cfg.seed)?,
            schedule: RateSchedule::Fixed { alpha: cfg.alpha },
        })
    }

    fn cgd(&self, cfg: &AuditConfig, topology: Topology) -> Result<Transcript> {
        let shapes = [(cfg.features, 1)];
        let participants = self
            .shards
            .shards
            .iter()
            .map(|(&id, s)| CgdParticipant {
                model: self.init.init(id.participant(1), &shapes),
                x: s.x.clone(),
                y: s.y.clone(),
            })
            .collect();
        let opts = CgdOptions {
            arch: self.arch.clone(),
            schedule: self.schedule,
            iters: cfg.rounds,
            codec: self.codec,
        };
        let mut bus = LocalBus::new(cfg.seed).with_topology(topology).recording(true);
        run_cgd(participants, &opts, &mut bus, &mut |_, _| Ok(None))?;
        Ok(bus.into_transcript())
    }

    fn fedsgd(&self, cfg: &AuditConfig, mode: SumMode) -> Result<Transcript> {
        let init = self.init.init(pid(0), &[(cfg.features, 1)]).layers().to_vec();
        let opts = FedOptions {
            schedule: self.schedule,
            iters: cfg.rounds,
            codec: self.codec,
            mode,
            batch: None,
            seed: cfg.seed,
        };
        let mut bus = LocalBus::new(cfg.seed).recording(true);
        fedsgd_train(&self.shards, init, &self.arch, &opts, &mut bus, &mut |_, _, _| Ok(None))?;
        Ok(bus.into_transcript())
    }

    /// `Σ_h X_hᵀX_h / n_h` and `Σ_h X_hᵀy_h / n_h` over participants
    /// outside `colluders`.
    fn honest_moments(&self, colluders: &[ParticipantId]) -> Result<(Matrix, Vec<f64>)> {
        let d = self.shards.plan.d();
        let mut gram = Matrix::zeros(d, d);
        let mut cross = Matrix::zeros(d, 1);
        for (id, s) in &self.shards.shards {
            if colluders.contains(&id.participant(1)) {
                continue;
            }
            let inv = 1.0 / s.x.rows() as f64;
            gram.axpy(inv, &s.x.t_matmul(&s.x)?)?;
            cross.axpy(inv, &s.x.t_matmul(&s.y)?)?;
        }
        Ok((gram, cross.into_data()))
    }
}

fn topology_name(t: Topology) -> &'static str {
    match t {
        Topology::AllToAll => "all-to-all",
        Topology::Aggregator(_) => "aggregator",
    }
}

fn check(real: &super::AdversaryView, seed: u64, alpha: f64) -> Result<CoalitionCheck> {
    let sim = simulate_from(real, seed)?;
    let rep = views_indistinguishable_at(real, &sim, alpha);
    Ok(CoalitionCheck {
        topology: topology_name(real.topology).into(),
        members: real.coalition.members().len(),
        aggregator: real.coalition.includes_aggregator(),
        indistinguishable: rep.indistinguishable,
        min_p_value: rep.uniformity.iter().map(|u| u.p_value).fold(1.0, f64::min),
        issues: rep.issues,
    })
}

fn extraction(obs: &[super::Observation], d: usize, truth: &(Matrix, Vec<f64>)) -> Result<ExtractionCheck> {
    let r = leakage_extract_linreg(obs, d)?;
    Ok(ExtractionCheck {
        observations: obs.len(),
        gram_rel_error: relative_error(r.gram.data(), truth.0.data()),
        cross_rel_error: relative_error(&r.cross, &truth.1),
    })
}

/// Runs every check of the audit.
pub fn audit(cfg: &AuditConfig) -> Result<PrivacyVerdict> {
    let fed = Federation::new(cfg)?;
    let m = cfg.participants;
    let mu = usize::from(m);
    let aggregator = Topology::Aggregator(pid(m));

    // every nonempty coalition of the first t participants, t <= m - 2, with
    // and without the aggregator where there is one
    let mut plan = Vec::new();
    for topology in [Topology::AllToAll, aggregator] {
        let with_agg: &[bool] = match topology {
            Topology::AllToAll => &[false],
            Topology::Aggregator(_) => &[false, true],
        };
        for &agg in with_agg {
            for size in (if agg { 0 } else { 1 })..=(m - 2) {
                plan.push((topology, size, agg));
            }
        }
    }
    // one family-wise false-alarm rate for all comparisons together
    let alpha = UNIFORMITY_ALPHA / plan.len() as f64;
    let mut coalitions = Vec::new();
    let mut largest = None;
    let cgd_transcripts = [
        (Topology::AllToAll, fed.cgd(cfg, Topology::AllToAll)?),
        (aggregator, fed.cgd(cfg, aggregator)?),
    ];
    for (topology, size, agg) in plan {
        let t = &cgd_transcripts.iter().find(|(t, _)| *t == topology).expect("both topologies recorded").1;
        let coalition = Coalition::new((0..size).map(pid), agg, mu)?;
        let real = capture_view(t, &coalition)?;
        coalitions.push(check(&real, cfg.seed ^ 0x5eed, alpha)?);
        if topology == Topology::AllToAll && size == m - 2 {
            largest = Some(real);
        }
    }
    let simulation_pass = coalitions.iter().all(|c| c.indistinguishable);
    let cgd_view = largest.ok_or_else(|| Error::arg("no coalition was audited"))?;

    // control 1: the simulator hands the coalition an honest party's input
    let honest_input = cgd_transcripts[0].1.locals[&pid(m - 1)]
        .iter()
        .find_map(|r| r.input.clone())
        .ok_or_else(|| Error::arg("honest party recorded no input"))?;
    let mut leaked = simulate_from(&cgd_view, cfg.seed ^ 0x5eed)?;
    leak_into(&mut leaked, &honest_input)?;
    let leak_control_flagged = !views_indistinguishable(&cgd_view, &leaked).indistinguishable;

    // control 2: plain federated SGD against a simulator that only knows sums
    let plain = fed.fedsgd(cfg, SumMode::Plain)?;
    let plain_view = capture_view(&plain, &Coalition::new([pid(0)], false, mu)?)?;
    let as_secure: Vec<InstanceRecord> = plain_view
        .instances
        .iter()
        .map(|i| InstanceRecord {
            mode: SumMode::Secure,
            ..i.clone()
        })
        .collect();
    let plain_sim = simulate_view(
        &plain_view.coalition,
        plain_view.topology,
        &as_secure,
        &plain_view.member_inputs(),
        &plain_view.honest_residuals(),
        cfg.seed,
    )?;
    let plain_control_flagged = !views_indistinguishable(&plain_view, &plain_sim).indistinguishable;

    // extraction on secure-sum federated SGD, one colluder
    let colluder = [pid(0)];
    let secure = fed.fedsgd(cfg, SumMode::Secure)?;
    let fed_view = capture_view(&secure, &Coalition::new(colluder, false, mu)?)?;
    let truth = fed.honest_moments(&colluder)?;
    let fedsgd_extraction = extraction(&observations_from_view(&fed_view, &fed.codec)?, cfg.features, &truth)?;
    let fedsgd_extraction_pass =
        fedsgd_extraction.gram_rel_error <= EXTRACTION_TOL && fedsgd_extraction.cross_rel_error <= EXTRACTION_TOL;

    // extraction on CGD
    let (cgd_extraction, cgd_extraction_fails) = match observations_from_view(&cgd_view, &fed.codec)
        .and_then(|obs| leakage_extract_linreg(&obs, cfg.features))
    {
        Err(e @ Error::RankDeficient(_)) => (e.to_string(), true),
        Err(e) => (e.to_string(), false),
        Ok(_) => ("recovered moments from a CGD view".into(), false),
    };
    let cgd_members: Vec<ParticipantId> = cgd_view.coalition.members().iter().copied().collect();
    let cgd_proxy_attack = proxy_observations(&cgd_view, pid(0), &fed.codec)
        .and_then(|obs| extraction(&obs, cfg.features, &fed.honest_moments(&cgd_members)?))
        .ok();

    // model payload scan, plus a planted frame that must be found
    let mut scanned_frames = 0;
    let mut model_payload_hits = 0;
    for (_, t) in &cgd_transcripts {
        let scan = scan_model_payloads(t, &fed.codec);
        scanned_frames += scan.frames;
        model_payload_hits += scan.hits.len();
    }
    let scan_control_hits = scan_model_payloads(&plant_model(&cgd_transcripts[0].1, &fed.codec)?, &fed.codec)
        .hits
        .len();

    let pass = simulation_pass
        && leak_control_flagged
        && plain_control_flagged
        && fedsgd_extraction_pass
        && cgd_extraction_fails
        && model_payload_hits == 0
        && scan_control_hits > 0;
    Ok(PrivacyVerdict {
        config: cfg.clone(),
        coalitions,
        simulation_pass,
        leak_control_flagged,
        plain_control_flagged,
        fedsgd_extraction,
        fedsgd_extraction_pass,
        cgd_extraction,
        cgd_extraction_fails,
        cgd_proxy_attack,
        scanned_frames,
        model_payload_hits,
        scan_control_hits,
        pass,
    })
}

/// Copy of `t` in which one SHARE frame carries a confined model.
fn plant_model(t: &Transcript, codec: &FixedPointCodec) -> Result<Transcript> {
    let mut out = t.clone();
    let weights = t
        .notes
        .values()
        .flatten()
        .find_map(|n| match n {
            crate::transport::LocalNote::ConfinedModel { weights, .. } => Some(weights.clone()),
            crate::transport::LocalNote::SharedModel { .. } => None,
        })
        .ok_or_else(|| Error::arg("transcript holds no model notes"))?;
    let frames: &mut BTreeMap<ParticipantId, Vec<ObservedFrame>> = &mut out.frames;
    let slot = frames
        .values_mut()
        .flatten()
        .find(|f| f.message().kind == MessageKind::Share)
        .ok_or_else(|| Error::arg("transcript holds no SHARE frame"))?;
    let msg = WireMessage {
        payload: codec.encode(&weights),
        ..slot.message()
    };
    slot.bytes = msg.encode();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_audit_passes() {
        let cfg = AuditConfig {
            participants: 4,
            rounds: 12,
            rows_per_participant: 20,
            features: 3,
            ..AuditConfig::default()
        };
        let v = audit(&cfg).unwrap();
        assert!(v.pass, "{}", v.text());
        assert!(v.json().contains("\"pass\": true"));
    }

    #[test]
    fn audit_rejects_tiny_federations() {
        let cfg = AuditConfig {
            participants: 2,
            ..AuditConfig::default()
        };
        assert!(audit(&cfg).is_err());
    }
}
