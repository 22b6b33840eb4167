//! Simulation invariants over random federations and coalitions.

use proptest::prelude::*;

use cgd::privacy::{capture_view, simulate_from, views_indistinguishable, Coalition};
use cgd::ring::{FixedPointCodec, ParticipantId};
use cgd::transport::{LocalBus, SumInstance, SumMode, SumTransport, Topology, Transcript};

/// `rounds` exchanges among `m` parties; odd rounds carry a second instance
/// restricted to the first `m - 1` parties.
fn transcript(m: u16, rounds: u32, aggregator: bool, seed: u64) -> Transcript {
    let codec = FixedPointCodec::default();
    let topology = if aggregator { Topology::Aggregator(ParticipantId(m)) } else { Topology::AllToAll };
    let mut bus = LocalBus::new(seed).with_topology(topology).recording(true);
    let everyone: Vec<ParticipantId> = (0..m).map(ParticipantId).collect();
    for r in 0..rounds {
        let input = |p: u16, len: usize| codec.encode(&(0..len).map(|e| f64::from(p) - e as f64 * 0.5 + f64::from(r)).collect::<Vec<_>>());
        let mut batch = vec![SumInstance {
            layer_tag: 1,
            group_tag: 0,
            mode: SumMode::Secure,
            inputs: everyone.iter().map(|p| (*p, input(p.0, 6))).collect(),
            delivery: everyone.clone(),
        }];
        if r % 2 == 1 {
            let sub = &everyone[..everyone.len() - 1];
            batch.push(SumInstance {
                layer_tag: 2,
                group_tag: 1,
                mode: SumMode::Secure,
                inputs: sub.iter().map(|p| (*p, input(p.0 + 7, 3))).collect(),
                delivery: sub.to_vec(),
            });
        }
        bus.exchange(batch).unwrap();
    }
    bus.into_transcript()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulated_views_match_real_ones(
        m in 3u16..7,
        rounds in 1u32..6,
        aggregator in any::<bool>(),
        colluding_aggregator in any::<bool>(),
        size_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let t = transcript(m, rounds, aggregator, seed);
        let size = ((f64::from(m - 2) + 1.0) * size_frac).floor() as u16;
        let size = size.min(m - 2);
        let agg = aggregator && colluding_aggregator;
        let coalition = Coalition::new((m - size..m).map(ParticipantId), agg, usize::from(m)).unwrap();
        let real = capture_view(&t, &coalition).unwrap();
        let sim = simulate_from(&real, seed ^ 1).unwrap();
        let rep = views_indistinguishable(&real, &sim);
        prop_assert!(rep.structure_equal, "{:?}", rep.issues);
        prop_assert!(rep.aggregates_equal, "{:?}", rep.issues);
        prop_assert!(rep.real_consistent && rep.sim_consistent, "{:?}", rep.issues);
        prop_assert_eq!(real.honest_residuals(), sim.honest_residuals());
    }

    #[test]
    fn coalitions_above_threshold_are_rejected(m in 2usize..20, extra in 1usize..4) {
        let too_many = (m - 2 + extra).min(usize::from(u16::MAX));
        prop_assert!(Coalition::new((0..too_many as u16).map(ParticipantId), false, m).is_err());
    }
}
