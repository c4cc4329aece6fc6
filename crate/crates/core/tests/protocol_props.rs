use std::f64::consts::PI;

use proptest::prelude::*;

use trinode_core::noise::NuclearSpinParams;
use trinode_core::phasestab::LinkId;
use trinode_core::protocol::{
    self, ClassicalMessage, ErrorSource, Event, EventKind, NodeId, Prepared, ProtocolConfig,
    ProtocolKind, RunRecord, TimingConfig,
};

fn runs(cfg: &ProtocolConfig, kind: ProtocolKind, n: u64) -> Vec<RunRecord> {
    let prep = Prepared::new(cfg).unwrap();
    (0..n)
        .map(|i| protocol::run_with(&prep, kind, i, &mut protocol::run_rng(cfg.seed, i)).unwrap())
        .collect()
}

fn check_log(r: &RunRecord) -> Result<(), String> {
    let ev: &[Event] = &r.events;
    for w in ev.windows(2) {
        if !(w[0].time_s < w[1].time_s || (w[0].time_s == w[1].time_s && w[0].seq < w[1].seq)) {
            return Err(format!("out of order: {:?} then {:?}", w[0], w[1]));
        }
    }
    for (i, e) in ev.iter().enumerate() {
        if let EventKind::MessageDelivered { sender, bits } = &e.kind {
            let sent = ev[..i].iter().any(|s| {
                s.node == *sender
                    && matches!(&s.kind, EventKind::MessageSent { receiver, bits: b, delivery_time_s }
                        if *receiver == e.node && b == bits && *delivery_time_s == e.time_s)
            });
            if !sent {
                return Err(format!("delivery without matching send: {e:?}"));
            }
        }
        if let EventKind::FeedForward { .. } = e.kind {
            let delivered = ev[..i]
                .iter()
                .any(|d| d.node == e.node && matches!(d.kind, EventKind::MessageDelivered { .. }));
            if !delivered {
                return Err(format!("feed-forward before any delivery: {e:?}"));
            }
        }
    }
    Ok(())
}

fn check_heralds(r: &RunRecord) -> Result<(), String> {
    let heralded = r
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::Heralded { success: true }));
    if r.success != heralded {
        return Err(format!(
            "success {} but heralded event {}",
            r.success, heralded
        ));
    }
    if !r.success {
        return if r.final_state.is_none() {
            Ok(())
        } else {
            Err("state delivered on a failed run".into())
        };
    }
    if r.final_state.is_none() || r.target_fidelity.is_none() {
        return Err("success without a final state".into());
    }
    for link in [LinkId::AB, LinkId::BC] {
        if !r
            .events
            .iter()
            .any(|e| matches!(e.kind, EventKind::LinkHerald { link: l, .. } if l == link))
        {
            return Err(format!("success without a {link:?} herald"));
        }
    }
    if r.kind == ProtocolKind::Swap && r.cr_check_passed != Some(true) {
        return Err("swap delivered without passing the CR check".into());
    }
    Ok(())
}

proptest! {
    #[test]
    fn message_latency_is_bits_times_interval_plus_decode(n_bits in 1usize..=5, send in 0.0f64..1.0, bit in 0u8..2) {
        let timing = TimingConfig::default();
        let msg = ClassicalMessage::new(NodeId::Bob, NodeId::Charlie, vec![bit; n_bits], send, &timing).unwrap();
        let latency = msg.delivery_time_s - msg.send_time_s;
        prop_assert!((latency - (n_bits as f64 * 60e-9 + 2e-6)).abs() <= 1e-12);
        prop_assert!(latency <= 300e-9 + 2e-6 + 1e-12);
    }

    #[test]
    fn nuclear_residual_within_half_step(n in 0u64..10_000_000, res_ns in 1.0f64..490.0) {
        let nuclear = NuclearSpinParams::default();
        let res = res_ns * 1e-9;
        let ff = protocol::nuclear_phase_feedforward(n, 5e-6, &nuclear, res).unwrap();
        let half_step = PI * res / nuclear.tau_larmor_s;
        prop_assert!(ff.quantization_error_rad.abs() <= half_step + 1e-9);
    }
}

#[test]
fn oversized_messages_rejected() {
    let t = TimingConfig::default();
    assert!(ClassicalMessage::new(NodeId::Alice, NodeId::Bob, vec![], 0.0, &t).is_err());
    assert!(ClassicalMessage::new(NodeId::Alice, NodeId::Bob, vec![0; 6], 0.0, &t).is_err());
}

#[test]
fn same_seed_same_record() {
    let cfg = ProtocolConfig {
        seed: 77,
        ..ProtocolConfig::reference()
    };
    for kind in [
        ProtocolKind::DoubleLink,
        ProtocolKind::Ghz,
        ProtocolKind::Swap,
    ] {
        let a = runs(&cfg, kind, 20);
        let b = runs(&cfg, kind, 20);
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}

#[test]
fn event_logs_are_ordered_and_causal() {
    let cfg = ProtocolConfig {
        seed: 3,
        ..ProtocolConfig::reference()
    };
    for kind in [
        ProtocolKind::DoubleLink,
        ProtocolKind::Ghz,
        ProtocolKind::Swap,
    ] {
        for r in runs(&cfg, kind, 300) {
            check_log(&r).unwrap_or_else(|e| panic!("{kind:?} run {}: {e}", r.run_index));
        }
    }
}

#[test]
fn only_heralded_runs_deliver_states() {
    let cfg = ProtocolConfig {
        seed: 4,
        ..ProtocolConfig::reference()
    };
    for kind in [ProtocolKind::Ghz, ProtocolKind::Swap] {
        let rs = runs(&cfg, kind, 300);
        assert!(rs.iter().any(|r| r.success) && rs.iter().any(|r| !r.success));
        for r in rs {
            check_heralds(&r).unwrap_or_else(|e| panic!("{kind:?} run {}: {e}", r.run_index));
        }
    }
}

#[test]
fn ideal_runs_reach_their_targets() {
    let cfg = ProtocolConfig {
        seed: 9,
        ..ProtocolConfig::ideal()
    };
    for kind in [ProtocolKind::Ghz, ProtocolKind::Swap] {
        let rs = runs(&cfg, kind, 200);
        let mut seen = std::collections::BTreeSet::new();
        for r in rs.iter().filter(|r| r.success) {
            let f = r.target_fidelity.unwrap();
            assert!(
                (f - 1.0).abs() <= 1e-10,
                "{kind:?} run {}: {f}",
                r.run_index
            );
            seen.insert(format!("{:?} {:?} {:?}", r.sign_ab, r.sign_bc, r.bsm_bits));
        }
        let branches = if kind == ProtocolKind::Ghz { 4 } else { 16 };
        assert_eq!(seen.len(), branches, "{kind:?} covered {seen:?}");
    }
}

#[test]
fn ghz_herald_rate_matches_readout_model() {
    let cfg = ProtocolConfig {
        seed: 21,
        ..ProtocolConfig::reference()
    };
    let expected = protocol::analyze_ghz(&cfg).unwrap().herald_probability;
    let s = protocol::run_batch_summary(&cfg, ProtocolKind::Ghz, 100_000).unwrap();
    let rate = s.outcomes[0].share;
    let se = s.outcomes[0].share_sem;
    assert!(
        (rate - expected).abs() <= 3.0 * se,
        "{rate} vs {expected} (se {se})"
    );
    assert!((s.n_success as f64 / s.n_established as f64 - rate).abs() < 1e-12);
}

#[test]
fn mean_memory_coherence_matches_truncated_geometric() {
    let cfg = ProtocolConfig {
        seed: 22,
        ..ProtocolConfig::reference()
    };
    let expected = protocol::expected_memory_coherence(&cfg).unwrap();
    let s = protocol::run_batch_summary(&cfg, ProtocolKind::DoubleLink, 100_000).unwrap();
    let m = s.memory_coherence.unwrap();
    assert!(
        (m.mean - expected).abs() <= 3.0 * m.sem,
        "{} vs {expected} (se {})",
        m.mean,
        m.sem
    );
}

#[test]
fn stored_pairs_match_link_fidelities() {
    let reference = ProtocolConfig::reference();
    let links_only = reference.isolated(&[ErrorSource::LinkAB, ErrorSource::LinkBC]);
    let (fa, fc) = protocol::double_link_pair_fidelities(&links_only).unwrap();
    assert!((fa - 0.809).abs() <= 0.01, "A-memory pair {fa}");
    assert!((fc - 0.814).abs() <= 0.01, "B-C pair {fc}");
    // waiting in the memory only costs the stored pair
    let (fa_all, fc_all) = protocol::double_link_pair_fidelities(&reference).unwrap();
    assert!(fa_all < fa - 0.01);
    assert!((fc_all - fc).abs() <= 1e-12);
}
