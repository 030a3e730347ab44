use std::collections::HashSet;

use distaudit::audit::{
    run_protocol1, run_protocol2, run_protocol3, run_protocol4, run_trial, AuditParams, ExecutionMode,
    ProtocolParams, RunOptions, StopPolicy, StopReason, TdkParams, ThresholdConfig,
};
use distaudit::cloudsim::{ErrorConfig, ErrorPattern, Scenario, ScenarioConfig};
use distaudit::sobol::SobolKey;
use distaudit::tdk::{generate_nonoverlapping, generate_overlapping, interpret, OverlapPlacement};
use distaudit::{audit::shared_sequence, audit::SequenceSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenario(blocks: u64, pattern: ErrorPattern, run_length: Option<u64>, seed: u64) -> Scenario {
    Scenario::provision(&ScenarioConfig {
        blocks,
        block_size: 64,
        seed,
        replicas: Some(3),
        jitter_us: Some(50),
        error: ErrorConfig {
            fraction: Some(0.01),
            count: None,
            pattern,
            run_length,
            seed: seed + 1,
        },
    })
    .unwrap()
}

#[test]
fn first_error_arrives_in_first_packet() {
    let n = 1u64 << 16;
    let sc = scenario(n, ErrorPattern::Random, None, 1);
    let params = AuditParams {
        protocol: ProtocolParams::Partition,
        subtpas: 4,
        threshold: 4,
        sample_pct: 20.0,
        sobol_degree: 10,
        options: RunOptions::default(),
    };
    let (mut hits, mut total) = (0, 0);
    for t in 0..5 {
        let out = run_trial(&sc.trial(t).unwrap(), n, &params, 11, t).unwrap();
        for a in &out.agents {
            assert!(a.packets[0].checked() >= 300);
            total += 1;
            hits += (a.first_error_packet() == Some(1)) as usize;
        }
    }
    assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
}

#[test]
fn overlapping_keys_cover_at_least_the_base() {
    let n = 1u64 << 13;
    let sc = scenario(n, ErrorPattern::Random, None, 2);
    let sealed = sc.trial(0).unwrap();
    let key = SobolKey::random(&mut ChaCha8Rng::seed_from_u64(4), 8, n, 2000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = generate_nonoverlapping(5, 3, 2000, &mut rng).unwrap();
    let th = ThresholdConfig::new(5, 5).unwrap();
    let o = RunOptions::default();
    let plain = run_protocol2(&sealed, &key, &base, &th, &o).unwrap();
    for placement in [OverlapPlacement::Shared, OverlapPlacement::PerKey] {
        let over = generate_overlapping(&base, 40, placement, &mut rng).unwrap();
        let out = run_protocol2(&sealed, &key, &over, &th, &o).unwrap();
        assert!(out.detected_blocks().is_superset(&plain.detected_blocks()));
        let challenged: usize = out.agents.iter().map(|a| a.checked()).sum();
        let base_challenged: usize = plain.agents.iter().map(|a| a.checked()).sum();
        assert!(challenged > base_challenged);
    }
}

#[test]
fn protocol2_covers_exactly_the_interpreted_positions() {
    let n = 1u64 << 14;
    let sc = scenario(n, ErrorPattern::Random, None, 3);
    let sealed = sc.trial(0).unwrap();
    let key = SobolKey::random(&mut ChaCha8Rng::seed_from_u64(6), 9, n, 3000).unwrap();
    let set = generate_nonoverlapping(7, 2, 3000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let th = ThresholdConfig::new(7, 7).unwrap();
    let out = run_protocol2(&sealed, &key, &set, &th, &RunOptions::default()).unwrap();
    let seq = shared_sequence(&key, SequenceSource::Sobol).unwrap();
    let mut union = HashSet::new();
    for (a, k) in out.agents.iter().zip(&set.keys) {
        assert_eq!(a.challenged_blocks(), interpret(k, &seq).indices);
        for b in a.challenged_blocks() {
            assert!(union.insert(b));
        }
    }
    let cov = set.coverage();
    let covered: HashSet<u64> = seq
        .iter()
        .enumerate()
        .filter(|(p, _)| cov[p % cov.len()] > 0)
        .map(|(_, &b)| b)
        .collect();
    assert_eq!(union, covered);
}

#[test]
fn adaptive_follow_up_reduces_signals_on_runs() {
    let n = 1u64 << 15;
    let sc = scenario(n, ErrorPattern::Runs, Some(64), 4);
    let (mut fewer, mut p2_total, mut p3_total) = (0, 0, 0);
    for t in 0..4 {
        let sealed = sc.trial(t).unwrap();
        let key = SobolKey::random(&mut ChaCha8Rng::seed_from_u64(t), 10, n, n / 5).unwrap();
        let set = generate_nonoverlapping(4, 3, n / 5, &mut ChaCha8Rng::seed_from_u64(100 + t)).unwrap();
        let th = ThresholdConfig::new(4, 4).unwrap();
        let o = RunOptions::default();
        let p2 = run_protocol2(&sealed, &key, &set, &th, &o).unwrap();
        let p3 = run_protocol3(&sealed, &key, &set, &th, 128, &o).unwrap();
        assert!(p3.detected_blocks().is_superset(&p2.detected_blocks()));
        fewer += (p3.signal_count() < p2.signal_count()) as usize;
        p2_total += p2.signal_count();
        p3_total += p3.signal_count();
    }
    assert_eq!(fewer, 4, "p2 {p2_total} vs p3 {p3_total}");
}

#[test]
fn execution_modes_agree_for_every_protocol() {
    let n = 1u64 << 13;
    let sc = scenario(n, ErrorPattern::Random, None, 5);
    let sealed = sc.trial(0).unwrap();
    for protocol in [
        ProtocolParams::Partition,
        ProtocolParams::Tdk(TdkParams { t: 2, overlap_pct: 0, placement: OverlapPlacement::Shared, unadjusted: false }),
        ProtocolParams::Adaptive {
            tdk: TdkParams { t: 2, overlap_pct: 25, placement: OverlapPlacement::PerKey, unadjusted: false },
            near_range: 64,
        },
        ProtocolParams::Autonomous { t: 5, self_pct: 30.0 },
    ] {
        for stop in [StopPolicy::RunToCompletion, StopPolicy::StopOnThreshold] {
            let mk = |mode| AuditParams {
                protocol: protocol.clone(),
                subtpas: 5,
                threshold: 3,
                sample_pct: 25.0,
                sobol_degree: 8,
                options: RunOptions { stop, mode, ..RunOptions::default() },
            };
            let a = run_trial(&sealed, n, &mk(ExecutionMode::Sequential), 1, 0).unwrap();
            let b = run_trial(&sealed, n, &mk(ExecutionMode::Concurrent), 1, 0).unwrap();
            assert_eq!(a, b, "{protocol:?} {stop:?}");
            if stop == StopPolicy::StopOnThreshold {
                assert!(matches!(a.stop, StopReason::ThresholdStop { .. }));
            }
        }
    }
}

#[test]
fn protocol_runs_never_report_clean_blocks() {
    let n = 1u64 << 12;
    let sc = scenario(n, ErrorPattern::Random, None, 6);
    let sealed = sc.trial(0).unwrap();
    let key = SobolKey::random(&mut ChaCha8Rng::seed_from_u64(8), 7, n, n).unwrap();
    let th = ThresholdConfig::new(3, 3).unwrap();
    let o = RunOptions::default();
    let p1 = run_protocol1(&sealed, &key, &th, &o).unwrap();
    assert_eq!(p1.detected_blocks(), sealed.corrupted);
    let p4 = run_protocol4(&sealed, &key, &th, 4, 50.0, &[1, 2, 3], &o).unwrap();
    assert!(p4.detected_blocks().is_subset(&sealed.corrupted));
    assert_eq!(p4.corrupted_covered, {
        let covered: HashSet<u64> = p4.agents.iter().flat_map(|a| a.challenged_blocks()).collect();
        sealed.corrupted.iter().filter(|b| covered.contains(b)).count()
    });
}
