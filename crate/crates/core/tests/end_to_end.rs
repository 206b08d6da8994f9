use std::collections::BTreeSet;

use snitch_core::attack::{AttackKind, AttackSpec};
use snitch_core::config::{Detector, ScenarioConfig, SuiteSpec};
use snitch_core::coordination::VerdictKind;
use snitch_core::evaluate::{score_scenario, suite_calibration_config, suite_scenarios};
use snitch_core::scenario::{calibrate_all, run_scenario, NoStopwatch, NoTrace, ScenarioOutcome};

fn run(cfg: &ScenarioConfig) -> ScenarioOutcome {
    let cal = calibrate_all(cfg).unwrap();
    run_scenario(cfg, &cal, &mut NoTrace, &mut NoStopwatch).unwrap()
}

fn snitch_only(attack: AttackSpec, seed: u64) -> ScenarioConfig {
    ScenarioConfig { attack, master_seed: seed, detectors: vec![Detector::Snitch], ..Default::default() }.resolve().unwrap()
}

#[test]
fn same_seed_gives_identical_series_and_verdicts() {
    let cfg = snitch_only(AttackSpec::ramp("bus21", 0.15, 0.5), 77);
    let (a, b) = (run(&cfg), run(&cfg));
    assert_eq!(a.transitions, b.transitions);
    for (x, y) in a.nodes.iter().zip(&b.nodes) {
        assert_eq!(x.residual, y.residual);
        assert_eq!(x.tau, y.tau);
        assert_eq!(x.q_g_true, y.q_g_true);
    }
}

#[test]
fn coordinated_verdict_survives_heavier_report_loss() {
    let mut hits = 0;
    for seed in 0..20 {
        let attack = AttackSpec::coordinated(vec![AttackSpec::bias("bus5", 0.12, -0.1), AttackSpec::bias("bus26", 0.15, 0.1)]);
        let mut cfg = snitch_only(attack, 900 + seed);
        cfg.network.drop_prob = 0.2;
        let cfg = cfg.resolve().unwrap();
        if run(&cfg).reached_verdict(VerdictKind::Coordinated, &[1, 3]) {
            hits += 1;
        }
    }
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn ramp_scores_as_detected_after_onset() {
    let cfg = snitch_only(AttackSpec::ramp("bus1", 0.2, 0.5), 5);
    let out = run(&cfg);
    let score = score_scenario(&cfg, &out, Detector::Snitch).unwrap();
    assert!(score.detected);
    assert_eq!(score.false_alarms, 0);
    assert!(score.detection_step.unwrap() >= 2000);
    assert!(out.reached_verdict(VerdictKind::Local, &[0]));
}

#[test]
fn healthy_scenario_scores_as_true_negative() {
    let cfg = snitch_only(AttackSpec::none(), 6);
    let out = run(&cfg);
    let score = score_scenario(&cfg, &out, Detector::Snitch).unwrap();
    assert!(!score.detected);
    assert_eq!(score.report.counts.tn, 1);
    assert_eq!(score.report.detection_delay_steps, None);
    assert_eq!(out.non_none_evaluations, 0);
}

#[test]
fn suite_generation_is_stable_and_well_formed() {
    let mut spec = SuiteSpec { master_seed: 12, ..Default::default() };
    spec.attack_types.push(AttackKind::Coordinated);
    let spec = spec.resolve().unwrap();
    let a = suite_scenarios(&spec).unwrap();
    assert_eq!(a, suite_scenarios(&spec).unwrap());
    assert_eq!(a.len(), 50);

    let ids: BTreeSet<&str> = a.iter().map(|c| c.scenario_id.as_str()).collect();
    let seeds: BTreeSet<u64> = a.iter().map(|c| c.master_seed).collect();
    assert_eq!(ids.len(), 50);
    assert_eq!(seeds.len(), 50);
    assert!(!seeds.contains(&suite_calibration_config(&spec).master_seed));

    for cfg in &a {
        let onset = cfg.attack.first_onset_step(cfg.dt);
        match cfg.attack.kind {
            AttackKind::None => assert_eq!(onset, None),
            AttackKind::Coordinated => {
                let nodes = cfg.attack.attacked_nodes();
                let distinct: BTreeSet<&&str> = nodes.iter().collect();
                assert_eq!(nodes.len(), 2);
                assert_eq!(distinct.len(), 2);
            }
            _ => {
                let step = onset.unwrap();
                assert!((1000..=3000).contains(&step), "{step}");
            }
        }
    }
}
