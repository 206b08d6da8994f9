//! Scoring of scenario outcomes and suite aggregation, plus deterministic
//! generation of suite scenarios.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, AttackSpec};
use crate::config::{Detector, ScenarioConfig, SuiteSpec};
use crate::metrics::{
    first_sustained_run, roc_curve, sustained_runs_before, tracking_rmse, ConfusionCounts, MetricsReport, RocCurve,
};
use crate::scenario::{NodeSeries, ScenarioOutcome};
use crate::seed::{derive_seed, stream, SeedPurpose};
use crate::{Error, Result};

/// Headline figures reported for the original testbed. Recorded next to the
/// measured values for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFigures {
    pub snitch_accuracy: f64,
    pub snitch_fpr: f64,
    pub snitch_fnr: f64,
    pub snitch_delay_steps: f64,
    pub drl_delay_steps: f64,
    pub ann_delay_steps: f64,
    pub snitch_rmse_pu: f64,
    pub drl_rmse_pu: f64,
    pub ann_rmse_pu: f64,
}

pub const REFERENCE_FIGURES: ReferenceFigures = ReferenceFigures {
    snitch_accuracy: 0.95,
    snitch_fpr: 0.10,
    snitch_fnr: 0.08,
    snitch_delay_steps: 100.0,
    drl_delay_steps: 400.0,
    ann_delay_steps: 600.0,
    snitch_rmse_pu: 0.05,
    drl_rmse_pu: 0.15,
    ann_rmse_pu: 0.25,
};

/// One detector on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub scenario_id: String,
    pub attack_kind: AttackKind,
    pub detector: Detector,
    pub detected: bool,
    /// Sustained alarm runs that began before onset (the whole run when no attack).
    pub false_alarms: u64,
    /// Step the first post-onset sustained run began.
    pub detection_step: Option<u64>,
    /// Detection delay, or the remaining scenario length when missed.
    pub censored_delay_steps: Option<u64>,
    /// Per-step sustained alarm against ground truth, all nodes.
    pub step_counts: ConfusionCounts,
    /// Scenario-level counts and derived metrics.
    pub report: MetricsReport,
}

fn attack_onset(cfg: &ScenarioConfig) -> Option<u64> {
    match cfg.attack.kind {
        AttackKind::None => None,
        _ => cfg.attack.first_onset_step(cfg.dt),
    }
}

fn attacked_node_indices(cfg: &ScenarioConfig) -> Vec<usize> {
    cfg.attack
        .attacked_nodes()
        .iter()
        .filter_map(|id| cfg.nodes.iter().position(|n| n.id == *id))
        .collect()
}

fn series_for(outcome: &ScenarioOutcome, detector: Detector) -> Result<&[NodeSeries]> {
    let n = outcome.n_steps as usize;
    if outcome.nodes.iter().any(|s| s.fired(detector).len() != n || s.alarm(detector).len() != n) {
        return Err(Error::config("detectors", "detector was not run in this scenario"));
    }
    Ok(&outcome.nodes)
}

/// Score one detector on one scenario.
///
/// An attack scenario counts as detected when a sustained alarm run starts
/// on any node at or after onset. A missed attack is censored at the end of
/// the run, and its tracking error is taken over the last step only.
pub fn score_scenario(cfg: &ScenarioConfig, outcome: &ScenarioOutcome, detector: Detector) -> Result<ScenarioScore> {
    let nodes = series_for(outcome, detector)?;
    let n = outcome.n_steps as usize;
    if n == 0 {
        return Err(Error::Empty("scenario has no steps"));
    }

    let mut step_counts = ConfusionCounts::default();
    for s in nodes {
        for (a, t) in s.alarm(detector).iter().zip(&s.truth) {
            step_counts.record(*a, *t);
        }
    }

    let mut counts = ConfusionCounts::default();
    let (detected, false_alarms, detection_step, censored, rmse, delay) = match attack_onset(cfg) {
        None => {
            let runs: u64 = nodes.iter().map(|s| sustained_runs_before(s.fired(detector), n, s.sustain_steps as usize)).sum();
            counts.record(runs > 0, false);
            (runs > 0, runs, None, None, None, None)
        }
        Some(onset_step) => {
            let onset = (onset_step.max(1) - 1).min(n as u64 - 1) as usize;
            let first = nodes
                .iter()
                .filter_map(|s| first_sustained_run(s.fired(detector), onset, s.sustain_steps as usize))
                .min();
            let runs: u64 =
                nodes.iter().map(|s| sustained_runs_before(s.fired(detector), onset, s.sustain_steps as usize)).sum();
            counts.record(first.is_some(), true);
            let delay = first.map(|f| (f - onset) as u64);
            let start = first.unwrap_or(n - 1);
            let mut sum_sq = 0.0;
            let targets = attacked_node_indices(cfg);
            for &i in &targets {
                let r = tracking_rmse(&nodes[i].q_g_true, &nodes[i].q_ref_true, start..n)?;
                sum_sq += r * r;
            }
            let rmse = (!targets.is_empty()).then(|| libm::sqrt(sum_sq / targets.len() as f64));
            let censored = delay.unwrap_or((n - onset) as u64);
            (first.is_some(), runs, first.map(|f| f as u64 + 1), Some(censored), rmse, delay)
        }
    };

    let mut report = MetricsReport::from_counts(counts);
    report.detection_delay_steps = delay.map(|d| d as f64);
    report.rmse_pu = rmse;
    report.auc = {
        let mut acc = RocAccumulator::default();
        acc.add(outcome, RocScore::of(detector));
        acc.curve(0).ok().map(|c| c.auc)
    };
    Ok(ScenarioScore {
        scenario_id: outcome.scenario_id.clone(),
        attack_kind: cfg.attack.kind,
        detector,
        detected,
        false_alarms,
        detection_step,
        censored_delay_steps: censored,
        step_counts,
        report,
    })
}

/// Per-attack-type breakdown inside a suite aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub attack_kind: AttackKind,
    pub scenarios: u64,
    pub detected: u64,
    pub mean_delay_steps: Option<f64>,
    pub mean_censored_delay_steps: Option<f64>,
    pub mean_rmse_pu: Option<f64>,
}

/// Suite-level results for one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteAggregate {
    pub detector: Detector,
    pub scenarios: u64,
    pub failures: u64,
    /// Scenario-level counts and derived metrics. `detection_delay_steps` is
    /// the mean over detected attacks; `rmse_pu` the mean over attack
    /// scenarios; `auc` is pooled over every step of every scenario.
    pub report: MetricsReport,
    /// Mean delay with missed attacks counted at their remaining length.
    pub mean_censored_delay_steps: Option<f64>,
    pub false_alarms: u64,
    pub step_counts: ConfusionCounts,
    pub by_kind: Vec<KindSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(detector: Detector, scores: &[ScenarioScore], failures: u64, pooled_auc: Option<f64>) -> SuiteAggregate {
    let mine: Vec<&ScenarioScore> = scores.iter().filter(|s| s.detector == detector).collect();
    let mut counts = ConfusionCounts::default();
    let mut step_counts = ConfusionCounts::default();
    for s in &mine {
        counts.merge(&s.report.counts);
        step_counts.merge(&s.step_counts);
    }
    let mut report = MetricsReport::from_counts(counts);
    report.detection_delay_steps = mean(mine.iter().filter_map(|s| s.report.detection_delay_steps));
    report.rmse_pu = mean(mine.iter().filter_map(|s| s.report.rmse_pu));
    report.auc = pooled_auc;

    let mut kinds: Vec<AttackKind> = mine.iter().map(|s| s.attack_kind).collect();
    kinds.sort_unstable();
    kinds.dedup();
    let by_kind = kinds
        .into_iter()
        .map(|kind| {
            let of_kind: Vec<&&ScenarioScore> = mine.iter().filter(|s| s.attack_kind == kind).collect();
            KindSummary {
                attack_kind: kind,
                scenarios: of_kind.len() as u64,
                detected: of_kind.iter().filter(|s| s.detected).count() as u64,
                mean_delay_steps: mean(of_kind.iter().filter_map(|s| s.report.detection_delay_steps)),
                mean_censored_delay_steps: mean(of_kind.iter().filter_map(|s| s.censored_delay_steps.map(|d| d as f64))),
                mean_rmse_pu: mean(of_kind.iter().filter_map(|s| s.report.rmse_pu)),
            }
        })
        .collect();

    SuiteAggregate {
        detector,
        scenarios: mine.len() as u64,
        failures,
        report,
        mean_censored_delay_steps: mean(mine.iter().filter_map(|s| s.censored_delay_steps.map(|d| d as f64))),
        false_alarms: mine.iter().map(|s| s.false_alarms).sum(),
        step_counts,
        by_kind,
    }
}

/// Continuous per-step anomaly scores used for ROC analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RocScore {
    /// Twin residual magnitude `|r|`.
    Snitch,
    /// `1 - tau`.
    SnitchTrust,
    /// Baseline deviation `|q_g_meas - q_hat|`.
    Ann,
}

impl RocScore {
    pub const ALL: [RocScore; 3] = [RocScore::Snitch, RocScore::SnitchTrust, RocScore::Ann];

    pub fn of(detector: Detector) -> Self {
        match detector {
            Detector::Snitch => RocScore::Snitch,
            Detector::Ann => RocScore::Ann,
        }
    }

    pub fn detector(self) -> Detector {
        match self {
            RocScore::Snitch | RocScore::SnitchTrust => Detector::Snitch,
            RocScore::Ann => Detector::Ann,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RocScore::Snitch => "snitch",
            RocScore::SnitchTrust => "snitch_trust",
            RocScore::Ann => "ann",
        }
    }
}

/// Per-step scores and labels pooled across nodes and scenarios.
#[derive(Debug, Clone, Default)]
pub struct RocAccumulator {
    pub score: Vec<f64>,
    pub truth: Vec<bool>,
}

impl RocAccumulator {
    pub fn add(&mut self, outcome: &ScenarioOutcome, kind: RocScore) {
        for s in &outcome.nodes {
            match kind {
                RocScore::Snitch => self.score.extend(s.residual.iter().map(|r| r.abs())),
                RocScore::SnitchTrust => self.score.extend(s.tau.iter().map(|t| 1.0 - t)),
                RocScore::Ann => {
                    if s.ann_deviation.len() != s.truth.len() {
                        continue;
                    }
                    self.score.extend(s.ann_deviation.iter().copied())
                }
            }
            self.truth.extend(s.truth.iter().copied());
        }
    }

    pub fn merge(&mut self, other: RocAccumulator) {
        self.score.extend(other.score);
        self.truth.extend(other.truth);
    }

    pub fn curve(&self, n_thresholds: usize) -> Result<RocCurve> {
        roc_curve(&self.score, &self.truth, n_thresholds)
    }
}

/// Position of an attack type in seed derivation. Independent of the order
/// attack types are listed in a suite.
fn kind_code(kind: AttackKind) -> u64 {
    match kind {
        AttackKind::None => 0,
        AttackKind::Bias => 1,
        AttackKind::Ramp => 2,
        AttackKind::Delay => 3,
        AttackKind::Coordinated => 4,
    }
}

pub fn scenario_seed(suite_seed: u64, kind: AttackKind, index: usize) -> u64 {
    derive_seed(suite_seed, SeedPurpose::Scenario, kind_code(kind), index as u64)
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn signed(rng: &mut ChaCha8Rng, value: f64, random_sign: bool) -> f64 {
    if random_sign && rng.random_bool(0.5) {
        -value
    } else {
        value
    }
}

/// Attack for scenario `index` of `kind`, drawn from the suite's ranges.
pub fn suite_attack(suite: &SuiteSpec, kind: AttackKind, seed: u64) -> AttackSpec {
    let v = &suite.variation;
    let mut rng = stream(seed, SeedPurpose::AttackVariation, 0, 0);
    let targets = v.targets(&suite.base);
    let onset = draw(&mut rng, v.onset_s);
    let target = targets[rng.random_range(0..targets.len())];
    match kind {
        AttackKind::None => AttackSpec::none(),
        AttackKind::Bias => {
            let m = draw(&mut rng, v.bias_magnitude);
            AttackSpec::bias(target, onset, signed(&mut rng, m, v.random_sign))
        }
        AttackKind::Ramp => {
            let s = draw(&mut rng, v.ramp_slope);
            AttackSpec::ramp(target, onset, signed(&mut rng, s, v.random_sign))
        }
        AttackKind::Delay => AttackSpec::delay(target, onset, draw(&mut rng, v.delay_s)),
        AttackKind::Coordinated => {
            let mut pool: Vec<&str> = targets.clone();
            let mut components = Vec::with_capacity(v.coordinated_nodes);
            let mut t = onset;
            for c in 0..v.coordinated_nodes {
                let node = pool.swap_remove(rng.random_range(0..pool.len()));
                if c > 0 {
                    t += draw(&mut rng, v.coordinated_stagger_s);
                }
                let m = draw(&mut rng, v.bias_magnitude);
                components.push(AttackSpec::bias(node, t, signed(&mut rng, m, v.random_sign)));
            }
            AttackSpec::coordinated(components)
        }
    }
}

/// Fully resolved configuration of every suite scenario, in output order.
pub fn suite_scenarios(suite: &SuiteSpec) -> Result<Vec<ScenarioConfig>> {
    let mut out = Vec::with_capacity(suite.scenario_count());
    for &kind in &suite.attack_types {
        for index in 0..suite.scenarios_per_type {
            let seed = scenario_seed(suite.master_seed, kind, index);
            let cfg = ScenarioConfig {
                scenario_id: suite.scenario_id(kind, index),
                attack: suite_attack(suite, kind, seed),
                master_seed: seed,
                trace_stride: suite.trace_stride,
                ..suite.base.clone()
            };
            out.push(cfg.resolve()?);
        }
    }
    Ok(out)
}

/// Configuration used to calibrate a whole suite once.
pub fn suite_calibration_config(suite: &SuiteSpec) -> ScenarioConfig {
    ScenarioConfig {
        scenario_id: suite.suite_id.to_string(),
        attack: AttackSpec::none(),
        master_seed: suite.master_seed,
        ..suite.base.clone()
    }
}
