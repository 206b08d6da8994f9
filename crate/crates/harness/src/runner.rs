//! Calibration, single runs, suites and ROC sweeps, plus the files each writes.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use snitch_core::attack::AttackSpec;
use snitch_core::config::{Detector, ScenarioConfig, SuiteSpec};
use snitch_core::coordination::VerdictKind;
use snitch_core::evaluate::{
    aggregate, score_scenario, suite_calibration_config, suite_scenarios, ReferenceFigures, RocAccumulator, RocScore,
    ScenarioScore, SuiteAggregate, REFERENCE_FIGURES,
};
use snitch_core::metrics::{RocCurve, RocPoint};
use snitch_core::scenario::{
    calibrate_twin, run_scenario, train_ann, Calibrations, ScenarioOutcome, Stopwatch,
};

use crate::error::{HarnessError, Result};
use crate::files::{csv_bytes, echo, write_bytes, write_json, CsvTrace, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum MetricsFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl MetricsFormat {
    fn csv(self) -> bool {
        matches!(self, MetricsFormat::Csv | MetricsFormat::Both)
    }

    fn json(self) -> bool {
        matches!(self, MetricsFormat::Json | MetricsFormat::Both)
    }
}

/// Wall-clock time spent in each detector's update code.
#[derive(Debug, Default)]
pub struct WallClock {
    started: [Option<Instant>; 2],
    total: [Duration; 2],
}

fn slot(d: Detector) -> usize {
    match d {
        Detector::Snitch => 0,
        Detector::Ann => 1,
    }
}

impl Stopwatch for WallClock {
    fn start(&mut self, d: Detector) {
        self.started[slot(d)] = Some(Instant::now());
    }

    fn stop(&mut self, d: Detector) {
        if let Some(t) = self.started[slot(d)].take() {
            self.total[slot(d)] += t.elapsed();
        }
    }
}

impl WallClock {
    pub fn seconds(&self, d: Detector) -> f64 {
        self.total[slot(d)].as_secs_f64()
    }
}

/// Twin calibration and baseline training, one node per task.
pub fn calibrate(cfg: &ScenarioConfig) -> Result<Calibrations> {
    let n = cfg.nodes.len();
    let twin = (0..n).into_par_iter().map(|i| calibrate_twin(cfg, i)).collect::<Result<Vec<_>, _>>()?;
    let ann = if cfg.uses(Detector::Ann) {
        (0..n).into_par_iter().map(|i| train_ann(cfg, i)).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(Calibrations { twin, ann })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub compute_time_s: std::collections::BTreeMap<&'static str, f64>,
    pub wall_time_s: f64,
}

fn timing(clock: &WallClock, detectors: &[Detector], wall: Duration) -> TimingReport {
    TimingReport {
        compute_time_s: detectors.iter().map(|d| (d.as_str(), clock.seconds(*d))).collect(),
        wall_time_s: wall.as_secs_f64(),
    }
}

/// One finished (or failed) scenario.
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub trace: Vec<u8>,
    pub scores: Vec<ScenarioScore>,
    pub roc: Vec<(RocScore, RocAccumulator)>,
    pub outcome: Option<ScenarioOutcome>,
    pub error: Option<HarnessError>,
    pub clock: WallClock,
}

/// Run and score one scenario. Failures are captured, keeping the partial trace.
pub fn execute(cfg: &ScenarioConfig, calibrations: &Calibrations, keep_outcome: bool) -> ScenarioRun {
    let provenance = Provenance::of(cfg.master_seed, cfg);
    let mut trace = CsvTrace::new(&provenance);
    let mut clock = WallClock::default();
    let result = run_scenario(cfg, calibrations, &mut trace, &mut clock);
    let trace = trace.finish().unwrap_or_default();
    let mut run = ScenarioRun {
        config: cfg.clone(),
        trace,
        scores: Vec::new(),
        roc: Vec::new(),
        outcome: None,
        error: None,
        clock,
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            run.error = Some(e.into());
            return run;
        }
    };
    for &d in &cfg.detectors {
        match score_scenario(cfg, &outcome, d) {
            Ok(s) => run.scores.push(s),
            Err(e) => {
                run.error = Some(e.into());
                return run;
            }
        }
    }
    for kind in RocScore::ALL {
        if cfg.uses(kind.detector()) {
            let mut acc = RocAccumulator::default();
            acc.add(&outcome, kind);
            run.roc.push((kind, acc));
        }
    }
    if keep_outcome {
        run.outcome = Some(outcome);
    }
    run
}

/// Flat CSV row; one per detector per scenario, plus `AGGREGATE` rows.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub scenario_id: String,
    pub detector: &'static str,
    pub attack_kind: String,
    /// 0/1 for a scenario, the number of detected scenarios for an aggregate.
    pub detected: u64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub detection_delay_steps: Option<f64>,
    pub censored_delay_steps: Option<f64>,
    pub rmse_pu: Option<f64>,
    pub auc: Option<f64>,
    pub false_alarms: u64,
    pub step_tp: u64,
    pub step_tn: u64,
    pub step_fp: u64,
    pub step_fn: u64,
    pub failures: u64,
}

impl MetricsRow {
    pub fn scenario(s: &ScenarioScore) -> Self {
        let r = &s.report;
        MetricsRow {
            scenario_id: s.scenario_id.clone(),
            detector: s.detector.as_str(),
            attack_kind: s.attack_kind.as_str().to_string(),
            detected: u64::from(s.detected),
            tp: r.counts.tp,
            tn: r.counts.tn,
            fp: r.counts.fp,
            fn_: r.counts.fn_,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            fpr: r.fpr,
            fnr: r.fnr,
            detection_delay_steps: r.detection_delay_steps,
            censored_delay_steps: s.censored_delay_steps.map(|d| d as f64),
            rmse_pu: r.rmse_pu,
            auc: r.auc,
            false_alarms: s.false_alarms,
            step_tp: s.step_counts.tp,
            step_tn: s.step_counts.tn,
            step_fp: s.step_counts.fp,
            step_fn: s.step_counts.fn_,
            failures: 0,
        }
    }

    pub fn aggregate(a: &SuiteAggregate) -> Self {
        let r = &a.report;
        MetricsRow {
            scenario_id: "AGGREGATE".to_string(),
            detector: a.detector.as_str(),
            attack_kind: "all".to_string(),
            detected: a.by_kind.iter().map(|k| k.detected).sum(),
            tp: r.counts.tp,
            tn: r.counts.tn,
            fp: r.counts.fp,
            fn_: r.counts.fn_,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            fpr: r.fpr,
            fnr: r.fnr,
            detection_delay_steps: r.detection_delay_steps,
            censored_delay_steps: a.mean_censored_delay_steps,
            rmse_pu: r.rmse_pu,
            auc: r.auc,
            false_alarms: a.false_alarms,
            step_tp: a.step_counts.tp,
            step_tn: a.step_counts.tn,
            step_fp: a.step_counts.fp,
            step_fn: a.step_counts.fn_,
            failures: a.failures,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionRecord {
    pub step: u64,
    pub from: VerdictKind,
    pub to: VerdictKind,
    pub implicated: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerdictSummary {
    pub evaluations: u64,
    pub non_none_evaluations: u64,
    pub blind_evaluations: u64,
    pub transitions: Vec<TransitionRecord>,
}

impl VerdictSummary {
    pub fn of(cfg: &ScenarioConfig, o: &ScenarioOutcome) -> Self {
        VerdictSummary {
            evaluations: o.evaluations,
            non_none_evaluations: o.non_none_evaluations,
            blind_evaluations: o.blind_evaluations,
            transitions: o
                .transitions
                .iter()
                .map(|t| TransitionRecord {
                    step: t.step,
                    from: t.from,
                    to: t.to,
                    implicated: t.implicated.iter().map(|i| cfg.nodes[*i as usize].id.clone()).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct RunMetricsDoc<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    scenario_id: &'a str,
    attack: &'a AttackSpec,
    scores: &'a [ScenarioScore],
    verdicts: Option<VerdictSummary>,
    reference_figures: ReferenceFigures,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct CalibrationDoc<'a> {
    twin: &'a [snitch_core::scenario::NodeCalibration],
}

#[derive(Serialize)]
struct AnnDoc<'a> {
    train_config_hash: String,
    models: &'a [snitch_core::scenario::NodeAnn],
}

fn write_calibration(out: &Path, provenance: &Provenance, cfg: &ScenarioConfig, cal: &Calibrations) -> Result<()> {
    write_json(&out.join("calibration.json"), &Stamped { provenance, body: CalibrationDoc { twin: &cal.twin } })?;
    if !cal.ann.is_empty() {
        let body = AnnDoc { train_config_hash: crate::files::config_hash(&cfg.ann), models: &cal.ann };
        write_json(&out.join("ann_model.json"), &Stamped { provenance, body })?;
    }
    Ok(())
}

/// `calibrate`: healthy-run statistics and the trained baseline.
pub fn calibrate_to(cfg: &ScenarioConfig, out: &Path) -> Result<Calibrations> {
    let provenance = Provenance::of(cfg.master_seed, cfg);
    let cal = calibrate(cfg)?;
    write_json(&out.join("config.json"), &echo(cfg.master_seed, cfg))?;
    write_calibration(out, &provenance, cfg, &cal)?;
    Ok(cal)
}

/// Paths written by a single run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: PathBuf,
    pub trace: PathBuf,
    pub metrics: Vec<PathBuf>,
    pub calibration: PathBuf,
    pub timing: PathBuf,
}

/// `run`: calibrate, simulate, score and write every artifact. The partial
/// trace is written before a simulation error is returned.
pub fn run_to(cfg: &ScenarioConfig, out: &Path, format: MetricsFormat) -> Result<(RunArtifacts, ScenarioRun)> {
    let started = Instant::now();
    let provenance = Provenance::of(cfg.master_seed, cfg);
    let cal = calibrate(cfg)?;
    let config = out.join("config.json");
    write_json(&config, &echo(cfg.master_seed, cfg))?;
    write_calibration(out, &provenance, cfg, &cal)?;
    let mut run = execute(cfg, &cal, true);
    let trace = out.join("trace.csv");
    write_bytes(&trace, &run.trace)?;
    if let Some(e) = run.error.take() {
        return Err(e);
    }
    let mut metrics = Vec::new();
    if format.json() {
        let path = out.join("metrics.json");
        write_json(
            &path,
            &RunMetricsDoc {
                provenance: &provenance,
                scenario_id: &cfg.scenario_id,
                attack: &cfg.attack,
                scores: &run.scores,
                verdicts: run.outcome.as_ref().map(|o| VerdictSummary::of(cfg, o)),
                reference_figures: REFERENCE_FIGURES,
            },
        )?;
        metrics.push(path);
    }
    if format.csv() {
        let path = out.join("metrics.csv");
        write_bytes(&path, &csv_bytes(&provenance, run.scores.iter().map(MetricsRow::scenario))?)?;
        metrics.push(path);
    }
    let timing_path = out.join("timing.json");
    write_json(&timing_path, &timing(&run.clock, &cfg.detectors, started.elapsed()))?;
    let artifacts = RunArtifacts {
        config,
        trace,
        metrics,
        calibration: out.join("calibration.json"),
        timing: timing_path,
    };
    Ok((artifacts, run))
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRecord {
    pub scenario_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RocSummary {
    pub score: RocScore,
    pub auc: Option<f64>,
    pub positives: u64,
    pub negatives: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything a suite produced, in scenario order.
pub struct SuiteResult {
    pub spec: SuiteSpec,
    pub provenance: Provenance,
    pub calibrations: Calibrations,
    pub runs: Vec<ScenarioRun>,
    pub aggregates: Vec<SuiteAggregate>,
    pub roc: Vec<(RocScore, Result<RocCurve, snitch_core::Error>)>,
    pub wall_time: Duration,
}

impl SuiteResult {
    pub fn scores(&self) -> impl Iterator<Item = &ScenarioScore> {
        self.runs.iter().flat_map(|r| r.scores.iter())
    }

    pub fn failures(&self) -> Vec<FailureRecord> {
        self.runs
            .iter()
            .filter_map(|r| {
                r.error.as_ref().map(|e| FailureRecord { scenario_id: r.config.scenario_id.clone(), error: e.to_string() })
            })
            .collect()
    }

    pub fn aggregate_for(&self, d: Detector) -> Option<&SuiteAggregate> {
        self.aggregates.iter().find(|a| a.detector == d)
    }

    pub fn auc(&self, score: RocScore) -> Option<f64> {
        self.roc.iter().find(|(k, _)| *k == score).and_then(|(_, c)| c.as_ref().ok()).map(|c| c.auc)
    }

    pub fn roc_summaries(&self) -> Vec<RocSummary> {
        self.roc
            .iter()
            .map(|(k, c)| match c {
                Ok(c) => RocSummary {
                    score: *k,
                    auc: Some(c.auc),
                    positives: c.positives,
                    negatives: c.negatives,
                    error: None,
                },
                Err(e) => RocSummary { score: *k, auc: None, positives: 0, negatives: 0, error: Some(e.to_string()) },
            })
            .collect()
    }
}

/// Calibrate once, run every scenario (in parallel), and aggregate in
/// scenario order.
pub fn run_suite(spec: &SuiteSpec, keep_outcomes: bool) -> Result<SuiteResult> {
    let started = Instant::now();
    let provenance = Provenance::of(spec.master_seed, spec);
    let calibrations = calibrate(&suite_calibration_config(spec))?;
    let configs = suite_scenarios(spec)?;
    let runs: Vec<ScenarioRun> = configs.par_iter().map(|cfg| execute(cfg, &calibrations, keep_outcomes)).collect();

    let failures = runs.iter().filter(|r| r.error.is_some()).count() as u64;
    let mut roc = Vec::new();
    for kind in RocScore::ALL {
        if !spec.base.uses(kind.detector()) {
            continue;
        }
        let mut pooled = RocAccumulator::default();
        for r in &runs {
            if let Some((_, acc)) = r.roc.iter().find(|(k, _)| *k == kind) {
                pooled.score.extend_from_slice(&acc.score);
                pooled.truth.extend_from_slice(&acc.truth);
            }
        }
        roc.push((kind, pooled.curve(spec.n_roc_thresholds)));
    }
    let scores: Vec<ScenarioScore> = runs.iter().flat_map(|r| r.scores.iter().cloned()).collect();
    let aggregates = spec
        .base
        .detectors
        .iter()
        .map(|&d| {
            let auc = roc.iter().find(|(k, _)| *k == RocScore::of(d)).and_then(|(_, c)| c.as_ref().ok()).map(|c| c.auc);
            aggregate(d, &scores, failures, auc)
        })
        .collect();
    Ok(SuiteResult {
        spec: spec.clone(),
        provenance,
        calibrations,
        runs,
        aggregates,
        roc,
        wall_time: started.elapsed(),
    })
}

#[derive(Serialize)]
struct SuiteMetricsDoc<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    suite_id: &'a str,
    scenarios: Vec<&'a ScenarioScore>,
    aggregates: &'a [SuiteAggregate],
    failures: Vec<FailureRecord>,
    roc: Vec<RocSummary>,
    reference_figures: ReferenceFigures,
}

/// `suite`: config echo, calibration, per-scenario traces, metrics and timing.
pub fn write_suite(result: &SuiteResult, out: &Path, format: MetricsFormat) -> Result<()> {
    let spec = &result.spec;
    let p = &result.provenance;
    write_json(&out.join("suite.json"), &echo(spec.master_seed, spec))?;
    write_calibration(out, p, &spec.base, &result.calibrations)?;
    for run in &result.runs {
        write_bytes(&out.join("traces").join(format!("{}.csv", run.config.scenario_id)), &run.trace)?;
    }
    if format.json() {
        write_json(
            &out.join("metrics.json"),
            &SuiteMetricsDoc {
                provenance: p,
                suite_id: &spec.suite_id,
                scenarios: result.scores().collect(),
                aggregates: &result.aggregates,
                failures: result.failures(),
                roc: result.roc_summaries(),
                reference_figures: REFERENCE_FIGURES,
            },
        )?;
    }
    if format.csv() {
        let rows = result.scores().map(MetricsRow::scenario).chain(result.aggregates.iter().map(MetricsRow::aggregate));
        write_bytes(&out.join("metrics.csv"), &csv_bytes(p, rows)?)?;
    }
    let mut clock_totals = std::collections::BTreeMap::new();
    for d in &spec.base.detectors {
        clock_totals.insert(d.as_str(), result.runs.iter().map(|r| r.clock.seconds(*d)).sum::<f64>());
    }
    write_json(
        &out.join("timing.json"),
        &TimingReport { compute_time_s: clock_totals, wall_time_s: result.wall_time.as_secs_f64() },
    )
}

#[derive(Serialize)]
struct RocCsvRow {
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

fn roc_rows(points: &[RocPoint]) -> impl Iterator<Item = RocCsvRow> + '_ {
    points.iter().map(|p| RocCsvRow { threshold: p.threshold, fpr: p.fpr, tpr: p.tpr })
}

/// `roc`: one `(threshold, fpr, tpr)` file per score plus an AUC summary.
/// Fails when the pooled labels hold a single class.
pub fn write_roc(result: &SuiteResult, out: &Path) -> Result<()> {
    let p = &result.provenance;
    for (kind, curve) in &result.roc {
        let curve = curve.as_ref().map_err(|e| HarnessError::Runtime(e.clone()))?;
        write_bytes(&out.join(format!("roc_{}.csv", kind.as_str())), &csv_bytes(p, roc_rows(&curve.points))?)?;
    }
    #[derive(Serialize)]
    struct Doc {
        roc: Vec<RocSummary>,
    }
    write_json(&out.join("roc_summary.json"), &Stamped { provenance: p, body: Doc { roc: result.roc_summaries() } })
}
