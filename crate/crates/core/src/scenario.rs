//! Lockstep multi-node simulation: per step and node, clean references pass
//! through the attack engine into the plant, the twin advances on the clean
//! references, and the residual, alarm and trust logic runs on the result.
//! Trust reports travel over the simulated network and the consensus rule is
//! evaluated at report boundaries.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{self, AnnDetector, FeatureHistory, FeatureWindow, Normalizer, TrainingReport};
use crate::attack::{apply_attack, ground_truth, AttackSpec, Channel, ChannelHistory, SimClock};
use crate::config::{Detector, NodeConfig, ScenarioConfig, SetpointStep};
use crate::coordination::{Assessment, Consensus, Network, TrustReport, VerdictKind, VerdictStream, VerdictTransition};
use crate::plant::{droop_reference, plant_step, ControllerInputs, GaussianNoise, NodeTelemetry, NoiseSource, PlantParams, PlantState};
use crate::seed::{derive_seed, stream, SeedPurpose};
use crate::twin::{self, detect, residual, trust_score, Calibration, MonitoredChannel, ResidualWindow, SnitchTwin, SustainedAlarm};
use crate::{Error, Result};

/// Timing hooks around detector work. The core crate has no clock.
pub trait Stopwatch {
    fn start(&mut self, detector: Detector);
    fn stop(&mut self, detector: Detector);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoStopwatch;

impl Stopwatch for NoStopwatch {
    fn start(&mut self, _: Detector) {}
    fn stop(&mut self, _: Detector) {}
}

/// One node at one step, as written to the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow<'a> {
    pub step: u64,
    pub time_s: f64,
    pub node: &'a str,
    pub v_g_true: f64,
    pub v_g_meas: f64,
    pub q_g_true: f64,
    pub q_g_meas: f64,
    pub q_setpoint_received: f64,
    pub twin_pred: f64,
    pub residual: f64,
    pub tau: f64,
    pub local_alarm: bool,
    pub verdict: &'a str,
}

pub trait TraceSink {
    fn row(&mut self, row: &TraceRow<'_>);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoTrace;

impl TraceSink for NoTrace {
    fn row(&mut self, _: &TraceRow<'_>) {}
}

impl<F: FnMut(&TraceRow<'_>)> TraceSink for F {
    fn row(&mut self, row: &TraceRow<'_>) {
        self(row)
    }
}

/// Twin threshold and variance in use for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCalibration {
    pub node: String,
    pub epsilon: f64,
    pub sigma_sq: f64,
    /// Statistics of the attack-free calibration run.
    pub healthy: Calibration,
}

/// Trained baseline for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAnn {
    pub node: String,
    pub detector: AnnDetector,
    pub validation_rmse: f64,
    pub dataset_samples: usize,
    pub report: TrainingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrations {
    pub twin: Vec<NodeCalibration>,
    /// Empty when the baseline is disabled.
    pub ann: Vec<NodeAnn>,
}

impl Calibrations {
    fn check(&self, cfg: &ScenarioConfig) -> Result<()> {
        let ids = cfg.node_ids();
        let twin_ok = self.twin.len() == ids.len() && self.twin.iter().zip(&ids).all(|(c, id)| c.node == *id);
        if !twin_ok {
            return Err(Error::config("calibration", "does not match the scenario nodes"));
        }
        if cfg.uses(Detector::Ann) {
            let ann_ok = self.ann.len() == ids.len() && self.ann.iter().zip(&ids).all(|(a, id)| a.node == *id);
            if !ann_ok {
                return Err(Error::config("ann", "trained models do not match the scenario nodes"));
            }
            for a in &self.ann {
                a.detector.validate()?;
            }
        }
        Ok(())
    }
}

/// Plant, attack taps and twin of one node.
struct NodeRig<'a> {
    cfg: &'a NodeConfig,
    params: PlantParams,
    channel: MonitoredChannel,
    state: PlantState,
    twin: SnitchTwin,
    history: ChannelHistory,
    /// Voltage and reactive power readings delivered to the controller last step.
    feedback: (f64, f64),
}

struct RigStep {
    telemetry: NodeTelemetry,
    twin_pred: f64,
    residual: f64,
    q_ref_true: f64,
}

impl<'a> NodeRig<'a> {
    fn new(cfg: &'a NodeConfig, channel: MonitoredChannel, attack: &AttackSpec, dt: f64) -> Result<Self> {
        let params = PlantParams { dt, ..cfg.plant };
        let state = PlantState::at_equilibrium(&params, cfg.setpoint_at(0, dt))?;
        Ok(NodeRig {
            cfg,
            params,
            channel,
            state,
            twin: SnitchTwin::new(&params, state, channel),
            history: ChannelHistory::for_attack(attack, dt),
            feedback: (state.v_g, state.q_g),
        })
    }

    fn step<N: NoiseSource>(&mut self, step: u64, attack: &AttackSpec, noise: &mut N) -> Result<RigStep> {
        let dt = self.params.dt;
        let now = SimClock::new(step, dt);
        let id = self.cfg.id.as_str();

        let q_clean = self.cfg.setpoint_at(step, dt);
        self.history.record(Channel::QSetpoint, q_clean);
        let inputs = ControllerInputs {
            q_setpoint: apply_attack(attack, id, Channel::QSetpoint, q_clean, &self.history, now),
            v_meas: self.feedback.0,
            q_meas: self.feedback.1,
        };
        let (next, mut tel) = plant_step(&self.state, &inputs, &self.params, noise).map_err(|e| e.at("plant", step))?;

        self.history.record(Channel::VMeas, tel.v_g_meas);
        self.history.record(Channel::QMeas, tel.q_g_meas);
        self.history.record(Channel::IMeas, tel.i_g_meas);
        tel.v_g_meas = apply_attack(attack, id, Channel::VMeas, tel.v_g_meas, &self.history, now);
        tel.q_g_meas = apply_attack(attack, id, Channel::QMeas, tel.q_g_meas, &self.history, now);
        tel.i_g_meas = apply_attack(attack, id, Channel::IMeas, tel.i_g_meas, &self.history, now);
        self.feedback = (tel.v_g_meas, tel.q_g_meas);
        self.state = next;

        let twin_pred = self.twin.twin_step(q_clean).map_err(|e| e.at("twin", step))?;
        if self.twin.step_index() != self.state.step {
            return Err(Error::Aborted {
                module: "scenario",
                step,
                cause: "twin and plant step indices diverged".to_string(),
            });
        }
        let residual = residual(self.channel.of(&tel), twin_pred).map_err(|e| e.at("twin", step))?;
        Ok(RigStep {
            telemetry: tel,
            twin_pred,
            residual,
            q_ref_true: droop_reference(tel.v_g_true, q_clean, &self.params),
        })
    }
}

/// Attack-free run of one node; residuals feed the twin calibration.
pub fn calibrate_twin(cfg: &ScenarioConfig, node: usize) -> Result<NodeCalibration> {
    let node_cfg = &cfg.nodes[node];
    let twin_cfg = cfg.twin_for(node);
    let none = AttackSpec::none();
    let mut rig = NodeRig::new(node_cfg, twin_cfg.monitored_channel, &none, cfg.dt)?;
    let mut noise = GaussianNoise(stream(cfg.master_seed, SeedPurpose::Calibration, node as u64, 0));
    let steps = cfg.calibration_steps();
    let mut residuals = Vec::with_capacity(steps as usize);
    for k in 1..=steps {
        residuals.push(rig.step(k, &none, &mut noise)?.residual);
    }
    let healthy = twin::calibrate(&residuals).map_err(|e| e.at("calibration", steps))?;
    Ok(NodeCalibration {
        node: node_cfg.id.clone(),
        epsilon: twin_cfg.epsilon.unwrap_or(healthy.epsilon),
        sigma_sq: twin_cfg.sigma_sq.unwrap_or(healthy.sigma_sq),
        healthy,
    })
}

/// One training row: raw feature window, droop reference target, and the
/// reactive power reading the alarm compares against.
struct AnnSample {
    window: FeatureWindow,
    target: f64,
    q_g_meas: f64,
}

fn ann_dataset(cfg: &ScenarioConfig, node: usize) -> Result<Vec<AnnSample>> {
    let a = &cfg.ann;
    let mut setpoints = stream(cfg.master_seed, SeedPurpose::AnnData, node as u64, 0);
    let steps = libm::round(a.training_duration_s / cfg.dt) as u64;
    let none = AttackSpec::none();
    let mut rows = Vec::new();
    let mut raw = Vec::with_capacity(ann::N_SIGNALS * a.n_m);
    for run in 0..a.training_runs {
        // One setpoint per equal slice of the range, jittered inside it.
        let [lo, hi] = a.training_setpoint_range;
        let u: f64 = setpoints.random();
        let q = lo + (hi - lo) * (run as f64 + u) / a.training_runs as f64;
        let node_cfg = NodeConfig {
            setpoint_schedule: alloc::vec![SetpointStep { t_s: 0.0, q_pu: q }],
            ..cfg.nodes[node].clone()
        };
        let mut rig = NodeRig::new(&node_cfg, cfg.twin_for(node).monitored_channel, &none, cfg.dt)?;
        let mut noise = GaussianNoise(stream(cfg.master_seed, SeedPurpose::AnnData, node as u64, run as u64 + 1));
        let mut history = FeatureHistory::new(a.n_m);
        for k in 1..=steps {
            let s = rig.step(k, &none, &mut noise)?;
            history.push(s.telemetry.v_g_meas, s.telemetry.i_g_meas);
            if k % a.sample_stride as u64 == 0 && history.fill(&mut raw) {
                rows.push(AnnSample {
                    window: FeatureWindow(raw.clone()),
                    target: s.q_ref_true,
                    q_g_meas: s.telemetry.q_g_meas,
                });
            }
        }
    }
    Ok(rows)
}

/// Train the baseline for one node on attack-free runs and calibrate its
/// threshold on the validation split.
pub fn train_ann(cfg: &ScenarioConfig, node: usize) -> Result<NodeAnn> {
    let a = &cfg.ann;
    let rows = ann_dataset(cfg, node)?;
    let seed = a.train.seed.unwrap_or_else(|| derive_seed(cfg.master_seed, SeedPurpose::AnnInit, node as u64, 0));
    let (train_idx, val_idx) = ann::split_indices(rows.len(), a.train.validation_fraction, seed);
    let train_rows: Vec<&[f64]> = train_idx.iter().map(|&i| rows[i].window.as_slice()).collect();
    let normalizer = Normalizer::fit(&train_rows)?;

    let mut scratch = Vec::new();
    let mut dataset = Vec::with_capacity(rows.len());
    for r in &rows {
        normalizer.apply_into(r.window.as_slice(), &mut scratch)?;
        dataset.push((FeatureWindow(scratch.clone()), r.target));
    }
    let trained = ann::train_on_split(&dataset, &train_idx, &val_idx, a.hidden, &a.train, seed)
        .map_err(|e| e.at("baseline_ann", 0))?;

    let mut deviations = Vec::with_capacity(val_idx.len());
    for &i in &val_idx {
        let q_hat = trained.params.forward(dataset[i].0.as_slice())?;
        deviations.push(rows[i].q_g_meas - q_hat);
    }
    let epsilon = match a.epsilon {
        Some(eps) => eps,
        None => twin::calibrate(&deviations).map_err(|e| e.at("baseline_ann", 0))?.epsilon,
    };
    let detector = AnnDetector { n_m: a.n_m, normalizer, params: trained.params, epsilon };
    detector.validate()?;
    Ok(NodeAnn {
        node: cfg.nodes[node].id.clone(),
        detector,
        validation_rmse: libm::sqrt(trained.report.best_validation_mse),
        dataset_samples: rows.len(),
        report: trained.report,
    })
}

/// Twin calibration for every node, plus baseline training when enabled.
pub fn calibrate_all(cfg: &ScenarioConfig) -> Result<Calibrations> {
    let twin = (0..cfg.nodes.len()).map(|i| calibrate_twin(cfg, i)).collect::<Result<Vec<_>>>()?;
    let ann = if cfg.uses(Detector::Ann) {
        (0..cfg.nodes.len()).map(|i| train_ann(cfg, i)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Calibrations { twin, ann })
}

/// Per-step series of one node. Index `i` holds step `i + 1`.
#[derive(Debug, Clone, Default)]
pub struct NodeSeries {
    pub node: String,
    pub sustain_steps: u32,
    pub truth: Vec<bool>,
    pub residual: Vec<f64>,
    pub tau: Vec<f64>,
    /// `|r| > epsilon` at each step.
    pub snitch_fired: Vec<bool>,
    /// Sustained local alarm.
    pub snitch_alarm: Vec<bool>,
    /// `|q_g_meas - q_hat|`, zero until the feature window fills.
    pub ann_deviation: Vec<f64>,
    pub ann_fired: Vec<bool>,
    pub ann_alarm: Vec<bool>,
    pub q_g_true: Vec<f64>,
    pub q_ref_true: Vec<f64>,
}

impl NodeSeries {
    fn with_capacity(node: &str, sustain_steps: u32, n: usize, ann: bool) -> Self {
        let ann_n = if ann { n } else { 0 };
        NodeSeries {
            node: node.to_string(),
            sustain_steps,
            truth: Vec::with_capacity(n),
            residual: Vec::with_capacity(n),
            tau: Vec::with_capacity(n),
            snitch_fired: Vec::with_capacity(n),
            snitch_alarm: Vec::with_capacity(n),
            ann_deviation: Vec::with_capacity(ann_n),
            ann_fired: Vec::with_capacity(ann_n),
            ann_alarm: Vec::with_capacity(ann_n),
            q_g_true: Vec::with_capacity(n),
            q_ref_true: Vec::with_capacity(n),
        }
    }

    pub fn fired(&self, detector: Detector) -> &[bool] {
        match detector {
            Detector::Snitch => &self.snitch_fired,
            Detector::Ann => &self.ann_fired,
        }
    }

    pub fn alarm(&self, detector: Detector) -> &[bool] {
        match detector {
            Detector::Snitch => &self.snitch_alarm,
            Detector::Ann => &self.ann_alarm,
        }
    }

    /// Continuous anomaly score, higher is more anomalous.
    pub fn score(&self, detector: Detector) -> impl Iterator<Item = f64> + '_ {
        let (snitch, ann) = match detector {
            Detector::Snitch => (Some(&self.residual), None),
            Detector::Ann => (None, Some(&self.ann_deviation)),
        };
        snitch
            .into_iter()
            .flat_map(|r| r.iter().map(|x| x.abs()))
            .chain(ann.into_iter().flat_map(|d| d.iter().copied()))
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub scenario_id: String,
    pub n_steps: u64,
    pub nodes: Vec<NodeSeries>,
    pub transitions: Vec<VerdictTransition>,
    pub evaluations: u64,
    pub non_none_evaluations: u64,
    pub blind_evaluations: u64,
}

impl ScenarioOutcome {
    /// Whether any evaluation produced `kind` implicating exactly `nodes`.
    pub fn reached_verdict(&self, kind: VerdictKind, nodes: &[u32]) -> bool {
        self.transitions.iter().any(|t| t.to == kind && t.implicated == nodes)
    }
}

fn verdict_label(assessment: &Assessment, ids: &[&str]) -> String {
    let kind = assessment.kind();
    let mut label = String::from(match kind {
        VerdictKind::None => "none",
        VerdictKind::Local => "local",
        VerdictKind::Coordinated => "coordinated",
    });
    if kind != VerdictKind::None {
        for (i, n) in assessment.implicated().iter().enumerate() {
            label.push(if i == 0 { ':' } else { '+' });
            label.push_str(ids[*n as usize]);
        }
    }
    label
}

struct NodeRuntime<'a> {
    rig: NodeRig<'a>,
    noise: GaussianNoise<rand_chacha::ChaCha8Rng>,
    epsilon: f64,
    sigma_sq: f64,
    window: ResidualWindow,
    snitch_alarm: SustainedAlarm,
    ann: Option<(&'a AnnDetector, FeatureHistory, SustainedAlarm)>,
}

/// Run one scenario with fixed calibrations.
///
/// Trace rows are emitted for steps that are multiples of `trace_stride`.
/// On a fatal error the rows already emitted stay with the sink.
pub fn run_scenario<T: TraceSink + ?Sized, S: Stopwatch + ?Sized>(
    cfg: &ScenarioConfig,
    calibrations: &Calibrations,
    trace: &mut T,
    clock: &mut S,
) -> Result<ScenarioOutcome> {
    calibrations.check(cfg)?;
    let dt = cfg.dt;
    let n_steps = cfg.n_steps();
    let use_ann = cfg.uses(Detector::Ann);
    let ids = cfg.node_ids();

    let mut nodes = Vec::with_capacity(cfg.nodes.len());
    let mut series = Vec::with_capacity(cfg.nodes.len());
    for (i, node_cfg) in cfg.nodes.iter().enumerate() {
        let twin_cfg = cfg.twin_for(i);
        let cal = &calibrations.twin[i];
        let ann = if use_ann {
            let det = &calibrations.ann[i].detector;
            Some((det, FeatureHistory::new(det.n_m), SustainedAlarm::new(twin_cfg.sustain_steps)))
        } else {
            None
        };
        nodes.push(NodeRuntime {
            rig: NodeRig::new(node_cfg, twin_cfg.monitored_channel, &cfg.attack, dt)?,
            noise: GaussianNoise(stream(cfg.master_seed, SeedPurpose::MeasurementNoise, i as u64, 0)),
            epsilon: cal.epsilon,
            sigma_sq: cal.sigma_sq,
            window: ResidualWindow::new(twin_cfg.window_samples(dt)),
            snitch_alarm: SustainedAlarm::new(twin_cfg.sustain_steps),
            ann,
        });
        series.push(NodeSeries::with_capacity(&node_cfg.id, twin_cfg.sustain_steps, n_steps as usize, use_ann));
    }

    let mut network = Network::new(cfg.network, dt, stream(cfg.master_seed, SeedPurpose::Network, 0, 0));
    let mut consensus = Consensus::new(cfg.consensus, nodes.len());
    let mut verdicts = VerdictStream::default();
    let mut label = String::from("none");
    let period = u64::from(cfg.network.report_period_steps);
    let mut raw = Vec::new();
    let mut scratch = Vec::new();
    let mut pending_rows: Vec<(RigStep, f64, bool)> = Vec::with_capacity(nodes.len());

    for k in 1..=n_steps {
        let now = SimClock::new(k, dt);
        pending_rows.clear();
        for (i, (node, out)) in nodes.iter_mut().zip(series.iter_mut()).enumerate() {
            let s = node.rig.step(k, &cfg.attack, &mut node.noise)?;

            clock.start(Detector::Snitch);
            let fired = detect(s.residual, node.epsilon);
            let alarm = node.snitch_alarm.update(fired);
            node.window.push(s.residual);
            let tau = trust_score(&node.window, node.sigma_sq, node.window.capacity()).map_err(|e| e.at("snitch_twin", k))?;
            clock.stop(Detector::Snitch);

            if let Some((det, history, sustained)) = node.ann.as_mut() {
                clock.start(Detector::Ann);
                history.push(s.telemetry.v_g_meas, s.telemetry.i_g_meas);
                let deviation = if history.fill(&mut raw) {
                    let q_hat = det.predict(&raw, &mut scratch).map_err(|e| e.at("baseline_ann", k))?;
                    (s.telemetry.q_g_meas - q_hat).abs()
                } else {
                    0.0
                };
                if !deviation.is_finite() {
                    return Err(Error::NonFinite { module: "baseline_ann", step: k });
                }
                let ann_fired = ann::ann_detect(deviation, 0.0, det.epsilon);
                let ann_alarm = sustained.update(ann_fired);
                clock.stop(Detector::Ann);
                out.ann_deviation.push(deviation);
                out.ann_fired.push(ann_fired);
                out.ann_alarm.push(ann_alarm);
            }

            if k % period == 0 {
                network.schedule_delivery(TrustReport { node: i as u32, sent_step: k, tau, local_alarm: alarm });
            }

            out.truth.push(ground_truth(&cfg.attack, &node.rig.cfg.id, now));
            out.residual.push(s.residual);
            out.tau.push(tau);
            out.snitch_fired.push(fired);
            out.snitch_alarm.push(alarm);
            out.q_g_true.push(s.telemetry.q_g_true);
            out.q_ref_true.push(s.q_ref_true);
            pending_rows.push((s, tau, alarm));
        }

        clock.start(Detector::Snitch);
        for report in network.drain_due(k) {
            consensus.ingest(report);
        }
        if k % period == 0 {
            let assessment = consensus.classify(k);
            label = verdict_label(&assessment, &ids);
            verdicts.push(assessment, k);
        }
        clock.stop(Detector::Snitch);

        if k % cfg.trace_stride == 0 {
            for (i, (s, tau, alarm)) in pending_rows.iter().enumerate() {
                trace.row(&TraceRow {
                    step: k,
                    time_s: now.time(),
                    node: ids[i],
                    v_g_true: s.telemetry.v_g_true,
                    v_g_meas: s.telemetry.v_g_meas,
                    q_g_true: s.telemetry.q_g_true,
                    q_g_meas: s.telemetry.q_g_meas,
                    q_setpoint_received: s.telemetry.q_setpoint_received,
                    twin_pred: s.twin_pred,
                    residual: s.residual,
                    tau: *tau,
                    local_alarm: *alarm,
                    verdict: &label,
                });
            }
        }
    }

    Ok(ScenarioOutcome {
        scenario_id: cfg.scenario_id.clone(),
        n_steps,
        nodes: series,
        transitions: verdicts.transitions().to_vec(),
        evaluations: verdicts.evaluations(),
        non_none_evaluations: verdicts.non_none_evaluations(),
        blind_evaluations: verdicts.blind_evaluations(),
    })
}
