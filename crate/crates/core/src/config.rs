//! Scenario and suite configuration with default resolution and validation.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::{Deserialize, Serialize};

use crate::ann::TrainConfig;
use crate::attack::{seconds_to_steps, AttackKind, AttackSpec};
use crate::coordination::{ConsensusConfig, NetworkConfig};
use crate::plant::PlantParams;
use crate::twin::{TwinConfig, MIN_CALIBRATION_SAMPLES};
use crate::{Error, Result};

/// Default node labels, one per generator bus.
pub const DEFAULT_NODE_IDS: [&str; 4] = ["bus1", "bus5", "bus21", "bus26"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Snitch,
    Ann,
}

impl Detector {
    pub const ALL: [Detector; 2] = [Detector::Snitch, Detector::Ann];

    pub fn as_str(self) -> &'static str {
        match self {
            Detector::Snitch => "snitch",
            Detector::Ann => "ann",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointStep {
    pub t_s: f64,
    pub q_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    #[serde(default)]
    pub plant: PlantParams,
    /// Piecewise-constant operator setpoints, ascending in time.
    #[serde(default = "default_schedule")]
    pub setpoint_schedule: Vec<SetpointStep>,
    /// Per-node override of the scenario-wide twin settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twin: Option<TwinConfig>,
}

fn default_schedule() -> Vec<SetpointStep> {
    vec![SetpointStep { t_s: 0.0, q_pu: 0.2 }]
}

impl NodeConfig {
    pub fn new(id: &str) -> Self {
        NodeConfig {
            id: id.to_string(),
            plant: PlantParams::default(),
            setpoint_schedule: default_schedule(),
            twin: None,
        }
    }

    /// Setpoint in force at `step`.
    pub fn setpoint_at(&self, step: u64, dt: f64) -> f64 {
        let mut q = self.setpoint_schedule[0].q_pu;
        for s in &self.setpoint_schedule {
            if seconds_to_steps(s.t_s, dt) <= step {
                q = s.q_pu;
            } else {
                break;
            }
        }
        q
    }

    fn validate(&self, dt: f64, scenario_twin: &TwinConfig) -> Result<()> {
        if self.id.is_empty() || self.id.contains([',', '+', ':', '\n']) {
            return Err(Error::config("nodes.id", "must be non-empty without ',', '+' or ':'"));
        }
        self.plant.validate()?;
        if self.setpoint_schedule.is_empty() {
            return Err(Error::config("setpoint_schedule", "needs at least one entry"));
        }
        let mut prev = f64::NEG_INFINITY;
        for s in &self.setpoint_schedule {
            if !s.t_s.is_finite() || s.t_s < 0.0 || s.t_s <= prev {
                return Err(Error::config("setpoint_schedule.t_s", "must be finite, non-negative and strictly ascending"));
            }
            if !s.q_pu.is_finite() || s.q_pu < self.plant.q_min || s.q_pu > self.plant.q_max {
                return Err(Error::config("setpoint_schedule.q_pu", "must lie within [q_min, q_max]"));
            }
            prev = s.t_s;
        }
        self.twin.as_ref().unwrap_or(scenario_twin).validate(dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnConfig {
    /// Samples per signal in a feature window.
    pub n_m: usize,
    pub hidden: usize,
    pub train: TrainConfig,
    /// Attack-free runs used to build the training set.
    pub training_runs: usize,
    pub training_duration_s: f64,
    /// Range of the constant setpoint drawn for each training run.
    pub training_setpoint_range: [f64; 2],
    /// Keep one window every `sample_stride` steps.
    pub sample_stride: usize,
    /// Alarm threshold; calibrated on the validation split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            n_m: 20,
            hidden: 16,
            train: TrainConfig::default(),
            training_runs: 40,
            training_duration_s: 0.15,
            training_setpoint_range: [0.05, 0.35],
            sample_stride: 8,
            epsilon: None,
        }
    }
}

impl AnnConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if self.n_m == 0 {
            return Err(Error::config("ann.n_m", "must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("ann.hidden", "must be >= 1"));
        }
        self.train.validate()?;
        if self.training_runs == 0 {
            return Err(Error::config("ann.training_runs", "must be >= 1"));
        }
        let steps = self.training_duration_s / dt;
        if !steps.is_finite() || steps < self.n_m as f64 {
            return Err(Error::config("ann.training_duration_s", "must cover at least one feature window"));
        }
        let [lo, hi] = self.training_setpoint_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config("ann.training_setpoint_range", "must be finite with low <= high"));
        }
        if self.sample_stride == 0 {
            return Err(Error::config("ann.sample_stride", "must be >= 1"));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(Error::config("ann.epsilon", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    pub duration_s: f64,
    pub dt: f64,
    /// Length of the attack-free calibration run.
    pub calibration_s: f64,
    pub nodes: Vec<NodeConfig>,
    pub attack: AttackSpec,
    pub twin: TwinConfig,
    pub network: NetworkConfig,
    pub consensus: ConsensusConfig,
    pub ann: AnnConfig,
    pub detectors: Vec<Detector>,
    pub master_seed: u64,
    /// Write every `trace_stride`-th step to the trace.
    pub trace_stride: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario_id: "scenario".to_string(),
            duration_s: 1.0,
            dt: 1e-4,
            calibration_s: 0.5,
            nodes: DEFAULT_NODE_IDS.iter().map(|id| NodeConfig::new(id)).collect(),
            attack: AttackSpec::none(),
            twin: TwinConfig::default(),
            network: NetworkConfig::default(),
            consensus: ConsensusConfig::default(),
            ann: AnnConfig::default(),
            detectors: Detector::ALL.to_vec(),
            master_seed: 0,
            trace_stride: 1,
        }
    }
}

fn whole_steps(field: &'static str, seconds: f64, dt: f64) -> Result<u64> {
    let raw = seconds / dt;
    if !raw.is_finite() || raw < 1.0 {
        return Err(Error::config(field, "must span at least one step"));
    }
    let n = libm::round(raw);
    if (raw - n).abs() > 1e-6 {
        return Err(Error::config(field, "must be a whole number of steps"));
    }
    Ok(n as u64)
}

impl ScenarioConfig {
    /// Normalize derived fields and check every invariant.
    pub fn resolve(mut self) -> Result<Self> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt", "must be positive and finite"));
        }
        for node in &mut self.nodes {
            node.plant.dt = self.dt;
        }
        self.detectors.sort_unstable();
        self.detectors.dedup();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario_id.is_empty() || self.scenario_id.contains([',', '\n']) {
            return Err(Error::config("scenario_id", "must be non-empty without ',' or newlines"));
        }
        whole_steps("duration_s", self.duration_s, self.dt)?;
        let cal = whole_steps("calibration_s", self.calibration_s, self.dt)?;
        if (cal as usize) < MIN_CALIBRATION_SAMPLES {
            return Err(Error::config("calibration_s", "must cover at least 1000 steps"));
        }
        if self.nodes.is_empty() {
            return Err(Error::config("nodes", "needs at least one node"));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|n| n.id == node.id) {
                return Err(Error::config("nodes.id", "node ids must be unique"));
            }
            if node.plant.dt != self.dt {
                return Err(Error::config("dt", "node plant step differs from scenario step"));
            }
            node.validate(self.dt, &self.twin)?;
        }
        self.twin.validate(self.dt)?;
        let ids = self.node_ids();
        self.attack.validate(&ids, self.dt, None)?;
        self.network.validate()?;
        self.consensus.validate()?;
        if self.consensus.quorum_k as usize > self.nodes.len().max(2) {
            return Err(Error::config("consensus.quorum_k", "exceeds the number of nodes"));
        }
        self.ann.validate(self.dt)?;
        if self.trace_stride == 0 {
            return Err(Error::config("trace_stride", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> u64 {
        libm::round(self.duration_s / self.dt) as u64
    }

    pub fn calibration_steps(&self) -> u64 {
        libm::round(self.calibration_s / self.dt) as u64
    }

    pub fn node_ids(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    pub fn twin_for(&self, node: usize) -> &TwinConfig {
        self.nodes[node].twin.as_ref().unwrap_or(&self.twin)
    }

    pub fn uses(&self, detector: Detector) -> bool {
        self.detectors.contains(&detector)
    }
}

/// Randomized parameter ranges for suite scenarios. Each pair is `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationRanges {
    pub onset_s: [f64; 2],
    pub bias_magnitude: [f64; 2],
    pub ramp_slope: [f64; 2],
    pub delay_s: [f64; 2],
    /// Draw a random sign for bias magnitude and ramp slope.
    pub random_sign: bool,
    /// Candidate target nodes; every node when empty.
    pub target_nodes: Vec<String>,
    /// Onset offset of the second node in a coordinated attack.
    pub coordinated_stagger_s: [f64; 2],
    pub coordinated_nodes: usize,
}

impl Default for VariationRanges {
    fn default() -> Self {
        VariationRanges {
            onset_s: [0.1, 0.3],
            bias_magnitude: [0.05, 0.15],
            ramp_slope: [0.25, 0.75],
            delay_s: [0.015, 0.025],
            random_sign: true,
            target_nodes: Vec::new(),
            coordinated_stagger_s: [0.0, 0.05],
            coordinated_nodes: 2,
        }
    }
}

impl VariationRanges {
    fn validate(&self, base: &ScenarioConfig) -> Result<()> {
        let ranges = [
            ("variation.onset_s", self.onset_s),
            ("variation.bias_magnitude", self.bias_magnitude),
            ("variation.ramp_slope", self.ramp_slope),
            ("variation.delay_s", self.delay_s),
            ("variation.coordinated_stagger_s", self.coordinated_stagger_s),
        ];
        for (field, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(field, "must be finite with low <= high"));
            }
        }
        if self.onset_s[0] < 0.0 || self.onset_s[1] >= base.duration_s {
            return Err(Error::config("variation.onset_s", "must lie inside the scenario"));
        }
        if self.delay_s[0] < base.dt {
            return Err(Error::config("variation.delay_s", "must be at least one step"));
        }
        if self.coordinated_stagger_s[0] < 0.0 {
            return Err(Error::config("variation.coordinated_stagger_s", "must be non-negative"));
        }
        for id in &self.target_nodes {
            if !base.nodes.iter().any(|n| &n.id == id) {
                return Err(Error::config("variation.target_nodes", "names an unknown node"));
            }
        }
        if self.target_count(base) == 0 {
            return Err(Error::config("variation.target_nodes", "no candidate nodes"));
        }
        if self.coordinated_nodes < 2 {
            return Err(Error::config("variation.coordinated_nodes", "must be >= 2"));
        }
        Ok(())
    }

    fn target_count(&self, base: &ScenarioConfig) -> usize {
        if self.target_nodes.is_empty() {
            base.nodes.len()
        } else {
            self.target_nodes.len()
        }
    }

    /// Candidate target nodes in declaration order.
    pub fn targets<'a>(&'a self, base: &'a ScenarioConfig) -> Vec<&'a str> {
        if self.target_nodes.is_empty() {
            base.node_ids()
        } else {
            self.target_nodes.iter().map(String::as_str).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    pub suite_id: String,
    /// Template for every scenario; its attack is replaced per scenario.
    pub base: ScenarioConfig,
    pub attack_types: Vec<AttackKind>,
    pub scenarios_per_type: usize,
    pub variation: VariationRanges,
    pub master_seed: u64,
    pub n_roc_thresholds: usize,
    /// Overrides the base trace stride for suite runs.
    pub trace_stride: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            suite_id: "suite".to_string(),
            base: ScenarioConfig::default(),
            attack_types: vec![AttackKind::None, AttackKind::Bias, AttackKind::Ramp, AttackKind::Delay],
            scenarios_per_type: 10,
            variation: VariationRanges::default(),
            master_seed: 0,
            n_roc_thresholds: 200,
            trace_stride: 100,
        }
    }
}

impl SuiteSpec {
    pub fn resolve(mut self) -> Result<Self> {
        self.base = self.base.resolve()?;
        self.base.trace_stride = self.trace_stride;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.suite_id.is_empty() || self.suite_id.contains([',', '\n']) {
            return Err(Error::config("suite_id", "must be non-empty without ',' or newlines"));
        }
        if self.scenarios_per_type == 0 {
            return Err(Error::config("scenarios_per_type", "must be >= 1"));
        }
        if self.attack_types.is_empty() {
            return Err(Error::config("attack_types", "needs at least one attack type"));
        }
        for (i, kind) in self.attack_types.iter().enumerate() {
            if self.attack_types[..i].contains(kind) {
                return Err(Error::config("attack_types", "duplicate attack type"));
            }
        }
        if self.attack_types.contains(&AttackKind::Coordinated)
            && self.variation.target_count(&self.base) < self.variation.coordinated_nodes
        {
            return Err(Error::config("variation.coordinated_nodes", "more than the candidate nodes"));
        }
        if self.trace_stride == 0 {
            return Err(Error::config("trace_stride", "must be >= 1"));
        }
        self.variation.validate(&self.base)?;
        self.base.validate()
    }

    pub fn scenario_count(&self) -> usize {
        self.attack_types.len() * self.scenarios_per_type
    }

    pub fn scenario_id(&self, kind: AttackKind, index: usize) -> String {
        format!("{}-{}-{:02}", self.suite_id, kind.as_str(), index)
    }
}
