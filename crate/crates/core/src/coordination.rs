//! Trust report exchange over a simulated full-mesh network and the consensus
//! rule that turns the latest reports into a system verdict.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower bound applied to each trust value before taking logarithms.
pub const TRUST_FLOOR: f64 = 1e-12;

pub type NodeIndex = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustReport {
    pub node: NodeIndex,
    pub sent_step: u64,
    pub tau: f64,
    pub local_alarm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub report_period_steps: u32,
    pub latency_mean_s: f64,
    pub latency_jitter_s: f64,
    pub drop_prob: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            report_period_steps: 10,
            latency_mean_s: 1e-3,
            latency_jitter_s: 5e-4,
            drop_prob: 0.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.report_period_steps == 0 {
            return Err(Error::config("network.report_period_steps", "must be >= 1"));
        }
        if !(self.latency_mean_s >= 0.0) || !self.latency_mean_s.is_finite() {
            return Err(Error::config("network.latency_mean_s", "must be finite and >= 0"));
        }
        if !(self.latency_jitter_s >= 0.0) || !self.latency_jitter_s.is_finite() {
            return Err(Error::config("network.latency_jitter_s", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config("network.drop_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    pub tau_alarm: f64,
    pub quorum_k: u32,
    pub coincidence_window_steps: u64,
    pub staleness_limit_steps: u64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            tau_alarm: 0.1,
            quorum_k: 2,
            coincidence_window_steps: 1000,
            staleness_limit_steps: 500,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_alarm > 0.0 && self.tau_alarm < 1.0) {
            return Err(Error::config("consensus.tau_alarm", "must lie in (0, 1)"));
        }
        if self.quorum_k < 2 {
            return Err(Error::config("consensus.quorum_k", "must be >= 2"));
        }
        if self.coincidence_window_steps == 0 {
            return Err(Error::config("consensus.coincidence_window_steps", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Dropped,
    At(u64),
}

/// Deterministic message queue keyed by `(delivery_step, sender, sequence)`.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    dt: f64,
    rng: ChaCha8Rng,
    queue: BTreeMap<(u64, NodeIndex, u64), TrustReport>,
    seq: u64,
}

impl Network {
    pub fn new(cfg: NetworkConfig, dt: f64, rng: ChaCha8Rng) -> Self {
        Network { cfg, dt, rng, queue: BTreeMap::new(), seq: 0 }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Drop the report or enqueue it at `sent_step + round(latency / dt)`.
    pub fn schedule_delivery(&mut self, report: TrustReport) -> Delivery {
        let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if u < self.cfg.drop_prob {
            return Delivery::Dropped;
        }
        let latency = if self.cfg.latency_jitter_s > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.cfg.latency_mean_s + self.cfg.latency_jitter_s * z
        } else {
            self.cfg.latency_mean_s
        }
        .max(0.0);
        let step = report.sent_step + libm::round(latency / self.dt) as u64;
        self.queue.insert((step, report.node, self.seq), report);
        self.seq += 1;
        Delivery::At(step)
    }

    /// Remove and return every report due at or before `now`, in key order.
    pub fn drain_due(&mut self, now: u64) -> Vec<TrustReport> {
        let later = self.queue.split_off(&(now + 1, 0, 0));
        let due = core::mem::replace(&mut self.queue, later);
        due.into_values().collect()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

/// Geometric mean of trust values, each floored at [`TRUST_FLOOR`].
pub fn aggregate_trust(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("no trust values to aggregate"));
    }
    let mean_log = values.iter().map(|t| libm::log(t.clamp(TRUST_FLOOR, 1.0))).sum::<f64>() / values.len() as f64;
    Ok(libm::exp(mean_log).clamp(TRUST_FLOOR, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    None,
    Local,
    Coordinated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemVerdict {
    pub kind: VerdictKind,
    /// Sorted node indices.
    pub implicated: Vec<NodeIndex>,
    pub decided_step: u64,
}

/// Result of one consensus evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assessment {
    /// Never empty. Several entries only when more than one node alarms
    /// without reaching a coordinated quorum.
    pub verdicts: Vec<SystemVerdict>,
    /// No usable report from any node.
    pub blind: bool,
    /// Nodes whose last report is older than the staleness limit.
    pub stale: Vec<NodeIndex>,
}

impl Assessment {
    pub fn kind(&self) -> VerdictKind {
        self.verdicts.iter().map(|v| v.kind).max().unwrap_or(VerdictKind::None)
    }

    pub fn implicated(&self) -> Vec<NodeIndex> {
        let mut all: Vec<NodeIndex> = self.verdicts.iter().flat_map(|v| v.implicated.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Latest accepted report from a node and the step its current alarm began.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeStatus {
    pub report: TrustReport,
    pub alarm_onset: Option<u64>,
}

/// Apply the consensus rule to the latest status of each node.
pub fn classify(statuses: &[Option<NodeStatus>], cfg: &ConsensusConfig, now_step: u64) -> Assessment {
    let mut stale = Vec::new();
    let mut usable = 0usize;
    let mut alarmed: Vec<(NodeIndex, u64)> = Vec::new();
    for (idx, status) in statuses.iter().enumerate() {
        let Some(status) = status else { continue };
        let age = now_step.saturating_sub(status.report.sent_step);
        if age > cfg.staleness_limit_steps {
            stale.push(idx as NodeIndex);
            continue;
        }
        usable += 1;
        if status.report.tau < cfg.tau_alarm && age <= cfg.coincidence_window_steps {
            alarmed.push((idx as NodeIndex, status.alarm_onset.unwrap_or(status.report.sent_step)));
        }
    }
    let verdict = |kind, implicated| SystemVerdict { kind, implicated, decided_step: now_step };
    let verdicts = match alarmed.len() {
        0 => alloc::vec![verdict(VerdictKind::None, Vec::new())],
        1 => alloc::vec![verdict(VerdictKind::Local, alloc::vec![alarmed[0].0])],
        n => {
            let first = alarmed.iter().map(|a| a.1).min().unwrap_or(0);
            let last = alarmed.iter().map(|a| a.1).max().unwrap_or(0);
            if n >= cfg.quorum_k as usize && last - first <= cfg.coincidence_window_steps {
                alloc::vec![verdict(VerdictKind::Coordinated, alarmed.iter().map(|a| a.0).collect())]
            } else {
                alarmed.iter().map(|a| verdict(VerdictKind::Local, alloc::vec![a.0])).collect()
            }
        }
    };
    Assessment { verdicts, blind: usable == 0, stale }
}

/// Consensus state shared by every node (logically centralized evaluation).
#[derive(Debug, Clone)]
pub struct Consensus {
    cfg: ConsensusConfig,
    latest: Vec<Option<NodeStatus>>,
}

impl Consensus {
    pub fn new(cfg: ConsensusConfig, n_nodes: usize) -> Self {
        Consensus { cfg, latest: alloc::vec![None; n_nodes] }
    }

    /// Accept a delivered report unless a newer one from that node is already held.
    pub fn ingest(&mut self, report: TrustReport) {
        let Some(slot) = self.latest.get_mut(report.node as usize) else { return };
        if let Some(prev) = slot {
            if prev.report.sent_step >= report.sent_step {
                return;
            }
        }
        let alarmed = report.tau < self.cfg.tau_alarm;
        let alarm_onset = match (alarmed, slot.as_ref().and_then(|s| s.alarm_onset)) {
            (false, _) => None,
            (true, Some(onset)) => Some(onset),
            (true, None) => Some(report.sent_step),
        };
        *slot = Some(NodeStatus { report, alarm_onset });
    }

    pub fn classify(&self, now_step: u64) -> Assessment {
        classify(&self.latest, &self.cfg, now_step)
    }

    /// Geometric mean over non-stale reports, if any.
    pub fn aggregate(&self, now_step: u64) -> Option<f64> {
        let fresh: Vec<f64> = self
            .latest
            .iter()
            .flatten()
            .filter(|s| now_step.saturating_sub(s.report.sent_step) <= self.cfg.staleness_limit_steps)
            .map(|s| s.report.tau)
            .collect();
        aggregate_trust(&fresh).ok()
    }

    pub fn statuses(&self) -> &[Option<NodeStatus>] {
        &self.latest
    }
}

/// A change in the top-level verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictTransition {
    pub step: u64,
    pub from: VerdictKind,
    pub to: VerdictKind,
    pub implicated: Vec<NodeIndex>,
}

/// Collects the verdict evaluated at each report boundary and logs transitions.
#[derive(Debug, Clone, Default)]
pub struct VerdictStream {
    current: Option<Assessment>,
    transitions: Vec<VerdictTransition>,
    evaluations: u64,
    non_none_evaluations: u64,
    blind_evaluations: u64,
}

impl VerdictStream {
    pub fn push(&mut self, assessment: Assessment, step: u64) {
        let prev_kind = self.current.as_ref().map(|a| a.kind()).unwrap_or(VerdictKind::None);
        let prev_nodes = self.current.as_ref().map(|a| a.implicated()).unwrap_or_default();
        let kind = assessment.kind();
        let nodes = assessment.implicated();
        if kind != prev_kind || nodes != prev_nodes {
            self.transitions.push(VerdictTransition { step, from: prev_kind, to: kind, implicated: nodes });
        }
        self.evaluations += 1;
        if kind != VerdictKind::None {
            self.non_none_evaluations += 1;
        }
        if assessment.blind {
            self.blind_evaluations += 1;
        }
        self.current = Some(assessment);
    }

    pub fn current(&self) -> Option<&Assessment> {
        self.current.as_ref()
    }

    pub fn transitions(&self) -> &[VerdictTransition] {
        &self.transitions
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn non_none_evaluations(&self) -> u64 {
        self.non_none_evaluations
    }

    pub fn blind_evaluations(&self) -> u64 {
        self.blind_evaluations
    }

    /// First step at or after `from_step` with a verdict other than none.
    pub fn first_alarm_at_or_after(&self, from_step: u64) -> Option<&VerdictTransition> {
        self.transitions.iter().find(|t| t.step >= from_step && t.to != VerdictKind::None)
    }

    /// Distinct verdict kinds in the order they first appeared.
    pub fn kind_sequence(&self) -> Vec<VerdictKind> {
        let mut seq: Vec<VerdictKind> = Vec::new();
        for t in &self.transitions {
            if seq.last() != Some(&t.to) {
                seq.push(t.to);
            }
        }
        seq
    }
}
