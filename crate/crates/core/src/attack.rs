//! Declarative false-data injection on the signal channels between sensors,
//! operator setpoints, and the converter controller.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Bias,
    Ramp,
    Delay,
    Coordinated,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Bias => "bias",
            AttackKind::Ramp => "ramp",
            AttackKind::Delay => "delay",
            AttackKind::Coordinated => "coordinated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    QSetpoint,
    VMeas,
    QMeas,
    IMeas,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::QSetpoint, Channel::VMeas, Channel::QMeas, Channel::IMeas];

    fn index(self) -> usize {
        self as usize
    }
}

/// Position in simulated time. Onsets are compared in whole steps so that
/// `t_start = 0.1` with `dt = 1e-4` means exactly step 1000.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub step: u64,
    pub dt: f64,
}

impl SimClock {
    pub fn new(step: u64, dt: f64) -> Self {
        SimClock { step, dt }
    }

    pub fn at_time(t: f64, dt: f64) -> Self {
        SimClock { step: seconds_to_steps(t, dt), dt }
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }
}

/// Nearest whole step for a time in seconds.
pub fn seconds_to_steps(t: f64, dt: f64) -> u64 {
    libm::round(t / dt).max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    /// Targeted channel. When absent, bias and ramp hit the setpoint and delay
    /// hits the voltage and reactive power feedback together.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Channel>,
    #[serde(default)]
    pub t_start: f64,
    /// Bias offset (pu).
    #[serde(default)]
    pub magnitude: f64,
    /// Ramp slope (pu/s).
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub delay_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<AttackSpec>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec::none()
    }
}

const SETPOINT_ONLY: &[Channel] = &[Channel::QSetpoint];
const FEEDBACK_PATH: &[Channel] = &[Channel::VMeas, Channel::QMeas];

impl AttackSpec {
    fn base(kind: AttackKind, node: Option<&str>, t_start: f64) -> Self {
        AttackSpec {
            kind,
            node: node.map(String::from),
            channel: None,
            t_start,
            magnitude: 0.0,
            slope: 0.0,
            delay_s: 0.0,
            components: Vec::new(),
        }
    }

    pub fn none() -> Self {
        Self::base(AttackKind::None, None, 0.0)
    }

    pub fn bias(node: &str, t_start: f64, magnitude: f64) -> Self {
        AttackSpec { magnitude, ..Self::base(AttackKind::Bias, Some(node), t_start) }
    }

    pub fn ramp(node: &str, t_start: f64, slope: f64) -> Self {
        AttackSpec { slope, ..Self::base(AttackKind::Ramp, Some(node), t_start) }
    }

    pub fn delay(node: &str, t_start: f64, delay_s: f64) -> Self {
        AttackSpec { delay_s, ..Self::base(AttackKind::Delay, Some(node), t_start) }
    }

    pub fn coordinated(components: Vec<AttackSpec>) -> Self {
        let t_start = components.iter().map(|c| c.t_start).fold(f64::INFINITY, f64::min);
        AttackSpec {
            components,
            ..Self::base(AttackKind::Coordinated, None, if t_start.is_finite() { t_start } else { 0.0 })
        }
    }

    pub fn on_channel(mut self, channel: Channel) -> Self {
        self.channel = Some(channel);
        self
    }

    /// Channels this (non-coordinated) component manipulates.
    pub fn channels(&self) -> &[Channel] {
        match (self.channel.as_ref(), self.kind) {
            (Some(c), _) => core::slice::from_ref(c),
            (None, AttackKind::Delay) => FEEDBACK_PATH,
            (None, AttackKind::Bias | AttackKind::Ramp) => SETPOINT_ONLY,
            (None, _) => &[],
        }
    }

    fn targets(&self, node: &str, channel: Channel) -> bool {
        self.node.as_deref() == Some(node) && self.channels().contains(&channel)
    }

    fn onset_step(&self, dt: f64) -> u64 {
        seconds_to_steps(self.t_start, dt)
    }

    /// Flattened list of leaf components.
    pub fn leaves(&self) -> Vec<&AttackSpec> {
        match self.kind {
            AttackKind::None => Vec::new(),
            AttackKind::Coordinated => self.components.iter().flat_map(|c| c.leaves()).collect(),
            _ => alloc::vec![self],
        }
    }

    /// Earliest onset over all components, in steps.
    pub fn first_onset_step(&self, dt: f64) -> Option<u64> {
        self.leaves().iter().map(|c| c.onset_step(dt)).min()
    }

    /// Nodes targeted by any component, in first-seen order.
    pub fn attacked_nodes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for leaf in self.leaves() {
            if let Some(n) = leaf.node.as_deref() {
                if !out.contains(&n) {
                    out.push(n);
                }
            }
        }
        out
    }

    /// Onset step of the earliest component hitting `node`.
    pub fn onset_step_for(&self, node: &str, dt: f64) -> Option<u64> {
        self.leaves()
            .iter()
            .filter(|c| c.node.as_deref() == Some(node))
            .map(|c| c.onset_step(dt))
            .min()
    }

    /// Largest delay lag, in steps, over all components.
    pub fn max_lag_steps(&self, dt: f64) -> usize {
        self.leaves()
            .iter()
            .filter(|c| c.kind == AttackKind::Delay)
            .map(|c| seconds_to_steps(c.delay_s, dt) as usize)
            .max()
            .unwrap_or(0)
    }

    /// Check the attack against the scenario's node list and step size.
    pub fn validate(&self, node_ids: &[&str], dt: f64, history_capacity: Option<usize>) -> Result<()> {
        self.validate_at("attack", node_ids, dt, history_capacity)
    }

    fn validate_at(&self, path: &str, node_ids: &[&str], dt: f64, history_capacity: Option<usize>) -> Result<()> {
        let field = |name: &str| format!("{path}.{name}");
        if !(self.t_start >= 0.0) || !self.t_start.is_finite() {
            return Err(Error::config(field("t_start"), "must be finite and >= 0"));
        }
        if !(self.delay_s >= 0.0) || !self.delay_s.is_finite() {
            return Err(Error::config(field("delay_s"), "must be finite and >= 0"));
        }
        if !self.magnitude.is_finite() || !self.slope.is_finite() {
            return Err(Error::config(field("magnitude"), "must be finite"));
        }
        match self.kind {
            AttackKind::None => {
                if !self.components.is_empty() || self.node.is_some() {
                    return Err(Error::config(field("kind"), "kind `none` takes no node or components"));
                }
            }
            AttackKind::Coordinated => {
                if self.node.is_some() {
                    return Err(Error::config(field("node"), "coordinated attacks name nodes per component"));
                }
                if self.components.len() < 2 {
                    return Err(Error::config(field("components"), "coordinated needs at least 2 components"));
                }
                for (i, c) in self.components.iter().enumerate() {
                    if matches!(c.kind, AttackKind::Coordinated | AttackKind::None) {
                        return Err(Error::config(format!("{path}.components[{i}].kind"), "must be bias, ramp or delay"));
                    }
                    c.validate_at(&format!("{path}.components[{i}]"), node_ids, dt, history_capacity)?;
                }
                if self.attacked_nodes().len() < 2 {
                    return Err(Error::config(field("components"), "coordinated must target at least 2 distinct nodes"));
                }
            }
            kind => {
                if !self.components.is_empty() {
                    return Err(Error::config(field("components"), "only coordinated attacks have components"));
                }
                let node = self
                    .node
                    .as_deref()
                    .ok_or_else(|| Error::config(field("node"), "required for this attack kind"))?;
                if !node_ids.contains(&node) {
                    return Err(Error::config(field("node"), format!("unknown node `{node}`")));
                }
                if kind == AttackKind::Bias && self.magnitude == 0.0 {
                    return Err(Error::config(field("magnitude"), "bias magnitude must be non-zero"));
                }
                if kind == AttackKind::Ramp && self.slope == 0.0 {
                    return Err(Error::config(field("slope"), "ramp slope must be non-zero"));
                }
                if kind == AttackKind::Delay {
                    let lag = seconds_to_steps(self.delay_s, dt) as usize;
                    if lag == 0 {
                        return Err(Error::config(field("delay_s"), "delay shorter than one step"));
                    }
                    if let Some(cap) = history_capacity {
                        if lag + 1 > cap {
                            return Err(Error::config(field("delay_s"), "delay exceeds channel history capacity"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ring buffers of recent clean values, one per channel.
///
/// `lookup(channel, 0)` is the most recently recorded value; lag `L` is the
/// value recorded `L` records earlier. Lags past the recorded history return
/// the oldest value still held.
#[derive(Debug, Clone)]
pub struct ChannelHistory {
    dt: f64,
    capacity: usize,
    buffers: [VecDeque<f64>; 4],
}

impl ChannelHistory {
    pub fn new(dt: f64, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        ChannelHistory {
            dt,
            capacity,
            buffers: core::array::from_fn(|_| VecDeque::with_capacity(capacity)),
        }
    }

    /// Sized for the largest delay in the attack.
    pub fn for_attack(spec: &AttackSpec, dt: f64) -> Self {
        Self::new(dt, spec.max_lag_steps(dt) + 1)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn record(&mut self, channel: Channel, value: f64) {
        let buf = &mut self.buffers[channel.index()];
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back(value);
    }

    pub fn lookup(&self, channel: Channel, lag: usize) -> Option<f64> {
        let buf = &self.buffers[channel.index()];
        let len = buf.len();
        if len == 0 {
            return None;
        }
        Some(buf[len - 1 - lag.min(len - 1)])
    }
}

/// Value the controller receives on `channel` of `node` at `now`.
///
/// `history` must already hold the clean value for the current step.
pub fn apply_attack(
    spec: &AttackSpec,
    node: &str,
    channel: Channel,
    clean: f64,
    history: &ChannelHistory,
    now: SimClock,
) -> f64 {
    match spec.kind {
        AttackKind::None => clean,
        AttackKind::Coordinated => spec
            .components
            .iter()
            .fold(clean, |value, c| apply_attack(c, node, channel, value, history, now)),
        kind => {
            if !spec.targets(node, channel) {
                return clean;
            }
            let onset = spec.onset_step(now.dt);
            if now.step < onset {
                return clean;
            }
            match kind {
                AttackKind::Bias => clean + spec.magnitude,
                AttackKind::Ramp => clean + spec.slope * ((now.step - onset) as f64 * now.dt),
                AttackKind::Delay => {
                    let lag = seconds_to_steps(spec.delay_s, now.dt) as usize;
                    history.lookup(channel, lag).unwrap_or(clean)
                }
                AttackKind::None | AttackKind::Coordinated => clean,
            }
        }
    }
}

/// Whether `node` is under attack at `now`.
pub fn ground_truth(spec: &AttackSpec, node: &str, now: SimClock) -> bool {
    spec.leaves()
        .iter()
        .any(|c| c.node.as_deref() == Some(node) && now.step >= c.onset_step(now.dt))
}
