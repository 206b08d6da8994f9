//! The snitch twin: a noise-free replica of one node's converter loop driven by
//! the operator-intended references, plus the residual, alarm and trust logic
//! built on top of it.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::plant::{plant_step, ControllerInputs, NodeTelemetry, Noiseless, PlantParams, PlantState};
use crate::{Error, Result};

/// Lower bound for the healthy residual variance.
pub const SIGMA_SQ_FLOOR: f64 = 1e-12;
/// Shortest healthy series accepted by [`calibrate`].
pub const MIN_CALIBRATION_SAMPLES: usize = 1000;
/// Threshold multiplier on the healthy residual standard deviation.
pub const CALIBRATION_STD_FACTOR: f64 = 4.0;
/// Pushes between exact recomputations of the running sum of squares.
const REFRESH_INTERVAL: u32 = 1000;

/// Output on which the residual is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitoredChannel {
    /// Terminal voltage V_g.
    VG,
    /// Delivered reactive power Q_g.
    QG,
}

impl MonitoredChannel {
    pub fn of(self, telemetry: &NodeTelemetry) -> f64 {
        match self {
            MonitoredChannel::VG => telemetry.v_g_meas,
            MonitoredChannel::QG => telemetry.q_g_meas,
        }
    }

    fn of_state(self, state: &PlantState) -> f64 {
        match self {
            MonitoredChannel::VG => state.v_g,
            MonitoredChannel::QG => state.q_g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwinConfig {
    /// Detection threshold; calibrated from a healthy run when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Healthy residual variance; calibrated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_sq: Option<f64>,
    /// Trust window length (s).
    pub window_s: f64,
    pub monitored_channel: MonitoredChannel,
    /// Consecutive detections needed to assert a local alarm.
    pub sustain_steps: u32,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            epsilon: None,
            sigma_sq: None,
            window_s: 0.05,
            monitored_channel: MonitoredChannel::QG,
            sustain_steps: 5,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(Error::config("twin.epsilon", "must be positive"));
            }
        }
        if let Some(s) = self.sigma_sq {
            if !(s >= SIGMA_SQ_FLOOR) || !s.is_finite() {
                return Err(Error::config("twin.sigma_sq", "must be >= 1e-12"));
            }
        }
        if !(self.window_s >= dt) || !self.window_s.is_finite() {
            return Err(Error::config("twin.window_s", "must be at least one step"));
        }
        if self.sustain_steps == 0 {
            return Err(Error::config("twin.sustain_steps", "must be >= 1"));
        }
        Ok(())
    }

    pub fn window_samples(&self, dt: f64) -> usize {
        (libm::round(self.window_s / dt) as usize).max(1)
    }
}

/// Healthy-operation statistics for one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma_sq: f64,
    pub epsilon: f64,
    pub mean_abs: f64,
    pub std: f64,
    pub samples: usize,
}

/// Threshold and variance from an attack-free residual series.
///
/// `sigma_sq` is the sample variance (floored at 1e-12) and `epsilon` is
/// `mean(|r|) + 4 std(r)`.
pub fn calibrate(healthy_residuals: &[f64]) -> Result<Calibration> {
    let n = healthy_residuals.len();
    if n < MIN_CALIBRATION_SAMPLES {
        return Err(Error::Calibration("need at least 1000 healthy samples"));
    }
    if healthy_residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::Calibration("non-finite residual in healthy series"));
    }
    let nf = n as f64;
    let mean = healthy_residuals.iter().sum::<f64>() / nf;
    let var = healthy_residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (nf - 1.0);
    let std = libm::sqrt(var);
    let mean_abs = healthy_residuals.iter().map(|r| r.abs()).sum::<f64>() / nf;
    let epsilon = mean_abs + CALIBRATION_STD_FACTOR * std;
    if !(epsilon > 0.0) {
        return Err(Error::Calibration("degenerate healthy series gives a zero threshold"));
    }
    Ok(Calibration {
        sigma_sq: var.max(SIGMA_SQ_FLOOR),
        epsilon,
        mean_abs,
        std,
        samples: n,
    })
}

/// Signed residual `measured - predicted`.
pub fn residual(measured: f64, predicted: f64) -> Result<f64> {
    if !measured.is_finite() || !predicted.is_finite() {
        return Err(Error::Domain("residual of non-finite values"));
    }
    Ok(measured - predicted)
}

/// Threshold test; equality does not fire.
pub fn detect(r: f64, epsilon: f64) -> bool {
    r.abs() > epsilon
}

/// Rolling buffer of the most recent residuals with a running sum of squares.
#[derive(Debug, Clone)]
pub struct ResidualWindow {
    buffer: VecDeque<f64>,
    capacity: usize,
    sum_sq: f64,
    since_refresh: u32,
}

impl ResidualWindow {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        ResidualWindow {
            buffer: VecDeque::with_capacity(capacity),
            capacity,
            sum_sq: 0.0,
            since_refresh: 0,
        }
    }

    pub fn from_residuals(capacity: usize, residuals: &[f64]) -> Self {
        let mut w = Self::new(capacity);
        residuals.iter().for_each(|&r| w.push(r));
        w
    }

    pub fn push(&mut self, r: f64) {
        if self.buffer.len() == self.capacity {
            if let Some(old) = self.buffer.pop_front() {
                self.sum_sq -= old * old;
            }
        }
        self.buffer.push_back(r);
        self.sum_sq += r * r;
        self.since_refresh += 1;
        if self.since_refresh >= REFRESH_INTERVAL {
            self.sum_sq = self.brute_force_sum_sq();
            self.since_refresh = 0;
        }
        if self.sum_sq < 0.0 {
            self.sum_sq = 0.0;
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sum_sq(&self) -> f64 {
        self.sum_sq
    }

    pub fn brute_force_sum_sq(&self) -> f64 {
        self.buffer.iter().map(|r| r * r).sum()
    }

    pub fn residuals(&self) -> impl Iterator<Item = f64> + '_ {
        self.buffer.iter().copied()
    }
}

/// `exp(-(1/n_window) * sum(r^2) / sigma_sq)`.
///
/// `n_window` is the window length in samples, not seconds, which keeps the
/// score comparable across step sizes. Until the window fills the missing
/// samples count as zero residuals.
pub fn trust_score(window: &ResidualWindow, sigma_sq: f64, n_window: usize) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::Empty("trust is undefined before the first residual"));
    }
    if n_window == 0 || n_window < window.len() {
        return Err(Error::Domain("window sample count smaller than buffered residuals"));
    }
    let sigma_sq = sigma_sq.max(SIGMA_SQ_FLOOR);
    Ok(libm::exp(-(window.sum_sq() / sigma_sq) / n_window as f64))
}

/// Counts consecutive detections and asserts once `m` have been seen in a row.
#[derive(Debug, Clone, Copy)]
pub struct SustainedAlarm {
    m: u32,
    run: u32,
}

impl SustainedAlarm {
    pub fn new(m: u32) -> Self {
        SustainedAlarm { m: m.max(1), run: 0 }
    }

    pub fn update(&mut self, fired: bool) -> bool {
        self.run = if fired { self.run.saturating_add(1) } else { 0 };
        self.asserted()
    }

    pub fn asserted(&self) -> bool {
        self.run >= self.m
    }
}

/// Noise-free replica of a node's plant and controller.
///
/// It never sees the wire: the setpoint comes from the scenario's schedule and
/// the feedback from its own previous output.
#[derive(Debug, Clone)]
pub struct SnitchTwin {
    params: PlantParams,
    state: PlantState,
    channel: MonitoredChannel,
    predicted_output: f64,
}

impl SnitchTwin {
    pub fn new(params: &PlantParams, initial: PlantState, channel: MonitoredChannel) -> Self {
        let params = PlantParams { sigma_meas: 0.0, ..*params };
        SnitchTwin {
            params,
            state: initial,
            channel,
            predicted_output: channel.of_state(&initial),
        }
    }

    pub fn step_index(&self) -> u64 {
        self.state.step
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn predicted_output(&self) -> f64 {
        self.predicted_output
    }

    /// Advance the replica with the clean setpoint and return the predicted
    /// monitored output for the new step.
    pub fn twin_step(&mut self, q_setpoint: f64) -> Result<f64> {
        let inputs = ControllerInputs {
            q_setpoint,
            v_meas: self.state.v_g,
            q_meas: self.state.q_g,
        };
        let (next, _) = plant_step(&self.state, &inputs, &self.params, &mut Noiseless).map_err(|e| match e {
            Error::NonFinite { step, .. } => Error::NonFinite { module: "twin", step },
            other => other,
        })?;
        self.state = next;
        self.predicted_output = self.channel.of_state(&next);
        Ok(self.predicted_output)
    }
}

/// Run plant and twin side by side without attacks and collect residuals.
pub fn healthy_residuals<N: crate::plant::NoiseSource>(
    params: &PlantParams,
    q_setpoint: f64,
    channel: MonitoredChannel,
    steps: usize,
    noise: &mut N,
) -> Result<Vec<f64>> {
    let mut plant = PlantState::at_equilibrium(params, q_setpoint)?;
    let mut twin = SnitchTwin::new(params, plant, channel);
    let mut inputs = ControllerInputs { q_setpoint, v_meas: plant.v_g, q_meas: plant.q_g };
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, tel) = plant_step(&plant, &inputs, params, noise)?;
        let predicted = twin.twin_step(q_setpoint)?;
        out.push(residual(channel.of(&tel), predicted)?);
        inputs = ControllerInputs { q_setpoint, v_meas: tel.v_g_meas, q_meas: tel.q_g_meas };
        plant = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::GaussianNoise;
    use crate::seed::{stream, SeedPurpose};
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn residual_examples() {
        assert_eq!(residual(1.0, 1.0).unwrap(), 0.0);
        assert!((residual(1.01, 1.00).unwrap() - 0.01).abs() < 1e-15);
        assert!((residual(0.98, 1.00).unwrap() + 0.02).abs() < 1e-15);
        assert!(residual(f64::NAN, 1.0).is_err());
        assert!(residual(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn detect_examples() {
        assert!(detect(0.02, 0.01));
        assert!(detect(-0.02, 0.01));
        assert!(!detect(0.0, 1e-9));
        assert!(!detect(0.01, 0.01));
        assert!(!detect(-0.01, 0.01));
    }

    #[test]
    fn trust_examples() {
        let zeros = ResidualWindow::from_residuals(100, &[0.0; 100]);
        assert_eq!(trust_score(&zeros, 1e-6, 100).unwrap(), 1.0);

        let sigma = 1e-3;
        let uniform = ResidualWindow::from_residuals(100, &[sigma; 100]);
        let tau = trust_score(&uniform, sigma * sigma, 100).unwrap();
        assert!((tau - 0.367_879_441_171_442_3).abs() < 1e-12, "{tau}");

        let mut one = vec![0.0; 100];
        one[37] = 2.0 * sigma;
        let w = ResidualWindow::from_residuals(100, &one);
        let tau = trust_score(&w, sigma * sigma, 100).unwrap();
        assert!((tau - 0.960_789_439_152_323_2).abs() < 1e-12, "{tau}");
    }

    #[test]
    fn trust_errors() {
        let empty = ResidualWindow::new(10);
        assert!(matches!(trust_score(&empty, 1.0, 10), Err(Error::Empty(_))));
        let w = ResidualWindow::from_residuals(10, &[1.0; 5]);
        assert!(trust_score(&w, 1.0, 0).is_err());
        assert!(trust_score(&w, 1.0, 4).is_err());
    }

    #[test]
    fn partial_window_counts_missing_as_zero() {
        let w = ResidualWindow::from_residuals(500, &[1e-3; 50]);
        let tau = trust_score(&w, 1e-6, 500).unwrap();
        assert!((tau - libm::exp(-0.1)).abs() < 1e-12);
    }

    #[test]
    fn calibrate_rejects_degenerate_and_short_series() {
        assert!(matches!(calibrate(&[0.0; 2000]), Err(Error::Calibration(_))));
        assert!(matches!(calibrate(&[1.0; 999]), Err(Error::Calibration(_))));
    }

    #[test]
    fn calibrate_constant_series() {
        let c = calibrate(&[-0.003; 1500]).unwrap();
        assert_eq!(c.sigma_sq, SIGMA_SQ_FLOOR);
        assert!((c.epsilon - 0.003).abs() < 1e-12);
    }

    #[test]
    fn calibrate_gaussian_matches_known_generator() {
        // E|r| = sigma * sqrt(2/pi), so epsilon = sigma * (sqrt(2/pi) + 4).
        let sigma = 1e-3;
        let mut noise = GaussianNoise(stream(99, SeedPurpose::Calibration, 0, 0));
        use crate::plant::NoiseSource;
        let series: Vec<f64> = (0..20_000).map(|_| sigma * noise.standard_normal()).collect();
        let c = calibrate(&series).unwrap();
        let expected_eps = sigma * (libm::sqrt(2.0 / core::f64::consts::PI) + 4.0);
        assert!((c.sigma_sq / (sigma * sigma) - 1.0).abs() < 0.1, "{}", c.sigma_sq);
        assert!((c.epsilon / expected_eps - 1.0).abs() < 0.1, "{}", c.epsilon);
        assert!((expected_eps - 4.8e-3).abs() < 1e-4);
    }

    #[test]
    fn twin_mirrors_noise_free_plant_exactly() {
        let params = PlantParams { sigma_meas: 0.0, ..PlantParams::default() };
        let r = healthy_residuals(&params, 0.2, MonitoredChannel::VG, 10_000, &mut Noiseless).unwrap();
        assert!(r.iter().all(|x| x.abs() <= 1e-12));
        // start away from equilibrium so the shared transient is exercised
        let start = PlantState::with_q(&params, -0.3).unwrap();
        let mut twin = SnitchTwin::new(&params, start, MonitoredChannel::QG);
        let mut plant = start;
        for _ in 0..2000 {
            let inputs = ControllerInputs { q_setpoint: 0.2, v_meas: plant.v_g, q_meas: plant.q_g };
            let (next, tel) = plant_step(&plant, &inputs, &params, &mut Noiseless).unwrap();
            let pred = twin.twin_step(0.2).unwrap();
            assert!((tel.q_g_meas - pred).abs() <= 1e-12);
            assert_eq!(twin.step_index(), next.step);
            plant = next;
        }
    }

    #[test]
    fn healthy_residuals_stay_under_calibrated_threshold() {
        let params = PlantParams::default();
        for ch in [MonitoredChannel::QG, MonitoredChannel::VG] {
            let mut cal_noise = GaussianNoise(stream(5, SeedPurpose::Calibration, 0, 0));
            let cal = calibrate(&healthy_residuals(&params, 0.2, ch, 5000, &mut cal_noise).unwrap()).unwrap();
            let mut noise = GaussianNoise(stream(5, SeedPurpose::MeasurementNoise, 0, 0));
            let r = healthy_residuals(&params, 0.2, ch, 10_000, &mut noise).unwrap();
            let below = r.iter().filter(|x| !detect(**x, cal.epsilon)).count();
            assert!(below as f64 >= 0.99 * r.len() as f64, "{ch:?}: {below}");
        }
    }

    #[test]
    fn bias_on_setpoint_is_detected_within_100_steps() {
        let params = PlantParams::default();
        let mut cal_noise = GaussianNoise(stream(8, SeedPurpose::Calibration, 0, 0));
        let cal = calibrate(&healthy_residuals(&params, 0.2, MonitoredChannel::QG, 5000, &mut cal_noise).unwrap())
            .unwrap();
        let mut noise = GaussianNoise(stream(8, SeedPurpose::MeasurementNoise, 0, 0));
        let mut plant = PlantState::at_equilibrium(&params, 0.2).unwrap();
        let mut twin = SnitchTwin::new(&params, plant, MonitoredChannel::QG);
        let mut inputs = ControllerInputs { q_setpoint: 0.2, v_meas: plant.v_g, q_meas: plant.q_g };
        let onset = 1000;
        let mut first = None;
        for s in 1..=3000u64 {
            inputs.q_setpoint = if s >= onset { 0.3 } else { 0.2 };
            let (next, tel) = plant_step(&plant, &inputs, &params, &mut noise).unwrap();
            let pred = twin.twin_step(0.2).unwrap();
            let r = residual(tel.q_g_meas, pred).unwrap();
            if s >= onset && first.is_none() && detect(r, cal.epsilon) {
                first = Some(s - onset);
            }
            inputs = ControllerInputs { q_setpoint: 0.2, v_meas: tel.v_g_meas, q_meas: tel.q_g_meas };
            plant = next;
        }
        assert!(first.expect("never detected") <= 100);
    }

    fn window_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5e-3f64..5e-3, 1..300)
    }

    proptest! {
        #[test]
        fn trust_is_in_unit_interval(r in window_strategy(), s in 1e-8f64..1e-4) {
            let w = ResidualWindow::from_residuals(r.len(), &r);
            let tau = trust_score(&w, s, r.len()).unwrap();
            prop_assert!(tau > 0.0 && tau <= 1.0);
            prop_assert_eq!(tau == 1.0, r.iter().all(|x| *x == 0.0));
        }

        #[test]
        fn trust_scale_law(r in window_strategy(), c in 0.1f64..3.0) {
            let n = r.len();
            let sigma_sq = 1e-5;
            let base = trust_score(&ResidualWindow::from_residuals(n, &r), sigma_sq, n).unwrap();
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            let tau = trust_score(&ResidualWindow::from_residuals(n, &scaled), sigma_sq, n).unwrap();
            let expected = libm::pow(base, c * c);
            prop_assert!((tau - expected).abs() <= 1e-12 + 1e-9 * expected);
        }

        #[test]
        fn incremental_sum_matches_brute_force(r in proptest::collection::vec(-1.0f64..1.0, 1..3000), cap in 1usize..600) {
            let mut w = ResidualWindow::new(cap);
            for (i, x) in r.iter().enumerate() {
                w.push(*x);
                if i % 97 == 0 {
                    let exact = w.brute_force_sum_sq();
                    prop_assert!((w.sum_sq() - exact).abs() <= 1e-9 * exact.max(1e-300) + 1e-12);
                }
            }
            prop_assert!(w.len() == r.len().min(cap));
        }
    }
}
