//! Reduced-order model of a grid-side converter's reactive power loop.
//!
//! The converter follows a Q-V droop reference through a PI controller with
//! reference feed-forward, a first-order converter lag, and a static voltage
//! sensitivity to injected reactive power. The same model is used for the
//! physical plant and for the twin replica.

use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Nominal terminal voltage (pu).
    pub v_nom: f64,
    /// Voltage sensitivity to injected reactive power (pu V / pu Q).
    pub k_q: f64,
    /// Converter lag time constant (s).
    pub t_c: f64,
    pub kp: f64,
    /// Integral gain (1/s).
    pub ki: f64,
    /// Q-V droop gain (pu Q / pu V).
    pub k_droop: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Active power operating point (pu).
    pub p_fixed: f64,
    /// Measurement noise standard deviation (pu).
    pub sigma_meas: f64,
    /// Step size; always taken from the scenario.
    #[serde(skip)]
    pub dt: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            v_nom: 1.0,
            k_q: 0.05,
            t_c: 0.02,
            kp: 4.0,
            ki: 20.0,
            k_droop: 2.0,
            q_min: -0.5,
            q_max: 0.5,
            p_fixed: 0.8,
            sigma_meas: 1e-3,
            dt: 1e-4,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("v_nom", self.v_nom),
            ("k_q", self.k_q),
            ("t_c", self.t_c),
            ("kp", self.kp),
            ("ki", self.ki),
            ("k_droop", self.k_droop),
            ("q_min", self.q_min),
            ("q_max", self.q_max),
            ("p_fixed", self.p_fixed),
            ("sigma_meas", self.sigma_meas),
            ("dt", self.dt),
        ];
        for (name, value) in finite {
            if !value.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        if self.dt <= 0.0 {
            return Err(Error::config("dt", "must be positive"));
        }
        if self.t_c <= 0.0 {
            return Err(Error::config("t_c", "must be positive"));
        }
        if self.q_min >= self.q_max {
            return Err(Error::config("q_min", "must be strictly below q_max"));
        }
        if self.sigma_meas < 0.0 {
            return Err(Error::config("sigma_meas", "must be non-negative"));
        }
        if self.v_nom <= 0.0 {
            return Err(Error::config("v_nom", "must be positive"));
        }
        Ok(())
    }

    fn clamp_q(&self, q: f64) -> f64 {
        q.clamp(self.q_min, self.q_max)
    }

    /// Reactive power at which the droop loop settles for a constant setpoint.
    pub fn equilibrium_q(&self, q_setpoint: f64) -> f64 {
        // q = q_sp + k_droop * (v_nom - v(q)) with v(q) = v_nom + k_q * q
        self.clamp_q(q_setpoint / (1.0 + self.k_droop * self.k_q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub q_g: f64,
    pub pi_integrator: f64,
    pub v_g: f64,
    pub i_g: f64,
    pub step: u64,
}

impl PlantState {
    /// Settled state for a constant setpoint: zero integrator, droop satisfied.
    pub fn at_equilibrium(params: &PlantParams, q_setpoint: f64) -> Result<Self> {
        Self::with_q(params, params.equilibrium_q(q_setpoint))
    }

    pub fn with_q(params: &PlantParams, q_g: f64) -> Result<Self> {
        let q_g = params.clamp_q(q_g);
        let v_g = terminal_voltage(q_g, params);
        Ok(PlantState {
            q_g,
            pi_integrator: 0.0,
            v_g,
            i_g: apparent_current(params.p_fixed, q_g, v_g)?,
            step: 0,
        })
    }

    fn is_finite(&self) -> bool {
        self.q_g.is_finite() && self.pi_integrator.is_finite() && self.v_g.is_finite() && self.i_g.is_finite()
    }
}

/// Values the converter controller consumes in one step, after any tampering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerInputs {
    pub q_setpoint: f64,
    pub v_meas: f64,
    pub q_meas: f64,
}

impl ControllerInputs {
    fn is_finite(&self) -> bool {
        self.q_setpoint.is_finite() && self.v_meas.is_finite() && self.q_meas.is_finite()
    }
}

/// One node's sampled signals for one step.
///
/// The `*_true` fields are the plant's ground truth. The attack engine only ever
/// rewrites the measured fields and the received setpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeTelemetry {
    pub step: u64,
    pub v_g_meas: f64,
    pub i_g_meas: f64,
    pub q_g_meas: f64,
    pub q_setpoint_received: f64,
    pub v_g_true: f64,
    pub q_g_true: f64,
}

/// Source of standard-normal samples for measurement noise.
pub trait NoiseSource {
    fn standard_normal(&mut self) -> f64;
}

/// Gaussian noise drawn from a seeded generator.
#[derive(Debug, Clone)]
pub struct GaussianNoise<R>(pub R);

impl<R: RngCore> NoiseSource for GaussianNoise<R> {
    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }
}

/// Always zero; used by the twin replica.
#[derive(Debug, Clone, Copy, Default)]
pub struct Noiseless;

impl NoiseSource for Noiseless {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

pub fn terminal_voltage(q_g: f64, params: &PlantParams) -> f64 {
    params.v_nom + params.k_q * q_g
}

pub fn apparent_current(p: f64, q: f64, v: f64) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::Domain("terminal voltage must be positive"));
    }
    Ok(libm::sqrt(p * p + q * q) / v)
}

pub fn droop_reference(v_meas: f64, q_base: f64, params: &PlantParams) -> f64 {
    params.clamp_q(q_base + params.k_droop * (params.v_nom - v_meas))
}

/// One forward-Euler step of the converter lag toward `q_cmd`.
pub fn converter_lag(q_g: f64, q_cmd: f64, params: &PlantParams) -> f64 {
    params.clamp_q(q_g + params.dt * (q_cmd - q_g) / params.t_c)
}

/// Advance the plant by one step.
///
/// The controller tracks the droop reference built from the received setpoint
/// and voltage feedback. The integrator is frozen whenever the PI output
/// saturates. Voltage and current are recomputed from the new reactive power,
/// and the returned telemetry carries noisy measurements next to ground truth.
pub fn plant_step<N: NoiseSource + ?Sized>(
    state: &PlantState,
    inputs: &ControllerInputs,
    params: &PlantParams,
    noise: &mut N,
) -> Result<(PlantState, NodeTelemetry)> {
    let step = state.step + 1;
    if !state.is_finite() || !inputs.is_finite() {
        return Err(Error::NonFinite { module: "plant", step: state.step });
    }

    let q_ref = droop_reference(inputs.v_meas, inputs.q_setpoint, params);
    let error = q_ref - inputs.q_meas;
    let integrator = state.pi_integrator + error * params.dt;
    let raw = q_ref + params.kp * error + params.ki * integrator;
    let saturated = raw <= params.q_min || raw >= params.q_max;
    let q_cmd = params.clamp_q(raw);
    let pi_integrator = if saturated { state.pi_integrator } else { integrator };

    let q_g = converter_lag(state.q_g, q_cmd, params);
    let v_g = terminal_voltage(q_g, params);
    let i_g = apparent_current(params.p_fixed, q_g, v_g)?;
    let next = PlantState { q_g, pi_integrator, v_g, i_g, step };
    if !next.is_finite() {
        return Err(Error::NonFinite { module: "plant", step });
    }

    let sigma = params.sigma_meas;
    let telemetry = NodeTelemetry {
        step,
        v_g_meas: v_g + sigma * noise.standard_normal(),
        i_g_meas: i_g + sigma * noise.standard_normal(),
        q_g_meas: q_g + sigma * noise.standard_normal(),
        q_setpoint_received: inputs.q_setpoint,
        v_g_true: v_g,
        q_g_true: q_g,
    };
    Ok((next, telemetry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream, SeedPurpose};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> PlantParams {
        PlantParams::default()
    }

    fn feedback_of(state: &PlantState, q_setpoint: f64) -> ControllerInputs {
        ControllerInputs { q_setpoint, v_meas: state.v_g, q_meas: state.q_g }
    }

    #[test]
    fn terminal_voltage_examples() {
        let p = params();
        assert_eq!(terminal_voltage(0.0, &p), 1.0);
        assert_relative_eq!(terminal_voltage(0.1, &p), 1.005, epsilon = 1e-15);
        assert_relative_eq!(terminal_voltage(-0.2, &p), 0.99, epsilon = 1e-15);
    }

    #[test]
    fn apparent_current_examples() {
        assert_relative_eq!(apparent_current(0.8, 0.6, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(apparent_current(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(apparent_current(1.0, 0.0, 0.5).unwrap(), 2.0);
        assert!(matches!(apparent_current(1.0, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(apparent_current(1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn droop_reference_examples() {
        let mut p = params();
        assert_eq!(droop_reference(p.v_nom, 0.2, &p), 0.2);
        p.q_min = -1.0;
        p.q_max = 1.0;
        assert_relative_eq!(droop_reference(0.98, 0.0, &p), 0.04, epsilon = 1e-12);
        let mut p = params();
        p.k_droop = 10.0;
        p.q_max = 0.5;
        assert_eq!(droop_reference(0.5, 0.0, &p), 0.5);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let mut p = params();
        p.sigma_meas = 0.0;
        let state = PlantState::at_equilibrium(&p, 0.2).unwrap();
        assert_relative_eq!(droop_reference(state.v_g, 0.2, &p), state.q_g, epsilon = 1e-15);
        let (next, _) = plant_step(&state, &feedback_of(&state, 0.2), &p, &mut Noiseless).unwrap();
        assert!((next.q_g - state.q_g).abs() <= 1e-12);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn euler_lag_matches_exponential_at_one_time_constant() {
        let p = PlantParams { t_c: 0.02, dt: 1e-4, ..params() };
        let mut q = 0.0;
        for _ in 0..200 {
            q = converter_lag(q, 0.1, &p);
        }
        let analytic = 0.1 * (1.0 - libm::exp(-1.0));
        assert!(((q - analytic) / analytic).abs() < 0.02, "{q} vs {analytic}");
        assert_relative_eq!(q, 0.0632, epsilon = 2e-4);
    }

    #[test]
    fn saturation_pins_output_and_freezes_integrator() {
        let p = PlantParams { sigma_meas: 0.0, ..params() };
        let mut state = PlantState::with_q(&p, p.q_max).unwrap();
        state.pi_integrator = 0.01;
        let inputs = ControllerInputs { q_setpoint: 5.0, v_meas: p.v_nom, q_meas: p.q_max };
        for _ in 0..50 {
            let (next, _) = plant_step(&state, &inputs, &p, &mut Noiseless).unwrap();
            assert_eq!(next.q_g, p.q_max);
            assert_eq!(next.pi_integrator, 0.01);
            state = next;
        }
    }

    #[test]
    fn non_finite_input_is_fatal_with_step() {
        let p = params();
        let state = PlantState { step: 41, ..PlantState::at_equilibrium(&p, 0.2).unwrap() };
        let inputs = ControllerInputs { q_setpoint: f64::NAN, v_meas: 1.0, q_meas: 0.2 };
        assert_eq!(
            plant_step(&state, &inputs, &p, &mut Noiseless),
            Err(Error::NonFinite { module: "plant", step: 41 })
        );
    }

    #[test]
    fn noise_off_measurements_equal_truth() {
        let p = PlantParams { sigma_meas: 0.0, ..params() };
        let mut rng = GaussianNoise(stream(3, SeedPurpose::MeasurementNoise, 0, 0));
        let mut state = PlantState::with_q(&p, 0.0).unwrap();
        for _ in 0..500 {
            let (next, tel) = plant_step(&state, &feedback_of(&state, 0.3), &p, &mut rng).unwrap();
            assert_eq!(tel.v_g_meas, tel.v_g_true);
            assert_eq!(tel.q_g_meas, tel.q_g_true);
            assert_eq!(tel.i_g_meas, next.i_g);
            state = next;
        }
    }

    #[test]
    fn deterministic_for_identical_seeds() {
        let p = params();
        let run = || {
            let mut rng = GaussianNoise(stream(11, SeedPurpose::MeasurementNoise, 2, 0));
            let mut state = PlantState::at_equilibrium(&p, 0.2).unwrap();
            let mut out = alloc::vec::Vec::new();
            let mut inputs = feedback_of(&state, 0.25);
            for _ in 0..300 {
                let (next, tel) = plant_step(&state, &inputs, &p, &mut rng).unwrap();
                inputs = ControllerInputs { q_setpoint: 0.25, v_meas: tel.v_g_meas, q_meas: tel.q_g_meas };
                out.push((next.q_g.to_bits(), tel.v_g_meas.to_bits()));
                state = next;
            }
            out
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn output_stays_within_limits(
            setpoints in proptest::collection::vec(-3.0f64..3.0, 1..200),
            v in proptest::collection::vec(0.5f64..1.5, 1..200),
            q0 in -0.5f64..0.5,
        ) {
            let p = params();
            let mut state = PlantState::with_q(&p, q0).unwrap();
            for (i, sp) in setpoints.iter().enumerate() {
                let inputs = ControllerInputs { q_setpoint: *sp, v_meas: v[i % v.len()], q_meas: state.q_g };
                let (next, _) = plant_step(&state, &inputs, &p, &mut Noiseless).unwrap();
                prop_assert!(next.q_g >= p.q_min && next.q_g <= p.q_max);
                prop_assert!(next.v_g > 0.0 && next.i_g >= 0.0);
                state = next;
            }
        }

        #[test]
        fn voltage_coupling_is_linear(a in -0.5f64..0.5, b in -0.5f64..0.5) {
            let p = params();
            let lhs = terminal_voltage(a, &p) - terminal_voltage(b, &p);
            prop_assert!((lhs - p.k_q * (a - b)).abs() <= 1e-15);
        }
    }
}
