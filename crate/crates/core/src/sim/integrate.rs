//! Fixed-step RK4 integration of the cure state along a temperature profile.
//!
//! The state is `(alpha, u)`: degree of cure and accumulated deformation.
//! Deformation evolves as `du = S(alpha) * (kappa_cte * dT - kappa_sh *
//! d(alpha))` with the smoothstep stiffness gate `S`. Steps are aligned so
//! that every output grid point, every profile knot, and the regime-switch
//! crossing land exactly on a step boundary; `dt` is the maximum step size,
//! and on steep ramps substeps are further capped so no step spans more than
//! [`TEMP_STEP_CAP_C`] of commanded temperature change.

use crate::error::{Error, Result};
use crate::sim::kinetics::{
    cure_rate_unchecked, log_viscosity, stiffness_gate, DeformationParams, KineticsParams,
};
use crate::sim::profile::TemperatureProfile;
use crate::sim::trajectory::CureTrajectory;

/// Default maximum integrator step, minutes.
pub const DEFAULT_DT: f64 = 0.5;

/// Default number of uniformly spaced trajectory outputs.
pub const DEFAULT_TRAJECTORY_POINTS: usize = 128;

/// Maximum commanded temperature change a single substep may span, Celsius.
pub const TEMP_STEP_CAP_C: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
struct State {
    alpha: f64,
    u: f64,
}

struct Stepper<'a> {
    profile: &'a TemperatureProfile,
    kp: &'a KineticsParams,
    dp: &'a DeformationParams,
    /// Set once the conversion has crossed `alpha_switch` from below.
    crossed: bool,
}

impl Stepper<'_> {
    fn rhs(&self, t: f64, state: State, slope: f64) -> Result<(f64, f64)> {
        let alpha = state.alpha.clamp(0.0, 1.0);
        let temp = self.profile.sample(t)?;
        let da = cure_rate_unchecked(alpha, temp, self.kp);
        let gate = stiffness_gate(alpha, self.kp.alpha_gel, self.dp.gate_width);
        let du = gate * (self.dp.kappa_cte * slope - self.dp.kappa_sh * da);
        Ok((da, du))
    }

    fn rk4(&self, t: f64, h: f64, state: State, slope: f64) -> Result<State> {
        let (a1, u1) = self.rhs(t, state, slope)?;
        let mid = State {
            alpha: state.alpha + 0.5 * h * a1,
            u: state.u + 0.5 * h * u1,
        };
        let (a2, u2) = self.rhs(t + 0.5 * h, mid, slope)?;
        let mid2 = State {
            alpha: state.alpha + 0.5 * h * a2,
            u: state.u + 0.5 * h * u2,
        };
        let (a3, u3) = self.rhs(t + 0.5 * h, mid2, slope)?;
        let end = State {
            alpha: state.alpha + h * a3,
            u: state.u + h * u3,
        };
        let (a4, u4) = self.rhs(t + h, end, slope)?;
        Ok(State {
            alpha: (state.alpha + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)).min(1.0),
            u: state.u + h / 6.0 * (u1 + 2.0 * u2 + 2.0 * u3 + u4),
        })
    }

    /// Advances the state over `[a, b]`, a span that lies inside a single
    /// profile segment, using equal substeps no larger than `dt`.
    fn advance_span(&mut self, mut state: State, a: f64, b: f64, dt: f64) -> Result<State> {
        if b <= a {
            return Ok(state);
        }
        let slope_t = 0.5 * (a + b);
        let slope = self
            .profile
            .segment_slope(self.profile.segment_index(slope_t));
        let h_max = if slope == 0.0 {
            dt
        } else {
            dt.min(TEMP_STEP_CAP_C / slope.abs())
        };
        let mut t = a;
        let mut n = ((b - a) / h_max).ceil().max(1.0) as usize;
        while n > 0 {
            let h = (b - t) / n as f64;
            let next = self.rk4(t, h, state, slope)?;
            let switch = self.kp.alpha_switch;
            if !self.crossed && state.alpha < switch && next.alpha > switch {
                let lambda = self.bisect_crossing(t, h, state, slope)?;
                let mut at_switch = self.rk4(t, lambda * h, state, slope)?;
                at_switch.alpha = switch;
                state = at_switch;
                t += lambda * h;
                self.crossed = true;
                n = (((b - t) / h_max).ceil()).max(1.0) as usize;
                continue;
            }
            if next.alpha >= switch {
                self.crossed = true;
            }
            state = next;
            t += h;
            n -= 1;
            if !state.alpha.is_finite() || !state.u.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite cure state at t = {t} min"
                )));
            }
        }
        Ok(state)
    }

    /// Finds the step fraction at which an RK4 step starting at `t` lands on
    /// `alpha_switch`.
    fn bisect_crossing(&self, t: f64, h: f64, state: State, slope: f64) -> Result<f64> {
        let switch = self.kp.alpha_switch;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let trial = self.rk4(t, mid * h, state, slope)?;
            if trial.alpha < switch {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Integrates the cure state along `profile` from initial conversion `doc0`
/// and returns the trajectory on `n_points` uniformly spaced times over
/// `[t0, t3]`.
pub fn simulate(
    profile: &TemperatureProfile,
    doc0: f64,
    kp: &KineticsParams,
    dp: &DeformationParams,
    dt: f64,
    n_points: usize,
) -> Result<CureTrajectory> {
    kp.validate()?;
    dp.validate()?;
    let a = profile.anchors();
    let horizon = a.t3 - a.t0;
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::config(format!("dt must be positive, got {dt}")));
    }
    if dt > horizon / 4.0 {
        return Err(Error::config(format!(
            "dt = {dt} exceeds (t3 - t0)/4 = {}",
            horizon / 4.0
        )));
    }
    if !(0.0..1.0).contains(&doc0) {
        return Err(Error::config(format!("doc0 = {doc0} outside [0, 1)")));
    }
    if n_points < 2 {
        return Err(Error::config(format!(
            "trajectory needs at least two points, got {n_points}"
        )));
    }

    let times = profile.uniform_times(n_points);
    let mut stepper = Stepper {
        profile,
        kp,
        dp,
        crossed: doc0 >= kp.alpha_switch,
    };

    let mut state = State {
        alpha: doc0,
        u: 0.0,
    };
    let mut doc = Vec::with_capacity(n_points);
    let mut deformation = Vec::with_capacity(n_points);
    let mut temp_c = Vec::with_capacity(n_points);
    let mut log_visc = Vec::with_capacity(n_points);

    for (i, &t) in times.iter().enumerate() {
        if i > 0 {
            let prev = times[i - 1];
            let mut bounds = vec![prev];
            bounds.extend(profile.interior_knots(prev, t));
            bounds.push(t);
            for w in bounds.windows(2) {
                state = stepper.advance_span(state, w[0], w[1], dt)?;
            }
        }
        let temp = profile.sample(t)?;
        doc.push(state.alpha);
        deformation.push(state.u);
        temp_c.push(temp);
        log_visc.push(log_viscosity(state.alpha, temp, kp)?);
    }

    Ok(CureTrajectory {
        times,
        temp_c,
        doc,
        log_visc,
        deformation_mm: deformation,
        doc0,
    })
}
