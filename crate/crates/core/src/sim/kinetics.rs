//! Cure kinetics, chemoviscosity, and the enthalpy-based initial degree of
//! cure.
//!
//! The cure rate follows a two-regime autocatalytic model: below the switch
//! conversion the rate is `(k1 + k2*alpha) * (1 - alpha) * (b - alpha)`,
//! above it the reaction finishes as `k3 * (1 - alpha)`, with Arrhenius
//! rate constants `k_i(T) = a_i * exp(-e_i / (R * T_K))`. The default
//! prefactors are chosen so the rate is continuous at the switch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gas constant, J/(mol K).
pub const GAS_CONSTANT: f64 = 8.314;

/// Additive floor inside the log-viscosity transform.
pub const LOG_VISC_EPS: f64 = 1e-8;

/// Rate-law, chemoviscosity, and gelation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticsParams {
    /// Rate prefactors, 1/min.
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// Activation energies, J/mol.
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    /// Autocatalytic ceiling conversion in the low-conversion regime.
    pub b: f64,
    /// Conversion at which the rate law switches regimes.
    pub alpha_switch: f64,
    /// Viscosity prefactor, Pa s.
    pub mu_inf: f64,
    /// Viscosity activation energy, J/mol.
    pub mu_activation: f64,
    /// Exponential conversion coefficient in the viscosity law.
    pub mu_k: f64,
    /// Gel conversion: at and above it the viscosity is pinned to `mu_max`.
    pub alpha_gel: f64,
    /// Viscosity ceiling, Pa s.
    pub mu_max: f64,
}

impl Default for KineticsParams {
    fn default() -> Self {
        KineticsParams {
            a1: 5.0e6,
            a2: 5.0e7,
            a3: 3.4e6,
            e1: 6.5e4,
            e2: 6.5e4,
            e3: 6.5e4,
            b: 0.47,
            alpha_switch: 0.3,
            mu_inf: 7.93e-14,
            mu_activation: 9.08e4,
            mu_k: 38.0,
            alpha_gel: 0.47,
            mu_max: 1.0e6,
        }
    }
}

impl KineticsParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a1", self.a1),
            ("a2", self.a2),
            ("a3", self.a3),
            ("e1", self.e1),
            ("e2", self.e2),
            ("e3", self.e3),
            ("mu_inf", self.mu_inf),
            ("mu_activation", self.mu_activation),
            ("mu_max", self.mu_max),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(format!(
                    "kinetics parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.alpha_switch > 0.0 && self.alpha_switch < 1.0) {
            return Err(Error::config(format!(
                "alpha_switch must lie in (0, 1), got {}",
                self.alpha_switch
            )));
        }
        if self.b <= self.alpha_switch {
            return Err(Error::config(format!(
                "b = {} must exceed alpha_switch = {}",
                self.b, self.alpha_switch
            )));
        }
        if !(self.alpha_gel > 0.0 && self.alpha_gel < 1.0) {
            return Err(Error::config(format!(
                "alpha_gel must lie in (0, 1), got {}",
                self.alpha_gel
            )));
        }
        Ok(())
    }

    fn arrhenius(&self, a: f64, e: f64, temp_c: f64) -> f64 {
        let t_k = temp_c + 273.15;
        a * (-e / (GAS_CONSTANT * t_k)).exp()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "conversion {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_temp(temp_c: f64) -> Result<()> {
    if !temp_c.is_finite() || temp_c <= -273.15 {
        return Err(Error::config(format!(
            "temperature {temp_c} C is at or below absolute zero"
        )));
    }
    Ok(())
}

/// Cure rate `d(alpha)/dt` in 1/min at the given conversion and temperature.
pub fn cure_rate(alpha: f64, temp_c: f64, kp: &KineticsParams) -> Result<f64> {
    check_alpha(alpha)?;
    check_temp(temp_c)?;
    Ok(cure_rate_unchecked(alpha, temp_c, kp))
}

/// Rate evaluation without domain checks, for integrator stage values that
/// have already been clamped into `[0, 1]`.
pub(crate) fn cure_rate_unchecked(alpha: f64, temp_c: f64, kp: &KineticsParams) -> f64 {
    if alpha <= kp.alpha_switch {
        let k1 = kp.arrhenius(kp.a1, kp.e1, temp_c);
        let k2 = kp.arrhenius(kp.a2, kp.e2, temp_c);
        (k1 + k2 * alpha) * (1.0 - alpha) * (kp.b - alpha)
    } else {
        let k3 = kp.arrhenius(kp.a3, kp.e3, temp_c);
        k3 * (1.0 - alpha)
    }
}

/// Chemoviscosity law before any ceiling is applied, Pa s.
pub fn viscosity_formula(alpha: f64, temp_c: f64, kp: &KineticsParams) -> Result<f64> {
    check_alpha(alpha)?;
    check_temp(temp_c)?;
    let t_k = temp_c + 273.15;
    Ok(kp.mu_inf * (kp.mu_activation / (GAS_CONSTANT * t_k) + kp.mu_k * alpha).exp())
}

/// Viscosity with the gelation ceiling: pinned to `mu_max` for
/// `alpha >= alpha_gel` and capped at `mu_max` below it.
pub fn viscosity(alpha: f64, temp_c: f64, kp: &KineticsParams) -> Result<f64> {
    if alpha >= kp.alpha_gel {
        check_alpha(alpha)?;
        check_temp(temp_c)?;
        return Ok(kp.mu_max);
    }
    Ok(viscosity_formula(alpha, temp_c, kp)?.min(kp.mu_max))
}

/// Log-viscosity channel value `ln(mu + 1e-8)` in ln(Pa s).
pub fn log_viscosity(alpha: f64, temp_c: f64, kp: &KineticsParams) -> Result<f64> {
    Ok((viscosity(alpha, temp_c, kp)? + LOG_VISC_EPS).ln())
}

/// Deformation accumulation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationParams {
    /// Thermal-expansion-like coefficient, mm per Celsius.
    pub kappa_cte: f64,
    /// Cure-shrinkage coefficient, mm per unit conversion.
    pub kappa_sh: f64,
    /// Conversion width over which the stiffness gate opens above the gel
    /// point.
    pub gate_width: f64,
}

impl Default for DeformationParams {
    fn default() -> Self {
        DeformationParams {
            kappa_cte: 0.15,
            kappa_sh: 20.0,
            gate_width: 0.1,
        }
    }
}

impl DeformationParams {
    pub fn validate(&self) -> Result<()> {
        if !self.kappa_cte.is_finite() || self.kappa_cte < 0.0 {
            return Err(Error::config(format!(
                "kappa_cte must be non-negative, got {}",
                self.kappa_cte
            )));
        }
        if !self.kappa_sh.is_finite() || self.kappa_sh < 0.0 {
            return Err(Error::config(format!(
                "kappa_sh must be non-negative, got {}",
                self.kappa_sh
            )));
        }
        if !self.gate_width.is_finite() || self.gate_width <= 0.0 {
            return Err(Error::config(format!(
                "gate_width must be positive, got {}",
                self.gate_width
            )));
        }
        Ok(())
    }
}

/// Smoothstep stiffness gate: 0 below the gel point, 1 once the conversion
/// exceeds `alpha_gel + width`, with a C1 smoothstep ramp in between.
pub fn stiffness_gate(alpha: f64, alpha_gel: f64, width: f64) -> f64 {
    let x = (alpha - alpha_gel) / width;
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        x * x * (3.0 - 2.0 * x)
    }
}

/// Initial degree of cure derived from residual and full reaction enthalpies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialDoc {
    /// Residual-to-full enthalpy ratio, percent.
    pub residual_ratio_percent: f64,
    /// Initial degree of cure `100 * (1 - residual/full)`, percent.
    pub doc0_percent: f64,
}

/// Computes the initial degree of cure from a residual enthalpy and the full
/// reaction enthalpy, both in J/g.
pub fn compute_initial_doc(dh_residual: f64, dh_full: f64) -> Result<InitialDoc> {
    if !dh_full.is_finite() || dh_full <= 0.0 {
        return Err(Error::config(format!(
            "full enthalpy must be positive, got {dh_full}"
        )));
    }
    if !dh_residual.is_finite() || dh_residual < 0.0 {
        return Err(Error::config(format!(
            "residual enthalpy must be non-negative, got {dh_residual}"
        )));
    }
    if dh_residual > dh_full {
        return Err(Error::config(format!(
            "residual enthalpy {dh_residual} exceeds full enthalpy {dh_full}"
        )));
    }
    let ratio = 100.0 * dh_residual / dh_full;
    Ok(InitialDoc {
        residual_ratio_percent: ratio,
        doc0_percent: 100.0 - ratio,
    })
}
