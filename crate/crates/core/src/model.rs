//! Emitter, charge and pulse-sequence parameters shared by all simulations.
//!
//! Unit conventions: every frequency and rate is stored as an ordinary
//! frequency in Hz; powers are in nW for resonant light and µW for the blue
//! initialisation laser; photon energies are in eV. Wherever an equation
//! needs an angular frequency the 2π factor is applied at the call site and
//! noted there. All types are immutable value types and safe to share across
//! threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optical, spin and detection constants of a single emitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitterParams {
    /// Natural (FWHM) linewidth of the C transition, Hz.
    pub gamma0: f64,
    /// Saturation power of the resonant transition, nW.
    pub p_sat: f64,
    /// Detected count rate at excited-state population 0.5, counts/s.
    pub c_max: f64,
    /// Detector dark/background count rate, counts/s.
    pub dark_rate: f64,
    /// Cycling ratio between spin-conserving and spin-flipping decay.
    pub eta_branch: f64,
    /// Ground-state spin lifetime T1, s.
    pub t1_spin: f64,
    /// Ground-state spin dephasing rate, Hz.
    pub gamma_s: f64,
}

impl Default for EmitterParams {
    fn default() -> Self {
        EmitterParams {
            gamma0: 25e6,
            p_sat: 2.0,
            c_max: 45e3,
            dark_rate: 150.0,
            eta_branch: 650.0,
            t1_spin: 22e-3,
            gamma_s: 64e3,
        }
    }
}

impl EmitterParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("emitter.gamma0", self.gamma0),
            ("emitter.p_sat", self.p_sat),
            ("emitter.c_max", self.c_max),
            ("emitter.dark_rate", self.dark_rate),
            ("emitter.eta_branch", self.eta_branch),
            ("emitter.t1_spin", self.t1_spin),
            ("emitter.gamma_s", self.gamma_s),
        ];
        for (field, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::validation(
                    field,
                    format!("must be strictly positive, got {value}"),
                ));
            }
        }
        if self.eta_branch < 1.0 {
            return Err(Error::validation(
                "emitter.eta_branch",
                format!("must be >= 1, got {}", self.eta_branch),
            ));
        }
        Ok(())
    }

    /// Saturation parameter s = P / P_sat for a resonant power in nW.
    pub fn saturation(&self, power_nw: f64) -> f64 {
        power_nw / self.p_sat
    }

    /// Steady-state excited population s / (2(1+s)) under resonant drive.
    pub fn excited_population(&self, power_nw: f64) -> f64 {
        let s = self.saturation(power_nw);
        s / (2.0 * (1.0 + s))
    }

    /// Detected fluorescence rate while the emitter is bright, counts/s.
    ///
    /// `c_max` is the rate at excited population 0.5, so the detected rate is
    /// 2·c_max·ρ_ee(P).
    pub fn signal_rate(&self, power_nw: f64) -> f64 {
        2.0 * self.c_max * self.excited_population(power_nw)
    }

    /// Power-broadened linewidth Γ₀·sqrt(1 + P/P_sat), Hz.
    ///
    /// The square-root saturation law with `p_sat` as a free calibration
    /// parameter; equals `gamma0` at zero power and is monotone in power.
    pub fn power_broadened_width(&self, power_nw: f64) -> f64 {
        self.gamma0 * (1.0 + self.saturation(power_nw)).sqrt()
    }
}

/// Effective rates of the bright/dark charge cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChargeParams {
    /// Electron-capture rate per unit resonant power, Hz/nW.
    pub k_capture: f64,
    /// Charge-initialisation rate per unit blue-laser power, Hz/µW.
    pub k_init: f64,
    /// Saturation value of the initialisation efficiency.
    pub eta_max: f64,
    /// Onset of the divacancy ionisation band, eV.
    pub repump_threshold: f64,
    /// Photon energy at which the ionisation probability reaches one, eV.
    pub repump_unity: f64,
}

impl Default for ChargeParams {
    fn default() -> Self {
        ChargeParams {
            k_capture: 1.28,
            k_init: 190.0,
            eta_max: 0.91,
            repump_threshold: 2.4,
            repump_unity: 3.0,
        }
    }
}

impl ChargeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_capture > 0.0) {
            return Err(Error::validation("charge.k_capture", "must be > 0"));
        }
        if !(self.k_init > 0.0) {
            return Err(Error::validation("charge.k_init", "must be > 0"));
        }
        if !(self.eta_max > 0.0 && self.eta_max <= 1.0) {
            return Err(Error::validation(
                "charge.eta_max",
                format!("must lie in (0, 1], got {}", self.eta_max),
            ));
        }
        if !(self.repump_threshold < self.repump_unity) {
            return Err(Error::validation(
                "charge.repump_threshold",
                "must be below charge.repump_unity",
            ));
        }
        Ok(())
    }
}

/// Which laser a pulse comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulseRole {
    #[serde(rename = "resonant_C")]
    ResonantC,
    #[serde(rename = "resonant_A1")]
    ResonantA1,
    #[serde(rename = "resonant_B2")]
    ResonantB2,
    #[serde(rename = "blue_445")]
    Blue445,
    #[serde(rename = "green_532")]
    Green532,
    #[serde(rename = "supercontinuum")]
    Supercontinuum,
}

impl PulseRole {
    /// True for pulses resonant with an optical transition of the emitter.
    pub fn is_resonant(self) -> bool {
        matches!(
            self,
            PulseRole::ResonantC | PulseRole::ResonantA1 | PulseRole::ResonantB2
        )
    }
}

/// One laser pulse within a sequence.
///
/// Resonant pulses are quoted in nW, the blue initialisation laser in µW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserPulse {
    pub role: PulseRole,
    /// Power in the unit conventional for the role (nW resonant, µW blue).
    pub power: f64,
    /// Pulse duration, s.
    pub duration: f64,
    /// Start time within the sequence period, s.
    pub start: f64,
    /// Photon energy in eV; only meaningful for the supercontinuum source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photon_energy: Option<f64>,
}

impl LaserPulse {
    pub fn validate(&self) -> Result<()> {
        if !(self.power >= 0.0) {
            return Err(Error::validation("pulse.power", "must be >= 0"));
        }
        if !(self.duration > 0.0) {
            return Err(Error::validation("pulse.duration", "must be > 0"));
        }
        if !(self.start >= 0.0) {
            return Err(Error::validation("pulse.start", "must be >= 0"));
        }
        if self.photon_energy.is_some() && self.role != PulseRole::Supercontinuum {
            return Err(Error::validation(
                "pulse.photon_energy",
                "only supercontinuum pulses carry a photon energy",
            ));
        }
        Ok(())
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// A periodically repeated train of laser pulses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSequence {
    pub pulses: Vec<LaserPulse>,
    pub repeat_count: u32,
    /// Length of one repetition, s.
    pub period: f64,
    /// Allow pulses within one period to overlap (two-colour illumination).
    #[serde(default)]
    pub co_illumination: bool,
}

impl PulseSequence {
    pub fn validate(&self) -> Result<()> {
        if self.pulses.is_empty() {
            return Err(Error::validation(
                "sequence.pulses",
                "must contain at least one pulse",
            ));
        }
        if self.repeat_count == 0 {
            return Err(Error::validation("sequence.repeat_count", "must be >= 1"));
        }
        let mut last_end: f64 = 0.0;
        for pulse in &self.pulses {
            pulse.validate()?;
            last_end = last_end.max(pulse.end());
        }
        if self.period < last_end {
            return Err(Error::validation(
                "sequence.period",
                format!(
                    "period {} shorter than last pulse end {last_end}",
                    self.period
                ),
            ));
        }
        if !self.co_illumination {
            let mut spans: Vec<(f64, f64)> =
                self.pulses.iter().map(|p| (p.start, p.end())).collect();
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in spans.windows(2) {
                if pair[1].0 < pair[0].1 - 1e-15 {
                    return Err(Error::validation(
                        "sequence.pulses",
                        "pulses overlap; set co_illumination to allow this",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Total wall-clock length of the sequence, s.
    pub fn total_duration(&self) -> f64 {
        self.period * self.repeat_count as f64
    }
}
