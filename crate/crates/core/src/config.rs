//! Run configuration.
//!
//! A run is described by one JSON document with the sections `emitter`,
//! `charge` and `simulation`. Every field is optional and falls back to its
//! default; unknown keys are rejected. [`load_config`] returns the parsed
//! configuration together with a provenance map recording, for each leaf key,
//! whether the value came from the file or from the defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chargesim::RepumpShape;
use crate::error::{Error, Result};
use crate::model::{ChargeParams, EmitterParams, LaserPulse, PulseRole, PulseSequence};
use crate::readout::ReadoutConfig;
use crate::spectra::DiffusionProcess;

/// Top-level configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub emitter: EmitterParams,
    pub charge: ChargeParams,
    pub simulation: SimulationConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.emitter.validate()?;
        self.charge.validate()?;
        self.simulation.validate()?;
        Ok(())
    }

    /// Canonical serialisation used by the manifest and the idempotence
    /// guarantee: loading, serialising and reloading yields identical
    /// parameter sets.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Per-experiment settings grouped under the `simulation` section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub telegraph: TelegraphConfig,
    pub capture: CaptureConfig,
    pub init_eff: InitEffConfig,
    pub enhance: EnhanceConfig,
    pub ple: PleConfig,
    pub cpt: CptConfig,
    pub readout: ReadoutConfig,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.telegraph.validate()?;
        self.capture.validate()?;
        self.init_eff.validate()?;
        self.enhance.validate()?;
        self.ple.validate()?;
        self.cpt.validate()?;
        self.readout.validate()?;
        Ok(())
    }
}

/// Telegraph-trace experiment: blue initialisation followed by a long
/// resonant probe, repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelegraphConfig {
    /// Blue initialisation power, µW.
    pub blue_power_uw: f64,
    /// Blue pulse length, s.
    pub blue_duration_s: f64,
    /// Resonant probe power, nW.
    pub probe_power_nw: f64,
    /// Resonant probe length, s.
    pub probe_duration_s: f64,
    /// Gap between the blue and resonant pulses, s.
    pub gap_s: f64,
    pub repeat_count: u32,
    /// Width of the fluorescence time bins, s.
    pub bin_width_s: f64,
    /// Start the trace in the bright charge state.
    pub start_bright: bool,
    /// Spurious electron-capture rate of the blue laser itself, Hz/µW.
    pub blue_capture_per_uw: f64,
}

impl Default for TelegraphConfig {
    fn default() -> Self {
        TelegraphConfig {
            blue_power_uw: 50.0,
            blue_duration_s: 10e-3,
            probe_power_nw: 20.7,
            probe_duration_s: 1.0,
            gap_s: 5e-6,
            repeat_count: 20,
            bin_width_s: 10e-3,
            start_bright: false,
            blue_capture_per_uw: 0.0,
        }
    }
}

impl TelegraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width_s > 0.0) {
            return Err(Error::validation(
                "simulation.telegraph.bin_width_s",
                "must be > 0",
            ));
        }
        self.to_sequence().validate()
    }

    /// Build the pulse sequence: blue pulse, gap, resonant probe, gap.
    pub fn to_sequence(&self) -> PulseSequence {
        let probe_start = self.blue_duration_s + self.gap_s;
        PulseSequence {
            pulses: vec![
                LaserPulse {
                    role: PulseRole::Blue445,
                    power: self.blue_power_uw,
                    duration: self.blue_duration_s,
                    start: 0.0,
                    photon_energy: None,
                },
                LaserPulse {
                    role: PulseRole::ResonantC,
                    power: self.probe_power_nw,
                    duration: self.probe_duration_s,
                    start: probe_start,
                    photon_energy: None,
                },
            ],
            repeat_count: self.repeat_count,
            period: probe_start + self.probe_duration_s + self.gap_s,
            co_illumination: false,
        }
    }
}

/// Electron-capture experiment: histogram of bright durations at one power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureConfig {
    /// Resonant probe power, nW.
    pub resonant_power_nw: f64,
    pub n_reps: usize,
    /// Length of the resonant probe window, s.
    pub pulse_length_s: f64,
    /// Histogram bin width override, s; derived from the data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_width_s: Option<f64>,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            resonant_power_nw: 20.7,
            n_reps: 500,
            pulse_length_s: 1.0,
            bin_width_s: None,
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps < 50 {
            return Err(Error::validation(
                "simulation.capture.n_reps",
                "must be >= 50",
            ));
        }
        if !(self.pulse_length_s > 0.0) {
            return Err(Error::validation(
                "simulation.capture.pulse_length_s",
                "must be > 0",
            ));
        }
        if let Some(w) = self.bin_width_s {
            if !(w > 0.0) {
                return Err(Error::validation(
                    "simulation.capture.bin_width_s",
                    "must be > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Charge-initialisation efficiency versus blue pulse length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitEffConfig {
    /// Blue initialisation power, µW.
    pub blue_power_uw: f64,
    /// Blue pulse lengths to scan, s.
    pub pulse_lengths_s: Vec<f64>,
    pub n_reps: usize,
    /// Resonant probe power, nW; chosen so capture is near certain per probe.
    pub probe_power_nw: f64,
    /// Resonant probe length, s.
    pub probe_duration_s: f64,
    /// Counts above which a probe window counts as a fluorescence response.
    pub threshold_counts: u64,
    /// Early probe window used for response detection, s; the full probe
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_window_s: Option<f64>,
}

impl Default for InitEffConfig {
    fn default() -> Self {
        InitEffConfig {
            blue_power_uw: 50.0,
            pulse_lengths_s: vec![
                5e-5, 1e-4, 2e-4, 3e-4, 5e-4, 7.8e-4, 1.2e-3, 1.8e-3, 2.6e-3, 4e-3,
            ],
            n_reps: 250,
            // 46 Hz capture at the default slope of 1.28 Hz/nW.
            probe_power_nw: 35.9375,
            probe_duration_s: 0.5,
            threshold_counts: 8,
            detection_window_s: Some(5e-3),
        }
    }
}

impl InitEffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pulse_lengths_s.is_empty() {
            return Err(Error::validation(
                "simulation.init_eff.pulse_lengths_s",
                "must not be empty",
            ));
        }
        if self.pulse_lengths_s.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::validation(
                "simulation.init_eff.pulse_lengths_s",
                "must be >= 0",
            ));
        }
        if self.n_reps == 0 {
            return Err(Error::validation(
                "simulation.init_eff.n_reps",
                "must be >= 1",
            ));
        }
        if !(self.probe_duration_s > 0.0) {
            return Err(Error::validation(
                "simulation.init_eff.probe_duration_s",
                "must be > 0",
            ));
        }
        if let Some(w) = self.detection_window_s {
            if !(w > 0.0) {
                return Err(Error::validation(
                    "simulation.init_eff.detection_window_s",
                    "must be > 0",
                ));
            }
        }
        Ok(())
    }

    pub fn probe_pulse(&self) -> LaserPulse {
        LaserPulse {
            role: PulseRole::ResonantC,
            power: self.probe_power_nw,
            duration: self.probe_duration_s,
            start: 0.0,
            photon_energy: None,
        }
    }
}

/// Two-colour fluorescence-enhancement spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    /// Photon energies of the second laser, eV.
    pub energies_ev: Vec<f64>,
    /// Repump rate at unity ionisation probability, Hz.
    pub repump_power_scale_hz: f64,
    /// Resonant excitation power, nW.
    pub resonant_power_nw: f64,
    /// Integration time per point used for the count-rate error bars, s.
    pub integration_time_s: f64,
    /// Shape of the ionisation-probability ramp.
    pub repump_shape: RepumpShape,
    /// Bright recovery rate without any repump light, Hz.
    pub residual_recovery_hz: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        let energies = (0..=24).map(|i| 2.0 + 0.05 * i as f64).collect();
        EnhanceConfig {
            energies_ev: energies,
            repump_power_scale_hz: 200.0,
            resonant_power_nw: 20.7,
            integration_time_s: 1.0,
            repump_shape: RepumpShape::Linear,
            residual_recovery_hz: 0.0,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.energies_ev.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::validation(
                "simulation.enhance.energies_ev",
                "must be > 0",
            ));
        }
        if !(self.resonant_power_nw > 0.0) {
            return Err(Error::validation(
                "simulation.enhance.resonant_power_nw",
                "must be > 0",
            ));
        }
        if !(self.integration_time_s > 0.0) {
            return Err(Error::validation(
                "simulation.enhance.integration_time_s",
                "must be > 0",
            ));
        }
        if !(self.repump_power_scale_hz >= 0.0) {
            return Err(Error::validation(
                "simulation.enhance.repump_power_scale_hz",
                "must be >= 0",
            ));
        }
        Ok(())
    }
}

/// Long-term PLE scan series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PleConfig {
    /// Excitation power, nW.
    pub power_nw: f64,
    /// Full scan span, Hz; the grid is centred on zero detuning.
    pub span_hz: f64,
    pub n_points: usize,
    /// Dwell time per grid point, s.
    pub dwell_s: f64,
    pub n_scans: usize,
    /// Time between consecutive scan starts, s.
    pub scan_period_s: f64,
    /// Extra homogeneous linewidth added to the power-broadened width, Hz.
    pub homogeneous_broadening_hz: f64,
    pub diffusion: DiffusionProcess,
}

impl Default for PleConfig {
    fn default() -> Self {
        PleConfig {
            power_nw: 0.1,
            span_hz: 300e6,
            n_points: 201,
            dwell_s: 0.05,
            n_scans: 60,
            scan_period_s: 60.0,
            homogeneous_broadening_hz: 6e6,
            diffusion: DiffusionProcess {
                sigma_jitter: 3.6e6,
                ..DiffusionProcess::default()
            },
        }
    }
}

impl PleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.power_nw >= 0.0) {
            return Err(Error::validation("simulation.ple.power_nw", "must be >= 0"));
        }
        if self.n_points < 5 {
            return Err(Error::validation("simulation.ple.n_points", "must be >= 5"));
        }
        if !(self.span_hz > 0.0) {
            return Err(Error::validation("simulation.ple.span_hz", "must be > 0"));
        }
        if !(self.dwell_s > 0.0) {
            return Err(Error::validation("simulation.ple.dwell_s", "must be > 0"));
        }
        if self.n_scans < 2 {
            return Err(Error::validation("simulation.ple.n_scans", "must be >= 2"));
        }
        if !(self.scan_period_s > 0.0) {
            return Err(Error::validation(
                "simulation.ple.scan_period_s",
                "must be > 0",
            ));
        }
        if !(self.homogeneous_broadening_hz >= 0.0) {
            return Err(Error::validation(
                "simulation.ple.homogeneous_broadening_hz",
                "must be >= 0",
            ));
        }
        self.diffusion.validate()
    }

    /// Detuning grid, Hz.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_points;
        let step = self.span_hz / (n - 1) as f64;
        (0..n)
            .map(|i| -0.5 * self.span_hz + step * i as f64)
            .collect()
    }
}

/// Coherent-population-trapping spectrum settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CptConfig {
    /// Carrier Rabi frequency (spin-flipping leg), Hz.
    pub omega1_hz: f64,
    /// Sideband Rabi frequency (spin-conserving leg), Hz.
    pub omega2_hz: f64,
    /// One-photon detuning of the carrier, Hz.
    pub delta1_hz: f64,
    /// Full two-photon detuning span, Hz; the grid is centred on zero.
    pub span_hz: f64,
    pub n_points: usize,
    /// Background count rate, counts/s.
    pub background_cps: f64,
    /// Dwell time per point for shot-noise levels in synthetic spectra, s.
    pub dwell_s: f64,
    /// Conversion from the quoted dephasing rate (Hz) to the ground-state
    /// coherence decay rate (rad/s). The default 2π pairs the quoted rate
    /// with T₂* = 1/(π·γ_s).
    pub gamma_s_rate_factor: f64,
    /// Relative sideband Rabi change per Hz of two-photon detuning, 1/Hz.
    pub sideband_taper_per_hz: f64,
}

impl Default for CptConfig {
    fn default() -> Self {
        CptConfig {
            omega1_hz: 3.0e6,
            omega2_hz: 3.0e6,
            delta1_hz: 0.0,
            span_hz: 8e6,
            n_points: 161,
            background_cps: 300.0,
            dwell_s: 1.0,
            gamma_s_rate_factor: std::f64::consts::TAU,
            sideband_taper_per_hz: 0.0,
        }
    }
}

impl CptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega1_hz >= 0.0 && self.omega2_hz >= 0.0) {
            return Err(Error::validation(
                "simulation.cpt.omega1_hz",
                "Rabi frequencies must be >= 0",
            ));
        }
        if self.n_points < 3 {
            return Err(Error::validation("simulation.cpt.n_points", "must be >= 3"));
        }
        if !(self.span_hz > 0.0) {
            return Err(Error::validation("simulation.cpt.span_hz", "must be > 0"));
        }
        if !(self.background_cps >= 0.0) {
            return Err(Error::validation(
                "simulation.cpt.background_cps",
                "must be >= 0",
            ));
        }
        if !(self.dwell_s > 0.0) {
            return Err(Error::validation("simulation.cpt.dwell_s", "must be > 0"));
        }
        if !(self.gamma_s_rate_factor > 0.0) {
            return Err(Error::validation(
                "simulation.cpt.gamma_s_rate_factor",
                "must be > 0",
            ));
        }
        Ok(())
    }

    /// Two-photon detuning grid, Hz.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_points;
        let step = self.span_hz / (n - 1) as f64;
        (0..n)
            .map(|i| -0.5 * self.span_hz + step * i as f64)
            .collect()
    }
}

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    File,
    Default,
}

/// Leaf key path -> provenance, ordered for stable output.
pub type Provenance = BTreeMap<String, ValueSource>;

/// Load and validate a configuration file.
pub fn load_config(path: &Path) -> Result<(Config, Provenance)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<(Config, Provenance)> {
    let config: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    let given: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let schema = serde_json::to_value(&config).expect("config serialises");
    let mut provenance = Provenance::new();
    record_provenance(&schema, Some(&given), String::new(), &mut provenance);
    Ok((config, provenance))
}

fn record_provenance(schema: &Value, given: Option<&Value>, prefix: String, out: &mut Provenance) {
    match schema {
        Value::Object(fields) => {
            for (key, sub) in fields {
                let child = given.and_then(|v| v.get(key));
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                record_provenance(sub, child, path, out);
            }
        }
        _ => {
            let source = if given.is_some() {
                ValueSource::File
            } else {
                ValueSource::Default
            };
            out.insert(prefix, source);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let (config, provenance) = parse_config("{}").unwrap();
        assert_eq!(config.emitter.gamma0, 25e6);
        assert!(provenance.values().all(|&s| s == ValueSource::Default));
    }

    #[test]
    fn file_values_override_and_are_recorded() {
        let (config, provenance) = parse_config(r#"{"charge": {"k_capture": 1.28}}"#).unwrap();
        assert_eq!(config.charge.k_capture, 1.28);
        assert_eq!(provenance["charge.k_capture"], ValueSource::File);
        assert_eq!(provenance["charge.k_init"], ValueSource::Default);
    }

    #[test]
    fn invariant_violation_names_the_field() {
        let err = parse_config(r#"{"charge": {"eta_max": 1.2}}"#).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "charge.eta_max"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = parse_config(r#"{"emitter": {"gamma_zero": 1.0}}"#).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("gamma_zero"), "{message}");
        assert!(message.contains("line"), "{message}");
    }

    #[test]
    fn parse_failure_reports_line() {
        let err = parse_config("{\n  \"emitter\": {\n").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn load_is_idempotent() {
        let (config, _) = parse_config(r#"{"emitter": {"p_sat": 0.8779}}"#).unwrap();
        let (reloaded, _) = parse_config(&config.to_json()).unwrap();
        assert_eq!(config, reloaded);
        assert_eq!(config.to_json(), reloaded.to_json());
    }
}
