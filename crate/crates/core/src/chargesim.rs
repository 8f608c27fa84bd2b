//! Stochastic and steady-state simulation of the bright/dark charge cycle:
//! telegraph traces under pulsed illumination, electron-capture statistics,
//! charge-initialisation efficiency and the two-colour fluorescence
//! enhancement spectrum.
//!
//! The four-step microscopic cycle is collapsed into two effective rates:
//! electron capture (bright → dark, proportional to resonant power) and
//! charge initialisation (dark → bright, proportional to blue power and
//! capped by a per-pulse success probability `eta_max`).

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit;
use crate::model::{ChargeParams, EmitterParams, LaserPulse, PulseRole, PulseSequence};
use crate::seeds::{self, domain};

/// Charge state of the centre: only the single negative state fluoresces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargeState {
    Bright,
    Dark,
}

impl ChargeState {
    #[cfg(test)]
    fn flipped(self) -> Self {
        match self {
            ChargeState::Bright => ChargeState::Dark,
            ChargeState::Dark => ChargeState::Bright,
        }
    }
}

/// Time-stamped state switches plus binned fluorescence counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelegraphTrace {
    /// (time, state after the transition); the first entry is the start state.
    pub events: Vec<(f64, ChargeState)>,
    /// (bin start, detected counts).
    pub bins: Vec<(f64, u64)>,
    pub bin_width: f64,
    pub seed: u64,
}

/// Histogram of bright durations with the fitted capture rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Fitted electron-capture rate, Hz.
    pub fitted_rate: f64,
    pub fitted_rate_err: f64,
    pub n_reps: usize,
    pub fit_converged: bool,
}

/// One point of the initialisation-efficiency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub pulse_length_s: f64,
    pub efficiency: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementPoint {
    pub energy_ev: f64,
    pub beta: f64,
    pub beta_err: f64,
}

/// Fluorescence enhancement versus repump photon energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementSpectrum {
    pub points: Vec<EnhancementPoint>,
}

/// Shape of the ionisation-probability ramp between threshold and unity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepumpShape {
    #[default]
    Linear,
    Logistic,
}

/// Electron-capture rate under resonant drive, Hz; linear with zero intercept.
pub fn capture_rate(charge: &ChargeParams, resonant_power_nw: f64) -> f64 {
    charge.k_capture * resonant_power_nw
}

/// Charge-initialisation rate under blue illumination, Hz; linear with zero
/// intercept.
pub fn init_rate(charge: &ChargeParams, blue_power_uw: f64) -> f64 {
    charge.k_init * blue_power_uw
}

/// Probability that a repump photon of the given energy ionises the donor.
///
/// Zero below the threshold, one above the unity energy, and a monotone ramp
/// in between whose shape is configurable.
pub fn repump_probability(charge: &ChargeParams, photon_energy_ev: f64, shape: RepumpShape) -> f64 {
    let x = (photon_energy_ev - charge.repump_threshold)
        / (charge.repump_unity - charge.repump_threshold);
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    match shape {
        RepumpShape::Linear => x,
        RepumpShape::Logistic => {
            // Rescaled so the curve hits exactly 0 and 1 at the band edges.
            let k = 10.0;
            let sig = |v: f64| 1.0 / (1.0 + (-k * (v - 0.5)).exp());
            (sig(x) - sig(0.0)) / (sig(1.0) - sig(0.0))
        }
    }
}

/// Knobs of a telegraph simulation beyond the pulse sequence itself.
#[derive(Debug, Clone, Copy)]
pub struct TelegraphOptions {
    /// Fluorescence bin width, s.
    pub bin_width: f64,
    pub start: ChargeState,
    /// Spurious electron-capture rate of the blue laser itself, Hz/µW.
    pub blue_capture_per_uw: f64,
    pub seed: u64,
}

/// Illumination within one stretch of constant laser powers.
struct Segment {
    t0: f64,
    t1: f64,
    resonant_nw: f64,
    blue_uw: f64,
    /// Identity of the active blue pulse instance, for per-pulse gating.
    blue_instance: Option<usize>,
}

fn build_segments(seq: &PulseSequence) -> Vec<Segment> {
    #[derive(Clone)]
    struct Instance {
        t0: f64,
        t1: f64,
        role: PulseRole,
        power: f64,
        id: usize,
    }
    let mut instances = Vec::new();
    let mut id = 0;
    for rep in 0..seq.repeat_count {
        let offset = rep as f64 * seq.period;
        for pulse in &seq.pulses {
            instances.push(Instance {
                t0: offset + pulse.start,
                t1: offset + pulse.end(),
                role: pulse.role,
                power: pulse.power,
                id,
            });
            id += 1;
        }
    }
    let mut edges: Vec<f64> = instances
        .iter()
        .flat_map(|i| [i.t0, i.t1])
        .chain([0.0, seq.total_duration()])
        .collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let mut segments = Vec::with_capacity(edges.len());
    for pair in edges.windows(2) {
        let (t0, t1) = (pair[0], pair[1]);
        if t1 <= t0 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        let mut resonant = 0.0;
        let mut blue = 0.0;
        let mut blue_instance = None;
        for inst in &instances {
            if inst.t0 <= mid && mid < inst.t1 {
                if inst.role.is_resonant() {
                    resonant += inst.power;
                } else if inst.role == PulseRole::Blue445 {
                    blue += inst.power;
                    blue_instance.get_or_insert(inst.id);
                }
                // Green and supercontinuum light act neither as capture nor
                // as initialisation channels here; see enhancement_spectrum
                // for the repump physics.
            }
        }
        segments.push(Segment {
            t0,
            t1,
            resonant_nw: resonant,
            blue_uw: blue,
            blue_instance,
        });
    }
    segments
}

fn sample_poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
    draw as u64
}

/// Two-state continuous-time Markov simulation of the charge telegraph.
///
/// While bright and under resonant light the dark-transition hazard is
/// `capture_rate`; while dark and under blue light the bright-transition
/// hazard is `init_rate`, gated per blue pulse by a Bernoulli success of
/// probability `eta_max`. Detected counts per bin are Poisson with mean
/// bin_width·(signal_rate·[bright] + dark_rate). Bit-identical for a fixed
/// seed.
pub fn simulate_telegraph(
    emitter: &EmitterParams,
    charge: &ChargeParams,
    seq: &PulseSequence,
    opts: &TelegraphOptions,
) -> Result<TelegraphTrace> {
    seq.validate()?;
    if !(opts.bin_width > 0.0) {
        return Err(Error::validation("bin_width", "must be > 0"));
    }
    let mut rng = seeds::stream_rng(opts.seed, domain::TELEGRAPH, 0);
    let segments = build_segments(seq);

    let mut state = opts.start;
    let mut events = vec![(0.0, state)];
    // Bright emission intervals under resonant light: (t0, t1, rate).
    let mut emission: Vec<(f64, f64, f64)> = Vec::new();
    let mut gated_instance: Option<(usize, bool)> = None;

    for seg in &segments {
        let mut t = seg.t0;
        loop {
            match state {
                ChargeState::Bright => {
                    let hazard = capture_rate(charge, seg.resonant_nw)
                        + opts.blue_capture_per_uw * seg.blue_uw;
                    let rate = emitter.signal_rate(seg.resonant_nw);
                    if hazard > 0.0 {
                        let wait: f64 = Exp::new(hazard).expect("positive hazard").sample(&mut rng);
                        if t + wait < seg.t1 {
                            if rate > 0.0 {
                                emission.push((t, t + wait, rate));
                            }
                            t += wait;
                            state = ChargeState::Dark;
                            events.push((t, state));
                            continue;
                        }
                    }
                    if rate > 0.0 {
                        emission.push((t, seg.t1, rate));
                    }
                    break;
                }
                ChargeState::Dark => {
                    let Some(instance) = seg.blue_instance else {
                        break;
                    };
                    if seg.blue_uw <= 0.0 {
                        break;
                    }
                    // One success draw per blue pulse instance.
                    let gate = match gated_instance {
                        Some((id, g)) if id == instance => g,
                        _ => {
                            let g = rng.random_bool(charge.eta_max);
                            gated_instance = Some((instance, g));
                            g
                        }
                    };
                    if !gate {
                        break;
                    }
                    let hazard = init_rate(charge, seg.blue_uw);
                    if hazard <= 0.0 {
                        break;
                    }
                    let wait: f64 = Exp::new(hazard).expect("positive hazard").sample(&mut rng);
                    if t + wait < seg.t1 {
                        t += wait;
                        state = ChargeState::Bright;
                        events.push((t, state));
                        continue;
                    }
                    break;
                }
            }
        }
    }

    // Poisson counts per bin: dark rate everywhere plus signal overlaps.
    let total = seq.total_duration();
    let n_bins = (total / opts.bin_width).ceil() as usize;
    let mut means = vec![0.0f64; n_bins];
    for (i, mean) in means.iter_mut().enumerate() {
        let b0 = i as f64 * opts.bin_width;
        let b1 = (b0 + opts.bin_width).min(total);
        *mean = emitter.dark_rate * (b1 - b0);
    }
    for &(e0, e1, rate) in &emission {
        let first = (e0 / opts.bin_width).floor() as usize;
        let last = ((e1 / opts.bin_width).ceil() as usize).min(n_bins);
        for (i, mean) in means.iter_mut().enumerate().take(last).skip(first) {
            let b0 = i as f64 * opts.bin_width;
            let b1 = (b0 + opts.bin_width).min(total);
            let overlap = (e1.min(b1) - e0.max(b0)).max(0.0);
            *mean += rate * overlap;
        }
    }
    let bins = means
        .iter()
        .enumerate()
        .map(|(i, &mean)| (i as f64 * opts.bin_width, sample_poisson(&mut rng, mean)))
        .collect();

    Ok(TelegraphTrace {
        events,
        bins,
        bin_width: opts.bin_width,
        seed: opts.seed,
    })
}

/// Bright durations from repeated init + probe cycles.
///
/// Each repetition draws an initialisation success (probability `eta_max`)
/// and an exponential capture time; durations beyond the probe window are
/// censored and dropped. Repetitions use independent derived streams, so the
/// result is invariant under any parallel partitioning.
pub fn sample_bright_durations(
    charge: &ChargeParams,
    resonant_power_nw: f64,
    n_reps: usize,
    pulse_length_s: f64,
    seed: u64,
) -> Vec<f64> {
    let rate = capture_rate(charge, resonant_power_nw);
    if rate <= 0.0 {
        return Vec::new();
    }
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seeds::stream_rng(seed, domain::CAPTURE, rep as u64);
            let initialised = rng.random_bool(charge.eta_max);
            let duration: f64 = Exp::new(rate).expect("positive rate").sample(&mut rng);
            (initialised && duration <= pulse_length_s).then_some(duration)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Freedman-Diaconis bin edges starting at zero.
fn duration_bin_edges(durations: &[f64], bin_width: Option<f64>) -> Vec<f64> {
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max = *sorted.last().expect("non-empty");
    let n = sorted.len() as f64;
    let width = bin_width.unwrap_or_else(|| {
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let fd = 2.0 * iqr / n.cbrt();
        if fd > 0.0 {
            fd
        } else {
            (max / n.sqrt()).max(f64::MIN_POSITIVE)
        }
    });
    let n_bins = ((max / width).ceil() as usize).max(2);
    (0..=n_bins).map(|i| i as f64 * width).collect()
}

/// Repeat init + probe cycles, histogram the bright durations and fit the
/// capture rate with a mono-exponential.
pub fn run_capture_experiment(
    _emitter: &EmitterParams,
    charge: &ChargeParams,
    resonant_power_nw: f64,
    n_reps: usize,
    pulse_length_s: f64,
    bin_width: Option<f64>,
    seed: u64,
) -> Result<CaptureHistogram> {
    if n_reps < 50 {
        return Err(Error::validation("n_reps", "must be >= 50"));
    }
    let rate = capture_rate(charge, resonant_power_nw);
    if rate > 0.0 && pulse_length_s * rate < 5.0 {
        log::warn!(
            "probe window of {pulse_length_s} s is short against the expected \
             capture time of {} s; durations will be heavily censored",
            1.0 / rate
        );
    }
    let durations =
        sample_bright_durations(charge, resonant_power_nw, n_reps, pulse_length_s, seed);
    if durations.len() < 10 {
        return Err(Error::InsufficientStatistics(format!(
            "{} observed transitions in {n_reps} repetitions",
            durations.len()
        )));
    }
    let edges = duration_bin_edges(&durations, bin_width);
    let mut counts = vec![0u64; edges.len() - 1];
    let width = edges[1] - edges[0];
    for &d in &durations {
        let idx = ((d / width) as usize).min(counts.len() - 1);
        counts[idx] += 1;
    }
    let fitted = fit::fit_exponential_decay(&edges, &counts)?;
    Ok(CaptureHistogram {
        bin_edges: edges,
        counts,
        fitted_rate: fitted.params[1],
        fitted_rate_err: fitted.param_errors[1],
        n_reps,
        fit_converged: fitted.converged,
    })
}

/// Charge-initialisation efficiency versus blue pulse length.
///
/// Each repetition starts dark, applies the blue pulse, then thresholds the
/// counts collected in the early detection window of the resonant probe. The
/// response always starts at the probe edge, so a short window separates it
/// cleanly from the dark-count floor; responses ended by electron capture
/// within the first fraction of a millisecond still fall below threshold.
#[allow(clippy::too_many_arguments)]
pub fn run_init_efficiency(
    emitter: &EmitterParams,
    charge: &ChargeParams,
    blue_power_uw: f64,
    pulse_lengths_s: &[f64],
    n_reps: usize,
    probe: &LaserPulse,
    threshold_counts: u64,
    detection_window_s: Option<f64>,
    seed: u64,
) -> Result<Vec<EfficiencyPoint>> {
    probe.validate()?;
    if !probe.role.is_resonant() {
        return Err(Error::validation("probe.role", "probe must be resonant"));
    }
    if n_reps == 0 {
        return Err(Error::validation("n_reps", "must be >= 1"));
    }
    let window = detection_window_s
        .unwrap_or(probe.duration)
        .min(probe.duration);
    if !(window > 0.0) {
        return Err(Error::validation("detection_window_s", "must be > 0"));
    }
    let blue_rate = init_rate(charge, blue_power_uw);
    let probe_capture = capture_rate(charge, probe.power);
    let signal = emitter.signal_rate(probe.power);
    let mut points = Vec::with_capacity(pulse_lengths_s.len());
    for (li, &len) in pulse_lengths_s.iter().enumerate() {
        let successes: u64 = (0..n_reps)
            .into_par_iter()
            .map(|rep| {
                let index = ((li as u64) << 32) | rep as u64;
                let mut rng = seeds::stream_rng(seed, domain::INIT_EFF, index);
                let gate = rng.random_bool(charge.eta_max);
                let init_time: f64 = if blue_rate > 0.0 {
                    Exp::new(blue_rate).expect("positive rate").sample(&mut rng)
                } else {
                    f64::INFINITY
                };
                let bright = gate && init_time <= len;
                let mean = if bright {
                    let capture_time: f64 = if probe_capture > 0.0 {
                        Exp::new(probe_capture)
                            .expect("positive rate")
                            .sample(&mut rng)
                    } else {
                        f64::INFINITY
                    };
                    signal * capture_time.min(window) + emitter.dark_rate * window
                } else {
                    emitter.dark_rate * window
                };
                u64::from(sample_poisson(&mut rng, mean) > threshold_counts)
            })
            .sum();
        let efficiency = successes as f64 / n_reps as f64;
        let n = n_reps as f64;
        // Binomial error floored at the one-count level so fits stay weighted.
        let variance = (efficiency * (1.0 - efficiency)).max((1.0 / n) * (1.0 - 1.0 / n));
        points.push(EfficiencyPoint {
            pulse_length_s: len,
            efficiency,
            error: (variance / n).sqrt(),
        });
    }
    Ok(points)
}

/// Steady-state fluorescence enhancement versus repump photon energy.
///
/// The bright fraction is f = r_r/(r_r + r_c) with the repump rate
/// r_r = scale·p_ion(E) and capture rate r_c; the baseline uses the residual
/// recovery rate instead of r_r (zero by default: darkening without repump
/// light is permanent and the baseline sits at the dark-count floor).
#[allow(clippy::too_many_arguments)]
pub fn enhancement_spectrum(
    emitter: &EmitterParams,
    charge: &ChargeParams,
    energies_ev: &[f64],
    repump_power_scale_hz: f64,
    resonant_power_nw: f64,
    shape: RepumpShape,
    residual_recovery_hz: f64,
    integration_time_s: f64,
) -> Result<EnhancementSpectrum> {
    if !(resonant_power_nw > 0.0) {
        return Err(Error::validation("resonant_power_nw", "must be > 0"));
    }
    if !(integration_time_s > 0.0) {
        return Err(Error::validation("integration_time_s", "must be > 0"));
    }
    let r_c = capture_rate(charge, resonant_power_nw);
    let signal = emitter.signal_rate(resonant_power_nw);
    let bright_fraction = |recovery: f64| -> f64 {
        if recovery <= 0.0 {
            0.0
        } else {
            recovery / (recovery + r_c)
        }
    };
    let baseline = bright_fraction(residual_recovery_hz) * signal + emitter.dark_rate;
    if baseline <= 0.0 {
        return Err(Error::validation(
            "dark_rate",
            "enhancement baseline is zero; set a dark rate or residual recovery",
        ));
    }
    let points = energies_ev
        .iter()
        .map(|&energy| {
            let r_r = repump_power_scale_hz * repump_probability(charge, energy, shape);
            let with = bright_fraction(r_r + residual_recovery_hz) * signal + emitter.dark_rate;
            let beta = with / baseline;
            let n_with = with * integration_time_s;
            let n_without = baseline * integration_time_s;
            let beta_err = beta * (1.0 / n_with + 1.0 / n_without).sqrt();
            EnhancementPoint {
                energy_ev: energy,
                beta,
                beta_err,
            }
        })
        .collect();
    Ok(EnhancementSpectrum { points })
}
