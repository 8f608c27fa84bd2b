//! PLE scan series with power broadening, shot noise and spectral diffusion.
//!
//! The line centre walks as an Ornstein-Uhlenbeck process plus a sinusoidal
//! drift; the walk is frozen within each scan (scans are fast against the
//! drift). The wavemeter adds an independent Gaussian offset per scan.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{least_squares, FitOptions};
use crate::model::EmitterParams;
use crate::seeds::{self, domain};

/// Spectral-diffusion model of the line centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionProcess {
    /// Stationary standard deviation of the OU centre walk, Hz.
    pub sigma_jitter: f64,
    /// Correlation time of the OU walk, s.
    pub tau_corr: f64,
    /// Amplitude of the sinusoidal drift, Hz.
    pub drift_amplitude: f64,
    /// Period of the sinusoidal drift, s.
    pub drift_period: f64,
    /// Wavemeter measurement noise per scan, Hz.
    pub wavemeter_sigma: f64,
}

impl Default for DiffusionProcess {
    fn default() -> Self {
        DiffusionProcess {
            sigma_jitter: 0.0,
            tau_corr: 120.0,
            drift_amplitude: 0.0,
            drift_period: 600.0,
            wavemeter_sigma: 2e6,
        }
    }
}

impl DiffusionProcess {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("diffusion.sigma_jitter", self.sigma_jitter),
            ("diffusion.tau_corr", self.tau_corr),
            ("diffusion.drift_amplitude", self.drift_amplitude),
            ("diffusion.drift_period", self.drift_period),
            ("diffusion.wavemeter_sigma", self.wavemeter_sigma),
        ];
        for (name, value) in fields {
            if !(value >= 0.0) {
                return Err(Error::validation(name, "must be >= 0"));
            }
        }
        Ok(())
    }

    /// Line-centre offsets at the given times, Hz. Exact OU discretisation
    /// (stationary start) plus the sinusoidal component.
    pub fn sample_trajectory<R: Rng>(&self, times: &[f64], rng: &mut R) -> Vec<f64> {
        let mut centers = Vec::with_capacity(times.len());
        let mut ou = 0.0;
        for (i, &t) in times.iter().enumerate() {
            ou = if self.sigma_jitter <= 0.0 {
                0.0
            } else if i == 0 {
                self.sigma_jitter * rng.sample::<f64, _>(StandardNormal)
            } else {
                let dt = t - times[i - 1];
                let decay = if self.tau_corr > 0.0 {
                    (-dt / self.tau_corr).exp()
                } else {
                    0.0
                };
                let noise = self.sigma_jitter * (1.0 - decay * decay).sqrt();
                ou * decay + noise * rng.sample::<f64, _>(StandardNormal)
            };
            let drift = if self.drift_amplitude > 0.0 && self.drift_period > 0.0 {
                self.drift_amplitude * (std::f64::consts::TAU * t / self.drift_period).sin()
            } else {
                0.0
            };
            centers.push(ou + drift);
        }
        centers
    }
}

/// One PLE scan with its Lorentzian fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PleScan {
    /// Detuning grid, Hz.
    pub detunings: Vec<f64>,
    pub counts: Vec<u64>,
    /// Start time of the scan within the series, s.
    pub scan_start: f64,
    pub fitted_center: Option<f64>,
    pub fitted_fwhm: Option<f64>,
    /// Fit failure carried in the record instead of aborting the series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
}

/// A series of scans with the summed spectrum and its statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSeries {
    pub scans: Vec<PleScan>,
    pub summed_grid: Vec<f64>,
    /// Column sums of the per-scan counts.
    pub summed_counts: Vec<u64>,
    /// Standard deviation of the fitted line centres, Hz.
    pub center_std: f64,
    /// FWHM of a Lorentzian fitted to the summed spectrum, Hz.
    pub summed_fwhm: f64,
}

/// Summary statistics of a scan series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub center_std: f64,
    pub summed_fwhm: f64,
    /// Dominant period of the centre trajectory from a periodogram, s.
    pub drift_period_estimate: Option<f64>,
}

/// Lorentzian profile normalised to one at the centre.
pub fn lorentzian(f: f64, f0: f64, fwhm: f64) -> f64 {
    let half = fwhm / 2.0;
    half * half / ((f - f0).powi(2) + half * half)
}

fn sample_poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
    draw as u64
}

/// Fit amp·lorentzian(f, f0, w) + base to counts with Poisson weights.
/// Returns (center, fwhm) or an error message.
fn fit_lorentzian(detunings: &[f64], counts: &[u64]) -> std::result::Result<(f64, f64), String> {
    let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let sigma: Vec<f64> = counts.iter().map(|&c| (c.max(1) as f64).sqrt()).collect();
    let peak = y.iter().cloned().fold(f64::MIN, f64::max);
    let floor = y.iter().cloned().fold(f64::MAX, f64::min);
    if peak <= floor {
        return Err("flat scan".into());
    }
    let center0 = detunings[y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)];
    let half_level = floor + 0.5 * (peak - floor);
    let step = detunings[1] - detunings[0];
    let above = y.iter().filter(|&&v| v > half_level).count().max(2);
    let width0 = above as f64 * step;
    let model = |f: f64, p: &[f64]| p[0] * lorentzian(f, p[1], p[2].abs()) + p[3];
    let fit = least_squares(
        model,
        detunings,
        &y,
        Some(&sigma),
        &[peak - floor, center0, width0, floor],
        &FitOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    if !fit.converged {
        return Err("line fit did not converge".into());
    }
    Ok((fit.params[1], fit.params[2].abs()))
}

/// Simulate one PLE scan.
///
/// The expected rate per point is
/// signal_rate(P)·lorentzian(f, center, Γ(P)) + dark_rate, with Γ(P) the
/// power-broadened width plus any homogeneous extra width; counts are
/// Poisson over the dwell time.
pub fn simulate_scan(
    emitter: &EmitterParams,
    power_nw: f64,
    grid: &[f64],
    dwell_s: f64,
    center_hz: f64,
    extra_width_hz: f64,
    seed: u64,
) -> Result<PleScan> {
    if !(dwell_s > 0.0) {
        return Err(Error::validation("dwell_s", "must be > 0"));
    }
    if grid.len() < 5 {
        return Err(Error::validation("grid", "needs at least 5 points"));
    }
    let width = emitter.power_broadened_width(power_nw) + extra_width_hz;
    let signal = emitter.signal_rate(power_nw);
    let mut rng = seeds::stream_rng(seed, domain::PLE_SCAN, 0);
    let counts: Vec<u64> = grid
        .iter()
        .map(|&f| {
            let rate = signal * lorentzian(f, center_hz, width) + emitter.dark_rate;
            sample_poisson(&mut rng, rate * dwell_s)
        })
        .collect();
    let mut scan = PleScan {
        detunings: grid.to_vec(),
        counts,
        scan_start: 0.0,
        fitted_center: None,
        fitted_fwhm: None,
        fit_error: None,
    };
    match fit_lorentzian(&scan.detunings, &scan.counts) {
        Ok((center, fwhm)) => {
            scan.fitted_center = Some(center);
            scan.fitted_fwhm = Some(fwhm);
        }
        Err(message) => scan.fit_error = Some(message),
    }
    Ok(scan)
}

/// Simulate a full scan series over one diffusion trajectory.
///
/// The trajectory (OU + drift + wavemeter offsets) is drawn first; the scans
/// then sample independently with per-scan streams, so the series is
/// deterministic under any parallel schedule.
#[allow(clippy::too_many_arguments)]
pub fn simulate_series(
    emitter: &EmitterParams,
    diffusion: &DiffusionProcess,
    n_scans: usize,
    scan_period_s: f64,
    power_nw: f64,
    grid: &[f64],
    dwell_s: f64,
    extra_width_hz: f64,
    seed: u64,
) -> Result<ScanSeries> {
    if n_scans < 2 {
        return Err(Error::validation("n_scans", "must be >= 2"));
    }
    diffusion.validate()?;
    let times: Vec<f64> = (0..n_scans).map(|i| i as f64 * scan_period_s).collect();
    let mut rng = seeds::stream_rng(seed, domain::PLE_TRAJECTORY, 0);
    let walk = diffusion.sample_trajectory(&times, &mut rng);
    let observed: Vec<f64> = walk
        .iter()
        .map(|&c| c + diffusion.wavemeter_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut scans = observed
        .par_iter()
        .enumerate()
        .map(|(i, &center)| {
            simulate_scan(
                emitter,
                power_nw,
                grid,
                dwell_s,
                center,
                extra_width_hz,
                seeds::derive(seed, domain::PLE_SCAN, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for (scan, &t) in scans.iter_mut().zip(&times) {
        scan.scan_start = t;
    }

    let summed_counts: Vec<u64> = (0..grid.len())
        .map(|col| scans.iter().map(|s| s.counts[col]).sum())
        .collect();
    let summed_fwhm = fit_lorentzian(grid, &summed_counts)
        .map(|(_, w)| w)
        .map_err(Error::Statistics)?;
    let center_std = centers_std(&scans)?;

    Ok(ScanSeries {
        scans,
        summed_grid: grid.to_vec(),
        summed_counts,
        center_std,
        summed_fwhm,
    })
}

fn centers_std(scans: &[PleScan]) -> Result<f64> {
    let centers: Vec<f64> = scans.iter().filter_map(|s| s.fitted_center).collect();
    if centers.len() < 2 {
        return Err(Error::Statistics(format!(
            "{} successfully fitted scans; need at least 2",
            centers.len()
        )));
    }
    let n = centers.len() as f64;
    let mean = centers.iter().sum::<f64>() / n;
    let var = centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt())
}

/// Robust statistics of a finished series: centre spread, summed width and
/// the dominant drift period from a periodogram of the centre trajectory.
pub fn series_stats(series: &ScanSeries) -> Result<SeriesStats> {
    let center_std = centers_std(&series.scans)?;
    let summed_fwhm = fit_lorentzian(&series.summed_grid, &series.summed_counts)
        .map(|(_, w)| w)
        .map_err(Error::Statistics)?;

    let samples: Vec<(f64, f64)> = series
        .scans
        .iter()
        .filter_map(|s| s.fitted_center.map(|c| (s.scan_start, c)))
        .collect();
    let drift_period_estimate = dominant_period(&samples);

    Ok(SeriesStats {
        center_std,
        summed_fwhm,
        drift_period_estimate,
    })
}

/// Periodogram peak of a uniformly sampled trajectory; `None` when no
/// oscillation stands out of the mean level.
fn dominant_period(samples: &[(f64, f64)]) -> Option<f64> {
    let n = samples.len();
    if n < 4 {
        return None;
    }
    let mean = samples.iter().map(|&(_, c)| c).sum::<f64>() / n as f64;
    let span = samples[n - 1].0 - samples[0].0;
    if span <= 0.0 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for k in 1..=(n / 2) {
        let freq = k as f64 / span;
        let (mut re, mut im) = (0.0, 0.0);
        for &(t, c) in samples {
            let phase = std::f64::consts::TAU * freq * (t - samples[0].0);
            re += (c - mean) * phase.cos();
            im -= (c - mean) * phase.sin();
        }
        let power = re * re + im * im;
        if best.is_none_or(|(p, _)| power > p) {
            best = Some((power, 1.0 / freq));
        }
    }
    match best {
        Some((power, period)) if power > 0.0 => Some(period),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(span: f64, n: usize) -> Vec<f64> {
        let step = span / (n - 1) as f64;
        (0..n).map(|i| -span / 2.0 + step * i as f64).collect()
    }

    #[test]
    fn lorentzian_reference_points() {
        assert_relative_eq!(lorentzian(0.0, 0.0, 25e6), 1.0);
        assert_relative_eq!(lorentzian(12.5e6, 0.0, 25e6), 0.5);
        assert_relative_eq!(lorentzian(25e6, 0.0, 25e6), 0.2);
    }

    #[test]
    fn low_power_scan_recovers_natural_linewidth() {
        let emitter = EmitterParams::default();
        let scan = simulate_scan(&emitter, 0.05, &grid(300e6, 201), 2.0, 0.0, 0.0, 3).unwrap();
        let fwhm = scan.fitted_fwhm.expect("fit succeeds");
        let truth = emitter.power_broadened_width(0.05);
        assert!((fwhm - truth).abs() < 2e6, "fwhm {fwhm}, truth {truth}");
        assert!((fwhm - 25e6).abs() < 3e6);
    }

    #[test]
    fn broadened_scan_recovers_88_mhz() {
        // p_sat calibrated so that 10 nW gives an 88 MHz width.
        let p_sat = 10.0 / ((88e6_f64 / 25e6).powi(2) - 1.0);
        let emitter = EmitterParams {
            p_sat,
            ..EmitterParams::default()
        };
        let scan = simulate_scan(&emitter, 10.0, &grid(600e6, 241), 1.0, 0.0, 0.0, 4).unwrap();
        let fwhm = scan.fitted_fwhm.unwrap();
        assert!((fwhm - 88e6).abs() < 2e6, "fwhm {fwhm}");
    }

    #[test]
    fn long_dwell_fit_recovers_center() {
        let emitter = EmitterParams::default();
        let center = 7.3e6;
        let scan = simulate_scan(&emitter, 0.4, &grid(300e6, 201), 50.0, center, 0.0, 5).unwrap();
        let fitted = scan.fitted_center.unwrap();
        assert!((fitted - center).abs() < 0.5e6, "fitted {fitted}");
    }

    #[test]
    fn flat_scan_records_fit_error() {
        let emitter = EmitterParams {
            dark_rate: 1e-6,
            ..EmitterParams::default()
        };
        let scan = simulate_scan(&emitter, 0.0, &grid(300e6, 101), 1e-3, 0.0, 0.0, 6).unwrap();
        // Zero power: no signal anywhere, nothing to fit.
        assert!(scan.fitted_center.is_none());
        assert!(scan.fit_error.is_some());
    }

    fn quiet_diffusion() -> DiffusionProcess {
        DiffusionProcess {
            sigma_jitter: 0.0,
            tau_corr: 120.0,
            drift_amplitude: 0.0,
            drift_period: 600.0,
            wavemeter_sigma: 0.0,
        }
    }

    #[test]
    fn series_without_diffusion_is_narrow() {
        let emitter = EmitterParams::default();
        let diffusion = DiffusionProcess {
            wavemeter_sigma: 2e6,
            ..quiet_diffusion()
        };
        let series = simulate_series(
            &emitter,
            &diffusion,
            20,
            60.0,
            0.4,
            &grid(300e6, 201),
            0.05,
            0.0,
            8,
        )
        .unwrap();
        assert!(
            series.center_std <= 2.5e6,
            "center std {}",
            series.center_std
        );
        let single = series.scans[0].fitted_fwhm.unwrap();
        assert!((series.summed_fwhm - single).abs() < 3e6);
    }

    #[test]
    fn summed_counts_are_column_sums() {
        let emitter = EmitterParams::default();
        let series = simulate_series(
            &emitter,
            &quiet_diffusion(),
            5,
            60.0,
            0.4,
            &grid(300e6, 101),
            0.02,
            0.0,
            9,
        )
        .unwrap();
        for col in 0..series.summed_grid.len() {
            let sum: u64 = series.scans.iter().map(|s| s.counts[col]).sum();
            assert_eq!(series.summed_counts[col], sum);
        }
        // The sum can only be as narrow as its widest constituent.
        let widest = series
            .scans
            .iter()
            .filter_map(|s| s.fitted_fwhm)
            .fold(0.0, f64::max);
        assert!(
            series.summed_fwhm >= widest - 2e6,
            "summed {} vs widest {widest}",
            series.summed_fwhm
        );
    }

    #[test]
    fn center_std_ignores_global_offset() {
        let emitter = EmitterParams::default();
        let series = simulate_series(
            &emitter,
            &quiet_diffusion(),
            6,
            60.0,
            0.4,
            &grid(300e6, 101),
            0.05,
            0.0,
            10,
        )
        .unwrap();
        let mut shifted = series.clone();
        for scan in &mut shifted.scans {
            if let Some(c) = scan.fitted_center.as_mut() {
                *c += 5e6;
            }
        }
        let a = series_stats(&series).unwrap();
        let b = series_stats(&shifted).unwrap();
        assert_relative_eq!(a.center_std, b.center_std, max_relative = 1e-12);
    }

    #[test]
    fn injected_sinusoid_period_is_recovered() {
        let emitter = EmitterParams::default();
        let diffusion = DiffusionProcess {
            drift_amplitude: 8e6,
            drift_period: 600.0,
            wavemeter_sigma: 0.5e6,
            ..quiet_diffusion()
        };
        let series = simulate_series(
            &emitter,
            &diffusion,
            60,
            60.0,
            0.4,
            &grid(300e6, 151),
            0.05,
            0.0,
            12,
        )
        .unwrap();
        let stats = series_stats(&series).unwrap();
        let period = stats.drift_period_estimate.expect("oscillation present");
        // Periodogram bins at the 3540 s record length: one bin around 600 s.
        assert!((period - 600.0).abs() < 120.0, "period {period}");
    }

    #[test]
    fn duplicated_scan_series_keeps_width_and_zero_std() {
        let emitter = EmitterParams::default();
        let scan = simulate_scan(&emitter, 0.4, &grid(300e6, 151), 0.5, 0.0, 0.0, 13).unwrap();
        let summed: Vec<u64> = scan.counts.iter().map(|&c| 2 * c).collect();
        let series = ScanSeries {
            scans: vec![scan.clone(), scan.clone()],
            summed_grid: scan.detunings.clone(),
            summed_counts: summed,
            center_std: 0.0,
            summed_fwhm: 0.0,
        };
        let stats = series_stats(&series).unwrap();
        assert_eq!(stats.center_std, 0.0);
        assert_relative_eq!(
            stats.summed_fwhm,
            scan.fitted_fwhm.unwrap(),
            max_relative = 1e-6
        );
    }

    #[test]
    fn center_errors_scale_with_inverse_sqrt_counts() {
        // Cramér-Rao scaling: quadrupling the dwell halves the centre error.
        let emitter = EmitterParams::default();
        let g = grid(300e6, 201);
        let rms = |dwell: f64, seed0: u64| -> (f64, f64) {
            let mut sq = 0.0;
            let mut total = 0.0;
            let n = 40;
            for i in 0..n {
                let scan =
                    simulate_scan(&emitter, 0.4, &g, dwell, 0.0, 0.0, seed0 + i as u64).unwrap();
                sq += scan.fitted_center.unwrap().powi(2);
                total += scan.counts.iter().sum::<u64>() as f64;
            }
            ((sq / n as f64).sqrt(), total / n as f64)
        };
        let (rms_short, counts_short) = rms(0.05, 100);
        let (rms_long, counts_long) = rms(0.8, 200);
        let expected_ratio = (counts_short / counts_long).sqrt();
        let ratio = rms_long / rms_short;
        assert!(
            ratio < 2.0 * expected_ratio && ratio > expected_ratio / 2.0,
            "ratio {ratio}, expected about {expected_ratio}"
        );
        // Error magnitude tracks fwhm/sqrt(N) with an O(1) coefficient.
        let fwhm = emitter.power_broadened_width(0.4);
        assert!(
            rms_long <= 2.5 * fwhm / counts_long.sqrt(),
            "rms {rms_long}"
        );
    }
}
