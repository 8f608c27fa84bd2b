//! One function per subcommand: run the pipeline, write data, summary and
//! plot files through the [`RunWriter`].

use std::path::Path;

use serde::Serialize;
use serde_json::json;

use g4vdyn::chargesim::{
    enhancement_spectrum, run_capture_experiment, run_init_efficiency, simulate_telegraph,
    ChargeState, TelegraphOptions,
};
use g4vdyn::error::{Error, Result};
use g4vdyn::fit::{self, CptModel, CptParam, FitOptions, FitResult};
use g4vdyn::lindblad::{cpt_spectrum, LambdaSystem};
use g4vdyn::readout::{analyze, sequence_histogram, simulate_initialization, simulate_shots, Spin};
use g4vdyn::spectra::{series_stats, simulate_series};

use crate::output::{fmt, RunWriter};

pub enum CommandError {
    Core(Error),
    /// A fit did not converge under --strict; mapped to exit code 4.
    Strict,
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Core(e)
    }
}

type CmdResult = std::result::Result<(), CommandError>;

fn enforce_strict(strict: bool, converged: bool) -> CmdResult {
    if strict && !converged {
        return Err(CommandError::Strict);
    }
    Ok(())
}

pub fn telegraph(w: &mut RunWriter) -> CmdResult {
    let cfg = w.config().simulation.telegraph.clone();
    let emitter = w.config().emitter.clone();
    let charge = w.config().charge.clone();
    let seq = cfg.to_sequence();
    let opts = TelegraphOptions {
        bin_width: cfg.bin_width_s,
        start: if cfg.start_bright {
            ChargeState::Bright
        } else {
            ChargeState::Dark
        },
        blue_capture_per_uw: cfg.blue_capture_per_uw,
        seed: w.seed(),
    };
    let trace = simulate_telegraph(&emitter, &charge, &seq, &opts)?;

    let rows: Vec<Vec<String>> = trace
        .bins
        .iter()
        .map(|&(t, c)| vec![fmt(t), c.to_string()])
        .collect();
    w.write_csv("telegraph_trace.csv", "time_s,counts", &rows)?;
    w.write_json(
        "telegraph_summary.json",
        &json!({
            "seed": trace.seed,
            "bin_width_s": trace.bin_width,
            "n_bins": trace.bins.len(),
            "total_counts": trace.bins.iter().map(|&(_, c)| c).sum::<u64>(),
            "events": trace.events,
        }),
    )?;
    w.write_plot(
        "telegraph",
        "Fig. 2a",
        "Charge telegraph: binned fluorescence under pulsed initialisation and resonant probing",
        &[("time_s", "s"), ("counts", "counts/bin")],
        &rows,
    )?;
    Ok(())
}

pub fn capture(w: &mut RunWriter, strict: bool) -> CmdResult {
    let cfg = w.config().simulation.capture.clone();
    let emitter = w.config().emitter.clone();
    let charge = w.config().charge.clone();
    let hist = run_capture_experiment(
        &emitter,
        &charge,
        cfg.resonant_power_nw,
        cfg.n_reps,
        cfg.pulse_length_s,
        cfg.bin_width_s,
        w.seed(),
    )?;

    let rows: Vec<Vec<String>> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            vec![
                fmt(hist.bin_edges[i]),
                fmt(hist.bin_edges[i + 1]),
                c.to_string(),
            ]
        })
        .collect();
    w.write_csv("capture_histogram.csv", "t_lo_s,t_hi_s,count", &rows)?;
    w.write_json(
        "capture_summary.json",
        &json!({
            "seed": w.seed(),
            "resonant_power_nw": cfg.resonant_power_nw,
            "n_reps": hist.n_reps,
            "fitted_rate_hz": hist.fitted_rate,
            "fitted_rate_err_hz": hist.fitted_rate_err,
            "fit_converged": hist.fit_converged,
        }),
    )?;
    let plot_rows: Vec<Vec<String>> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            vec![
                fmt(0.5 * (hist.bin_edges[i] + hist.bin_edges[i + 1])),
                c.to_string(),
            ]
        })
        .collect();
    w.write_plot(
        "capture",
        "Fig. 2b",
        "Bright-duration histogram with mono-exponential charge-transfer fit",
        &[("t_s", "s"), ("count", "repetitions/bin")],
        &plot_rows,
    )?;
    enforce_strict(strict, hist.fit_converged)
}

pub fn init_eff(w: &mut RunWriter, strict: bool) -> CmdResult {
    let cfg = w.config().simulation.init_eff.clone();
    let emitter = w.config().emitter.clone();
    let charge = w.config().charge.clone();
    let points = run_init_efficiency(
        &emitter,
        &charge,
        cfg.blue_power_uw,
        &cfg.pulse_lengths_s,
        cfg.n_reps,
        &cfg.probe_pulse(),
        cfg.threshold_counts,
        cfg.detection_window_s,
        w.seed(),
    )?;

    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![fmt(p.pulse_length_s), fmt(p.efficiency), fmt(p.error)])
        .collect();
    w.write_csv("efficiency.csv", "pulse_len_s,eff,err", &rows)?;

    let t: Vec<f64> = points.iter().map(|p| p.pulse_length_s).collect();
    let y: Vec<f64> = points.iter().map(|p| p.efficiency).collect();
    let s: Vec<f64> = points.iter().map(|p| p.error).collect();
    let fitted = fit::fit_saturating_exponential(&t, &y, Some(&s))?;
    w.write_json(
        "init_eff_summary.json",
        &json!({
            "seed": w.seed(),
            "blue_power_uw": cfg.blue_power_uw,
            "n_reps": cfg.n_reps,
            "eta_max": fitted.params[0],
            "eta_max_err": fitted.param_errors[0],
            "tau_ci_s": fitted.params[1],
            "tau_ci_err_s": fitted.param_errors[1],
            "fit_converged": fitted.converged,
        }),
    )?;
    w.write_plot(
        "init_eff",
        "Fig. 2d",
        "Charge-initialisation efficiency versus blue pulse length",
        &[
            ("pulse_len_s", "s"),
            ("eff", "probability"),
            ("err", "probability"),
        ],
        &rows,
    )?;
    enforce_strict(strict, fitted.converged)
}

pub fn enhance(w: &mut RunWriter) -> CmdResult {
    let cfg = w.config().simulation.enhance.clone();
    let emitter = w.config().emitter.clone();
    let charge = w.config().charge.clone();
    let spectrum = enhancement_spectrum(
        &emitter,
        &charge,
        &cfg.energies_ev,
        cfg.repump_power_scale_hz,
        cfg.resonant_power_nw,
        cfg.repump_shape,
        cfg.residual_recovery_hz,
        cfg.integration_time_s,
    )?;
    let rows: Vec<Vec<String>> = spectrum
        .points
        .iter()
        .map(|p| vec![fmt(p.energy_ev), fmt(p.beta), fmt(p.beta_err)])
        .collect();
    w.write_csv("enhancement.csv", "energy_eV,beta,err", &rows)?;
    let peak = spectrum.points.iter().map(|p| p.beta).fold(0.0, f64::max);
    w.write_json(
        "enhance_summary.json",
        &json!({
            "seed": w.seed(),
            "resonant_power_nw": cfg.resonant_power_nw,
            "repump_power_scale_hz": cfg.repump_power_scale_hz,
            "repump_shape": cfg.repump_shape,
            "max_beta": peak,
        }),
    )?;
    w.write_plot(
        "enhance",
        "Fig. 1b",
        "Fluorescence enhancement factor versus repump photon energy",
        &[
            ("energy_eV", "eV"),
            ("beta", "dimensionless"),
            ("err", "dimensionless"),
        ],
        &rows,
    )?;
    Ok(())
}

pub fn ple_series(w: &mut RunWriter) -> CmdResult {
    let cfg = w.config().simulation.ple.clone();
    let emitter = w.config().emitter.clone();
    let grid = cfg.grid();
    let series = simulate_series(
        &emitter,
        &cfg.diffusion,
        cfg.n_scans,
        cfg.scan_period_s,
        cfg.power_nw,
        &grid,
        cfg.dwell_s,
        cfg.homogeneous_broadening_hz,
        w.seed(),
    )?;
    let stats = series_stats(&series)?;

    let scan_rows: Vec<Vec<String>> = series
        .scans
        .iter()
        .enumerate()
        .map(|(i, scan)| {
            vec![
                i.to_string(),
                fmt(scan.scan_start),
                scan.fitted_center.map(fmt).unwrap_or_default(),
                scan.fitted_fwhm.map(fmt).unwrap_or_default(),
            ]
        })
        .collect();
    w.write_csv(
        "ple_scans.csv",
        "scan_index,t_s,center_hz,fwhm_hz",
        &scan_rows,
    )?;

    let waterfall_header = std::iter::once("scan_index".to_string())
        .chain(grid.iter().map(|&f| fmt(f)))
        .collect::<Vec<_>>()
        .join(",");
    let waterfall_rows: Vec<Vec<String>> = series
        .scans
        .iter()
        .enumerate()
        .map(|(i, scan)| {
            std::iter::once(i.to_string())
                .chain(scan.counts.iter().map(|c| c.to_string()))
                .collect()
        })
        .collect();
    w.write_csv("ple_waterfall.csv", &waterfall_header, &waterfall_rows)?;

    w.write_json(
        "ple_summary.json",
        &json!({
            "seed": w.seed(),
            "n_scans": cfg.n_scans,
            "power_nw": cfg.power_nw,
            "center_std_hz": stats.center_std,
            "summed_fwhm_hz": stats.summed_fwhm,
            "drift_period_estimate_s": stats.drift_period_estimate,
        }),
    )?;

    let summed_rows: Vec<Vec<String>> = series
        .summed_grid
        .iter()
        .zip(&series.summed_counts)
        .map(|(&f, &c)| vec![fmt(f), c.to_string()])
        .collect();
    w.write_plot(
        "ple_summed",
        "Fig. 3a/b right",
        "Summed PLE spectrum over the full scan series",
        &[("detuning_hz", "Hz"), ("counts", "counts")],
        &summed_rows,
    )?;
    let center_rows: Vec<Vec<String>> = series
        .scans
        .iter()
        .filter_map(|s| s.fitted_center.map(|c| vec![fmt(s.scan_start), fmt(c)]))
        .collect();
    w.write_plot(
        "ple_centers",
        "Fig. 3a/b left",
        "Fitted line centre versus time across the scan series",
        &[("t_s", "s"), ("center_hz", "Hz")],
        &center_rows,
    )?;
    Ok(())
}

pub fn cpt(w: &mut RunWriter) -> CmdResult {
    let cfg = w.config().simulation.cpt.clone();
    let emitter = w.config().emitter.clone();
    let mut sys = LambdaSystem::from_emitter(
        &emitter,
        cfg.omega1_hz,
        cfg.omega2_hz,
        cfg.delta1_hz,
        cfg.delta1_hz,
    );
    sys.gamma_s_rate_factor = cfg.gamma_s_rate_factor;
    sys.sideband_taper_per_hz = cfg.sideband_taper_per_hz;
    let spectrum = cpt_spectrum(&sys, &cfg.grid(), &emitter, cfg.background_cps)?;

    let rows: Vec<Vec<String>> = spectrum
        .points
        .iter()
        .map(|p| {
            vec![
                fmt(p.delta_hz),
                fmt(p.excited_population),
                fmt(p.model_counts),
            ]
        })
        .collect();
    w.write_csv("cpt_spectrum.csv", "delta_hz,rho_ee,counts_per_s", &rows)?;
    w.write_json(
        "cpt_summary.json",
        &json!({
            "seed": w.seed(),
            "system": spectrum.params,
            "background_cps": spectrum.background,
            "t2_star_s": spectrum.params.t2_star(),
            "n_points": spectrum.points.len(),
        }),
    )?;
    let plot_rows: Vec<Vec<String>> = spectrum
        .points
        .iter()
        .map(|p| vec![fmt(p.delta_hz), fmt(p.model_counts)])
        .collect();
    w.write_plot(
        "cpt",
        "Fig. 4 (CPT) a/b",
        "Coherent-population-trapping dip: model count rate versus two-photon detuning",
        &[("delta_hz", "Hz"), ("counts_per_s", "counts/s")],
        &plot_rows,
    )?;
    Ok(())
}

pub fn readout(w: &mut RunWriter) -> CmdResult {
    let cfg = w.config().simulation.readout.clone();
    let emitter = w.config().emitter.clone();
    let records = simulate_shots(&emitter, &cfg, w.seed())?;
    let report = analyze(&records, &emitter, &cfg)?;

    let shot_rows: Vec<Vec<String>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                i.to_string(),
                match r.true_initial_spin {
                    Spin::Up => "up".to_string(),
                    Spin::Down => "down".to_string(),
                },
                r.detected_photons.to_string(),
            ]
        })
        .collect();
    w.write_csv(
        "readout_shots.csv",
        "shot_index,true_state,photons",
        &shot_rows,
    )?;

    let max_count = report
        .hist_bright
        .keys()
        .chain(report.hist_dark.keys())
        .max()
        .copied()
        .unwrap_or(0);
    let hist_rows: Vec<Vec<String>> = (0..=max_count)
        .map(|k| {
            vec![
                k.to_string(),
                report.hist_bright.get(&k).copied().unwrap_or(0).to_string(),
                report.hist_dark.get(&k).copied().unwrap_or(0).to_string(),
            ]
        })
        .collect();
    w.write_csv(
        "readout_histogram.csv",
        "count,freq_bright,freq_dark",
        &hist_rows,
    )?;

    #[derive(Serialize)]
    struct ReadoutSummary<'a> {
        seed: u64,
        init_probability_model: f64,
        #[serde(flatten)]
        report: &'a g4vdyn::readout::FidelityReport,
    }
    w.write_json(
        "readout_summary.json",
        &ReadoutSummary {
            seed: w.seed(),
            init_probability_model: simulate_initialization(
                &emitter,
                cfg.init_pulse,
                cfg.pump_power_nw,
            ),
            report: &report,
        },
    )?;

    let bin_width = cfg.read_pulse / 20.0;
    let sequence = sequence_histogram(&records, &emitter, &cfg, bin_width)?;
    let seq_rows: Vec<Vec<String>> = sequence
        .iter()
        .map(|&(t, m)| vec![fmt(t), fmt(m)])
        .collect();
    w.write_plot(
        "readout_sequence",
        "Fig. 4a",
        "Mean detected counts across the init-gap-read sequence",
        &[("time_s", "s"), ("mean_counts", "counts/bin")],
        &seq_rows,
    )?;
    w.write_plot(
        "readout_histogram",
        "Fig. 4b",
        "Read-window photon-count histogram against the no-laser reference",
        &[
            ("count", "photons"),
            ("freq_bright", "shots"),
            ("freq_dark", "shots"),
        ],
        &hist_rows,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitModel {
    /// A·exp(−r·t) on a histogram CSV (t_lo_s,t_hi_s,count).
    Exponential,
    /// slope·x through the origin on (x,y[,sigma]).
    LinearOrigin,
    /// eta·(1−exp(−t/tau)) on (x,y[,sigma]).
    Saturating,
    /// Λ-system CPT spectrum on (delta_hz,counts_per_s[,sigma]).
    Cpt,
}

fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match cells {
            Ok(values) => rows.push(values),
            Err(_) if i == 0 => continue, // header row
            Err(e) => {
                return Err(Error::Config(format!("{}:{}: {e}", path.display(), i + 1)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no data rows", path.display())));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Config(format!("{}: ragged rows", path.display())));
    }
    Ok(rows)
}

fn columns(rows: &[Vec<f64>], expected_min: usize, path: &Path) -> Result<Vec<Vec<f64>>> {
    let width = rows[0].len();
    if width < expected_min {
        return Err(Error::Config(format!(
            "{}: expected at least {expected_min} columns, found {width}",
            path.display()
        )));
    }
    Ok((0..width)
        .map(|c| rows.iter().map(|r| r[c]).collect())
        .collect())
}

pub fn fit_command(
    w: &mut RunWriter,
    model: FitModel,
    data: &Path,
    free: &[CptParam],
    strict: bool,
) -> CmdResult {
    let rows = read_numeric_csv(data)?;
    let result: FitResult = match model {
        FitModel::Exponential => {
            let cols = columns(&rows, 3, data)?;
            let mut edges: Vec<f64> = cols[0].clone();
            edges.push(*cols[1].last().expect("non-empty"));
            let counts: Vec<u64> = cols[2].iter().map(|&c| c.max(0.0) as u64).collect();
            fit::fit_exponential_decay(&edges, &counts)?
        }
        FitModel::LinearOrigin => {
            let cols = columns(&rows, 2, data)?;
            let sigma = cols.get(2).map(|s| s.as_slice());
            fit::fit_linear_through_origin(&cols[0], &cols[1], sigma)?
        }
        FitModel::Saturating => {
            let cols = columns(&rows, 2, data)?;
            let sigma = cols.get(2).map(|s| s.as_slice());
            fit::fit_saturating_exponential(&cols[0], &cols[1], sigma)?
        }
        FitModel::Cpt => {
            let cols = columns(&rows, 2, data)?;
            let sigma = cols.get(2).map(|s| s.as_slice());
            let cfg = w.config().simulation.cpt.clone();
            let emitter = w.config().emitter.clone();
            let mut sys = LambdaSystem::from_emitter(
                &emitter,
                cfg.omega1_hz,
                cfg.omega2_hz,
                cfg.delta1_hz,
                cfg.delta1_hz,
            );
            sys.gamma_s_rate_factor = cfg.gamma_s_rate_factor;
            sys.sideband_taper_per_hz = cfg.sideband_taper_per_hz;
            let template = CptModel {
                system: sys,
                background: cfg.background_cps,
            };
            let fitted = fit::fit_cpt(
                &cols[0],
                &cols[1],
                sigma,
                &template,
                &emitter,
                free,
                &FitOptions::default(),
            )?;
            w.write_json("fit_cpt_model.json", &fitted.model)?;
            fitted.result
        }
    };
    let converged = result.converged;
    w.write_json(
        "fit_result.json",
        &json!({
            "model": format!("{model:?}"),
            "data": data.display().to_string(),
            "free": free,
            "result": result,
        }),
    )?;
    enforce_strict(strict, converged)
}
