//! Nonlinear weighted least squares: a damped Gauss-Newton engine with a
//! forward-difference Jacobian, plus the model-specific fitters used by the
//! experiments (exponential decay, line through the origin, saturating
//! exponential, CPT spectrum).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{build_liouvillian, steady_state, LambdaSystem};
use crate::model::EmitterParams;

/// Engine settings; echoed into every [`FitResult`] for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when the relative step falls below this.
    pub step_tol: f64,
    /// Stop when the max component of the gradient falls below this.
    pub grad_tol: f64,
    /// Initial damping factor.
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 500,
            step_tol: 1e-10,
            grad_tol: 1e-12,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
        }
    }
}

/// Outcome of a least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<f64>,
    /// One-sigma errors from the covariance at the optimum.
    pub param_errors: Vec<f64>,
    /// Euclidean norm of the weighted residual vector at the optimum.
    pub residual_norm: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub options: FitOptions,
}

impl FitResult {
    /// Covariance-based error of parameter `i`.
    pub fn error(&self, i: usize) -> f64 {
        self.param_errors[i]
    }
}

fn jacobian_step(p: f64) -> f64 {
    (1e-6 * p.abs()).max(1e-8)
}

/// Minimise Σ ((y_i − model(x_i, p)) / σ_i)² starting from `p0`.
///
/// Damping increases on rejected steps and decreases on accepted ones; the
/// accepted-step residual never increases. Absent `sigma` means unit weights,
/// in which case the covariance is scaled by the reduced chi-square.
pub fn least_squares<F>(
    model: F,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
    p0: &[f64],
    options: &FitOptions,
) -> Result<FitResult>
where
    F: Fn(f64, &[f64]) -> f64,
{
    let n = x.len();
    let np = p0.len();
    if n != y.len() {
        return Err(Error::Statistics("x and y lengths differ".into()));
    }
    if n < np {
        return Err(Error::RankDeficient(format!(
            "{n} data points for {np} parameters"
        )));
    }
    let weights: Vec<f64> = match sigma {
        Some(s) => {
            if s.len() != n {
                return Err(Error::Statistics("sigma length differs from data".into()));
            }
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Statistics("sigma values must be > 0".into()));
            }
            s.iter().map(|&v| 1.0 / v).collect()
        }
        None => vec![1.0; n],
    };

    let residuals = |p: &[f64]| -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|i| (y[i] - model(x[i], p)) * weights[i]))
    };
    let cost = |r: &DVector<f64>| r.norm_squared();

    let mut p: Vec<f64> = p0.to_vec();
    let mut r = residuals(&p);
    let mut c = cost(&r);
    if !c.is_finite() {
        return Err(Error::Statistics(
            "model is not finite at the initial guess".into(),
        ));
    }
    let mut lambda = options.lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    let jacobian = |p: &[f64], r0: &DVector<f64>| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(n, np);
        let mut pj = p.to_vec();
        for col in 0..np {
            let h = jacobian_step(p[col]);
            pj[col] = p[col] + h;
            let rj = residuals(&pj);
            pj[col] = p[col];
            for row in 0..n {
                j[(row, col)] = (rj[row] - r0[row]) / h;
            }
        }
        j
    };

    let mut j = jacobian(&p, &r);
    while iterations < options.max_iterations {
        iterations += 1;
        let a = j.transpose() * &j;
        let g = j.transpose() * &r;
        if g.amax() < options.grad_tol {
            converged = true;
            break;
        }
        let max_diag = (0..np).map(|k| a[(k, k)]).fold(0.0f64, f64::max);
        if max_diag <= 0.0 || !max_diag.is_finite() {
            return Err(Error::RankDeficient(
                "model is insensitive to every parameter".into(),
            ));
        }

        // Marquardt scaling: damp along the diagonal of the normal matrix.
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = a.clone();
            for k in 0..np {
                let d = a[(k, k)].max(1e-14 * max_diag);
                damped[(k, k)] = a[(k, k)] + lambda * d;
            }
            let step = match damped.lu().solve(&(-&g)) {
                Some(step) => step,
                None => {
                    lambda *= options.lambda_up;
                    continue;
                }
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(pi, si)| pi + si).collect();
            let r_trial = residuals(&trial);
            let c_trial = cost(&r_trial);
            if c_trial.is_finite() && c_trial <= c {
                let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel_step = step.norm() / (p_norm + 1e-300);
                p = trial;
                r = r_trial;
                c = c_trial;
                lambda = (lambda * options.lambda_down).max(1e-12);
                accepted = true;
                if rel_step < options.step_tol {
                    converged = true;
                }
                break;
            }
            lambda *= options.lambda_up;
        }
        if !accepted {
            // No downhill step found at any damping; treat as stalled.
            converged = true;
            break;
        }
        if converged {
            break;
        }
        j = jacobian(&p, &r);
    }

    // Covariance from the weighted Gauss-Newton Hessian at the optimum.
    j = jacobian(&p, &r);
    let a = j.transpose() * &j;
    let scale = if sigma.is_none() && n > np {
        c / (n - np) as f64
    } else {
        1.0
    };
    let param_errors = match a.clone().try_inverse() {
        Some(cov) => (0..np)
            .map(|k| (cov[(k, k)] * scale).max(0.0).sqrt())
            .collect(),
        None => {
            if !converged {
                vec![f64::INFINITY; np]
            } else {
                return Err(Error::RankDeficient(
                    "singular Hessian at the optimum".into(),
                ));
            }
        }
    };

    Ok(FitResult {
        params: p,
        param_errors,
        residual_norm: c.sqrt(),
        n_iterations: iterations,
        converged,
        options: options.clone(),
    })
}

/// Fit A·exp(−r·t) to a histogram of durations; returns (A, r) with errors.
///
/// Bins carry sqrt(max(count, 1)) Poisson weights. Observed-count weights
/// bias the rate when tail bins hold a handful of counts, so the first pass
/// fits the populated head of the histogram and a second pass refits every
/// bin with the model-side sigmas of the first. The initial guess comes from
/// a log-linear regression on the non-empty bins.
pub fn fit_exponential_decay(bin_edges: &[f64], counts: &[u64]) -> Result<FitResult> {
    if bin_edges.len() != counts.len() + 1 {
        return Err(Error::Statistics(
            "bin_edges must have one more entry than counts".into(),
        ));
    }
    let all_centers: Vec<f64> = (0..counts.len())
        .map(|i| 0.5 * (bin_edges[i] + bin_edges[i + 1]))
        .collect();
    let all_y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let cutoff = counts
        .iter()
        .position(|&c| c < 10)
        .map_or(counts.len(), |i| i.max(5).min(counts.len()));
    let counts = &counts[..cutoff];
    let centers = &all_centers[..cutoff];
    let y = &all_y[..cutoff];
    let sigma: Vec<f64> = counts.iter().map(|&c| (c.max(1) as f64).sqrt()).collect();

    // Log-linear seed over non-empty bins.
    let filled: Vec<(f64, f64)> = centers
        .iter()
        .zip(y.iter())
        .filter(|(_, &c)| c > 0.0)
        .map(|(&t, &c)| (t, c.ln()))
        .collect();
    if filled.len() < 2 {
        return Err(Error::RankDeficient(format!(
            "{} non-empty bins cannot constrain an exponential",
            filled.len()
        )));
    }
    let m = filled.len() as f64;
    let st: f64 = filled.iter().map(|(t, _)| t).sum();
    let sl: f64 = filled.iter().map(|(_, l)| l).sum();
    let stt: f64 = filled.iter().map(|(t, _)| t * t).sum();
    let stl: f64 = filled.iter().map(|(t, l)| t * l).sum();
    let denom = m * stt - st * st;
    let (mut rate0, mut amp0) = (0.0, y.iter().cloned().fold(0.0, f64::max));
    if denom.abs() > 0.0 {
        let slope = (m * stl - st * sl) / denom;
        let intercept = (sl - slope * st) / m;
        rate0 = (-slope).max(0.0);
        amp0 = intercept.exp();
    }

    let model = |t: f64, p: &[f64]| p[0] * (-p[1] * t).exp();
    let mut result = least_squares(
        model,
        centers,
        y,
        Some(&sigma),
        &[amp0.max(1.0), rate0],
        &FitOptions::default(),
    )?;
    // A flat histogram fits with rate <= 0; flag it instead of failing.
    if result.params[1] <= 0.0 {
        result.converged = false;
        return Ok(result);
    }
    // Refit all bins with the model-side sigmas of the first pass.
    let model_sigma: Vec<f64> = all_centers
        .iter()
        .map(|&t| model(t, &result.params).max(1.0).sqrt())
        .collect();
    match least_squares(
        model,
        &all_centers,
        &all_y,
        Some(&model_sigma),
        &result.params,
        &FitOptions::default(),
    ) {
        Ok(refined) if refined.params[1] > 0.0 => Ok(refined),
        _ => Ok(result),
    }
}

/// Fit y = slope·x with the intercept fixed at zero.
pub fn fit_linear_through_origin(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<FitResult> {
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::RankDeficient("all abscissae are zero".into()));
    }
    // Weighted analytic seed; the engine refines and reports the covariance.
    let mut swxx = 0.0;
    let mut swxy = 0.0;
    for i in 0..x.len() {
        let w = sigma.map_or(1.0, |s| 1.0 / (s[i] * s[i]));
        swxx += w * x[i] * x[i];
        swxy += w * x[i] * y[i];
    }
    let p0 = if swxx > 0.0 { swxy / swxx } else { 1.0 };
    least_squares(
        |xi, p| p[0] * xi,
        x,
        y,
        sigma,
        &[p0],
        &FitOptions::default(),
    )
}

/// Fit η_max·(1 − exp(−t/τ)); returns (η_max, τ) with errors.
pub fn fit_saturating_exponential(
    t: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
) -> Result<FitResult> {
    let peak = y.iter().cloned().fold(f64::MIN, f64::max);
    let eta0 = peak.clamp(1e-3, 1.0);
    // First time the curve crosses 63% of the plateau seeds tau.
    let tau0 = t
        .iter()
        .zip(y)
        .find(|(_, &v)| v >= 0.632 * eta0)
        .map(|(&ti, _)| ti)
        .filter(|&ti| ti > 0.0)
        .unwrap_or_else(|| t.iter().cloned().fold(0.0, f64::max) / 2.0)
        .max(1e-12);
    least_squares(
        |ti, p| p[0].abs() * (1.0 - (-ti / p[1].abs()).exp()),
        t,
        y,
        sigma,
        &[eta0, tau0],
        &FitOptions::default(),
    )
    .map(|mut r| {
        r.params = r.params.iter().map(|v| v.abs()).collect();
        r
    })
}

/// Parameters of the CPT model that a fit may float.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CptParam {
    Omega1,
    Omega2,
    GammaS,
    Delta1,
    Background,
}

/// CPT spectrum model: a Λ system plus a flat background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptModel {
    pub system: LambdaSystem,
    /// Background count rate, counts/s.
    pub background: f64,
}

impl CptModel {
    fn get(&self, which: CptParam) -> f64 {
        match which {
            CptParam::Omega1 => self.system.omega1,
            CptParam::Omega2 => self.system.omega2,
            CptParam::GammaS => self.system.gamma_s,
            CptParam::Delta1 => self.system.delta1,
            CptParam::Background => self.background,
        }
    }

    fn set(&mut self, which: CptParam, value: f64) {
        // Rates and Rabi frequencies are sign-invariant in the model; keep
        // them in the physical branch.
        match which {
            CptParam::Omega1 => self.system.omega1 = value.abs(),
            CptParam::Omega2 => self.system.omega2 = value.abs(),
            CptParam::GammaS => self.system.gamma_s = value.abs(),
            CptParam::Delta1 => self.system.delta1 = value,
            CptParam::Background => self.background = value.abs(),
        }
    }

    /// Model count rate at two-photon detuning `delta`, counts/s.
    pub fn counts_at(&self, delta: f64, emitter: &EmitterParams) -> Result<f64> {
        let sys = self.system.at_two_photon_detuning(delta);
        let rho = steady_state(&build_liouvillian(&sys))?;
        Ok(2.0 * emitter.c_max * rho.excited_population() + self.background)
    }
}

/// Result of a CPT fit: the engine output plus the updated model.
#[derive(Debug, Clone, Serialize)]
pub struct CptFit {
    pub result: FitResult,
    pub model: CptModel,
}

/// Fit a measured CPT spectrum, floating only the parameters in `free`.
///
/// Supports the staged protocol: fit drive calibrations on a high-power
/// spectrum, freeze them, then float the dephasing rate alone on a low-power
/// spectrum.
pub fn fit_cpt(
    deltas: &[f64],
    counts: &[f64],
    sigma: Option<&[f64]>,
    template: &CptModel,
    emitter: &EmitterParams,
    free: &[CptParam],
    options: &FitOptions,
) -> Result<CptFit> {
    if free.is_empty() {
        return Err(Error::Statistics("no free parameters requested".into()));
    }
    let p0: Vec<f64> = free.iter().map(|&f| template.get(f)).collect();
    let eval = |delta: f64, p: &[f64]| -> f64 {
        let mut model = template.clone();
        for (slot, &value) in free.iter().zip(p) {
            model.set(*slot, value);
        }
        model.counts_at(delta, emitter).unwrap_or(f64::NAN)
    };
    let result = least_squares(eval, deltas, counts, sigma, &p0, options)?;
    let mut model = template.clone();
    for (slot, &value) in free.iter().zip(&result.params) {
        model.set(*slot, value);
    }
    let mut result = result;
    result.params = free.iter().map(|&f| model.get(f)).collect();
    Ok(CptFit { result, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn exact_linear_data_is_recovered_exactly() {
        let x: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 1.28 * v).collect();
        let fit = fit_linear_through_origin(&x, &y, None).unwrap();
        assert_relative_eq!(fit.params[0], 1.28, max_relative = 1e-12);
        assert!(fit.residual_norm < 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn all_zero_abscissae_are_rank_deficient() {
        let err = fit_linear_through_origin(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], None).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn noiseless_exponential_recovers_rate() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.05).collect();
        let y: Vec<f64> = x.iter().map(|&t| (-2.0 * t).exp()).collect();
        let fit = least_squares(
            |t, p| (-p[0] * t).exp(),
            &x,
            &y,
            None,
            &[1.0],
            &FitOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(fit.params[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn residual_never_exceeds_initial_cost() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&t| 3.0 * (-1.3 * t).exp() + 0.01 * (t * 37.0).sin())
            .collect();
        let model = |t: f64, p: &[f64]| p[0] * (-p[1] * t).exp();
        let p0 = [1.0, 0.5];
        let initial: f64 = x
            .iter()
            .zip(&y)
            .map(|(&xi, &yi)| (yi - model(xi, &p0)).powi(2))
            .sum();
        let fit = least_squares(model, &x, &y, None, &p0, &FitOptions::default()).unwrap();
        assert!(fit.residual_norm.powi(2) <= initial);
    }

    #[test]
    fn errors_shrink_as_inverse_sqrt_of_replication() {
        let x1: Vec<f64> = (1..=20).map(|i| i as f64 * 0.1).collect();
        let y1: Vec<f64> = x1.iter().map(|&v| 2.0 * v).collect();
        let s1 = vec![0.1; x1.len()];
        let fit1 = fit_linear_through_origin(&x1, &y1, Some(&s1)).unwrap();

        let x4: Vec<f64> = x1.iter().cycle().take(4 * x1.len()).cloned().collect();
        let y4: Vec<f64> = y1.iter().cycle().take(4 * y1.len()).cloned().collect();
        let s4 = vec![0.1; x4.len()];
        let fit4 = fit_linear_through_origin(&x4, &y4, Some(&s4)).unwrap();

        assert_relative_eq!(
            fit4.param_errors[0],
            fit1.param_errors[0] / 2.0,
            max_relative = 1e-6
        );
    }

    #[test]
    fn single_bin_histogram_is_rank_deficient() {
        let err = fit_exponential_decay(&[0.0, 1.0], &[10]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn flat_histogram_is_flagged_not_fatal() {
        let edges: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let counts = vec![7u64; 10];
        let fit = fit_exponential_decay(&edges, &counts).unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn saturating_exponential_noise_free_recovery() {
        let t: Vec<f64> = (1..=12).map(|i| i as f64 * 4e-4).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|&ti| 0.91 * (1.0 - (-ti / 780e-6).exp()))
            .collect();
        let fit = fit_saturating_exponential(&t, &y, None).unwrap();
        assert_relative_eq!(fit.params[0], 0.91, max_relative = 1e-6);
        assert_relative_eq!(fit.params[1], 780e-6, max_relative = 1e-6);
    }

    #[test]
    fn plateau_without_early_times_has_large_errors() {
        // Every sample sits on the plateau; tau is unidentifiable.
        let t: Vec<f64> = (1..=10).map(|i| 0.1 + i as f64 * 0.01).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|&ti| 0.91 * (1.0 - (-ti / 780e-6).exp()))
            .collect();
        let sigma = vec![0.01; t.len()];
        match fit_saturating_exponential(&t, &y, Some(&sigma)) {
            Ok(fit) => {
                let rel_tau_err = fit.param_errors[1] / fit.params[1];
                assert!(
                    !fit.converged || rel_tau_err > 1.0,
                    "tau error {rel_tau_err}"
                );
            }
            // The plateau makes tau exactly unobservable.
            Err(Error::RankDeficient(_)) => {}
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn cpt_fit_reaches_zero_dephasing_floor() {
        use crate::lindblad::{cpt_spectrum, LambdaSystem};
        let emitter = EmitterParams::default();
        let mut truth = LambdaSystem::from_emitter(&emitter, 3e6, 3e6, 0.0, 0.0);
        truth.gamma_s = 0.0;
        let deltas: Vec<f64> = (-40..=40).map(|i| i as f64 * 5e4).collect();
        let clean = cpt_spectrum(&truth, &deltas, &emitter, 300.0).unwrap();
        let counts: Vec<f64> = clean.points.iter().map(|p| p.model_counts).collect();
        let mut template = truth.clone();
        template.gamma_s = 20e3;
        let model = CptModel {
            system: template,
            background: 300.0,
        };
        let fit = fit_cpt(
            &deltas,
            &counts,
            None,
            &model,
            &emitter,
            &[CptParam::GammaS],
            &FitOptions::default(),
        )
        .unwrap();
        assert!(
            fit.result.params[0] < 1e3,
            "gamma_s {}",
            fit.result.params[0]
        );
    }

    #[test]
    fn cpt_fit_identifies_drives_and_dephasing_from_clean_data() {
        use crate::lindblad::{cpt_spectrum, LambdaSystem};
        let emitter = EmitterParams::default();
        let mut truth = LambdaSystem::from_emitter(&emitter, 3.0e6, 2.5e6, 0.0, 0.0);
        truth.gamma_s = 64e3;
        let deltas: Vec<f64> = (-80..=80).map(|i| i as f64 * 5e4).collect();
        let clean = cpt_spectrum(&truth, &deltas, &emitter, 300.0).unwrap();
        let counts: Vec<f64> = clean.points.iter().map(|p| p.model_counts).collect();
        let mut template = truth.clone();
        template.omega1 = 3.6e6;
        template.omega2 = 2.0e6;
        template.gamma_s = 30e3;
        let model = CptModel {
            system: template,
            background: 300.0,
        };
        let free = [CptParam::Omega1, CptParam::Omega2, CptParam::GammaS];
        let fit = fit_cpt(
            &deltas,
            &counts,
            None,
            &model,
            &emitter,
            &free,
            &FitOptions::default(),
        )
        .unwrap();
        for (&p, truth_value) in fit.result.params.iter().zip([3.0e6, 2.5e6, 64e3]) {
            let rel = (p - truth_value).abs() / truth_value;
            assert!(rel < 1e-4, "recovered {p} vs {truth_value} ({rel:.2e})");
        }
    }

    #[test]
    fn lorentzian_coverage_with_gaussian_noise() {
        // 100 trials, sigma = 0.05, 200 points: truth inside 3 reported sigma
        // in at least 95 trials.
        let truth = [1.0, 0.3, 2.0, 0.1]; // amp, f0, fwhm, base
        let model = |f: f64, p: &[f64]| {
            let hw = p[2] / 2.0;
            p[0] * hw * hw / ((f - p[1]).powi(2) + hw * hw) + p[3]
        };
        let x: Vec<f64> = (0..200).map(|i| -5.0 + 10.0 * i as f64 / 199.0).collect();
        let mut hits = 0;
        for trial in 0..100 {
            let mut rng = crate::seeds::stream_rng(11, 0xF1, trial);
            let y: Vec<f64> = x
                .iter()
                .map(|&f| {
                    model(f, &truth) + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal)
                })
                .collect();
            let sigma = vec![0.05; x.len()];
            let fit = least_squares(
                model,
                &x,
                &y,
                Some(&sigma),
                &[0.8, 0.0, 1.0, 0.0],
                &FitOptions::default(),
            )
            .unwrap();
            let ok = fit.converged && (fit.params[2] - truth[2]).abs() <= 3.0 * fit.param_errors[2];
            if ok {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 trials covered the true width");
    }
}
