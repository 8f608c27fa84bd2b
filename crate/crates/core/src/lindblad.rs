//! Three-level Λ-system density-matrix engine.
//!
//! Levels are indexed 0 = |1↓⟩, 1 = |2↑⟩, 2 = |A↓⟩. The carrier field
//! (Rabi frequency Ω1) drives the spin-flipping leg g2↔e, the sideband (Ω2)
//! the spin-conserving leg g1↔e; spontaneous decay splits between the legs
//! in the ratio η : 1.
//!
//! All public parameters are ordinary frequencies in Hz. Matrices are built
//! in angular units: the 25 MHz Fourier-limited FWHM maps onto a total decay
//! rate of 2π·25 MHz, and the quoted dephasing rate γ_s maps onto a ground
//! coherence decay rate of `gamma_s_rate_factor`·γ_s rad/s (2π by default,
//! which pairs the quoted rate with T₂* = 1/(π·γ_s)). Ground-state
//! relaxation is a population rate and carries no 2π.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmitterParams;

type C = Complex64;
type Matrix9 = SMatrix<C, 9, 9>;
type Vector9 = SVector<C, 9>;

pub const LEVEL_G1: usize = 0;
pub const LEVEL_G2: usize = 1;
pub const LEVEL_E: usize = 2;

/// Relative residual accepted for a stationary state.
const STEADY_STATE_TOL: f64 = 1e-10;

/// Parameters of the driven Λ system. Frequencies and rates in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSystem {
    /// Total excited-state decay, quoted as the FWHM-consistent linewidth.
    pub gamma_total: f64,
    /// Branching ratio between spin-conserving and spin-flipping decay.
    pub eta_branch: f64,
    /// Ground-state spin dephasing rate.
    pub gamma_s: f64,
    /// Ground-state relaxation rate per direction, 1/(2·T1).
    pub gamma_flip: f64,
    /// Carrier Rabi frequency on g2↔e.
    pub omega1: f64,
    /// Sideband Rabi frequency on g1↔e.
    pub omega2: f64,
    /// One-photon detuning of the carrier.
    pub delta1: f64,
    /// One-photon detuning of the sideband; δ = delta2 − delta1.
    pub delta2: f64,
    /// Conversion from `gamma_s` to the coherence decay rate in rad/s.
    pub gamma_s_rate_factor: f64,
    /// Relative sideband Rabi change per Hz of two-photon detuning.
    pub sideband_taper_per_hz: f64,
}

impl LambdaSystem {
    /// Build from emitter constants with explicit drive settings.
    pub fn from_emitter(
        emitter: &EmitterParams,
        omega1: f64,
        omega2: f64,
        delta1: f64,
        delta2: f64,
    ) -> Self {
        LambdaSystem {
            gamma_total: emitter.gamma0,
            eta_branch: emitter.eta_branch,
            gamma_s: emitter.gamma_s,
            gamma_flip: 1.0 / (2.0 * emitter.t1_spin),
            omega1,
            omega2,
            delta1,
            delta2,
            gamma_s_rate_factor: std::f64::consts::TAU,
            sideband_taper_per_hz: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_total >= 0.0 && self.omega1 >= 0.0 && self.omega2 >= 0.0) {
            return Err(Error::validation(
                "lambda",
                "rates and Rabi frequencies must be >= 0",
            ));
        }
        if self.eta_branch < 1.0 {
            return Err(Error::validation("lambda.eta_branch", "must be >= 1"));
        }
        if !(self.gamma_s >= 0.0 && self.gamma_flip >= 0.0) {
            return Err(Error::validation(
                "lambda",
                "dephasing and relaxation must be >= 0",
            ));
        }
        if !(self.gamma_s_rate_factor > 0.0) {
            return Err(Error::validation(
                "lambda.gamma_s_rate_factor",
                "must be > 0",
            ));
        }
        Ok(())
    }

    /// Copy with the sideband detuned by `delta` relative to the carrier,
    /// including the optional sideband-amplitude taper.
    pub fn at_two_photon_detuning(&self, delta: f64) -> Self {
        let taper = (1.0 + self.sideband_taper_per_hz * delta).max(0.0);
        LambdaSystem {
            delta2: self.delta1 + delta,
            omega2: self.omega2 * taper,
            ..self.clone()
        }
    }

    /// Spin dephasing time implied by the rate convention, s.
    pub fn t2_star(&self) -> f64 {
        2.0 / (self.gamma_s_rate_factor * self.gamma_s)
    }
}

/// 3×3 density matrix with the usual Hermiticity/trace/positivity checks.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Matrix3<C>);

impl DensityMatrix {
    pub const HERMITICITY_TOL: f64 = 1e-12;
    pub const TRACE_TOL: f64 = 1e-10;
    pub const POSITIVITY_TOL: f64 = 1e-10;

    /// Validate and wrap a raw matrix.
    pub fn try_new(m: Matrix3<C>) -> Result<Self> {
        let herm = max_norm((m - m.adjoint()).iter());
        if herm > Self::HERMITICITY_TOL {
            return Err(Error::validation(
                "density_matrix",
                format!("not Hermitian: defect {herm:.3e}"),
            ));
        }
        let trace = m.trace();
        if (trace.re - 1.0).abs() > Self::TRACE_TOL || trace.im.abs() > Self::TRACE_TOL {
            return Err(Error::validation(
                "density_matrix",
                format!("trace {trace} is not 1"),
            ));
        }
        let hermitian = (m + m.adjoint()).map(|z| z * C::new(0.5, 0.0));
        let eigs = hermitian.symmetric_eigen().eigenvalues;
        if eigs.iter().any(|&l| l < -Self::POSITIVITY_TOL) {
            return Err(Error::validation(
                "density_matrix",
                format!("negative eigenvalue {:.3e}", eigs.min()),
            ));
        }
        Ok(DensityMatrix(m))
    }

    /// Pure state |level⟩⟨level|.
    pub fn pure(level: usize) -> Self {
        let mut m = Matrix3::zeros();
        m[(level, level)] = C::new(1.0, 0.0);
        DensityMatrix(m)
    }

    /// Classical mixture with the given populations (must sum to 1).
    pub fn from_populations(p: [f64; 3]) -> Self {
        let mut m = Matrix3::zeros();
        for (i, &pi) in p.iter().enumerate() {
            m[(i, i)] = C::new(pi, 0.0);
        }
        DensityMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix3<C> {
        &self.0
    }

    pub fn population(&self, level: usize) -> f64 {
        self.0[(level, level)].re
    }

    pub fn excited_population(&self) -> f64 {
        self.population(LEVEL_E)
    }

    /// Coherence between the two ground states.
    pub fn ground_coherence(&self) -> C {
        self.0[(LEVEL_G1, LEVEL_G2)]
    }

    /// Largest absolute component difference to another state.
    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        max_norm((self.0 - other.0).iter())
    }
}

/// 9×9 generator acting on the column-stacked density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Liouvillian(Matrix9);

impl Liouvillian {
    pub fn matrix(&self) -> &Matrix9 {
        &self.0
    }

    /// Magnitude scale of the generator entries.
    pub fn scale(&self) -> f64 {
        max_norm(self.0.iter()).max(1e-300)
    }

    /// Max-abs coefficient of the d(tr ρ)/dt row, relative to the scale.
    ///
    /// Zero (to rounding) for every physical generator.
    pub fn trace_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for col in 0..9 {
            let sum = self.0[(0, col)] + self.0[(4, col)] + self.0[(8, col)];
            worst = worst.max(sum.norm());
        }
        worst / self.scale()
    }
}

/// Largest modulus among complex entries.
fn max_norm<'a, I: IntoIterator<Item = &'a C>>(entries: I) -> f64 {
    entries.into_iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn vec_of(m: &Matrix3<C>) -> Vector9 {
    Vector9::from_column_slice(m.as_slice())
}

fn unvec(v: &Vector9) -> Matrix3<C> {
    Matrix3::from_column_slice(v.as_slice())
}

fn kron3(a: &Matrix3<C>, b: &Matrix3<C>) -> Matrix9 {
    let mut out = Matrix9::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let aij = a[(i, j)];
            for k in 0..3 {
                for l in 0..3 {
                    out[(3 * i + k, 3 * j + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

fn basis(i: usize, j: usize) -> Matrix3<C> {
    let mut m = Matrix3::zeros();
    m[(i, j)] = C::new(1.0, 0.0);
    m
}

/// Rotating-frame Hamiltonian in angular units (rad/s).
///
/// H = −Δ1|g2⟩⟨g2| − Δ2|g1⟩⟨g1| + (Ω1/2)(|e⟩⟨g2| + h.c.) + (Ω2/2)(|e⟩⟨g1| + h.c.),
/// with every Hz parameter multiplied by 2π.
pub fn build_hamiltonian(sys: &LambdaSystem) -> Matrix3<C> {
    let tau = std::f64::consts::TAU;
    let mut h = Matrix3::zeros();
    h[(LEVEL_G1, LEVEL_G1)] = C::new(-tau * sys.delta2, 0.0);
    h[(LEVEL_G2, LEVEL_G2)] = C::new(-tau * sys.delta1, 0.0);
    let half_omega1 = C::new(tau * sys.omega1 / 2.0, 0.0);
    let half_omega2 = C::new(tau * sys.omega2 / 2.0, 0.0);
    h[(LEVEL_E, LEVEL_G2)] = half_omega1;
    h[(LEVEL_G2, LEVEL_E)] = half_omega1;
    h[(LEVEL_E, LEVEL_G1)] = half_omega2;
    h[(LEVEL_G1, LEVEL_E)] = half_omega2;
    h
}

/// Collapse operators of the dissipative channels, in sqrt(rad/s) units.
fn collapse_operators(sys: &LambdaSystem) -> Vec<Matrix3<C>> {
    let tau = std::f64::consts::TAU;
    let gamma_angular = tau * sys.gamma_total;
    let eta = sys.eta_branch;
    let mut ops = Vec::with_capacity(5);
    let sc = (gamma_angular * eta / (1.0 + eta)).sqrt();
    let sf = (gamma_angular / (1.0 + eta)).sqrt();
    ops.push(basis(LEVEL_G1, LEVEL_E).map(|z| z * C::new(sc, 0.0)));
    ops.push(basis(LEVEL_G2, LEVEL_E).map(|z| z * C::new(sf, 0.0)));
    // Pure ground dephasing: coherence decays at gamma_s_rate_factor·gamma_s.
    let coherence_rate = sys.gamma_s_rate_factor * sys.gamma_s;
    if coherence_rate > 0.0 {
        let amp = (coherence_rate / 2.0).sqrt();
        let sz = basis(LEVEL_G1, LEVEL_G1) - basis(LEVEL_G2, LEVEL_G2);
        ops.push(sz.map(|z| z * C::new(amp, 0.0)));
    }
    // Ground-state exchange, both directions; population rate, no 2π.
    if sys.gamma_flip > 0.0 {
        let amp = sys.gamma_flip.sqrt();
        ops.push(basis(LEVEL_G2, LEVEL_G1).map(|z| z * C::new(amp, 0.0)));
        ops.push(basis(LEVEL_G1, LEVEL_G2).map(|z| z * C::new(amp, 0.0)));
    }
    ops
}

/// Assemble L = −i[H,·] + Σ D[c_k] on the column-stacked density matrix.
pub fn build_liouvillian(sys: &LambdaSystem) -> Liouvillian {
    let h = build_hamiltonian(sys);
    let id = Matrix3::identity();
    let i = C::i();
    let mut l = (kron3(&id, &h) - kron3(&h.transpose(), &id)).map(|z| -i * z);
    for c in collapse_operators(sys) {
        let cdc = c.adjoint() * c;
        let half = C::new(0.5, 0.0);
        l += kron3(&c.map(|z| z.conj()), &c);
        l -= kron3(&id, &cdc).map(|z| half * z);
        l -= kron3(&cdc.transpose(), &id).map(|z| half * z);
    }
    Liouvillian(l)
}

/// Stationary state of a trace-preserving generator.
///
/// Solves the bordered linear system in which one diagonal row of L is
/// replaced by the trace constraint. If no bordered system is solvable the
/// null space is examined by SVD and a degeneracy error reports its
/// dimension.
pub fn steady_state(l: &Liouvillian) -> Result<DensityMatrix> {
    let scale = l.scale();
    for trace_row in [0usize, 4, 8] {
        let mut bordered = l.0;
        for col in 0..9 {
            bordered[(trace_row, col)] = C::new(0.0, 0.0);
        }
        // Normalised to the generator scale so the system stays balanced.
        for diag in [0usize, 4, 8] {
            bordered[(trace_row, diag)] = C::new(scale, 0.0);
        }
        let mut rhs = Vector9::zeros();
        rhs[trace_row] = C::new(scale, 0.0);
        let Some(solution) = bordered.lu().solve(&rhs) else {
            continue;
        };
        let raw = unvec(&solution);
        let hermitian = (raw + raw.adjoint()).map(|z| z * C::new(0.5, 0.0));
        let trace = hermitian.trace().re;
        if trace.abs() < 1e-12 {
            continue;
        }
        let normalised = hermitian.map(|z| z / C::new(trace, 0.0));
        let residual = max_norm((l.0 * vec_of(&normalised)).iter()) / scale;
        if residual <= STEADY_STATE_TOL {
            if let Ok(state) = DensityMatrix::try_new(normalised) {
                return Ok(state);
            }
        }
    }
    // Diagnose: how many stationary directions does L have?
    let dynamic = DMatrix::from_fn(9, 9, |r, c| l.0[(r, c)]);
    let svd = dynamic.svd(false, false);
    let sigma_max = svd.singular_values.max().max(1e-300);
    let null_dim = svd
        .singular_values
        .iter()
        .filter(|&&s| s <= sigma_max * 1e-12)
        .count();
    Err(Error::DegenerateSteadyState { dim: null_dim })
}

/// Propagate a state for `t` seconds under a fixed generator.
///
/// Uses the scaled-and-squared matrix exponential. The returned state is
/// re-Hermitised and renormalised to unit trace; the raw propagation drift
/// is guarded at max(`tol`, 1e-6), which catches stiffness blowups while
/// tolerating the rounding that long horizons accumulate in the repeated
/// squaring.
pub fn time_evolve(
    rho0: &DensityMatrix,
    l: &Liouvillian,
    t: f64,
    tol: f64,
) -> Result<DensityMatrix> {
    if !(t >= 0.0) {
        return Err(Error::Integration(format!("negative time {t}")));
    }
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let propagator = l.0.map(|z| z * C::new(t, 0.0)).exp();
    let evolved = propagator * vec_of(rho0.matrix());
    if evolved
        .iter()
        .any(|z| !z.re.is_finite() || !z.im.is_finite())
    {
        return Err(Error::Integration(
            "propagator overflowed; generator too stiff".into(),
        ));
    }
    let raw = unvec(&evolved);
    let herm_defect = max_norm((raw - raw.adjoint()).iter());
    let trace_defect = (raw.trace().re - 1.0).abs().max(raw.trace().im.abs());
    let budget = tol.max(1e-6);
    if herm_defect > budget || trace_defect > budget {
        return Err(Error::Integration(format!(
            "conservation drift beyond tolerance: hermiticity {herm_defect:.3e}, trace {trace_defect:.3e}"
        )));
    }
    let hermitian = (raw + raw.adjoint()).map(|z| z * C::new(0.5, 0.0));
    let trace = hermitian.trace().re;
    DensityMatrix::try_new(hermitian.map(|z| z / C::new(trace, 0.0)))
}

/// Detected count rate for a given excited population, counts/s.
///
/// `c_max` is the rate at population 0.5, so the model is
/// 2·c_max·ρ_ee + background.
pub fn model_counts(emitter: &EmitterParams, excited_population: f64, background: f64) -> f64 {
    2.0 * emitter.c_max * excited_population + background
}

/// One point of a CPT spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptPoint {
    pub delta_hz: f64,
    pub excited_population: f64,
    pub model_counts: f64,
}

/// Steady-state CPT spectrum over a two-photon detuning grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptSpectrum {
    pub points: Vec<CptPoint>,
    /// Snapshot of the Λ-system template, conventions included.
    pub params: LambdaSystem,
    pub background: f64,
}

/// Solve the steady state at every grid detuning and convert populations to
/// count rates. Grid points are independent; the evaluation is parallel and
/// order-stable.
pub fn cpt_spectrum(
    sys: &LambdaSystem,
    delta_grid: &[f64],
    emitter: &EmitterParams,
    background: f64,
) -> Result<CptSpectrum> {
    if delta_grid.is_empty() {
        return Err(Error::Statistics("empty detuning grid".into()));
    }
    sys.validate()?;
    let points = delta_grid
        .par_iter()
        .map(|&delta| {
            let local = sys.at_two_photon_detuning(delta);
            let rho = steady_state(&build_liouvillian(&local))?;
            let pop = rho.excited_population();
            // A driven Lambda system never puts more than half the
            // population in the excited state.
            debug_assert!((-1e-10..=0.5 + 1e-9).contains(&pop), "rho_ee {pop}");
            Ok(CptPoint {
                delta_hz: delta,
                excited_population: pop,
                model_counts: model_counts(emitter, pop, background),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CptSpectrum {
        points,
        params: sys.clone(),
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn default_system(omega1: f64, omega2: f64) -> LambdaSystem {
        LambdaSystem::from_emitter(&EmitterParams::default(), omega1, omega2, 0.0, 0.0)
    }

    #[test]
    fn undriven_hamiltonian_is_zero() {
        let sys = default_system(0.0, 0.0);
        assert_eq!(max_norm(build_hamiltonian(&sys).iter()), 0.0);
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let mut sys = default_system(1.3e6, 0.7e6);
        sys.delta1 = 0.4e6;
        sys.delta2 = -1.1e6;
        let h = build_hamiltonian(&sys);
        assert_eq!(max_norm((h - h.adjoint()).iter()), 0.0);
    }

    #[test]
    fn pure_two_photon_scan_shifts_only_g1() {
        let mut sys = default_system(0.0, 0.0);
        sys.delta1 = 0.0;
        sys.delta2 = 2.5e5;
        let h = build_hamiltonian(&sys);
        // Ground block eigenvalues: −2πδ on g1, 0 on g2.
        assert_relative_eq!(h[(LEVEL_G1, LEVEL_G1)].re, -std::f64::consts::TAU * 2.5e5);
        assert_eq!(h[(LEVEL_G2, LEVEL_G2)].re, 0.0);
    }

    #[test]
    fn liouvillian_preserves_trace() {
        let mut sys = default_system(2.1e6, 0.9e6);
        sys.delta1 = 0.2e6;
        sys.delta2 = 0.5e6;
        let l = build_liouvillian(&sys);
        assert!(l.trace_defect() < 1e-14, "defect {}", l.trace_defect());

        // Explicitly: tr(unvec(L vec(ρ))) = 0 for a generic ρ.
        let rho = DensityMatrix::from_populations([0.3, 0.5, 0.2]);
        let deriv = unvec(&(l.0 * vec_of(rho.matrix())));
        assert!(deriv.trace().norm() / l.scale() < 1e-14);
    }

    #[test]
    fn excited_state_decays_at_angular_rate() {
        let sys = default_system(0.0, 0.0);
        let l = build_liouvillian(&sys);
        let t = 3e-9;
        let rho = time_evolve(&DensityMatrix::pure(LEVEL_E), &l, t, 1e-10).unwrap();
        let expected = (-std::f64::consts::TAU * sys.gamma_total * t).exp();
        assert_relative_eq!(rho.excited_population(), expected, max_relative = 1e-9);
    }

    #[test]
    fn decay_populates_grounds_in_branching_ratio() {
        let mut sys = default_system(0.0, 0.0);
        sys.gamma_flip = 0.0;
        sys.gamma_s = 0.0;
        let l = build_liouvillian(&sys);
        let rho = time_evolve(&DensityMatrix::pure(LEVEL_E), &l, 1e-6, 1e-10).unwrap();
        let ratio = rho.population(LEVEL_G1) / rho.population(LEVEL_G2);
        assert_relative_eq!(ratio, sys.eta_branch, max_relative = 1e-6);
    }

    #[test]
    fn undriven_flipping_system_reaches_thermal_mixture() {
        let sys = default_system(0.0, 0.0);
        let rho = steady_state(&build_liouvillian(&sys)).unwrap();
        assert_relative_eq!(rho.population(LEVEL_G1), 0.5, epsilon = 1e-10);
        assert_relative_eq!(rho.population(LEVEL_G2), 0.5, epsilon = 1e-10);
        assert!(rho.excited_population() < 1e-12);
    }

    #[test]
    fn dark_state_is_exact_at_two_photon_resonance() {
        let mut sys = default_system(1.5e6, 1.5e6);
        sys.gamma_s = 0.0;
        sys.gamma_flip = 0.0;
        let rho = steady_state(&build_liouvillian(&sys)).unwrap();
        assert!(
            rho.excited_population() <= 1e-10,
            "rho_ee = {}",
            rho.excited_population()
        );
    }

    #[test]
    fn disconnected_grounds_are_degenerate() {
        let mut sys = default_system(0.0, 0.0);
        sys.gamma_flip = 0.0;
        sys.gamma_s = 0.0;
        match steady_state(&build_liouvillian(&sys)) {
            Err(Error::DegenerateSteadyState { dim }) => assert!(dim >= 2, "dim {dim}"),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn time_evolve_identities() {
        let rho = DensityMatrix::from_populations([0.25, 0.35, 0.4]);
        let l = build_liouvillian(&default_system(1e6, 1e6));
        assert_eq!(time_evolve(&rho, &l, 0.0, 1e-10).unwrap(), rho);

        let zero = Liouvillian(Matrix9::zeros());
        let later = time_evolve(&rho, &zero, 17.0, 1e-10).unwrap();
        assert!(later.max_abs_diff(&rho) < 1e-14);
    }

    #[test]
    fn steady_state_agrees_with_long_time_evolution() {
        let mut sys = default_system(1.2e6, 0.8e6);
        sys.delta2 = 0.3e6;
        let l = build_liouvillian(&sys);
        let target = steady_state(&l).unwrap();
        let slowest = sys.gamma_flip.min(sys.gamma_s).max(1e-3);
        let evolved =
            time_evolve(&DensityMatrix::pure(LEVEL_G1), &l, 50.0 / slowest, 1e-10).unwrap();
        assert!(target.max_abs_diff(&evolved) <= 1e-6);
    }

    #[test]
    fn count_calibration_reference_points() {
        let emitter = EmitterParams::default();
        let background = 300.0;
        assert_relative_eq!(model_counts(&emitter, 0.5, background), 45e3 + background);
        assert_relative_eq!(model_counts(&emitter, 0.0, background), background);
    }

    #[test]
    fn dark_dip_bottom_is_background_only() {
        let mut sys = default_system(1.0e6, 1.0e6);
        sys.gamma_s = 0.0;
        sys.gamma_flip = 0.0;
        let emitter = EmitterParams::default();
        let spectrum = cpt_spectrum(&sys, &[0.0], &emitter, 120.0).unwrap();
        assert_relative_eq!(spectrum.points[0].model_counts, 120.0, epsilon = 1e-4);
    }

    #[test]
    fn spectrum_is_symmetric_for_resonant_carrier() {
        let sys = default_system(1.1e6, 1.1e6);
        let emitter = EmitterParams::default();
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 5e4).collect();
        let spectrum = cpt_spectrum(&sys, &grid, &emitter, 0.0).unwrap();
        for point in &spectrum.points {
            assert!((0.0..=0.5 + 1e-9).contains(&point.excited_population));
        }
        let n = grid.len();
        for i in 0..n / 2 {
            let a = spectrum.points[i].excited_population;
            let b = spectrum.points[n - 1 - i].excited_population;
            let rel = (a - b).abs() / a.abs().max(1e-300);
            assert!(rel < 1e-8, "asymmetry {rel} at index {i}");
        }
    }

    #[test]
    fn weak_drive_dip_width_approaches_dephasing_floor() {
        // Descending drive ladder: the lowest-power dip width sits on the
        // floor set by the ground dephasing, 2*gamma_s in ordinary frequency.
        let emitter = EmitterParams::default();
        let grid: Vec<f64> = (-600..=600).map(|i| i as f64 * 2.5e3).collect();
        let mut widths = Vec::new();
        for omega in [2.0e6, 1.0e6, 0.5e6] {
            let spectrum = cpt_spectrum(&default_system(omega, omega), &grid, &emitter, 0.0).unwrap();
            widths.push(dip_fwhm(&spectrum));
        }
        assert!(
            widths[0] > widths[1] && widths[1] > widths[2],
            "widths {widths:?}"
        );
        let floor = 2.0 * emitter.gamma_s;
        let rel = (widths[2] - floor).abs() / floor;
        assert!(
            rel < 0.25,
            "lowest-power width {} vs floor {floor}",
            widths[2]
        );
    }

    #[test]
    fn dip_width_grows_with_power() {
        let emitter = EmitterParams::default();
        let grid: Vec<f64> = (-400..=400).map(|i| i as f64 * 2.5e3).collect();
        let mut widths = Vec::new();
        for omega in [0.5e6, 1.0e6, 2.0e6] {
            let spectrum = cpt_spectrum(&default_system(omega, omega), &grid, &emitter, 0.0).unwrap();
            widths.push(dip_fwhm(&spectrum));
        }
        assert!(
            widths[0] < widths[1] && widths[1] < widths[2],
            "widths {widths:?}"
        );
    }

    /// Full width of the CPT dip at half depth, by linear interpolation.
    pub(crate) fn dip_fwhm(spectrum: &CptSpectrum) -> f64 {
        let pops: Vec<f64> = spectrum
            .points
            .iter()
            .map(|p| p.excited_population)
            .collect();
        let deltas: Vec<f64> = spectrum.points.iter().map(|p| p.delta_hz).collect();
        let baseline = pops[0].max(pops[pops.len() - 1]);
        let min = pops.iter().cloned().fold(f64::MAX, f64::min);
        let half = 0.5 * (baseline + min);
        let mut left = None;
        let mut right = None;
        for i in 1..pops.len() {
            if pops[i - 1] > half && pops[i] <= half && left.is_none() {
                let f = (pops[i - 1] - half) / (pops[i - 1] - pops[i]);
                left = Some(deltas[i - 1] + f * (deltas[i] - deltas[i - 1]));
            }
            if pops[i - 1] <= half && pops[i] > half {
                let f = (half - pops[i - 1]) / (pops[i] - pops[i - 1]);
                right = Some(deltas[i - 1] + f * (deltas[i] - deltas[i - 1]));
            }
        }
        match (left, right) {
            (Some(l), Some(r)) => r - l,
            _ => f64::NAN,
        }
    }
}
