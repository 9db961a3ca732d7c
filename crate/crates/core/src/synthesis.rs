//! Controller synthesis: the Γ design, the Hurwitz matrix `A_H`, the implicit
//! feedback `U = G(X)` solving `F~(X, U) = 0` by damped Newton, coercivity
//! probing, linear pole placement, and region-of-attraction estimates.
//!
//! For channel `j` the tracking error is
//! `E_j = γ_{1j} Δ_j + γ_{2j} Δ_j' + ... + γ_{n-1,j} Δ_j^(n-2) + Δ_j^(n-1)`
//! and the implicit equation is
//! `F~(X, U) = S(Δ) + F(X, U) - Y_d^(n) - A_H E = 0` with
//! `S_j = γ_{1j} Δ_j' + ... + γ_{n-1,j} Δ_j^(n-1)`, so that closing the loop
//! gives `E' = A_H E + W`.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diminishing::random_on_sphere;
use crate::linalg::{self, C64};
use crate::model::{ModelError, SystemModel, EQUILIBRIUM_TOL};
use crate::norm::Norm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("invalid gamma design: {0}")]
    Gamma(String),
    #[error("A_H is not Hurwitz: eigenvalue {re}{im:+}i has real part >= 0")]
    NotHurwitz { re: f64, im: f64 },
    #[error("F(0,0) = 0 fails: |F(0,0)| = {residual:.3e}")]
    NotAnEquilibrium { residual: f64 },
    #[error("J_F,U(0,0) is numerically singular (condition estimate {condition:.3e})")]
    SingularInputJacobian { condition: f64 },
    #[error("linearization is not controllable: rank {rank} < {expected}")]
    Uncontrollable { rank: usize, expected: usize },
    #[error("pole placement missed the requested spectrum by {error:.3e}")]
    PlacementInaccurate { error: f64 },
    #[error("region of attraction: {0}")]
    Roa(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Poles must be this far left of the imaginary axis.
pub const STABILITY_MARGIN: f64 = 1e-12;
/// Root reconstruction and pole placement accuracy.
pub const SPECTRUM_TOL: f64 = 1e-8;
/// Targets closer than this are matched as one repeated pole.
const CLUSTER_TOL: f64 = 1e-6;
/// Safety factor applied to the sampled transition-matrix bound.
pub const KAPPA_SAFETY: f64 = 1.05;
const KAPPA_GRID: usize = 2000;

fn check_poles(poles: &[C64], what: &str) -> Result<(), SynthesisError> {
    if let Some(p) = poles.iter().find(|p| !p.re.is_finite() || !p.im.is_finite()) {
        return Err(SynthesisError::Gamma(format!("{what}: non-finite pole {p}")));
    }
    if let Some(p) = poles.iter().find(|p| p.re >= -STABILITY_MARGIN) {
        return Err(SynthesisError::Gamma(format!("{what}: pole {p} has nonnegative real part")));
    }
    if !linalg::is_conjugate_closed(poles, 1e-12) {
        return Err(SynthesisError::Gamma(format!("{what}: complex poles must come in conjugate pairs")));
    }
    Ok(())
}

/// Coefficients `γ_{i,j}` (row `i-1`, column `j`) with their poles and the
/// decay constants of the Γ-subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaDesign {
    gamma: DMatrix<f64>,
    poles: Vec<Vec<C64>>,
    gamma_star: f64,
    mu_gamma: f64,
    kappa: f64,
}

/// Builds Γ column by column from the roots of
/// `γ_{1j} + γ_{2j} z + ... + γ_{n-1,j} z^{n-2} + z^{n-1}`.
pub fn build_gamma(poles_per_column: &[Vec<C64>], n: usize) -> Result<GammaDesign, SynthesisError> {
    if n < 2 {
        return Err(SynthesisError::Gamma(format!("order n must exceed 1, got {n}")));
    }
    if poles_per_column.is_empty() {
        return Err(SynthesisError::Gamma("at least one column is required".into()));
    }
    let m = poles_per_column.len();
    let mut gamma = DMatrix::zeros(n - 1, m);
    for (j, poles) in poles_per_column.iter().enumerate() {
        let what = format!("column {j}");
        if poles.len() != n - 1 {
            return Err(SynthesisError::Gamma(format!("{what}: expected {} poles, got {}", n - 1, poles.len())));
        }
        check_poles(poles, &what)?;
        let coeffs = linalg::poly_from_roots(poles);
        for i in 0..n - 1 {
            gamma[(i, j)] = coeffs[i];
        }
    }
    let gamma_star = gamma.iter().fold(1.0_f64, |a, g| a.max(g.abs()));
    let mu_gamma = poles_per_column
        .iter()
        .map(|ps| -ps.iter().map(|p| p.re).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    let mut design = GammaDesign { gamma, poles: poles_per_column.to_vec(), gamma_star, mu_gamma, kappa: 1.0 };
    let err = design.reconstruction_error();
    if !(err <= SPECTRUM_TOL) {
        return Err(SynthesisError::Gamma(format!("root reconstruction error {err:.3e}")));
    }
    design.kappa = design.transition_bound();
    Ok(design)
}

impl GammaDesign {
    pub fn m(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn n(&self) -> usize {
        self.gamma.nrows() + 1
    }

    /// `(n-1) x m` matrix of `γ_{i,j}`.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn poles(&self) -> &[Vec<C64>] {
        &self.poles
    }

    pub fn gamma_star(&self) -> f64 {
        self.gamma_star
    }

    pub fn mu_gamma(&self) -> f64 {
        self.mu_gamma
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Monic polynomial of column `j`, lowest degree first.
    pub fn column_polynomial(&self, j: usize) -> Vec<f64> {
        let mut c: Vec<f64> = self.gamma.column(j).iter().copied().collect();
        c.push(1.0);
        c
    }

    /// `(n-1) x (n-1)` companion matrix of column `j`'s Γ-subsystem.
    pub fn companion(&self, j: usize) -> DMatrix<f64> {
        linalg::companion(&self.column_polynomial(j))
    }

    /// Largest relative residual `|p_j(z)| / Σ|c_k||z|^k` of a column
    /// polynomial at its declared poles.
    pub fn reconstruction_error(&self) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..self.m() {
            let c = self.column_polynomial(j);
            for &z in &self.poles[j] {
                let scale: f64 = c.iter().enumerate().map(|(k, ck)| ck.abs() * z.norm().powi(k as i32)).sum();
                worst = worst.max(linalg::poly_eval(&c, z).norm() / scale);
            }
        }
        worst
    }

    /// Largest cluster-mean distance between the computed roots of the
    /// rebuilt polynomials and the declared poles. Well conditioned only
    /// when distinct poles are well separated.
    pub fn root_distance(&self) -> f64 {
        (0..self.m())
            .map(|j| {
                let roots = linalg::poly_roots(&self.column_polynomial(j));
                linalg::spectrum_distance(&roots, &self.poles[j], CLUSTER_TOL)
            })
            .fold(0.0, f64::max)
    }

    /// `KAPPA_SAFETY * max_j sup_t |exp(C_j t)| e^{μ_Γ t}` over
    /// `t in [0, 20/μ_Γ]`, so that `|exp(C_j t)| <= κ e^{-μ_Γ t}` on the grid.
    fn transition_bound(&self) -> f64 {
        let dt = 20.0 / self.mu_gamma / KAPPA_GRID as f64;
        let mut worst = 1.0_f64;
        for j in 0..self.m() {
            let c = self.companion(j);
            let step = (&c * dt).exp();
            let mut phi = DMatrix::identity(c.nrows(), c.ncols());
            for k in 1..=KAPPA_GRID {
                phi = &phi * &step;
                let w = linalg::spectral_norm(&phi) * (self.mu_gamma * dt * k as f64).exp();
                worst = worst.max(w);
            }
        }
        KAPPA_SAFETY * worst
    }

    /// Tracking error `E` of a flattened `Δ` (length `m n`).
    pub fn error_of(&self, delta: &[f64], out: &mut [f64]) {
        let (m, n) = (self.m(), self.n());
        for j in 0..m {
            let mut e = delta[(n - 1) * m + j];
            for i in 0..n - 1 {
                e += self.gamma[(i, j)] * delta[i * m + j];
            }
            out[j] = e;
        }
    }

    pub fn error_vec(&self, delta: &[f64]) -> Vec<f64> {
        let mut e = vec![0.0; self.m()];
        self.error_of(delta, &mut e);
        e
    }

    /// `S_j = Σ_{i=1}^{n-1} γ_{i,j} Δ_j^(i)`.
    pub fn shift_term(&self, delta: &[f64], out: &mut [f64]) {
        let (m, n) = (self.m(), self.n());
        for j in 0..m {
            let mut s = 0.0;
            for i in 1..n {
                s += self.gamma[(i - 1, j)] * delta[i * m + j];
            }
            out[j] = s;
        }
    }
}

/// Validated Hurwitz matrix `A_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct HurwitzMatrix {
    a_h: DMatrix<f64>,
    eigenvalues: Vec<C64>,
    max_real_part: f64,
}

pub fn build_hurwitz(a_h: DMatrix<f64>) -> Result<HurwitzMatrix, SynthesisError> {
    if a_h.nrows() != a_h.ncols() || a_h.nrows() == 0 {
        return Err(SynthesisError::Shape(format!("A_H must be square and nonempty, got {}x{}", a_h.nrows(), a_h.ncols())));
    }
    if a_h.iter().any(|v| !v.is_finite()) {
        return Err(SynthesisError::Shape("A_H has non-finite entries".into()));
    }
    let eigenvalues = linalg::eigenvalues(&a_h);
    let worst = *eigenvalues.iter().max_by(|a, b| a.re.total_cmp(&b.re)).expect("nonempty");
    if worst.re >= -STABILITY_MARGIN {
        return Err(SynthesisError::NotHurwitz { re: worst.re, im: worst.im });
    }
    Ok(HurwitzMatrix { a_h, eigenvalues, max_real_part: worst.re })
}

impl HurwitzMatrix {
    /// `-I_m`.
    pub fn negative_identity(m: usize) -> Self {
        build_hurwitz(-DMatrix::identity(m, m)).expect("-I is Hurwitz")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a_h
    }

    pub fn eigenvalues(&self) -> &[C64] {
        &self.eigenvalues
    }

    pub fn max_real_part(&self) -> f64 {
        self.max_real_part
    }

    pub fn m(&self) -> usize {
        self.a_h.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonsingularReport {
    pub levy_desplanques: bool,
    pub numeric_nonsingular: bool,
    /// `sigma_max / sigma_min` (infinite when singular to working precision).
    pub condition_estimate: f64,
}

/// Strict row diagonal dominance and an SVD-based singularity verdict.
pub fn check_nonsingular(b: &DMatrix<f64>) -> NonsingularReport {
    let m = b.nrows();
    let levy_desplanques = m == b.ncols()
        && (0..m).all(|i| {
            let off: f64 = (0..m).filter(|&j| j != i).map(|j| b[(i, j)].abs()).sum();
            b[(i, i)].abs() > off
        });
    if m != b.ncols() || m == 0 || b.iter().any(|v| !v.is_finite()) {
        return NonsingularReport { levy_desplanques, numeric_nonsingular: false, condition_estimate: f64::INFINITY };
    }
    let (smax, smin) = linalg::extreme_singular_values(b);
    let numeric_nonsingular = smin > smax * m as f64 * f64::EPSILON * 10.0;
    let condition_estimate = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    NonsingularReport { levy_desplanques, numeric_nonsingular, condition_estimate }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    /// Residual tolerance, scaled by `max(1, |S| + |Y_d^(n)| + |A_H E|)`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50, max_halvings: 6 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("Newton did not converge at X = {x:?}: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { x: Vec<f64>, residual: f64, iterations: usize },
    #[error("singular input Jacobian at X = {x:?} (iteration {iterations}, residual {residual:.3e})")]
    Singular { x: Vec<f64>, residual: f64, iterations: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlEval {
    pub u: Vec<f64>,
    /// Euclidean norm of `F~(X, U)` (zero in linear mode).
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlLaw {
    Implicit { design: GammaDesign, hurwitz: HurwitzMatrix },
    Linear { gain: DMatrix<f64>, poles: Vec<C64>, layout: PlacementLayout },
}

/// How the requested spectrum was split over the closed-loop companion
/// blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementLayout {
    /// One degree-`n` block per channel.
    Decoupled,
    /// A single degree-`mn` companion chaining the channels.
    Chained,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRecord {
    pub x: Vec<f64>,
    pub message: String,
}

const FAILURE_LOG_CAP: usize = 32;

/// Largest state norm with a successful evaluation, and the first failures.
#[derive(Debug, Default)]
pub struct ValidityLog {
    last_good_radius: AtomicU64,
    failures: AtomicUsize,
    log: Mutex<Vec<FailureRecord>>,
}

impl ValidityLog {
    fn record_success(&self, r: f64) {
        // Nonnegative floats order like their bit patterns.
        self.last_good_radius.fetch_max(r.to_bits(), Ordering::Relaxed);
    }

    fn record_failure(&self, x: &[f64], err: &ControlError) {
        self.failures.fetch_add(1, Ordering::Relaxed);
        let mut log = self.log.lock().expect("validity log poisoned");
        if log.len() < FAILURE_LOG_CAP {
            log.push(FailureRecord { x: x.to_vec(), message: err.to_string() });
        }
    }

    pub fn last_good_radius(&self) -> f64 {
        f64::from_bits(self.last_good_radius.load(Ordering::Relaxed))
    }

    pub fn failure_count(&self) -> usize {
        self.failures.load(Ordering::Relaxed)
    }

    pub fn failures(&self) -> Vec<FailureRecord> {
        self.log.lock().expect("validity log poisoned").clone()
    }
}

/// State feedback in implicit (Newton) or linear mode. Shareable across
/// threads; warm starts live in per-trajectory [`ControllerSession`]s.
#[derive(Debug)]
pub struct Controller {
    model: SystemModel,
    law: ControlLaw,
    newton: NewtonConfig,
    input_jacobian: NonsingularReport,
    validity: ValidityLog,
}

/// Implicit feedback for `model`: checks `F(0,0) = 0` and that `J_F,U(0,0)`
/// is numerically nonsingular.
pub fn synthesize_feedback(
    model: &SystemModel,
    design: &GammaDesign,
    hurwitz: &HurwitzMatrix,
    newton: NewtonConfig,
) -> Result<Controller, SynthesisError> {
    let (m, n) = (model.m(), model.n());
    if design.m() != m || design.n() != n {
        return Err(SynthesisError::Shape(format!(
            "design is for m={}, n={}, model has m={m}, n={n}",
            design.m(),
            design.n()
        )));
    }
    if hurwitz.m() != m {
        return Err(SynthesisError::Shape(format!("A_H is {}x{}, model has m={m}", hurwitz.m(), hurwitz.m())));
    }
    let residual = model.equilibrium_residual()?;
    if !(residual <= EQUILIBRIUM_TOL) {
        return Err(SynthesisError::NotAnEquilibrium { residual });
    }
    let input_jacobian = check_nonsingular(&model.jacobian_u(&vec![0.0; m * n], &vec![0.0; m])?);
    if !input_jacobian.numeric_nonsingular {
        return Err(SynthesisError::SingularInputJacobian { condition: input_jacobian.condition_estimate });
    }
    Ok(Controller {
        model: model.clone(),
        law: ControlLaw::Implicit { design: design.clone(), hurwitz: hurwitz.clone() },
        newton,
        input_jacobian,
        validity: ValidityLog::default(),
    })
}

impl Controller {
    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn law(&self) -> &ControlLaw {
        &self.law
    }

    pub fn newton(&self) -> &NewtonConfig {
        &self.newton
    }

    pub fn input_jacobian(&self) -> &NonsingularReport {
        &self.input_jacobian
    }

    pub fn validity(&self) -> &ValidityLog {
        &self.validity
    }

    pub fn design(&self) -> Option<&GammaDesign> {
        match &self.law {
            ControlLaw::Implicit { design, .. } => Some(design),
            ControlLaw::Linear { .. } => None,
        }
    }

    pub fn hurwitz(&self) -> Option<&HurwitzMatrix> {
        match &self.law {
            ControlLaw::Implicit { hurwitz, .. } => Some(hurwitz),
            ControlLaw::Linear { .. } => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.law, ControlLaw::Linear { .. })
    }

    /// `U = G(X)`, cold-started from `U = 0` unless `warm` is given.
    pub fn evaluate(&self, x: &[f64], warm: Option<&[f64]>) -> Result<ControlEval, ControlError> {
        let zeros = vec![0.0; self.model.m()];
        self.evaluate_tracking(x, x, &zeros, warm)
    }

    /// Solves `S(Δ) + F(X, U) - Y_d^(n) - A_H E(Δ) = 0` for `U`. In linear
    /// mode returns `G_lin Δ`.
    pub fn evaluate_tracking(
        &self,
        delta: &[f64],
        x: &[f64],
        yd_n: &[f64],
        warm: Option<&[f64]>,
    ) -> Result<ControlEval, ControlError> {
        let (m, n) = (self.model.m(), self.model.n());
        for (what, len, want) in [("state", x.len(), m * n), ("tracking error", delta.len(), m * n), ("reference", yd_n.len(), m)] {
            if len != want {
                return Err(ModelError::Shape { what, expected: want, got: len }.into());
            }
        }
        let result = match &self.law {
            ControlLaw::Linear { gain, .. } => {
                let u = gain * DVector::from_column_slice(delta);
                Ok(ControlEval { u: u.iter().copied().collect(), residual: 0.0, iterations: 0 })
            }
            ControlLaw::Implicit { design, hurwitz } => self.newton_solve(design, hurwitz, delta, x, yd_n, warm),
        };
        match &result {
            Ok(_) => self.validity.record_success(Norm::Euclidean.of(x)),
            Err(e) => self.validity.record_failure(x, e),
        }
        result
    }

    fn newton_solve(
        &self,
        design: &GammaDesign,
        hurwitz: &HurwitzMatrix,
        delta: &[f64],
        x: &[f64],
        yd_n: &[f64],
        warm: Option<&[f64]>,
    ) -> Result<ControlEval, ControlError> {
        let m = self.model.m();
        let mut s = vec![0.0; m];
        let mut e = vec![0.0; m];
        design.shift_term(delta, &mut s);
        design.error_of(delta, &mut e);
        let mut offset = vec![0.0; m];
        let mut scale = 1.0_f64;
        for j in 0..m {
            let mut ae = 0.0;
            for k in 0..m {
                ae += hurwitz.a_h[(j, k)] * e[k];
            }
            offset[j] = s[j] - yd_n[j] - ae;
            scale = scale.max(s[j].abs() + yd_n[j].abs() + ae.abs());
        }
        let tol = self.newton.tol * scale;
        let mut fbuf = vec![0.0; m];
        let mut residual_at = |u: &[f64], r: &mut [f64]| -> Result<f64, ControlError> {
            self.model.eval_f(x, u, &mut fbuf)?;
            for j in 0..m {
                r[j] = offset[j] + fbuf[j];
            }
            Ok(Norm::Euclidean.of(r))
        };
        let mut u = match warm {
            Some(w) if w.len() == m && w.iter().all(|v| v.is_finite()) => w.to_vec(),
            _ => vec![0.0; m],
        };
        let mut r = vec![0.0; m];
        let mut res = residual_at(&u, &mut r)?;
        let mut trial = vec![0.0; m];
        let mut r_trial = vec![0.0; m];
        for iter in 0..=self.newton.max_iter {
            if res <= tol {
                return Ok(ControlEval { u, residual: res, iterations: iter });
            }
            if iter == self.newton.max_iter {
                break;
            }
            let j = self.model.jacobian_u(x, &u)?;
            let step = match solve_square(j, &r) {
                Some(d) => d,
                None => return Err(ControlError::Singular { x: x.to_vec(), residual: res, iterations: iter }),
            };
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..=self.newton.max_halvings {
                for k in 0..m {
                    trial[k] = u[k] - lambda * step[k];
                }
                let rt = residual_at(&trial, &mut r_trial);
                if let Ok(rt) = rt {
                    if rt < res {
                        res = rt;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                // Take the most damped step anyway; the iteration cap bounds
                // the cost and non-convergence is reported below.
                res = residual_at(&trial, &mut r_trial)?;
            }
            u.copy_from_slice(&trial);
            r.copy_from_slice(&r_trial);
        }
        Err(ControlError::NoConvergence { x: x.to_vec(), residual: res, iterations: self.newton.max_iter })
    }

    pub fn summary(&self) -> ControllerSummary {
        let rows = |a: &DMatrix<f64>| -> Vec<Vec<f64>> { a.row_iter().map(|r| r.iter().copied().collect()).collect() };
        let pairs = |v: &[C64]| -> Vec<[f64; 2]> { v.iter().map(|z| [z.re, z.im]).collect() };
        let mut s = ControllerSummary {
            mode: if self.is_linear() { "linear-gain" } else { "implicit-newton" },
            model: self.model.name().to_string(),
            m: self.model.m(),
            n: self.model.n(),
            gamma_columns: None,
            gamma_poles: None,
            gamma_star: None,
            mu_gamma: None,
            kappa: None,
            a_h: None,
            a_h_eigenvalues: None,
            g_lin: None,
            placed_poles: None,
            placement_layout: None,
            newton: self.newton,
            input_jacobian_at_origin: self.input_jacobian,
        };
        match &self.law {
            ControlLaw::Implicit { design, hurwitz } => {
                s.gamma_columns = Some(design.gamma.column_iter().map(|c| c.iter().copied().collect()).collect());
                s.gamma_poles = Some(design.poles.iter().map(|p| pairs(p)).collect());
                s.gamma_star = Some(design.gamma_star);
                s.mu_gamma = Some(design.mu_gamma);
                s.kappa = Some(design.kappa);
                s.a_h = Some(rows(&hurwitz.a_h));
                s.a_h_eigenvalues = Some(pairs(&hurwitz.eigenvalues));
            }
            ControlLaw::Linear { gain, poles, layout } => {
                s.g_lin = Some(rows(gain));
                s.placed_poles = Some(pairs(poles));
                s.placement_layout = Some(*layout);
            }
        }
        s
    }
}

/// Solves `J d = r`; `None` when `J` is singular to working precision.
fn solve_square(j: DMatrix<f64>, r: &[f64]) -> Option<Vec<f64>> {
    let m = j.nrows();
    if m == 1 {
        let d = r[0] / j[(0, 0)];
        return (j[(0, 0)] != 0.0 && d.is_finite()).then_some(vec![d]);
    }
    let scale = j.amax();
    let lu = j.lu();
    let u = lu.u();
    let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if !(min_pivot > scale * m as f64 * f64::EPSILON * 10.0) {
        return None;
    }
    let d = lu.solve(&DVector::from_column_slice(r))?;
    d.iter().all(|v| v.is_finite()).then(|| d.iter().copied().collect())
}

/// Warm-started evaluator for one trajectory.
#[derive(Debug)]
pub struct ControllerSession<'a> {
    controller: &'a Controller,
    warm: Option<Vec<f64>>,
}

impl<'a> ControllerSession<'a> {
    pub fn new(controller: &'a Controller) -> Self {
        Self { controller, warm: None }
    }

    pub fn controller(&self) -> &'a Controller {
        self.controller
    }

    pub fn evaluate(&mut self, x: &[f64]) -> Result<ControlEval, ControlError> {
        let r = self.controller.evaluate(x, self.warm.as_deref())?;
        self.warm = Some(r.u.clone());
        Ok(r)
    }

    pub fn evaluate_tracking(&mut self, delta: &[f64], x: &[f64], yd_n: &[f64]) -> Result<ControlEval, ControlError> {
        let r = self.controller.evaluate_tracking(delta, x, yd_n, self.warm.as_deref())?;
        self.warm = Some(r.u.clone());
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerSummary {
    pub mode: &'static str,
    pub model: String,
    pub m: usize,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_columns: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_poles: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_h: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_h_eigenvalues: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_lin: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placed_poles: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement_layout: Option<PlacementLayout>,
    pub newton: NewtonConfig,
    pub input_jacobian_at_origin: NonsingularReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoercivityVerdict {
    CoerciveEvidence,
    NonCoerciveEvidence,
    Inconclusive,
}

/// Required ratio between the smallest `Φ` at the largest radius and the
/// largest `Φ` at the smallest radius.
pub const COERCIVITY_GROWTH: f64 = 10.0;
/// Radii must span this factor.
pub const COERCIVITY_SPAN: f64 = 1e3;
/// A ray whose last two samples differ by less than this factor has
/// stopped growing.
pub const SATURATION_RATIO: f64 = 1.001;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityRay {
    pub sample: usize,
    pub direction: Vec<f64>,
    /// `Φ_X(r d) = |F(X, r d)|^2 / 2` at each radius.
    pub phi: Vec<f64>,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub verdict: CoercivityVerdict,
    pub radii: Vec<f64>,
    pub rays: Vec<CoercivityRay>,
    pub excluded: Vec<String>,
    pub min_phi_at_largest: f64,
    pub max_phi_at_smallest: f64,
    pub seed: u64,
}

/// Samples `Φ_X(U) = |F(X,U)|^2 / 2` along `ray_count` random directions per
/// state in `x_samples`.
pub fn coercivity_probe(
    model: &SystemModel,
    x_samples: &[Vec<f64>],
    ray_count: usize,
    radii: &[f64],
    seed: u64,
) -> Result<CoercivityReport, SynthesisError> {
    if radii.len() < 3 {
        return Err(SynthesisError::Shape(format!("need at least 3 radii, got {}", radii.len())));
    }
    if !(radii[0] > 0.0) || radii.windows(2).any(|w| !(w[1] > w[0])) || !radii[radii.len() - 1].is_finite() {
        return Err(SynthesisError::Shape("radii must be positive, finite and increasing".into()));
    }
    if ray_count == 0 || x_samples.is_empty() {
        return Err(SynthesisError::Shape("need at least one ray and one state".into()));
    }
    let m = model.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays = Vec::new();
    let mut excluded = Vec::new();
    let mut f = vec![0.0; m];
    for (si, x) in x_samples.iter().enumerate() {
        if x.len() != model.state_dim() {
            return Err(ModelError::Shape { what: "coercivity sample", expected: model.state_dim(), got: x.len() }.into());
        }
        for _ in 0..ray_count {
            let d = random_on_sphere(&mut rng, m, 1.0);
            let mut phi = Vec::with_capacity(radii.len());
            let mut failure = None;
            for &r in radii {
                let u: Vec<f64> = d.iter().map(|v| r * v).collect();
                match model.eval_f(x, &u, &mut f) {
                    Ok(()) => phi.push(0.5 * f.iter().map(|v| v * v).sum::<f64>()),
                    Err(e) => {
                        failure = Some(format!("sample {si}, direction {d:?}, radius {r}: {e}"));
                        break;
                    }
                }
            }
            if let Some(msg) = failure.or_else(|| phi.iter().any(|p| !p.is_finite()).then(|| format!("sample {si}, direction {d:?}: non-finite Φ"))) {
                excluded.push(msg);
                continue;
            }
            let k = phi.len();
            let saturated = phi[k - 1] <= SATURATION_RATIO * phi[k - 2];
            rays.push(CoercivityRay { sample: si, direction: d, phi, saturated });
        }
    }
    let last = radii.len() - 1;
    let min_phi_at_largest = rays.iter().map(|r| r.phi[last]).fold(f64::INFINITY, f64::min);
    let max_phi_at_smallest = rays.iter().map(|r| r.phi[0]).fold(0.0, f64::max);
    let verdict = if rays.is_empty() || radii[last] / radii[0] < COERCIVITY_SPAN {
        CoercivityVerdict::Inconclusive
    } else if rays.iter().any(|r| r.saturated) {
        CoercivityVerdict::NonCoerciveEvidence
    } else if min_phi_at_largest >= COERCIVITY_GROWTH * max_phi_at_smallest {
        CoercivityVerdict::CoerciveEvidence
    } else {
        CoercivityVerdict::Inconclusive
    };
    Ok(CoercivityReport { verdict, radii: radii.to_vec(), rays, excluded, min_phi_at_largest, max_phi_at_smallest, seed })
}

/// Jacobians of the state-space form at the origin: `A` (`mn x mn`) and
/// `B` (`mn x m`).
pub fn linearization(model: &SystemModel) -> Result<(DMatrix<f64>, DMatrix<f64>), SynthesisError> {
    let (m, n) = (model.m(), model.n());
    let d = m * n;
    let zx = vec![0.0; d];
    let zu = vec![0.0; m];
    let jx = model.jacobian_x(&zx, &zu)?;
    let ju = model.jacobian_u(&zx, &zu)?;
    let mut a = DMatrix::zeros(d, d);
    for i in 0..(n - 1) * m {
        a[(i, i + m)] = 1.0;
    }
    a.view_mut(((n - 1) * m, 0), (m, d)).copy_from(&jx);
    let mut b = DMatrix::zeros(d, m);
    b.view_mut(((n - 1) * m, 0), (m, m)).copy_from(&ju);
    Ok((a, b))
}

/// `[B, AB, ..., A^{d-1} B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let m = b.ncols();
    let mut c = DMatrix::zeros(d, d * m);
    let mut blk = b.clone();
    for k in 0..d {
        c.view_mut((0, k * m), (d, m)).copy_from(&blk);
        blk = a * blk;
    }
    c
}

/// Splits a conjugate-closed multiset into `m` conjugate-closed groups of
/// size `n`, pairs first.
fn group_poles(poles: &[C64], m: usize, n: usize) -> Option<Vec<Vec<C64>>> {
    let mut pairs: Vec<C64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut reals: Vec<C64> = poles.iter().copied().filter(|p| p.im.abs() <= 1e-12).map(|p| C64::new(p.re, 0.0)).collect();
    // Deterministic order: ascending real part, then imaginary part.
    let key = |a: &C64, b: &C64| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im));
    pairs.sort_by(key);
    reals.sort_by(key);
    pairs.reverse();
    reals.reverse();
    let mut groups = Vec::with_capacity(m);
    for _ in 0..m {
        let mut g = Vec::with_capacity(n);
        while n - g.len() >= 2 && !pairs.is_empty() {
            let p = pairs.pop().expect("nonempty");
            g.push(p);
            g.push(p.conj());
        }
        while g.len() < n {
            g.push(reals.pop()?);
        }
        groups.push(g);
    }
    (pairs.is_empty() && reals.is_empty()).then_some(groups)
}

/// Linear feedback `u = G_lin x` placing the spectrum of the linearization
/// at `desired_poles`.
///
/// The last block row of the closed-loop matrix is `K = J_F,X + J_F,U G_lin`.
/// With the poles split into conjugate-closed groups of size `n`, channel
/// `j` gets `K[j, i m + j] = -a_i` where `z^n + a_{n-1} z^{n-1} + ... + a_0`
/// has group `j`'s roots. Otherwise the channels are chained into one
/// companion: `Y_j^(n) = Y_{j+1}` for `j < m-1` and the last channel closes
/// the degree-`mn` polynomial over the ordering
/// `z_k = Y_{k / n}^(k mod n)`.
pub fn linearize_and_place(model: &SystemModel, desired_poles: &[C64]) -> Result<Controller, SynthesisError> {
    let (m, n) = (model.m(), model.n());
    let d = m * n;
    if desired_poles.len() != d {
        return Err(SynthesisError::Shape(format!("need {d} poles, got {}", desired_poles.len())));
    }
    check_poles(desired_poles, "desired poles")?;
    let residual = model.equilibrium_residual()?;
    if !(residual <= EQUILIBRIUM_TOL) {
        return Err(SynthesisError::NotAnEquilibrium { residual });
    }
    let (a, b) = linearization(model)?;
    let rank = linalg::numerical_rank(&controllability_matrix(&a, &b));
    if rank < d {
        return Err(SynthesisError::Uncontrollable { rank, expected: d });
    }
    let ju = b.view(((n - 1) * m, 0), (m, m)).clone_owned();
    let input_jacobian = check_nonsingular(&ju);
    if !input_jacobian.numeric_nonsingular {
        return Err(SynthesisError::SingularInputJacobian { condition: input_jacobian.condition_estimate });
    }
    let jx = a.view(((n - 1) * m, 0), (m, d)).clone_owned();
    let mut k = DMatrix::zeros(m, d);
    let layout = match group_poles(desired_poles, m, n) {
        Some(groups) => {
            for (j, g) in groups.iter().enumerate() {
                let c = linalg::poly_from_roots(g);
                for i in 0..n {
                    k[(j, i * m + j)] = -c[i];
                }
            }
            PlacementLayout::Decoupled
        }
        None => {
            for j in 0..m - 1 {
                k[(j, j + 1)] = 1.0;
            }
            let c = linalg::poly_from_roots(desired_poles);
            for idx in 0..d {
                k[(m - 1, (idx % n) * m + idx / n)] = -c[idx];
            }
            PlacementLayout::Chained
        }
    };
    let gain = ju.lu().solve(&(k - &jx)).ok_or(SynthesisError::SingularInputJacobian { condition: f64::INFINITY })?;
    let closed = &a + &b * &gain;
    let error = linalg::spectrum_distance(&linalg::eigenvalues(&closed), desired_poles, CLUSTER_TOL);
    if !(error <= SPECTRUM_TOL) {
        return Err(SynthesisError::PlacementInaccurate { error });
    }
    Ok(Controller {
        model: model.clone(),
        law: ControlLaw::Linear { gain, poles: desired_poles.to_vec(), layout },
        newton: NewtonConfig::default(),
        input_jacobian,
        validity: ValidityLog::default(),
    })
}

/// Spectrum of the closed-loop linearization `A + B G_lin`.
pub fn closed_loop_spectrum(controller: &Controller) -> Result<Vec<C64>, SynthesisError> {
    match &controller.law {
        ControlLaw::Linear { gain, .. } => {
            let (a, b) = linearization(&controller.model)?;
            Ok(linalg::eigenvalues(&(a + b * gain)))
        }
        ControlLaw::Implicit { .. } => Err(SynthesisError::Shape("closed-loop spectrum needs a linear controller".into())),
    }
}

/// Γ constants used by the region-of-attraction formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoaConstants {
    pub gamma_star: f64,
    pub mu_gamma: f64,
    pub kappa: f64,
}

impl From<&GammaDesign> for RoaConstants {
    fn from(d: &GammaDesign) -> Self {
        Self { gamma_star: d.gamma_star, mu_gamma: d.mu_gamma, kappa: d.kappa }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoaEstimate {
    pub r_max: f64,
    pub epsilon: f64,
    pub delta_e_of_eps: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub m: usize,
    pub constants: RoaConstants,
    pub delta_star_e: f64,
    pub delta_star_x: f64,
    pub delta_star: f64,
}

/// `δ*_E = θ1 / (γ* θ2 √m) δ_E(ε)`, `δ*_X = (r_max - ε/μ_Γ) / κ`,
/// `δ* = min(δ*_E, δ*_X)`.
pub fn estimate_roa(
    constants: RoaConstants,
    r_max: f64,
    epsilon: f64,
    delta_e_of_eps: f64,
    theta1: f64,
    theta2: f64,
    m: usize,
) -> Result<RoaEstimate, SynthesisError> {
    let positive = [
        ("r_max", r_max),
        ("epsilon", epsilon),
        ("delta_E(eps)", delta_e_of_eps),
        ("theta1", theta1),
        ("theta2", theta2),
        ("gamma_star", constants.gamma_star),
        ("mu_gamma", constants.mu_gamma),
    ];
    if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(SynthesisError::Roa(format!("{name} must be positive, got {v}")));
    }
    if !(constants.kappa >= 1.0) || m == 0 {
        return Err(SynthesisError::Roa(format!("need kappa >= 1 and m >= 1, got kappa={}, m={m}", constants.kappa)));
    }
    if epsilon >= r_max * constants.mu_gamma {
        return Err(SynthesisError::Roa(format!(
            "epsilon = {epsilon} must be below r_max * mu_gamma = {}",
            r_max * constants.mu_gamma
        )));
    }
    let delta_star_e = theta1 / (constants.gamma_star * theta2 * (m as f64).sqrt()) * delta_e_of_eps;
    let delta_star_x = (r_max - epsilon / constants.mu_gamma) / constants.kappa;
    Ok(RoaEstimate {
        r_max,
        epsilon,
        delta_e_of_eps,
        theta1,
        theta2,
        m,
        constants,
        delta_star_e,
        delta_star_x,
        delta_star: delta_star_e.min(delta_star_x),
    })
}

/// Largest radius in `radii` (increasing) such that Newton succeeds at
/// `directions` random states on every sphere up to it; `0` if the first
/// fails.
pub fn probe_validity_radius(controller: &Controller, radii: &[f64], directions: usize, seed: u64) -> f64 {
    let dim = controller.model.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut good = 0.0;
    for &r in radii {
        let ok = (0..directions.max(1)).all(|_| {
            let x = random_on_sphere(&mut rng, dim, r);
            controller.evaluate(&x, None).is_ok()
        });
        if !ok {
            break;
        }
        good = r;
    }
    good
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{catalog_model, chain, ModelParams};
    use proptest::prelude::*;

    fn re(v: f64) -> C64 {
        C64::new(v, 0.0)
    }

    fn m2(rows: [[f64; 2]; 2]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[rows[0][0], rows[0][1], rows[1][0], rows[1][1]])
    }

    #[test]
    fn gamma_examples() {
        let g = build_gamma(&[vec![re(-1.0)]], 2).unwrap();
        assert_eq!(g.gamma()[(0, 0)], 1.0);
        assert_eq!(g.column_polynomial(0), vec![1.0, 1.0]);
        assert_eq!(g.gamma_star(), 1.0);
        assert_eq!(g.mu_gamma(), 1.0);

        let g = build_gamma(&[vec![re(-1.0), re(-2.0)]], 3).unwrap();
        assert_eq!(g.gamma().column(0).as_slice(), &[2.0, 3.0]);
        assert_eq!(g.gamma_star(), 3.0);

        let g = build_gamma(&[vec![re(-2.0)], vec![re(-0.5)]], 2).unwrap();
        assert_eq!(g.gamma().row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 0.5]);
        assert_eq!(g.gamma_star(), 2.0);
        assert_eq!(g.mu_gamma(), 0.5);

        // Clustered poles still pass the backward check.
        let g = build_gamma(&[vec![re(-4.6), re(-4.7), re(-4.8), C64::new(-4.75, 0.1), C64::new(-4.75, -0.1)]], 6).unwrap();
        assert!(g.reconstruction_error() < 1e-14);
        let g = build_gamma(&[vec![re(-1.0); 3]], 4).unwrap();
        assert!(g.root_distance() < 1e-12);
    }

    #[test]
    fn gamma_rejections() {
        assert!(build_gamma(&[vec![]], 1).is_err());
        assert!(build_gamma(&[vec![re(0.0)]], 2).is_err());
        assert!(build_gamma(&[vec![re(1.0)]], 2).is_err());
        assert!(build_gamma(&[vec![C64::new(-1.0, 1.0), C64::new(-1.0, 2.0)]], 3).is_err());
        assert!(build_gamma(&[vec![re(-1.0), re(-2.0)]], 2).is_err());
        assert!(build_gamma(&[vec![C64::new(-1.0, 1.0), C64::new(-1.0, -1.0)]], 3).is_ok());
    }

    #[test]
    fn kappa_bounds_transition_matrix() {
        // Scalar subsystem e^{-t}: the weighted sup is exactly 1.
        let g = build_gamma(&[vec![re(-1.0)]], 2).unwrap();
        assert!((g.kappa() - KAPPA_SAFETY).abs() < 1e-12);
        // Repeated pole: |exp(Ct)| e^{t} grows, and the bound covers the grid.
        let g = build_gamma(&[vec![re(-1.0), re(-1.0)]], 3).unwrap();
        let c = g.companion(0);
        for t in [0.5, 1.0, 3.0, 10.0] {
            let lhs = linalg::spectral_norm(&(&c * t).exp());
            assert!(lhs <= g.kappa() * (-g.mu_gamma() * t).exp());
        }
        assert!(g.kappa() >= 1.0);
    }

    #[test]
    fn hurwitz_examples() {
        let h = build_hurwitz(m2([[-1.0, 2.0], [0.0, -1.5]])).unwrap();
        let mut ev: Vec<f64> = h.eigenvalues().iter().map(|z| z.re).collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] + 1.5).abs() < 1e-12 && (ev[1] + 1.0).abs() < 1e-12);
        assert!((h.max_real_part() + 1.0).abs() < 1e-12);

        match build_hurwitz(m2([[0.0, 1.0], [-1.0, 0.0]])) {
            Err(SynthesisError::NotHurwitz { re, im }) => {
                assert!(re.abs() < 1e-12 && (im.abs() - 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(build_hurwitz(DMatrix::from_element(1, 1, -0.25)).is_ok());
        assert_eq!(HurwitzMatrix::negative_identity(3).matrix(), &(-DMatrix::<f64>::identity(3, 3)));
    }

    #[test]
    fn nonsingular_examples() {
        let r = check_nonsingular(&m2([[3.0, 1.0], [1.0, 3.0]]));
        assert!(r.levy_desplanques && r.numeric_nonsingular);
        let r = check_nonsingular(&m2([[1.0, 2.0], [2.0, 1.0]]));
        assert!(!r.levy_desplanques && r.numeric_nonsingular);
        assert!((r.condition_estimate - 3.0).abs() < 1e-12);
        let r = check_nonsingular(&m2([[1.0, 1.0], [1.0, 1.0]]));
        assert!(!r.levy_desplanques && !r.numeric_nonsingular);
    }

    fn double_integrator_controller(gamma1: f64) -> Controller {
        let model = chain(1, 2, 1.0).unwrap();
        let g = build_gamma(&[vec![re(-gamma1)]], 2).unwrap();
        synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap()
    }

    #[test]
    fn synthesis_affine_closed_form() {
        let c = double_integrator_controller(1.0);
        let r = c.evaluate(&[1.0, 1.0], None).unwrap();
        assert!((r.u[0] + 3.0).abs() < 1e-12);
        assert!(r.residual <= 1e-12);
        let z = c.evaluate(&[0.0, 0.0], None).unwrap();
        assert_eq!(z.u, vec![0.0]);
        assert_eq!(z.iterations, 0);
        assert_eq!(c.validity().failure_count(), 0);
        assert!((c.validity().last_good_radius() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn synthesis_cubic_solves_by_substitution() {
        let model = catalog_model("cubic", ModelParams { m: 1, n: 2, gain: 1.0 }).unwrap();
        let g = build_gamma(&[vec![re(-1.0)]], 2).unwrap();
        let c = synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
        // γ1 x2 - A_H E = 0.5 + 1.5 = 2 at X = (1, 0.5), so u + u^3 = -2.
        let r = c.evaluate(&[1.0, 0.5], None).unwrap();
        assert!((r.u[0] + 1.0).abs() < 1e-12);
        let warm = c.evaluate(&[1.0, 0.5], Some(&[-0.9])).unwrap();
        assert!((warm.u[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthesis_preconditions() {
        let g = build_gamma(&[vec![re(-1.0)]], 2).unwrap();
        let shifted = SystemModel::new("shifted", 1, 2, |_, u, out| out[0] = u[0] + 1.0).unwrap();
        assert!(matches!(
            synthesize_feedback(&shifted, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()),
            Err(SynthesisError::NotAnEquilibrium { .. })
        ));
        let flat = SystemModel::new("flat", 1, 2, |_, u, out| out[0] = u[0].powi(3))
            .unwrap()
            .with_jacobian_u(|_, u, j| j[(0, 0)] = 3.0 * u[0] * u[0]);
        assert!(matches!(
            synthesize_feedback(&flat, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()),
            Err(SynthesisError::SingularInputJacobian { .. })
        ));
        let wide = chain(2, 2, 1.0).unwrap();
        assert!(matches!(
            synthesize_feedback(&wide, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()),
            Err(SynthesisError::Shape(_))
        ));
    }

    #[test]
    fn tanh_leaves_the_implicit_neighbourhood() {
        let model = catalog_model("tanh", ModelParams::default()).unwrap();
        let g = build_gamma(&[vec![re(-1.0)]], 2).unwrap();
        let c = synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
        assert!(c.evaluate(&[0.1, 0.1], None).is_ok());
        // tanh(u) = -4 has no solution.
        let err = c.evaluate(&[2.0, 1.0], None).unwrap_err();
        assert!(matches!(err, ControlError::NoConvergence { .. } | ControlError::Singular { .. }));
        assert_eq!(c.validity().failure_count(), 1);
        assert_eq!(c.validity().failures()[0].x, vec![2.0, 1.0]);
    }

    #[test]
    fn coupled_model_residual_contract() {
        let model = catalog_model("coupled", ModelParams::default()).unwrap();
        let g = build_gamma(&[vec![re(-1.0)], vec![re(-2.0)]], 2).unwrap();
        let h = build_hurwitz(m2([[-1.0, 2.0], [0.0, -1.5]])).unwrap();
        let c = synthesize_feedback(&model, &g, &h, NewtonConfig::default()).unwrap();
        let mut session = ControllerSession::new(&c);
        for k in 0..20 {
            let s = 0.05 * k as f64;
            let x = [s, -0.5 * s, 0.3 * s, s * s];
            let r = session.evaluate(&x).unwrap();
            let mut f = vec![0.0; 2];
            model.eval_f(&x, &r.u, &mut f).unwrap();
            let e = g.error_vec(&x);
            let mut sh = vec![0.0; 2];
            g.shift_term(&x, &mut sh);
            let ae = h.matrix() * DVector::from_column_slice(&e);
            let res: f64 = (0..2).map(|j| (sh[j] + f[j] - ae[j]).powi(2)).sum::<f64>().sqrt();
            assert!(res <= 1e-11, "residual {res} at {x:?}");
        }
    }

    #[test]
    fn coercivity_examples() {
        let radii = [1e-1, 1.0, 10.0, 100.0, 1000.0];
        let xs = vec![vec![0.0, 0.0], vec![1.0, -0.5]];
        let verdict = |name: &str| {
            let m = catalog_model(name, ModelParams::default()).unwrap();
            coercivity_probe(&m, &xs, 4, &radii, 7).unwrap().verdict
        };
        assert_eq!(verdict("chain"), CoercivityVerdict::CoerciveEvidence);
        assert_eq!(verdict("cubic"), CoercivityVerdict::CoerciveEvidence);
        assert_eq!(verdict("tanh"), CoercivityVerdict::NonCoerciveEvidence);

        let m = catalog_model("chain", ModelParams::default()).unwrap();
        let short = coercivity_probe(&m, &xs, 4, &[1.0, 2.0, 4.0], 7).unwrap();
        assert_eq!(short.verdict, CoercivityVerdict::Inconclusive);
        assert!(coercivity_probe(&m, &xs, 4, &[1.0, 10.0], 7).is_err());
        assert!(coercivity_probe(&m, &xs, 4, &[1.0, 10.0, 5.0], 7).is_err());
    }

    #[test]
    fn coercivity_excludes_failing_rays() {
        let m = SystemModel::new("blowup", 1, 2, |_, u, out| out[0] = if u[0] > 50.0 { f64::NAN } else { u[0] }).unwrap();
        let r = coercivity_probe(&m, &[vec![0.0, 0.0]], 16, &[0.1, 1.0, 10.0, 100.0], 3).unwrap();
        assert!(!r.excluded.is_empty());
        assert!(r.rays.iter().all(|ray| ray.direction[0] < 0.0));
    }

    fn gains(c: &Controller) -> Vec<f64> {
        match c.law() {
            ControlLaw::Linear { gain, .. } => gain.iter().copied().collect(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn placement_examples() {
        let di = chain(1, 2, 1.0).unwrap();
        let g = gains(&linearize_and_place(&di, &[re(-1.0), re(-1.0)]).unwrap());
        assert!((g[0] + 1.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);
        let g = gains(&linearize_and_place(&di, &[re(-2.0), re(-3.0)]).unwrap());
        assert!((g[0] + 6.0).abs() < 1e-12 && (g[1] + 5.0).abs() < 1e-12);
        let two = chain(1, 2, 2.0).unwrap();
        let g = gains(&linearize_and_place(&two, &[re(-1.0), re(-1.0)]).unwrap());
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn placement_layouts_hit_the_spectrum() {
        let coupled = catalog_model("coupled", ModelParams::default()).unwrap();
        let poles = [C64::new(-1.0, 1.0), C64::new(-1.0, -1.0), re(-2.0), re(-3.0)];
        let c = linearize_and_place(&coupled, &poles).unwrap();
        assert!(matches!(c.law(), ControlLaw::Linear { layout: PlacementLayout::Decoupled, .. }));
        assert!(linalg::spectrum_distance(&closed_loop_spectrum(&c).unwrap(), &poles, 1e-6) <= 1e-8);

        // n = 3, m = 2 with two complex pairs and two reals groups fine; with
        // three pairs and no real pole it cannot, so the chain is used.
        let c3 = chain(2, 3, 1.0).unwrap();
        let poles: Vec<C64> = [(-1.0, 1.0), (-2.0, 0.5), (-1.5, 2.0)]
            .iter()
            .flat_map(|&(a, b)| [C64::new(a, b), C64::new(a, -b)])
            .collect();
        let c = linearize_and_place(&c3, &poles).unwrap();
        assert!(matches!(c.law(), ControlLaw::Linear { layout: PlacementLayout::Chained, .. }));
        assert!(linalg::spectrum_distance(&closed_loop_spectrum(&c).unwrap(), &poles, 1e-6) <= 1e-8);
        assert_eq!(c.evaluate(&[1.0; 6], None).unwrap().iterations, 0);
    }

    #[test]
    fn placement_rejections() {
        let di = chain(1, 2, 1.0).unwrap();
        assert!(linearize_and_place(&di, &[re(-1.0)]).is_err());
        assert!(linearize_and_place(&di, &[re(-1.0), re(1.0)]).is_err());
        let dead = SystemModel::new("dead", 1, 2, |_, _, out| out[0] = 0.0).unwrap();
        assert!(matches!(
            linearize_and_place(&dead, &[re(-1.0), re(-2.0)]),
            Err(SynthesisError::Uncontrollable { rank: 0, expected: 2 })
        ));
    }

    #[test]
    fn roa_examples() {
        let unit = RoaConstants { gamma_star: 1.0, mu_gamma: 1.0, kappa: 1.0 };
        let r = estimate_roa(unit, 10.0, 0.5, 0.3, 1.0, 1.0, 1).unwrap();
        assert!((r.delta_star_e - 0.3).abs() < 1e-15);
        let r = estimate_roa(unit, 1.0, 0.5, 10.0, 1.0, 1.0, 1).unwrap();
        assert!((r.delta_star_x - 0.5).abs() < 1e-15);
        assert_eq!(r.delta_star, r.delta_star_x);
        let two = RoaConstants { gamma_star: 2.0, ..unit };
        let r = estimate_roa(two, 10.0, 0.5, 0.4, 1.0, 1.0, 4).unwrap();
        assert!((r.delta_star_e - 0.1).abs() < 1e-15);
        assert!(matches!(estimate_roa(unit, 1.0, 1.0, 0.3, 1.0, 1.0, 1), Err(SynthesisError::Roa(_))));
        assert!(estimate_roa(unit, 1.0, 0.5, 0.0, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn summary_serializes() {
        let c = double_integrator_controller(2.0);
        let v = serde_json::to_value(c.summary()).unwrap();
        assert_eq!(v["mode"], "implicit-newton");
        assert_eq!(v["gamma_columns"][0][0], 2.0);
        assert_eq!(v["newton"]["max_iter"], 50);
        assert!(v.get("g_lin").is_none());
    }

    #[test]
    fn validity_radius_of_tanh_is_finite() {
        let model = catalog_model("tanh", ModelParams::default()).unwrap();
        let g = build_gamma(&[vec![re(-1.0)]], 2).unwrap();
        let c = synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
        let r = probe_validity_radius(&c, &[0.1, 0.2, 0.4, 0.8, 1.6, 3.2], 8, 1);
        assert!((0.1..3.2).contains(&r));
        let lin = double_integrator_controller(1.0);
        assert_eq!(probe_validity_radius(&lin, &[1.0, 100.0], 8, 1), 100.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn levy_desplanques_implies_nonsingular(
            m in 1usize..6,
            entries in proptest::collection::vec(-10.0f64..10.0, 36),
            margins in proptest::collection::vec(1e-6f64..5.0, 6),
            signs in proptest::collection::vec(any::<bool>(), 6),
        ) {
            let mut b = DMatrix::from_fn(m, m, |i, j| entries[i * 6 + j]);
            for i in 0..m {
                let off: f64 = (0..m).filter(|&j| j != i).map(|j| b[(i, j)].abs()).sum();
                let d = off + margins[i];
                b[(i, i)] = if signs[i] { d } else { -d };
            }
            let r = check_nonsingular(&b);
            prop_assert!(r.levy_desplanques);
            prop_assert!(r.numeric_nonsingular);
        }
    }

    proptest! {
        #[test]
        fn gamma_star_at_least_one(p in proptest::collection::vec(0.01f64..0.99, 1..4)) {
            // Poles in (-1, 0) with n = 2 give |γ| < 1.
            let cols: Vec<Vec<C64>> = p.iter().map(|&v| vec![re(-v)]).collect();
            let g = build_gamma(&cols, 2).unwrap();
            prop_assert_eq!(g.gamma_star(), 1.0);
        }

        #[test]
        fn root_reconstruction(
            reals in proptest::collection::vec(0.1f64..5.0, 1..4),
            pair in (0.1f64..5.0, 0.1f64..5.0),
        ) {
            // Separated poles: reals at least 0.5 apart, the pair off the axis.
            let mut poles: Vec<C64> = Vec::new();
            let mut acc = 0.0;
            for r in &reals {
                acc += r.max(0.5);
                poles.push(re(-acc));
            }
            let pair = (pair.0, pair.1.max(0.5));
            poles.push(C64::new(-pair.0, pair.1));
            poles.push(C64::new(-pair.0, -pair.1));
            let n = poles.len() + 1;
            let g = build_gamma(&[poles.clone()], n).unwrap();
            prop_assert!(g.reconstruction_error() <= SPECTRUM_TOL);
            prop_assert!(g.root_distance() <= SPECTRUM_TOL);
            prop_assert!(g.gamma_star() >= 1.0);
            prop_assert!(g.kappa() >= 1.0);
        }

        #[test]
        fn affine_exactness(x1 in -5.0f64..5.0, x2 in -5.0f64..5.0, x3 in -5.0f64..5.0, gain in 0.5f64..3.0) {
            // F = gain * u on a third-order chain: G has a closed form.
            let model = chain(1, 3, gain).unwrap();
            let g = build_gamma(&[vec![re(-1.0), re(-2.0)]], 3).unwrap();
            let c = synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
            let x = [x1, x2, x3];
            let e = 2.0 * x1 + 3.0 * x2 + x3;
            let s = 2.0 * x2 + 3.0 * x3;
            let expected = -(s + e) / gain;
            let u = c.evaluate(&x, None).unwrap().u[0];
            prop_assert!((u - expected).abs() <= 1e-10);
        }
    }
}
