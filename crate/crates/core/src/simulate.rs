//! Trajectories of the error dynamics `E' = A_H E + W~(t, E)`, of the closed
//! loop `X_i' = X_{i+1}`, `X_n' = F(X, G(X)) + W(t, X)`, and of the tracking
//! variant in `Δ = X - X_d`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{evaluate_dynamics, ModelError, PerturbationSpec, SystemModel};
use crate::norm::Norm;
use crate::ode::{self, OdeConfig, OdeErrorKind, OdeFailure, OdeSolution, Sampling};
use crate::signal::FreqHint;
use crate::synthesis::{ControlError, Controller, ControllerSession, HurwitzMatrix};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub tol: f64,
    pub sampling: Sampling,
    pub norm: Norm,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { tol: 1e-9, sampling: Sampling::Every(0.01), norm: Norm::Euclidean, max_steps: 50_000_000 }
    }
}

impl SimConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }

    pub fn sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    fn ode(&self, hint: Option<FreqHint>) -> OdeConfig {
        let mut c = OdeConfig::with_tol(self.tol).freq_hint(hint);
        c.max_steps = self.max_steps;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    ErrorDynamics,
    ClosedLoop,
    Tracking,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub kind: TrajectoryKind,
    pub t0: f64,
    pub t_end: f64,
    pub tol: f64,
    pub norm: Norm,
    pub freq_hint: bool,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evals: usize,
    pub min_step: f64,
    pub max_step: f64,
    pub controller_evaluations: usize,
    pub controller_failures: usize,
    pub max_newton_residual: f64,
    pub max_newton_iterations: usize,
    pub failure: Option<String>,
}

/// Sampled solution. `inputs` are present for closed-loop and tracking runs;
/// tracking states are `Δ = X - X_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Option<Vec<Vec<f64>>>,
    pub norms: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("nonempty trajectory")
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("nonempty trajectory")
    }

    pub fn final_norm(&self) -> f64 {
        *self.norms.last().expect("nonempty trajectory")
    }

    /// Largest sampled norm over `t in [a, b]`.
    pub fn sup_norm_between(&self, a: f64, b: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.norms)
            .filter(|(t, _)| **t >= a && **t <= b)
            .map(|(_, n)| *n)
            .fold(0.0, f64::max)
    }

    /// Largest sampled norm over the last `fraction` of the time span.
    pub fn tail_sup(&self, fraction: f64) -> f64 {
        let (t0, t1) = (self.t0(), self.final_time());
        self.sup_norm_between(t1 - fraction * (t1 - t0), t1)
    }

    fn build(kind: TrajectoryKind, sol: OdeSolution, inputs: Option<Vec<Vec<f64>>>, cfg: &SimConfig, t_end: f64, hint: bool) -> Self {
        let norms = sol.states.iter().map(|x| cfg.norm.of(x)).collect();
        let s = sol.stats;
        Self {
            diagnostics: Diagnostics {
                kind,
                t0: sol.times[0],
                t_end,
                tol: cfg.tol,
                norm: cfg.norm,
                freq_hint: hint,
                accepted_steps: s.accepted,
                rejected_steps: s.rejected,
                rhs_evals: s.rhs_evals,
                min_step: if s.min_step.is_finite() { s.min_step } else { 0.0 },
                max_step: s.max_step,
                controller_evaluations: 0,
                controller_failures: 0,
                max_newton_residual: 0.0,
                max_newton_iterations: 0,
                failure: None,
            },
            times: sol.times,
            states: sol.states,
            inputs,
            norms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RhsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    /// The controller could not be evaluated: the state left the region
    /// where the implicit feedback is defined.
    #[error("controller failed at t = {t}: {error}")]
    Controller { t: f64, state: Vec<f64>, error: ControlError, partial: Box<Trajectory> },
    #[error("integration failed at t = {t}: {message}")]
    Integration { t: f64, state: Vec<f64>, message: String, partial: Box<Trajectory> },
}

impl SimError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            SimError::Controller { partial, .. } | SimError::Integration { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

fn failure_to_error(kind: TrajectoryKind, f: OdeFailure<RhsError>, cfg: &SimConfig, t_end: f64, hint: bool, stats: Option<&ControllerStats>) -> SimError {
    let message = f.to_string();
    let mut partial = Trajectory::build(kind, f.partial, None, cfg, t_end, hint);
    if let Some(s) = stats {
        s.apply(&mut partial.diagnostics);
    }
    partial.diagnostics.failure = Some(message.clone());
    let partial = Box::new(partial);
    match f.kind {
        OdeErrorKind::Rhs(RhsError::Control(error)) => SimError::Controller { t: f.t, state: f.state, error, partial },
        OdeErrorKind::Invalid(s) => SimError::Invalid(s),
        _ => SimError::Integration { t: f.t, state: f.state, message, partial },
    }
}

/// Integrates an arbitrary `x' = rhs(t, x)`.
pub fn integrate<F>(
    mut rhs: F,
    t0: f64,
    x0: &[f64],
    t_end: f64,
    cfg: &SimConfig,
    freq_hint: Option<FreqHint>,
) -> Result<Trajectory, SimError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), ModelError>,
{
    let hint = freq_hint.is_some();
    ode::solve(|t, x: &[f64], dx: &mut [f64]| rhs(t, x, dx).map_err(RhsError::from), t0, x0, t_end, &cfg.ode(freq_hint), &cfg.sampling)
        .map(|sol| Trajectory::build(TrajectoryKind::Generic, sol, None, cfg, t_end, hint))
        .map_err(|f| failure_to_error(TrajectoryKind::Generic, f, cfg, t_end, hint, None))
}

/// `E' = A_H E + W~(t, E)`.
pub fn simulate_error_dynamics(
    hurwitz: &HurwitzMatrix,
    pert: &PerturbationSpec,
    e0: &[f64],
    t0: f64,
    t_end: f64,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    let m = hurwitz.m();
    if e0.len() != m || pert.dim() != m {
        return Err(SimError::Invalid(format!("E0 has {} entries and W has {}, A_H is {m}x{m}", e0.len(), pert.dim())));
    }
    let a = hurwitz.matrix().clone();
    let hint = pert.freq_hint().cloned();
    let has_hint = hint.is_some();
    let mut w = vec![0.0; m];
    let rhs = |t: f64, e: &[f64], de: &mut [f64]| -> Result<(), RhsError> {
        pert.eval(t, e, &mut w)?;
        for i in 0..m {
            let mut acc = w[i];
            for j in 0..m {
                acc += a[(i, j)] * e[j];
            }
            de[i] = acc;
        }
        Ok(())
    };
    ode::solve(rhs, t0, e0, t_end, &cfg.ode(hint), &cfg.sampling)
        .map(|sol| Trajectory::build(TrajectoryKind::ErrorDynamics, sol, None, cfg, t_end, has_hint))
        .map_err(|f| failure_to_error(TrajectoryKind::ErrorDynamics, f, cfg, t_end, has_hint, None))
}

#[derive(Debug, Default)]
struct ControllerStats {
    evaluations: usize,
    failures: usize,
    max_residual: f64,
    max_iterations: usize,
}

impl ControllerStats {
    fn record(&mut self, r: &Result<crate::synthesis::ControlEval, ControlError>) {
        self.evaluations += 1;
        match r {
            Ok(ev) => {
                self.max_residual = self.max_residual.max(ev.residual);
                self.max_iterations = self.max_iterations.max(ev.iterations);
            }
            Err(_) => self.failures += 1,
        }
    }

    fn apply(&self, d: &mut Diagnostics) {
        d.controller_evaluations = self.evaluations;
        d.controller_failures = self.failures;
        d.max_newton_residual = self.max_residual;
        d.max_newton_iterations = self.max_iterations;
    }
}

/// Desired trajectory `X_d(t) = [Y_d, ..., Y_d^(n-1)]` (flattened like
/// states) and `Y_d^(n)(t)`.
#[derive(Clone)]
pub struct TrackingSpec {
    name: String,
    m: usize,
    n: usize,
    x_d: TimeFn,
    yd_n: TimeFn,
}

type TimeFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

impl fmt::Debug for TrackingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrackingSpec").field("name", &self.name).field("m", &self.m).field("n", &self.n).finish()
    }
}

/// Built-in references with one-line descriptions.
pub const REFERENCE_CATALOG: &[(&str, &str)] = &[
    ("zero", "X_d = 0"),
    ("sinusoid", "Y_d = sin(t) on every channel"),
];

/// Relative tolerance of the derivative spot check.
pub const CONSISTENCY_TOL: f64 = 1e-4;
/// Bound on `|F(X_d(t), 0)|` for an admissible reference.
pub const ADMISSIBILITY_TOL: f64 = 1e-8;

impl TrackingSpec {
    pub fn new<X, Y>(name: impl Into<String>, m: usize, n: usize, x_d: X, yd_n: Y) -> Self
    where
        X: Fn(f64, &mut [f64]) + Send + Sync + 'static,
        Y: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self { name: name.into(), m, n, x_d: Arc::new(x_d), yd_n: Arc::new(yd_n) }
    }

    pub fn zero(m: usize, n: usize) -> Self {
        Self::new("zero", m, n, |_, out| out.fill(0.0), |_, out| out.fill(0.0))
    }

    /// `Y_d = sin(t)` per channel; `Y_d^(k) = sin(t + k π/2)`.
    pub fn sinusoid(m: usize, n: usize) -> Self {
        let deriv = |k: usize, t: f64| (t + k as f64 * std::f64::consts::FRAC_PI_2).sin();
        Self::new(
            "sinusoid",
            m,
            n,
            move |t, out| {
                for i in 0..n {
                    let v = deriv(i, t);
                    out[i * m..(i + 1) * m].fill(v);
                }
            },
            move |t, out| out.fill(deriv(n, t)),
        )
    }

    pub fn catalog(name: &str, m: usize, n: usize) -> Result<Self, ModelError> {
        match name {
            "zero" => Ok(Self::zero(m, n)),
            "sinusoid" => Ok(Self::sinusoid(m, n)),
            other => Err(ModelError::UnknownCatalog(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn x_d(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.m * self.n];
        (self.x_d)(t, &mut v);
        v
    }

    pub fn yd_n(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.m];
        (self.yd_n)(t, &mut v);
        v
    }

    /// Central-difference check that column `i+1` is the derivative of
    /// column `i` (and `Y_d^(n)` of the last) at 10 seeded times.
    pub fn check_consistency(&self, t0: f64, t_end: f64, seed: u64) -> Result<(), String> {
        let (m, n) = (self.m, self.n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let t = rng.random_range(t0..=t_end);
            let h = 1e-5 * t.abs().max(1.0);
            let (xp, xm, x) = (self.x_d(t + h), self.x_d(t - h), self.x_d(t));
            let top = self.yd_n(t);
            for i in 0..n {
                for j in 0..m {
                    let fd = (xp[i * m + j] - xm[i * m + j]) / (2.0 * h);
                    let want = if i + 1 < n { x[(i + 1) * m + j] } else { top[j] };
                    if (fd - want).abs() > CONSISTENCY_TOL * want.abs().max(1.0) {
                        return Err(format!(
                            "reference '{}': derivative of order {i} on channel {j} at t = {t} is {fd}, next column has {want}",
                            self.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// `|F(X_d(t), 0)| <= ADMISSIBILITY_TOL` on 101 points of `[t0, t_end]`.
    pub fn check_admissible(&self, model: &SystemModel, t0: f64, t_end: f64) -> Result<(), String> {
        let zero = vec![0.0; self.m];
        for k in 0..=100 {
            let t = t0 + (t_end - t0) * k as f64 / 100.0;
            let f = model.f_value(&self.x_d(t), &zero).map_err(|e| e.to_string())?;
            let r = Norm::Euclidean.of(&f);
            if !(r <= ADMISSIBILITY_TOL) {
                return Err(format!("reference '{}' is not admissible: |F(X_d(t), 0)| = {r:.3e} at t = {t}", self.name));
            }
        }
        Ok(())
    }
}

/// Closed-loop right-hand side with per-trajectory warm starts. Stabilization
/// is tracking of `X_d = 0` with the same arithmetic, so both paths agree
/// bitwise for the zero reference.
pub struct ClosedLoopRhs<'a> {
    model: &'a SystemModel,
    pert: &'a PerturbationSpec,
    session: ControllerSession<'a>,
    reference: Option<&'a TrackingSpec>,
    delta: Vec<f64>,
    xd: Vec<f64>,
    ydn: Vec<f64>,
    stats: ControllerStats,
}

impl<'a> ClosedLoopRhs<'a> {
    pub fn new(model: &'a SystemModel, ctrl: &'a Controller, pert: &'a PerturbationSpec, reference: Option<&'a TrackingSpec>) -> Self {
        let (m, d) = (model.m(), model.state_dim());
        Self {
            model,
            pert,
            session: ControllerSession::new(ctrl),
            reference,
            delta: vec![0.0; d],
            xd: vec![0.0; d],
            ydn: vec![0.0; m],
            stats: ControllerStats::default(),
        }
    }

    /// Fills `Δ` (and the reference terms) for state `x` at time `t`.
    fn prepare(&mut self, t: f64, x: &[f64]) {
        if let Some(r) = self.reference {
            (r.x_d)(t, &mut self.xd);
            (r.yd_n)(t, &mut self.ydn);
        }
        for i in 0..x.len() {
            self.delta[i] = x[i] - self.xd[i];
        }
    }

    pub fn control(&mut self, t: f64, x: &[f64]) -> Result<crate::synthesis::ControlEval, ControlError> {
        self.prepare(t, x);
        let r = self.session.evaluate_tracking(&self.delta, x, &self.ydn);
        self.stats.record(&r);
        r
    }

    pub fn eval(&mut self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<(), RhsError> {
        let u = self.control(t, x)?.u;
        evaluate_dynamics(self.model, self.pert, t, x, &u, dx)?;
        Ok(())
    }
}

fn check_closed_loop_shapes(model: &SystemModel, ctrl: &Controller, pert: &PerturbationSpec, x0: &[f64]) -> Result<(), SimError> {
    let (m, n) = (model.m(), model.n());
    if ctrl.model().m() != m || ctrl.model().n() != n {
        return Err(SimError::Invalid(format!("controller is for m={}, n={}, model has m={m}, n={n}", ctrl.model().m(), ctrl.model().n())));
    }
    if x0.len() != m * n {
        return Err(SimError::Invalid(format!("X0 has {} entries, expected {}", x0.len(), m * n)));
    }
    if pert.dim() != m {
        return Err(SimError::Invalid(format!("W has {} components, expected {m}", pert.dim())));
    }
    Ok(())
}

fn run_closed_loop(
    kind: TrajectoryKind,
    model: &SystemModel,
    ctrl: &Controller,
    pert: &PerturbationSpec,
    reference: Option<&TrackingSpec>,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    let hint = pert.freq_hint().cloned();
    let has_hint = hint.is_some();
    let mut rhs = ClosedLoopRhs::new(model, ctrl, pert, reference);
    if let Err(error) = rhs.control(t0, x0) {
        let sol = OdeSolution { times: vec![t0], states: vec![x0.to_vec()], stats: Default::default() };
        let mut partial = Trajectory::build(kind, sol, None, cfg, t_end, has_hint);
        partial.diagnostics.failure = Some(error.to_string());
        return Err(SimError::Controller { t: t0, state: x0.to_vec(), error, partial: Box::new(partial) });
    }
    let result = ode::solve(|t, x: &[f64], dx: &mut [f64]| rhs.eval(t, x, dx), t0, x0, t_end, &cfg.ode(hint), &cfg.sampling);
    let stats = std::mem::take(&mut rhs.stats);
    let sol = result.map_err(|f| failure_to_error(kind, f, cfg, t_end, has_hint, Some(&stats)))?;
    // Inputs at the samples, warm-started sample to sample.
    let mut rec = ClosedLoopRhs::new(model, ctrl, pert, reference);
    let mut inputs = Vec::with_capacity(sol.times.len());
    for (t, x) in sol.times.iter().zip(&sol.states) {
        match rec.control(*t, x) {
            Ok(ev) => inputs.push(ev.u),
            Err(error) => {
                let mut partial = Trajectory::build(kind, sol.clone(), None, cfg, t_end, has_hint);
                partial.diagnostics.failure = Some(error.to_string());
                return Err(SimError::Controller { t: *t, state: x.clone(), error, partial: Box::new(partial) });
            }
        }
    }
    let mut states = sol.states.clone();
    if reference.is_some() {
        for (t, x) in sol.times.iter().zip(states.iter_mut()) {
            rec.prepare(*t, x);
            x.copy_from_slice(&rec.delta);
        }
    }
    let mut traj = Trajectory::build(kind, OdeSolution { states, ..sol }, Some(inputs), cfg, t_end, has_hint);
    stats.apply(&mut traj.diagnostics);
    Ok(traj)
}

/// Integrates the closed loop with `U = G(X)` from `X(t0) = x0`.
pub fn simulate_closed_loop(
    model: &SystemModel,
    ctrl: &Controller,
    pert: &PerturbationSpec,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    check_closed_loop_shapes(model, ctrl, pert, x0)?;
    run_closed_loop(TrajectoryKind::ClosedLoop, model, ctrl, pert, None, x0, t0, t_end, cfg)
}

/// Tracking of `spec` from `Δ(t0) = delta0`; the returned states are `Δ(t)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_tracking(
    model: &SystemModel,
    ctrl: &Controller,
    spec: &TrackingSpec,
    pert: &PerturbationSpec,
    delta0: &[f64],
    t0: f64,
    t_end: f64,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    check_closed_loop_shapes(model, ctrl, pert, delta0)?;
    if ctrl.is_linear() {
        return Err(SimError::Invalid("tracking needs the implicit controller".into()));
    }
    if spec.m != model.m() || spec.n != model.n() {
        return Err(SimError::Invalid(format!("reference is for m={}, n={}", spec.m, spec.n)));
    }
    spec.check_consistency(t0, t_end, 0).map_err(SimError::Invalid)?;
    spec.check_admissible(model, t0, t_end).map_err(SimError::Invalid)?;
    let xd0 = spec.x_d(t0);
    let x0: Vec<f64> = delta0.iter().zip(&xd0).map(|(d, r)| d + r).collect();
    run_closed_loop(TrajectoryKind::Tracking, model, ctrl, pert, Some(spec), &x0, t0, t_end, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use crate::model::{catalog_model, catalog_perturbation, chain, ModelParams};
    use crate::signal::catalog_signal;
    use crate::synthesis::{build_gamma, build_hurwitz, synthesize_feedback, NewtonConfig};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;

    fn example_hurwitz() -> HurwitzMatrix {
        build_hurwitz(DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -1.5])).unwrap()
    }

    fn di_controller() -> (SystemModel, Controller) {
        let model = chain(1, 2, 1.0).unwrap();
        let g = build_gamma(&[vec![C64::new(-1.0, 0.0)]], 2).unwrap();
        let c = synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
        (model, c)
    }

    #[test]
    fn scalar_exponential() {
        let tr = integrate(
            |_, x, dx| {
                dx[0] = -x[0];
                Ok(())
            },
            0.0,
            &[1.0],
            1.0,
            &SimConfig::with_tol(1e-10),
            None,
        )
        .unwrap();
        assert_eq!(tr.t0(), 0.0);
        assert!((tr.final_state()[0] - 0.36787944117144233).abs() < 1e-8);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn error_dynamics_closed_form() {
        let tr = simulate_error_dynamics(&example_hurwitz(), &PerturbationSpec::zero(2), &[-1.0, 1.5], 0.0, 5.0, &SimConfig::with_tol(1e-9)).unwrap();
        let mut worst = 0.0_f64;
        for (t, e) in tr.times.iter().zip(&tr.states) {
            let e1 = 5.0 * (-t).exp() - 6.0 * (-1.5 * t).exp();
            let e2 = 1.5 * (-1.5 * t).exp();
            worst = worst.max((e[0] - e1).abs()).max((e[1] - e2).abs());
        }
        assert!(worst < 1e-6, "{worst}");
        let i = tr.times.iter().position(|t| (*t - 1.0).abs() < 1e-12).unwrap();
        assert!((tr.states[i][0] - 0.500616).abs() < 1e-6);
        assert!((tr.states[i][1] - 0.334695).abs() < 1e-6);
    }

    #[test]
    fn constant_forcing_settles_at_equilibrium() {
        let w = catalog_perturbation("constant_1_0", 2).unwrap();
        let tr = simulate_error_dynamics(&example_hurwitz(), &w, &[-1.0, 1.5], 0.0, 40.0, &SimConfig::with_tol(1e-9)).unwrap();
        let e = tr.final_state();
        assert!((e[0] - 1.0).abs() < 1e-6 && e[1].abs() < 1e-6);
    }

    #[test]
    fn closed_loop_from_rest_stays_at_rest() {
        let (model, c) = di_controller();
        let tr = simulate_closed_loop(&model, &c, &PerturbationSpec::zero(1), &[0.0, 0.0], 0.0, 5.0, &SimConfig::default()).unwrap();
        assert!(tr.states.iter().all(|x| x.iter().all(|v| *v == 0.0)));
        assert!(tr.inputs.as_ref().unwrap().iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn closed_loop_chain_decays() {
        let (model, c) = di_controller();
        let tr = simulate_closed_loop(&model, &c, &PerturbationSpec::zero(1), &[0.5, 0.0], 0.0, 20.0, &SimConfig::default()).unwrap();
        assert!(tr.final_norm() < 1e-4);
        // Closed form of x1' = x2, x2' = -x1 - 2 x2 from (0.5, 0).
        for (t, x) in tr.times.iter().zip(&tr.states) {
            let x1 = 0.5 * (1.0 + t) * (-t).exp();
            assert!((x[0] - x1).abs() < 1e-7);
        }
        let d = &tr.diagnostics;
        assert!(d.max_newton_residual <= 1e-12 && d.controller_failures == 0 && d.controller_evaluations > 0);
    }

    #[test]
    fn closed_loop_with_diminishing_forcing_stays_small() {
        let (model, c) = di_controller();
        let w = PerturbationSpec::time_only(catalog_signal("cos_exp").unwrap());
        let cfg = SimConfig::with_tol(1e-8);
        let tr = simulate_closed_loop(&model, &c, &w, &[0.5, 0.0], 0.0, 8.0, &cfg).unwrap();
        assert!(tr.norms.iter().all(|n| n.is_finite() && *n < 2.0));
        // Independent DOP853 run (rtol 1e-12): sup |X| over [7.2, 8] is 1.7827e-3.
        assert!(tr.tail_sup(0.1) < 2.0 * 1.7826964624657105e-3, "{}", tr.tail_sup(0.1));
        assert!(tr.diagnostics.freq_hint);
    }

    #[test]
    fn tracking_zero_reference_is_bitwise_stabilization() {
        let (model, c) = di_controller();
        let zero = TrackingSpec::zero(1, 2);
        let w = PerturbationSpec::time_only(catalog_signal("cos_exp").unwrap());
        let mut a = ClosedLoopRhs::new(&model, &c, &w, None);
        let mut b = ClosedLoopRhs::new(&model, &c, &w, Some(&zero));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t: f64 = rng.random_range(0.0..5.0);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (mut da, mut db) = ([0.0; 2], [0.0; 2]);
            a.eval(t, &x, &mut da).unwrap();
            b.eval(t, &x, &mut db).unwrap();
            assert_eq!(da.map(f64::to_bits), db.map(f64::to_bits));
        }
        let cfg = SimConfig::default();
        let s = simulate_closed_loop(&model, &c, &w, &[0.5, -0.2], 0.0, 3.0, &cfg).unwrap();
        let t = simulate_tracking(&model, &c, &zero, &w, &[0.5, -0.2], 0.0, 3.0, &cfg).unwrap();
        assert_eq!(s.states, t.states);
        assert_eq!(s.inputs, t.inputs);
    }

    #[test]
    fn tracking_sinusoid_converges() {
        let (model, c) = di_controller();
        let spec = TrackingSpec::sinusoid(1, 2);
        assert_eq!(spec.x_d(0.3), vec![0.3f64.sin(), 0.3f64.cos()]);
        assert!((spec.yd_n(0.3)[0] + 0.3f64.sin()).abs() < 1e-15);
        let tr = simulate_tracking(&model, &c, &spec, &PerturbationSpec::zero(1), &[0.3, 0.0], 0.0, 20.0, &SimConfig::default()).unwrap();
        assert_eq!(tr.states[0], vec![0.3, 0.0]);
        assert!(tr.final_norm() < 1e-4);
        for (t, d) in tr.times.iter().zip(&tr.states) {
            assert!((d[0] - 0.3 * (1.0 + t) * (-t).exp()).abs() < 1e-7);
        }
    }

    #[test]
    fn tracking_rejects_bad_references() {
        let (model, c) = di_controller();
        let bad = TrackingSpec::new("bad", 1, 2, |t, o| {
            o[0] = t.sin();
            o[1] = 2.0 * t.cos();
        }, |t, o| o[0] = -t.sin());
        let r = simulate_tracking(&model, &c, &bad, &PerturbationSpec::zero(1), &[0.0, 0.0], 0.0, 1.0, &SimConfig::default());
        assert!(matches!(r, Err(SimError::Invalid(_))));
        let pend = catalog_model("pendulum", ModelParams::default()).unwrap();
        let g = build_gamma(&[vec![C64::new(-1.0, 0.0)]], 2).unwrap();
        let pc = synthesize_feedback(&pend, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
        let r = simulate_tracking(&pend, &pc, &TrackingSpec::sinusoid(1, 2), &PerturbationSpec::zero(1), &[0.0, 0.0], 0.0, 1.0, &SimConfig::default());
        match r {
            Err(SimError::Invalid(msg)) => assert!(msg.contains("not admissible")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn controller_failure_mid_trajectory() {
        let model = catalog_model("tanh", ModelParams::default()).unwrap();
        let g = build_gamma(&[vec![C64::new(-1.0, 0.0)]], 2).unwrap();
        let c = synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
        // A strong constant push drives the state out of the region where
        // tanh(u) can cancel it.
        let w = PerturbationSpec::time_only(crate::signal::Signal::scalar("push", |_| 2.0));
        let r = simulate_closed_loop(&model, &c, &w, &[0.2, 0.0], 0.0, 30.0, &SimConfig::default());
        match r {
            Err(SimError::Controller { t, partial, .. }) => {
                assert!(t > 0.0);
                assert!(partial.diagnostics.failure.is_some());
            }
            other => panic!("unexpected {other:?}"),
        }
        let r = simulate_closed_loop(&model, &c, &PerturbationSpec::zero(1), &[5.0, 5.0], 0.0, 1.0, &SimConfig::default());
        assert!(matches!(r, Err(SimError::Controller { t, .. }) if t == 0.0));
    }

    #[test]
    fn shift_consistency_along_closed_loop() {
        let model = catalog_model("cubic", ModelParams { m: 1, n: 3, gain: 1.0 }).unwrap();
        let g = build_gamma(&[vec![C64::new(-1.0, 0.0), C64::new(-2.0, 0.0)]], 3).unwrap();
        let c = synthesize_feedback(&model, &g, &HurwitzMatrix::negative_identity(1), NewtonConfig::default()).unwrap();
        let dt = 0.01;
        let tr = simulate_closed_loop(&model, &c, &PerturbationSpec::zero(1), &[0.4, -0.2, 0.1], 0.0, 5.0, &SimConfig::with_tol(1e-11).sampling(Sampling::Every(dt))).unwrap();
        for k in 1..tr.times.len() - 1 {
            for i in 0..2 {
                let fd = (tr.states[k + 1][i] - tr.states[k - 1][i]) / (2.0 * dt);
                assert!((fd - tr.states[k][i + 1]).abs() < 10.0 * dt * dt, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn tolerance_refinement_is_consistent() {
        let h = example_hurwitz();
        for name in ["zero", "constant_1_0", "example1_bounded"] {
            let w = catalog_perturbation(name, 2).unwrap();
            for tol in [1e-8, 1e-9] {
                let coarse = simulate_error_dynamics(&h, &w, &[-1.0, 1.5], 0.0, 10.0, &SimConfig::with_tol(tol)).unwrap();
                let fine = simulate_error_dynamics(&h, &w, &[-1.0, 1.5], 0.0, 10.0, &SimConfig::with_tol(tol / 2.0)).unwrap();
                let (c, f) = (coarse.final_state(), fine.final_state());
                let d = Norm::Euclidean.of(&[c[0] - f[0], c[1] - f[1]]);
                assert!(d <= 10.0 * tol, "{name} at {tol}: {d}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn linear_systems_match_matrix_exponential(
            a in -3.0f64..-0.2, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -3.0f64..-0.2,
            e0 in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let m = DMatrix::from_row_slice(2, 2, &[a, b, c, d]);
            prop_assume!(build_hurwitz(m.clone()).is_ok());
            let h = build_hurwitz(m.clone()).unwrap();
            let tol = 1e-9;
            let tr = simulate_error_dynamics(&h, &PerturbationSpec::zero(2), &e0, 0.0, 4.0, &SimConfig::with_tol(tol).sampling(Sampling::Every(0.5))).unwrap();
            let x0 = DVector::from_column_slice(&e0);
            for (t, e) in tr.times.iter().zip(&tr.states) {
                let exact = (&m * *t).exp() * &x0;
                let scale = 1.0 + x0.norm();
                prop_assert!((e[0] - exact[0]).abs() <= 10.0 * tol * scale && (e[1] - exact[1]).abs() <= 10.0 * tol * scale);
            }
        }
    }
}
