//! Sampled evidence for eventual uniform stability (EvUS), attraction (EvUA)
//! and their conjunction (EvUAS), exponential class-KL envelope fits, and
//! empirical `δ(ε)`.
//!
//! Finite sampling over start times and initial states can only support or
//! refute the definitions; a pass means "no counterexample among the samples".

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::diminishing::random_on_sphere;
use crate::model::{ModelError, PerturbationSpec, SystemModel};
use crate::norm::Norm;
use crate::ode::Sampling;
use crate::signal::FreqHint;
use crate::simulate::{integrate, simulate_closed_loop, simulate_error_dynamics, SimConfig, SimError, Trajectory};
use crate::synthesis::{Controller, HurwitzMatrix};

/// Something that can be simulated from any `(t0, x0)`.
pub trait TrajectoryFactory: Sync {
    fn state_dim(&self) -> usize;
    fn norm(&self) -> Norm;
    fn simulate(&self, t0: f64, x0: &[f64], t_end: f64) -> Result<Trajectory, SimError>;
}

fn verification_config(tol: f64, norm: Norm) -> SimConfig {
    SimConfig::with_tol(tol).sampling(Sampling::Steps).norm(norm)
}

/// `E' = A_H E + W~(t, E)`.
pub struct ErrorSystem<'a> {
    pub hurwitz: &'a HurwitzMatrix,
    pub pert: &'a PerturbationSpec,
    pub cfg: SimConfig,
}

impl<'a> ErrorSystem<'a> {
    pub fn new(hurwitz: &'a HurwitzMatrix, pert: &'a PerturbationSpec, tol: f64, norm: Norm) -> Self {
        Self { hurwitz, pert, cfg: verification_config(tol, norm) }
    }
}

impl TrajectoryFactory for ErrorSystem<'_> {
    fn state_dim(&self) -> usize {
        self.hurwitz.m()
    }

    fn norm(&self) -> Norm {
        self.cfg.norm
    }

    fn simulate(&self, t0: f64, x0: &[f64], t_end: f64) -> Result<Trajectory, SimError> {
        simulate_error_dynamics(self.hurwitz, self.pert, x0, t0, t_end, &self.cfg)
    }
}

/// Closed loop `X' = (X_2, ..., X_n, F(X, G(X)) + W(t, X))`.
pub struct ClosedLoopSystem<'a> {
    pub model: &'a SystemModel,
    pub ctrl: &'a Controller,
    pub pert: &'a PerturbationSpec,
    pub cfg: SimConfig,
}

impl<'a> ClosedLoopSystem<'a> {
    pub fn new(model: &'a SystemModel, ctrl: &'a Controller, pert: &'a PerturbationSpec, tol: f64, norm: Norm) -> Self {
        Self { model, ctrl, pert, cfg: verification_config(tol, norm) }
    }
}

impl TrajectoryFactory for ClosedLoopSystem<'_> {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn norm(&self) -> Norm {
        self.cfg.norm
    }

    fn simulate(&self, t0: f64, x0: &[f64], t_end: f64) -> Result<Trajectory, SimError> {
        simulate_closed_loop(self.model, self.ctrl, self.pert, x0, t0, t_end, &self.cfg)
    }
}

pub type VectorFieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Plain vector field `x' = f(t, x)`.
pub struct VectorField {
    pub dim: usize,
    pub f: VectorFieldFn,
    pub freq_hint: Option<FreqHint>,
    pub cfg: SimConfig,
}

impl VectorField {
    pub fn new<F>(dim: usize, tol: f64, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { dim, f: Arc::new(f), freq_hint: None, cfg: verification_config(tol, Norm::Euclidean) }
    }
}

impl TrajectoryFactory for VectorField {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn norm(&self) -> Norm {
        self.cfg.norm
    }

    fn simulate(&self, t0: f64, x0: &[f64], t_end: f64) -> Result<Trajectory, SimError> {
        let f = self.f.clone();
        integrate(
            move |t, x, dx| -> Result<(), ModelError> {
                f(t, x, dx);
                Ok(())
            },
            t0,
            x0,
            t_end,
            &self.cfg,
            self.freq_hint.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    fn and(self, other: Verdict) -> Verdict {
        match (self, other) {
            (Verdict::Fail, _) | (_, Verdict::Fail) => Verdict::Fail,
            (Verdict::Pass, Verdict::Pass) => Verdict::Pass,
            _ => Verdict::Inconclusive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub delta0: f64,
    pub t0_grid: Vec<f64>,
    pub eps_levels: Vec<f64>,
    /// Length of every sampled trajectory.
    pub horizon: f64,
    /// Directions per start time and radius.
    pub samples: usize,
    pub seed: u64,
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum VerifyError {
    #[error("invalid verification request: {0}")]
    Invalid(String),
}

/// Bound must hold on at least the final tenth of each trajectory.
pub const SETTLE_FRACTION: f64 = 0.9;
/// Sup over the final tenth below this share of the previous tenth counts
/// as still decaying.
pub const TRENDING_DOWN_RATIO: f64 = 0.999;
const WITNESSES_PER_EPS: usize = 4;

/// `{0, 1, 2, 4, ...}` up to `horizon / 2`.
pub fn alpha_grid(horizon: f64) -> Vec<f64> {
    let mut v = vec![0.0];
    let mut a = 1.0;
    while a <= horizon / 2.0 {
        v.push(a);
        a *= 2.0;
    }
    v
}

/// Three radii `{a, a/2, a/4}`.
fn ladder(a: f64) -> [f64; 3] {
    [a, a / 2.0, a / 4.0]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub sample: usize,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub t: f64,
    pub norm: f64,
    pub eps: f64,
    pub definition: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationFailure {
    pub sample: usize,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    /// Largest ladder radius with a working `α`; `None` if none works.
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
    #[serde(rename = "T")]
    pub t_settle: Option<f64>,
    pub evus: Verdict,
    pub evua: Verdict,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub evus: Verdict,
    pub evua: Verdict,
    pub evuas: Verdict,
    pub delta0: f64,
    /// Common `α0` of the attraction test when one works for every `ε`.
    pub alpha0: Option<f64>,
    pub horizon: f64,
    pub rows: Vec<EpsRow>,
    pub seed: u64,
    pub samples_per_radius: usize,
    pub trajectories: usize,
    pub norm: Norm,
    pub t0_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub witnesses: Vec<Witness>,
    pub simulation_failures: Vec<SimulationFailure>,
    pub note: &'static str,
}

/// Per-sample summary: right-to-left norm records, i.e. the points whose
/// norm exceeds every later norm, in time order.
#[derive(Debug, Clone)]
struct Outcome {
    t0: f64,
    radius: f64,
    x0: Vec<f64>,
    records: Vec<(f64, f64)>,
    last_tenth_sup: f64,
    prev_tenth_sup: f64,
    error: Option<String>,
}

impl Outcome {
    fn sup(&self) -> f64 {
        self.records.first().map_or(0.0, |r| r.1)
    }

    /// Last sampled time with `|x| >= eps`, if any.
    fn last_violation(&self, eps: f64) -> Option<(f64, f64)> {
        let idx = self.records.partition_point(|r| r.1 >= eps);
        (idx > 0).then(|| self.records[idx - 1])
    }

    fn first_violation(&self, eps: f64) -> Option<(f64, f64)> {
        self.records.first().copied().filter(|r| r.1 >= eps)
    }
}

fn summarize(tr: &Trajectory, t0: f64, horizon: f64) -> (Vec<(f64, f64)>, f64, f64) {
    let mut records = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for (t, n) in tr.times.iter().zip(&tr.norms).rev() {
        if *n > best {
            best = *n;
            records.push((*t, *n));
        }
    }
    records.reverse();
    let last = window_sup(tr, t0 + 0.9 * horizon, t0 + horizon);
    let prev = window_sup(tr, t0 + 0.8 * horizon, t0 + 0.9 * horizon);
    (records, last, prev)
}

/// Sampled sup over `[a, b]` including interpolated end values, so coarse
/// step sampling still sees the window.
fn window_sup(tr: &Trajectory, a: f64, b: f64) -> f64 {
    let at = |t: f64| {
        let i = tr.times.partition_point(|s| *s < t);
        if i == 0 {
            return tr.norms[0];
        }
        if i >= tr.times.len() {
            return tr.final_norm();
        }
        let (t0, t1) = (tr.times[i - 1], tr.times[i]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
        tr.norms[i - 1] + w * (tr.norms[i] - tr.norms[i - 1])
    };
    tr.sup_norm_between(a, b).max(at(a)).max(at(b))
}

fn run_samples<S: TrajectoryFactory + ?Sized>(sim: &S, jobs: &[(f64, f64, Vec<f64>)], horizon: f64) -> Vec<Outcome> {
    let run = |(t0, radius, x0): &(f64, f64, Vec<f64>)| {
        let base = Outcome {
            t0: *t0,
            radius: *radius,
            x0: x0.clone(),
            records: Vec::new(),
            last_tenth_sup: f64::NAN,
            prev_tenth_sup: f64::NAN,
            error: None,
        };
        match sim.simulate(*t0, x0, t0 + horizon) {
            Ok(tr) => {
                let (records, last_tenth_sup, prev_tenth_sup) = summarize(&tr, *t0, horizon);
                Outcome { records, last_tenth_sup, prev_tenth_sup, ..base }
            }
            Err(e) => Outcome { error: Some(e.to_string()), ..base },
        }
    };
    #[cfg(feature = "parallel")]
    {
        jobs.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(run).collect()
    }
}

fn validate(cfg: &VerifyConfig) -> Result<(), VerifyError> {
    let bad = |s: String| Err(VerifyError::Invalid(s));
    if !(cfg.delta0 >= 0.0) || !cfg.delta0.is_finite() {
        return bad(format!("delta0 must be finite and nonnegative, got {}", cfg.delta0));
    }
    if cfg.eps_levels.is_empty() || cfg.eps_levels.iter().any(|e| !(*e > 0.0)) || cfg.eps_levels.windows(2).any(|w| !(w[1] < w[0])) {
        return bad("eps_levels must be positive and strictly decreasing".into());
    }
    if cfg.samples == 0 {
        return bad("samples must be at least 1".into());
    }
    if !(cfg.horizon > 0.0) || !cfg.horizon.is_finite() {
        return bad(format!("horizon must be positive, got {}", cfg.horizon));
    }
    if cfg.t0_grid.is_empty() || cfg.t0_grid.iter().any(|t| !t.is_finite()) {
        return bad("t0_grid must be nonempty and finite".into());
    }
    Ok(())
}

/// Monte-Carlo test of EvUS/EvUA. Initial states lie on spheres with
/// directions drawn from a ChaCha8 stream seeded by `cfg.seed`; sample `k`
/// and its outcome do not depend on thread scheduling.
///
/// * EvUS at `ε`: radii `{a, a/2, a/4}` with `a = min(δ0, ε)`; `δ(ε)` is the
///   largest radius for which some `α` keeps every sample with `t0 >= α` and
///   `|x0| <= δ` below `ε` for all sampled `t`, and `α(ε)` the smallest such
///   `α` for that radius.
/// * EvUA: radii `{δ0, δ0/2, δ0/4}`; `α0` is the smallest grid value for
///   which every `ε` has `T(ε) <= 0.9 horizon`, where `T(ε)` is the time
///   after `t0` beyond which all samples stay below `ε`.
pub fn verify_evuas<S: TrajectoryFactory + ?Sized>(sim: &S, cfg: &VerifyConfig) -> Result<StabilityReport, VerifyError> {
    validate(cfg)?;
    let dim = sim.state_dim();
    let alphas: Vec<f64> = alpha_grid(cfg.horizon).into_iter().filter(|a| cfg.t0_grid.iter().any(|t| t >= a)).collect();

    let mut radii: Vec<f64> = ladder(cfg.delta0).to_vec();
    for &eps in &cfg.eps_levels {
        radii.extend(ladder(cfg.delta0.min(eps)));
    }
    radii.sort_by(|a, b| b.total_cmp(a));
    radii.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jobs = Vec::new();
    for &t0 in &cfg.t0_grid {
        for &r in &radii {
            for _ in 0..cfg.samples {
                jobs.push((t0, r, random_on_sphere(&mut rng, dim, r)));
            }
        }
    }
    let outcomes = run_samples(sim, &jobs, cfg.horizon);
    let failures: Vec<SimulationFailure> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| {
            o.error.as_ref().map(|m| SimulationFailure { sample: i, t0: o.t0, x0: o.x0.clone(), message: m.clone() })
        })
        .collect();
    let healthy = |o: &Outcome| o.error.is_none();
    let mut witnesses = Vec::new();

    // EvUS.
    let mut evus_rows = Vec::new();
    for &eps in &cfg.eps_levels {
        let lad = ladder(cfg.delta0.min(eps));
        let ok = |delta: f64, alpha: f64| {
            outcomes
                .iter()
                .filter(|o| healthy(o) && o.t0 >= alpha && lad.contains(&o.radius) && o.radius <= delta)
                .all(|o| o.sup() < eps)
        };
        let found = lad.iter().find_map(|&d| alphas.iter().find(|&&a| ok(d, a)).map(|&a| (d, a)));
        let verdict = match found {
            Some(_) if failures.is_empty() => Verdict::Pass,
            Some(_) => Verdict::Inconclusive,
            None => {
                // Witnesses from the most lenient candidate.
                let (d, a) = (lad[2], *alphas.last().unwrap_or(&0.0));
                for (i, o) in outcomes.iter().enumerate() {
                    if witnesses.iter().filter(|w: &&Witness| w.eps == eps && w.definition == "evus").count() >= WITNESSES_PER_EPS {
                        break;
                    }
                    if healthy(o) && o.t0 >= a && lad.contains(&o.radius) && o.radius <= d {
                        if let Some((t, n)) = o.first_violation(eps) {
                            witnesses.push(Witness { sample: i, t0: o.t0, x0: o.x0.clone(), t, norm: n, eps, definition: "evus" });
                        }
                    }
                }
                if alphas.is_empty() {
                    Verdict::Inconclusive
                } else {
                    Verdict::Fail
                }
            }
        };
        evus_rows.push((found, verdict));
    }

    // EvUA.
    let attract = ladder(cfg.delta0);
    let settle = |eps: f64, alpha: f64| -> Option<f64> {
        let mut worst = 0.0_f64;
        for o in outcomes.iter().filter(|o| healthy(o) && o.t0 >= alpha && attract.contains(&o.radius)) {
            if let Some((t, _)) = o.last_violation(eps) {
                worst = worst.max(t - o.t0);
            }
        }
        (worst <= SETTLE_FRACTION * cfg.horizon).then_some(worst)
    };
    let alpha0 = alphas.iter().copied().find(|&a| cfg.eps_levels.iter().all(|&e| settle(e, a).is_some()));
    let mut evua_rows = Vec::new();
    for &eps in &cfg.eps_levels {
        let (t_settle, verdict) = match alpha0 {
            Some(a) => (settle(eps, a), if failures.is_empty() { Verdict::Pass } else { Verdict::Inconclusive }),
            None => {
                let a = alphas.last().copied();
                match a.and_then(|a| settle(eps, a)) {
                    Some(t) => (Some(t), Verdict::Inconclusive),
                    None => {
                        let a = a.unwrap_or(f64::INFINITY);
                        let offenders: Vec<(usize, &Outcome)> = outcomes
                            .iter()
                            .enumerate()
                            .filter(|(_, o)| healthy(o) && o.t0 >= a && attract.contains(&o.radius))
                            .filter(|(_, o)| o.last_violation(eps).is_some_and(|(t, _)| t - o.t0 > SETTLE_FRACTION * cfg.horizon))
                            .collect();
                        let still_decaying = offenders.iter().all(|(_, o)| o.last_tenth_sup <= TRENDING_DOWN_RATIO * o.prev_tenth_sup);
                        for (i, o) in offenders.iter().take(WITNESSES_PER_EPS) {
                            let (t, n) = o.last_violation(eps).expect("offender");
                            witnesses.push(Witness { sample: *i, t0: o.t0, x0: o.x0.clone(), t, norm: n, eps, definition: "evua" });
                        }
                        let v = if offenders.is_empty() || still_decaying { Verdict::Inconclusive } else { Verdict::Fail };
                        (None, v)
                    }
                }
            }
        };
        evua_rows.push((t_settle, verdict));
    }

    let rows: Vec<EpsRow> = cfg
        .eps_levels
        .iter()
        .zip(evus_rows.iter().zip(&evua_rows))
        .map(|(&eps, ((found, us), (t, ua)))| EpsRow {
            eps,
            delta: found.map(|f| f.0),
            alpha: found.map(|f| f.1),
            t_settle: *t,
            evus: *us,
            evua: *ua,
            verdict: us.and(*ua),
        })
        .collect();
    let evus = rows.iter().fold(Verdict::Pass, |v, r| v.and(r.evus));
    let evua = rows.iter().fold(Verdict::Pass, |v, r| v.and(r.evua));
    Ok(StabilityReport {
        evus,
        evua,
        evuas: evus.and(evua),
        delta0: cfg.delta0,
        alpha0,
        horizon: cfg.horizon,
        rows,
        seed: cfg.seed,
        samples_per_radius: cfg.samples,
        trajectories: jobs.len(),
        norm: sim.norm(),
        t0_grid: cfg.t0_grid.clone(),
        alpha_grid: alphas,
        witnesses,
        simulation_failures: failures,
        note: "sampled evidence only: start times and initial states are finite samples of the quantified sets",
    })
}

/// Re-simulates a witness and returns the norm at the witness time.
pub fn replay_witness<S: TrajectoryFactory + ?Sized>(sim: &S, w: &Witness, horizon: f64) -> Result<f64, SimError> {
    let tr = sim.simulate(w.t0, &w.x0, w.t0 + horizon)?;
    let i = tr.times.iter().position(|t| *t == w.t).or_else(|| {
        tr.times.iter().enumerate().min_by(|a, b| (a.1 - w.t).abs().total_cmp(&(b.1 - w.t).abs())).map(|p| p.0)
    });
    Ok(i.map_or(f64::NAN, |i| tr.norms[i]))
}

/// Largest level `r in (0, ε]` whose sampled initial states (spheres of
/// radius `r, r/2, r/4`) keep `|x(t)| < ε` on `[t0, t0 + horizon]`, found
/// by bisection down to `ε 2^-40`; `0` when none passes.
pub fn estimate_delta_of_eps<S: TrajectoryFactory + ?Sized>(
    sim: &S,
    eps: f64,
    t0: f64,
    horizon: f64,
    directions: usize,
    seed: u64,
) -> Result<DeltaEstimate, VerifyError> {
    if !(eps > 0.0) || !(horizon > 0.0) || directions == 0 {
        return Err(VerifyError::Invalid(format!("need eps > 0, horizon > 0, directions >= 1 (got {eps}, {horizon}, {directions})")));
    }
    let dim = sim.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit: Vec<Vec<f64>> = (0..directions).map(|_| random_on_sphere(&mut rng, dim, 1.0)).collect();
    let mut failures = Vec::new();
    let mut tested = 0usize;
    let mut passes = |r: f64, failures: &mut Vec<String>| -> bool {
        let jobs: Vec<(f64, f64, Vec<f64>)> = ladder(r)
            .iter()
            .flat_map(|&rr| unit.iter().map(move |u| (t0, rr, u.iter().map(|v| v * rr).collect())))
            .collect();
        tested += 1;
        run_samples(sim, &jobs, horizon).iter().all(|o| match &o.error {
            Some(m) => {
                failures.push(m.clone());
                false
            }
            None => o.sup() < eps,
        })
    };
    let mut hi = eps * (1.0 - 1e-12);
    let mut lo = 0.0;
    if passes(hi, &mut failures) {
        lo = hi;
    } else {
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if passes(mid, &mut failures) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Ok(DeltaEstimate { eps, delta: lo, levels_tested: tested, simulation_failures: failures })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaEstimate {
    pub eps: f64,
    pub delta: f64,
    pub levels_tested: usize,
    pub simulation_failures: Vec<String>,
}

/// `|x(t)| <= κ |x0| e^{-μ (t - t0)}` fitted to sampled trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlEnvelope {
    pub kappa: f64,
    pub mu: f64,
    /// RMS residual of the log-linear fit.
    pub fit_residual: f64,
    /// Relative slack used when checking the envelope.
    pub slack: f64,
    pub points: usize,
    pub t0_range: [f64; 2],
    pub x0_norm_range: [f64; 2],
    pub s_max: f64,
}

impl KlEnvelope {
    pub fn bound(&self, r0: f64, s: f64) -> f64 {
        self.kappa * r0 * (-self.mu * s).exp()
    }

    pub fn holds_on(&self, trajectories: &[Trajectory]) -> bool {
        trajectories.iter().all(|tr| {
            let (t0, r0) = (tr.times[0], tr.norms[0]);
            tr.times.iter().zip(&tr.norms).all(|(t, n)| *n <= self.bound(r0, t - t0) * (1.0 + self.slack))
        })
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum KlFitError {
    #[error("no decay: fitted rate mu = {mu:.3e} <= 0")]
    NoDecay { mu: f64 },
    #[error("cannot fit envelope: {0}")]
    Invalid(String),
}

/// Share of each trajectory treated as transient.
pub const TRANSIENT_FRACTION: f64 = 0.2;
/// Points below this share of `|x0|` are at the numerical floor.
pub const FLOOR_FRACTION: f64 = 1e-6;
pub const ENVELOPE_SLACK: f64 = 1e-9;

/// Pooled least squares of `log|x(t)| - log|x0|` on `-(t - t0)` over the
/// post-transient part of every trajectory gives `μ`; `κ` is the smallest
/// constant (at least 1) making the envelope hold at every sample.
pub fn fit_kl_envelope(trajectories: &[Trajectory]) -> Result<KlEnvelope, KlFitError> {
    if trajectories.is_empty() {
        return Err(KlFitError::Invalid("no trajectories".into()));
    }
    let norm = trajectories[0].diagnostics.norm;
    if trajectories.iter().any(|t| t.diagnostics.norm != norm) {
        return Err(KlFitError::Invalid("trajectories use different norms".into()));
    }
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut pts = Vec::new();
    for tr in trajectories {
        let (t0, r0) = (tr.times[0], tr.norms[0]);
        if !(r0 > 0.0) {
            return Err(KlFitError::Invalid(format!("zero initial state at t0 = {t0}")));
        }
        let span = tr.final_time() - t0;
        for (t, r) in tr.times.iter().zip(&tr.norms) {
            let s = t - t0;
            if s >= TRANSIENT_FRACTION * span && *r > FLOOR_FRACTION * r0 {
                let y = (r / r0).ln();
                sx += s;
                sy += y;
                sxx += s * s;
                sxy += s * y;
                n += 1;
                pts.push((s, y));
            }
        }
    }
    if n < 2 {
        return Err(KlFitError::Invalid("fewer than two post-transient points".into()));
    }
    let nf = n as f64;
    let den = nf * sxx - sx * sx;
    if !(den > 0.0) {
        return Err(KlFitError::Invalid("post-transient points share one time".into()));
    }
    let slope = (nf * sxy - sx * sy) / den;
    let intercept = (sy - slope * sx) / nf;
    let mu = -slope;
    if !(mu > 0.0) {
        return Err(KlFitError::NoDecay { mu });
    }
    let fit_residual = (pts.iter().map(|(s, y)| (y - (intercept + slope * s)).powi(2)).sum::<f64>() / nf).sqrt();
    let mut kappa = 1.0_f64;
    let mut t0_range = [f64::INFINITY, f64::NEG_INFINITY];
    let mut x0_range = [f64::INFINITY, f64::NEG_INFINITY];
    let mut s_max = 0.0_f64;
    for tr in trajectories {
        let (t0, r0) = (tr.times[0], tr.norms[0]);
        t0_range = [t0_range[0].min(t0), t0_range[1].max(t0)];
        x0_range = [x0_range[0].min(r0), x0_range[1].max(r0)];
        for (t, r) in tr.times.iter().zip(&tr.norms) {
            let s = t - t0;
            s_max = s_max.max(s);
            kappa = kappa.max(r / (r0 * (-mu * s).exp()));
        }
    }
    Ok(KlEnvelope { kappa, mu, fit_residual, slack: ENVELOPE_SLACK, points: n, t0_range, x0_norm_range: x0_range, s_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::catalog_perturbation;
    use crate::synthesis::build_hurwitz;
    use nalgebra::DMatrix;

    fn example_hurwitz() -> HurwitzMatrix {
        build_hurwitz(DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -1.5])).unwrap()
    }

    fn scalar(rate: f64) -> VectorField {
        VectorField::new(1, 1e-9, move |_, x, dx| dx[0] = rate * x[0])
    }

    fn base_cfg() -> VerifyConfig {
        VerifyConfig { delta0: 0.5, t0_grid: vec![0.0, 1.0, 2.0, 4.0], eps_levels: vec![1.0, 0.5, 0.1, 0.02], horizon: 16.0, samples: 4, seed: 11 }
    }

    #[test]
    fn alpha_grid_is_geometric() {
        assert_eq!(alpha_grid(16.0), vec![0.0, 1.0, 2.0, 4.0, 8.0]);
        assert_eq!(alpha_grid(1.0), vec![0.0]);
    }

    #[test]
    fn unperturbed_example_matrix_is_uas() {
        let h = example_hurwitz();
        let w = PerturbationSpec::zero(2);
        let sys = ErrorSystem::new(&h, &w, 1e-9, Norm::Euclidean);
        let r = verify_evuas(&sys, &base_cfg()).unwrap();
        assert_eq!(r.evuas, Verdict::Pass, "{r:#?}");
        assert!(r.rows.iter().all(|row| row.alpha == Some(0.0)));
        assert_eq!(r.alpha0, Some(0.0));
        assert!(r.witnesses.is_empty());
        // T(ε) close to ln(κ δ0 / ε) with unit rate, and monotone.
        for w in r.rows.windows(2) {
            assert!(w[1].delta.unwrap() <= w[0].delta.unwrap());
            assert!(w[1].t_settle.unwrap() >= w[0].t_settle.unwrap());
        }
        let last = r.rows.last().unwrap();
        assert!(last.t_settle.unwrap() > (0.5f64 / 0.02).ln() - 0.5);
    }

    #[test]
    fn constant_forcing_fails_attraction() {
        let h = example_hurwitz();
        let w = catalog_perturbation("constant_1_0", 2).unwrap();
        let sys = ErrorSystem::new(&h, &w, 1e-9, Norm::Euclidean);
        let cfg = VerifyConfig { eps_levels: vec![0.5, 0.1], ..base_cfg() };
        let r = verify_evuas(&sys, &cfg).unwrap();
        assert_eq!(r.evua, Verdict::Fail);
        assert_ne!(r.evuas, Verdict::Pass);
        let ws: Vec<&Witness> = r.witnesses.iter().filter(|w| w.definition == "evua").collect();
        assert!(!ws.is_empty());
        for w in ws {
            assert!((w.norm - 1.0).abs() < 0.01, "{w:?}");
            assert!(replay_witness(&sys, w, cfg.horizon).unwrap() >= w.eps);
        }
    }

    #[test]
    fn zero_dynamics_from_origin() {
        let sys = VectorField::new(2, 1e-9, |_, _, dx| dx.fill(0.0));
        let cfg = VerifyConfig { delta0: 0.0, eps_levels: vec![1.0, 1e-3, 1e-9], ..base_cfg() };
        let r = verify_evuas(&sys, &cfg).unwrap();
        assert_eq!(r.evuas, Verdict::Pass);
        assert!(r.rows.iter().all(|row| row.t_settle == Some(0.0)));
    }

    #[test]
    fn replay_is_deterministic() {
        let h = example_hurwitz();
        let w = catalog_perturbation("constant_1_0", 2).unwrap();
        let sys = ErrorSystem::new(&h, &w, 1e-8, Norm::Euclidean);
        let cfg = VerifyConfig { eps_levels: vec![0.5], samples: 3, ..base_cfg() };
        let a = verify_evuas(&sys, &cfg).unwrap();
        let b = verify_evuas(&sys, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = verify_evuas(&sys, &VerifyConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.witnesses, c.witnesses);
    }

    #[test]
    fn short_horizon_decay_is_inconclusive() {
        let sys = scalar(-0.05);
        let cfg = VerifyConfig { delta0: 1.0, t0_grid: vec![0.0], eps_levels: vec![0.1], horizon: 4.0, samples: 2, seed: 1 };
        let r = verify_evuas(&sys, &cfg).unwrap();
        assert_eq!(r.evua, Verdict::Inconclusive);
    }

    #[test]
    fn invalid_configs() {
        let sys = scalar(-1.0);
        for cfg in [
            VerifyConfig { eps_levels: vec![0.1, 0.5], ..base_cfg() },
            VerifyConfig { eps_levels: vec![], ..base_cfg() },
            VerifyConfig { samples: 0, ..base_cfg() },
            VerifyConfig { delta0: -1.0, ..base_cfg() },
        ] {
            assert!(verify_evuas(&sys, &cfg).is_err());
        }
    }

    #[test]
    fn simulation_failures_cap_the_verdict() {
        let sys = VectorField::new(1, 1e-9, |t, x, dx| dx[0] = if t > 3.0 { x[0] * x[0] * 1e6 } else { -x[0] });
        let cfg = VerifyConfig { delta0: 0.5, t0_grid: vec![0.0], eps_levels: vec![1.0], horizon: 6.0, samples: 2, seed: 3 };
        let r = verify_evuas(&sys, &cfg).unwrap();
        assert!(!r.simulation_failures.is_empty());
        assert_ne!(r.evuas, Verdict::Pass);
    }

    #[test]
    fn kl_fit_scalar_decay() {
        let sys = scalar(-1.0);
        let trs: Vec<Trajectory> = [1.0, -0.5, 2.0].iter().map(|&x0| sys.simulate(0.0, &[x0], 10.0).unwrap()).collect();
        let env = fit_kl_envelope(&trs).unwrap();
        assert!((env.mu - 1.0).abs() < 0.01, "{env:?}");
        assert!((env.kappa - 1.0).abs() < 0.01);
        assert!(env.holds_on(&trs));
    }

    #[test]
    fn kl_fit_example_matrix() {
        let h = example_hurwitz();
        let w = PerturbationSpec::zero(2);
        let sys = ErrorSystem::new(&h, &w, 1e-10, Norm::Euclidean);
        let trs: Vec<Trajectory> =
            [[-1.0, 1.5], [1.0, 0.0], [0.0, 1.0], [0.3, -0.7]].iter().map(|x0| sys.simulate(0.0, x0, 20.0).unwrap()).collect();
        let env = fit_kl_envelope(&trs).unwrap();
        assert!((env.mu - 1.0).abs() < 0.05, "{env:?}");
        assert!(env.kappa > 1.0);
        assert!(env.holds_on(&trs));
    }

    #[test]
    fn kl_fit_rejects_constants() {
        let sys = VectorField::new(1, 1e-9, |_, _, dx| dx[0] = 0.0);
        let tr = sys.simulate(0.0, &[2.0], 5.0).unwrap();
        assert!(matches!(fit_kl_envelope(&[tr]), Err(KlFitError::NoDecay { mu }) if mu <= 0.0));
    }

    #[test]
    fn delta_of_eps_examples() {
        let d = estimate_delta_of_eps(&scalar(-1.0), 0.1, 0.0, 10.0, 4, 1).unwrap();
        assert!((d.delta - 0.1).abs() < 1e-9);
        let d = estimate_delta_of_eps(&scalar(1.0), 0.1, 0.0, 50.0, 4, 1).unwrap();
        assert_eq!(d.delta, 0.0);

        let h = example_hurwitz();
        let w = PerturbationSpec::zero(2);
        let sys = ErrorSystem::new(&h, &w, 1e-9, Norm::Euclidean);
        let d = estimate_delta_of_eps(&sys, 1.0, 0.0, 10.0, 16, 2).unwrap();
        let trs: Vec<Trajectory> = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-0.6, 0.8]].iter().map(|x0| sys.simulate(0.0, x0, 20.0).unwrap()).collect();
        let env = fit_kl_envelope(&trs).unwrap();
        assert!(d.delta <= 1.0 && d.delta >= 1.0 / env.kappa - 1e-6, "{d:?} {env:?}");
    }
}

