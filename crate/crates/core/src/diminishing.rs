//! Unit-window integral metric `sup_{0<=l<=1} |int_t^{t+l} h|`, profiles of
//! it over time grids, and classification of perturbations.
//!
//! The window integral is assembled from a mesh whose cells never exceed an
//! eighth of the local oscillation period, so rapidly oscillating (even
//! unbounded) signals such as `t cos(t^4)` are resolved cell by cell.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelError, PerturbationSpec};
use crate::norm::Norm;
use crate::quad::{self, gk15, QuadError};
use crate::signal::Signal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiminishingError {
    #[error("window integral at t = {t}: budget exceeded, best estimate {estimate:.6e} +/- {error_bound:.3e}")]
    BudgetExceeded { t: f64, estimate: f64, error_bound: f64 },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Quadrature and search settings for the window metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowConfig {
    /// Absolute tolerance on the running integral.
    pub quad_tol: f64,
    /// Largest mesh cell when the signal is slowly varying.
    pub default_step: f64,
    /// Cells per local oscillation period (at least).
    pub cells_per_period: f64,
    /// Golden-section tolerance on the maximising `lambda`.
    pub lambda_tol: f64,
    /// Integrand evaluations allowed per window.
    pub max_evals: usize,
    pub norm: Norm,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            quad_tol: 1e-9,
            default_step: 1.0 / 256.0,
            cells_per_period: 8.0,
            lambda_tol: 1e-8,
            max_evals: 50_000_000,
            norm: Norm::Euclidean,
        }
    }
}

impl WindowConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.quad_tol = tol;
        self
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }
}

/// Window metric at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowSup {
    pub t: f64,
    pub value: f64,
    /// Maximising window length.
    pub lambda: f64,
    /// Accumulated quadrature error bound on the running integral.
    pub error_bound: f64,
    pub cells: usize,
    pub evals: usize,
}

/// Estimated angular frequency on each of `segments` equal parts of
/// `[a, b]`, from sign changes of the sampled components.
fn scan_frequency(h: &Signal, a: f64, b: f64, segments: usize, per_segment: usize) -> Vec<f64> {
    let d = h.dim();
    let seg_len = (b - a) / segments as f64;
    let mut prev = vec![0.0; d];
    let mut cur = vec![0.0; d];
    let mut omegas = Vec::with_capacity(segments);
    h.eval(a, &mut prev);
    for s in 0..segments {
        let mut crossings = 0usize;
        for k in 1..=per_segment {
            let tau = a + seg_len * (s as f64 + k as f64 / per_segment as f64);
            h.eval(tau, &mut cur);
            let c = prev.iter().zip(&cur).filter(|(p, q)| (**p > 0.0 && **q < 0.0) || (**p < 0.0 && **q > 0.0)).count();
            crossings += c;
            std::mem::swap(&mut prev, &mut cur);
        }
        // One sign change per half period per component.
        let per_comp = crossings as f64 / d.max(1) as f64;
        omegas.push(PI * per_comp / seg_len);
    }
    omegas
}

/// Mesh nodes on `[a, b]` with cells bounded by `default_step` and by a
/// fraction of the local period.
fn build_mesh(h: &Signal, a: f64, b: f64, cfg: &WindowConfig) -> Vec<f64> {
    const SEGMENTS: usize = 64;
    let scanned = if h.freq_hint().is_none() { Some(scan_frequency(h, a, b, SEGMENTS, 64)) } else { None };
    let omega_at = |tau: f64| -> f64 {
        match (&scanned, h.angular_frequency(tau)) {
            (_, Some(w)) => w,
            (Some(s), None) => {
                let idx = (((tau - a) / (b - a)) * SEGMENTS as f64).floor().clamp(0.0, (SEGMENTS - 1) as f64) as usize;
                s[idx]
            }
            (None, None) => 0.0,
        }
    };
    let cap = |tau: f64| -> f64 {
        let w = omega_at(tau).abs();
        if w > 0.0 {
            cfg.default_step.min(2.0 * PI / w / cfg.cells_per_period)
        } else {
            cfg.default_step
        }
    };
    let mut nodes = vec![a];
    let mut tau = a;
    while tau < b {
        let s0 = cap(tau);
        let s = s0.min(cap((tau + s0).min(b)));
        let mut next = tau + s;
        if next >= b || b - next < 1e-12 * (1.0 + b.abs()) {
            next = b;
        }
        nodes.push(next);
        tau = next;
    }
    nodes
}

struct CellIntegrator<'a> {
    h: &'a Signal,
    cfg: &'a WindowConfig,
    evals: usize,
    err: f64,
    exhausted: bool,
}

impl CellIntegrator<'_> {
    fn cell(&mut self, a: f64, b: f64, tol: f64) -> Vec<f64> {
        let d = self.h.dim();
        let h = self.h;
        if self.exhausted || self.evals >= self.cfg.max_evals {
            self.exhausted = true;
            let (v, e) = gk15(&mut |t, o: &mut [f64]| h.eval(t, o), a, b, d);
            self.evals += 15;
            self.err += e;
            return v;
        }
        let budget = self.cfg.max_evals - self.evals;
        match quad::integrate(|t, o| h.eval(t, o), a, b, d, tol, budget) {
            Ok(r) => {
                self.evals += r.evals;
                self.err += r.error;
                r.value
            }
            Err(QuadError::BudgetExceeded { value, error_bound }) => {
                self.evals = self.cfg.max_evals;
                self.exhausted = true;
                self.err += error_bound;
                value
            }
            Err(QuadError::Invalid(_)) => {
                self.exhausted = true;
                self.err = f64::INFINITY;
                vec![f64::NAN; d]
            }
        }
    }
}

/// `sup_{0 <= lambda <= 1} |int_t^{t+lambda} h(tau) d tau|`.
pub fn window_integral_sup(h: &Signal, t: f64, cfg: &WindowConfig) -> Result<WindowSup, DiminishingError> {
    if !(cfg.quad_tol > 0.0) || !t.is_finite() {
        return Err(DiminishingError::Invalid(format!("t = {t}, quad_tol = {}", cfg.quad_tol)));
    }
    let d = h.dim();
    let nodes = build_mesh(h, t, t + 1.0, cfg);
    let ncells = nodes.len() - 1;
    let cell_tol = cfg.quad_tol / (2.0 * ncells as f64);
    let mut ci = CellIntegrator { h, cfg, evals: 0, err: 0.0, exhausted: false };

    let mut running = vec![0.0; d];
    let mut cumulative = Vec::with_capacity(nodes.len());
    cumulative.push(running.clone());
    for w in nodes.windows(2) {
        let v = ci.cell(w[0], w[1], cell_tol);
        for c in 0..d {
            running[c] += v[c];
        }
        cumulative.push(running.clone());
    }
    let norms: Vec<f64> = cumulative.iter().map(|v| cfg.norm.of(v)).collect();
    let (k_best, &node_best) = norms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("mesh has nodes");
    let mut best = node_best;
    let mut best_lambda = nodes[k_best] - t;

    // Golden-section refinement of the maximiser within the neighbouring cells.
    if !ci.exhausted && ncells > 0 {
        let lo_idx = k_best.saturating_sub(1);
        let hi_idx = (k_best + 1).min(ncells);
        let base = cumulative[lo_idx].clone();
        let origin = nodes[lo_idx];
        let value_at = |tau: f64, ci: &mut CellIntegrator| -> f64 {
            let v = ci.cell(origin, tau, cell_tol);
            let mut s = base.clone();
            for c in 0..d {
                s[c] += v[c];
            }
            cfg.norm.of(&s)
        };
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (nodes[lo_idx], nodes[hi_idx]);
        let mut x1 = b - inv_phi * (b - a);
        let mut x2 = a + inv_phi * (b - a);
        let mut f1 = value_at(x1, &mut ci);
        let mut f2 = value_at(x2, &mut ci);
        while b - a > cfg.lambda_tol {
            if f1 >= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - inv_phi * (b - a);
                f1 = value_at(x1, &mut ci);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + inv_phi * (b - a);
                f2 = value_at(x2, &mut ci);
            }
        }
        for (x, f) in [(x1, f1), (x2, f2)] {
            if f > best {
                best = f;
                best_lambda = x - t;
            }
        }
    }

    if ci.exhausted {
        return Err(DiminishingError::BudgetExceeded { t, estimate: best, error_bound: ci.err });
    }
    Ok(WindowSup {
        t,
        value: best,
        lambda: best_lambda.clamp(0.0, 1.0),
        error_bound: ci.err,
        cells: ncells,
        evals: ci.evals,
    })
}

/// Outcome of the decreasing-trend test on a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendVerdict {
    Diminishing,
    NotDiminishing,
    Inconclusive,
}

/// Slack on block maxima relative to the block starting at `t = 2`.
pub const DECAY_SLACK: f64 = 1.1;
/// Required overall reduction from the first to the last block.
pub const DECAY_RATIO: f64 = 0.2;
/// Last/first block ratio at or above which a profile counts as non-decaying.
pub const STALL_RATIO: f64 = 0.5;

/// Decreasing-trend test. Block maxima `M_k` are taken over grid points in
/// `[k, k+1)`. A profile is diminishing when `M_k <= 1.1 M_2` for every
/// `k >= 2` and `M_last <= 0.2 M_first`; it is non-diminishing when
/// `M_last >= 0.5 M_first`.
pub fn trend_verdict(t_grid: &[f64], values: &[f64]) -> TrendVerdict {
    let mut blocks: Vec<(i64, f64)> = Vec::new();
    for (&t, &v) in t_grid.iter().zip(values) {
        let k = t.floor() as i64;
        match blocks.last_mut() {
            Some((kb, m)) if *kb == k => *m = m.max(v),
            _ => blocks.push((k, v)),
        }
    }
    if blocks.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return TrendVerdict::Inconclusive;
    }
    let first = blocks[0].1;
    let last = blocks[blocks.len() - 1].1;
    let reference = blocks.iter().find(|(k, _)| *k >= 2).map(|b| b.1);
    let bounded_by_ref = match reference {
        Some(r) => blocks.iter().filter(|(k, _)| *k >= 2).all(|(_, m)| *m <= DECAY_SLACK * r),
        None => true,
    };
    if bounded_by_ref && last <= DECAY_RATIO * first {
        TrendVerdict::Diminishing
    } else if last >= STALL_RATIO * first {
        TrendVerdict::NotDiminishing
    } else {
        TrendVerdict::Inconclusive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowMetricProfile {
    pub signal: String,
    pub t_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Analytic bound per grid point, for catalog signals that have one.
    pub bounds: Option<Vec<f64>>,
    /// Largest achieved quadrature error bound over the grid.
    pub quad_tol: f64,
    pub norm: Norm,
    pub trend: TrendVerdict,
    /// Grid indices whose value is a best estimate after the budget ran out.
    pub partial: Vec<usize>,
}

/// Window metric over an increasing time grid, with a trend verdict.
pub fn diminishing_profile(h: &Signal, t_grid: &[f64], cfg: &WindowConfig) -> Result<WindowMetricProfile, DiminishingError> {
    if t_grid.is_empty() {
        return Err(DiminishingError::Invalid("empty time grid".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DiminishingError::Invalid("time grid must be strictly increasing".into()));
    }
    let eval = |t: f64| window_integral_sup(h, t, cfg);
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        t_grid.par_iter().map(|&t| eval(t)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = t_grid.iter().map(|&t| eval(t)).collect();

    let mut values = Vec::with_capacity(t_grid.len());
    let mut lambdas = Vec::with_capacity(t_grid.len());
    let mut partial = Vec::new();
    let mut achieved = 0.0_f64;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(w) => {
                values.push(w.value);
                lambdas.push(w.lambda);
                achieved = achieved.max(w.error_bound);
            }
            Err(DiminishingError::BudgetExceeded { estimate, error_bound, .. }) => {
                values.push(estimate);
                lambdas.push(f64::NAN);
                achieved = achieved.max(error_bound);
                partial.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    let bounds = if h.window_bound(0.0).is_some() {
        Some(t_grid.iter().map(|&t| h.window_bound(t).unwrap_or(f64::NAN)).collect())
    } else {
        None
    };
    let trend = if partial.is_empty() { trend_verdict(t_grid, &values) } else { TrendVerdict::Inconclusive };
    Ok(WindowMetricProfile {
        signal: h.name().to_string(),
        t_grid: t_grid.to_vec(),
        values,
        lambdas,
        bounds,
        quad_tol: achieved,
        norm: cfg.norm,
        trend,
        partial,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TriState {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    Supported,
    Refuted,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationClassification {
    pub perturbation: String,
    pub probe_radius: f64,
    pub t_horizon: f64,
    pub vanishing_at_x0: TriState,
    pub vanishing_at_tinf: TriState,
    pub diminishing_evidence: Evidence,
    pub column_profiles: Vec<WindowMetricProfile>,
    pub bounded_on_window: bool,
    /// Sampled sup over `[0, t_horizon]` of the column norms of `D(t)`
    /// (of `|W(t)|` for time-only perturbations).
    pub sampled_sup: f64,
    /// Sampled sups used for the tail tests: `[0, H/4]`, `[H/4, H/2]`, `[H/2, H]`.
    pub tail_sups_at_x0: [f64; 3],
    pub tail_sups_on_ball: [f64; 3],
}

/// Signals below this magnitude are treated as zero by the tail tests.
pub const ZERO_TOL: f64 = 1e-12;
/// Late/early sup ratio above which a sampled signal counts as growing.
pub const GROWTH_RATIO: f64 = 1.25;
const DENSE_SAMPLES: usize = 8192;

/// Dense time samples on `[a, b]`: a uniform grid plus the geometric tail
/// grid `{H / 2^j}` points that fall inside.
fn sample_times(a: f64, b: f64, horizon: f64) -> Vec<f64> {
    let mut ts: Vec<f64> = (0..=DENSE_SAMPLES).map(|i| a + (b - a) * i as f64 / DENSE_SAMPLES as f64).collect();
    ts.extend((0..16).map(|j| horizon / 2f64.powi(j)).filter(|t| *t >= a && *t <= b));
    ts
}

/// Yes: negligible on the late half. No: the late half keeps at least half
/// the size seen on `[H/4, H/2]`. Unknown otherwise.
fn tail_verdict(sups: [f64; 3]) -> TriState {
    let [_, mid, late] = sups;
    if late <= ZERO_TOL {
        TriState::Yes
    } else if late >= STALL_RATIO * mid {
        TriState::No
    } else {
        TriState::Unknown
    }
}

fn windowed_sups(horizon: f64, mut f: impl FnMut(f64) -> Result<f64, ModelError>) -> Result<[f64; 3], ModelError> {
    let mut out = [0.0; 3];
    for (k, (a, b)) in [(0.0, 0.25), (0.25, 0.5), (0.5, 1.0)].into_iter().enumerate() {
        for t in sample_times(a * horizon, b * horizon, horizon) {
            out[k] = f64::max(out[k], f(t)?);
        }
    }
    Ok(out)
}

/// Classifies `pert` by sampling on `[0, t_horizon]` and the closed ball of
/// radius `probe_radius`; diminishing evidence comes from profiles of the
/// columns of `D` on the integer grid `0..=floor(t_horizon)`.
pub fn classify(
    pert: &PerturbationSpec,
    probe_radius: f64,
    t_horizon: f64,
    cfg: &WindowConfig,
) -> Result<PerturbationClassification, DiminishingError> {
    if !(t_horizon >= 2.0) || !(probe_radius > 0.0) {
        return Err(DiminishingError::Invalid(format!(
            "need t_horizon >= 2 and probe_radius > 0 (got {t_horizon}, {probe_radius})"
        )));
    }
    let m = pert.dim();
    let sd = pert.state_dim().unwrap_or(m);
    let norm = cfg.norm;

    let origin = vec![0.0; sd];
    let mut ball = vec![origin.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba11);
    for k in 0..8 {
        let r = if k < 4 { probe_radius } else { 0.5 * probe_radius };
        ball.push(random_on_sphere(&mut rng, sd, r));
    }

    let mut w = vec![0.0; m];
    let at_x0 = windowed_sups(t_horizon, |t| {
        pert.eval(t, &origin, &mut w)?;
        Ok(norm.of(&w))
    })?;
    let on_ball = windowed_sups(t_horizon, |t| {
        let mut s = 0.0_f64;
        for x in &ball {
            pert.eval(t, x, &mut w)?;
            s = s.max(norm.of(&w));
        }
        Ok(s)
    })?;

    let grid: Vec<f64> = (0..=t_horizon.floor() as usize).map(|k| k as f64).collect();
    let columns = pert.d_columns().unwrap_or_else(|| vec![crate::signal::catalog_signal("zero").expect("catalog")]);
    let mut profiles = Vec::with_capacity(columns.len());
    for col in &columns {
        profiles.push(diminishing_profile(col, &grid, cfg)?);
    }
    let diminishing_evidence = if profiles.iter().all(|p| p.trend == TrendVerdict::Diminishing) {
        Evidence::Supported
    } else if profiles.iter().any(|p| p.trend == TrendVerdict::NotDiminishing) {
        Evidence::Refuted
    } else {
        Evidence::Inconclusive
    };

    // Boundedness of the columns of D (of W itself when time-only).
    let time_only = matches!(pert.kind(), crate::model::PerturbationKind::TimeOnly(_));
    let mut buf = vec![0.0; m];
    let col_sups = windowed_sups(t_horizon, |t| {
        if time_only {
            pert.eval(t, &origin, &mut buf)?;
            return Ok(norm.of(&buf));
        }
        let mut s = 0.0_f64;
        for col in &columns {
            col.eval(t, &mut buf);
            s = s.max(norm.of(&buf));
        }
        Ok(s)
    })?;
    let early = col_sups[0].max(col_sups[1]);
    let late = col_sups[2];
    let sampled_sup = early.max(late);
    let bounded_on_window = sampled_sup.is_finite() && late <= GROWTH_RATIO * early + ZERO_TOL;

    Ok(PerturbationClassification {
        perturbation: pert.name().to_string(),
        probe_radius,
        t_horizon,
        vanishing_at_x0: tail_verdict(at_x0),
        vanishing_at_tinf: tail_verdict(on_ball),
        diminishing_evidence,
        column_profiles: profiles,
        bounded_on_window,
        sampled_sup,
        tail_sups_at_x0: at_x0,
        tail_sups_on_ball: on_ball,
    })
}

/// Uniform direction scaled to radius `r`.
pub fn random_on_sphere<R: Rng>(rng: &mut R, dim: usize, r: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = Norm::Euclidean.of(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| r * x / n).collect();
        }
    }
}
