//! Dormand-Prince 5(4) with step-size control, an optional oscillation-based
//! step cap, and 4th-order continuous extension for sampling.

use std::f64::consts::PI;
use std::fmt;

use serde::Serialize;

use crate::signal::FreqHint;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Which times are reported.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    /// Every accepted step.
    Steps,
    /// `t0, t0 + dt, ...` and `t_end`.
    Every(f64),
    /// Given times in `[t0, t_end]`, increasing; `t0` is prepended if absent.
    Times(Vec<f64>),
}

#[derive(Clone)]
pub struct OdeConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Local angular frequency of the forcing; caps steps at period / `cells_per_period`.
    pub freq_hint: Option<FreqHint>,
    pub cells_per_period: f64,
}

impl fmt::Debug for OdeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeConfig")
            .field("rtol", &self.rtol)
            .field("atol", &self.atol)
            .field("h_max", &self.h_max)
            .field("max_steps", &self.max_steps)
            .field("freq_hint", &self.freq_hint.is_some())
            .finish()
    }
}

impl OdeConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { rtol: tol, atol: tol, h_max: f64::INFINITY, max_steps: 50_000_000, freq_hint: None, cells_per_period: 8.0 }
    }

    pub fn freq_hint(mut self, hint: Option<FreqHint>) -> Self {
        self.freq_hint = hint;
        self
    }

    fn cap(&self, t: f64, h: f64) -> f64 {
        let mut h = h.min(self.h_max);
        if let Some(w) = &self.freq_hint {
            for _ in 0..2 {
                let omega = w(t).abs().max(w(t + h).abs());
                if omega > 0.0 && omega.is_finite() {
                    h = h.min(2.0 * PI / omega / self.cells_per_period);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub min_step: f64,
    pub max_step: f64,
}

impl Default for OdeStats {
    fn default() -> Self {
        Self { accepted: 0, rejected: 0, rhs_evals: 0, min_step: f64::INFINITY, max_step: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: OdeStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OdeErrorKind<E> {
    MinStep { h: f64 },
    NonFinite,
    MaxSteps,
    Rhs(E),
    Invalid(String),
}

/// Integration failure with the last accepted point and the samples so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeFailure<E> {
    pub kind: OdeErrorKind<E>,
    pub t: f64,
    pub state: Vec<f64>,
    pub partial: OdeSolution,
}

impl<E: fmt::Display> fmt::Display for OdeFailure<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            OdeErrorKind::MinStep { h } => write!(f, "step size underflow (h = {h:.3e}) at t = {}", self.t),
            OdeErrorKind::NonFinite => write!(f, "non-finite state near t = {}", self.t),
            OdeErrorKind::MaxSteps => write!(f, "step budget exhausted at t = {}", self.t),
            OdeErrorKind::Rhs(e) => write!(f, "right-hand side failed at t = {}: {e}", self.t),
            OdeErrorKind::Invalid(s) => write!(f, "invalid integration request: {s}"),
        }
    }
}

impl<E: fmt::Debug + fmt::Display> std::error::Error for OdeFailure<E> {}

struct Stepper<'a, F> {
    rhs: F,
    dim: usize,
    cfg: &'a OdeConfig,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    stats: OdeStats,
}

impl<E, F> Stepper<'_, F>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    fn eval(&mut self, t: f64, stage: usize) -> Result<(), E> {
        self.stats.rhs_evals += 1;
        let (tmp, k) = (&self.tmp, &mut self.k);
        (self.rhs)(t, tmp, &mut k[stage])
    }

    fn stage(&mut self, y: &[f64], h: f64, coeffs: &[(usize, f64)]) {
        for i in 0..self.dim {
            let mut acc = 0.0;
            for &(s, a) in coeffs {
                acc += a * self.k[s][i];
            }
            self.tmp[i] = y[i] + h * acc;
        }
    }

    /// Attempts one step; returns the scaled error norm. On success
    /// `y_new` holds the 5th-order solution and `k[6]` its derivative.
    fn attempt(&mut self, t: f64, y: &[f64], h: f64) -> Result<f64, E> {
        self.stage(y, h, &[(0, A21)]);
        self.eval(t + C2 * h, 1)?;
        self.stage(y, h, &[(0, A31), (1, A32)]);
        self.eval(t + C3 * h, 2)?;
        self.stage(y, h, &[(0, A41), (1, A42), (2, A43)]);
        self.eval(t + C4 * h, 3)?;
        self.stage(y, h, &[(0, A51), (1, A52), (2, A53), (3, A54)]);
        self.eval(t + C5 * h, 4)?;
        self.stage(y, h, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
        self.eval(t + h, 5)?;
        self.stage(y, h, &[(0, A71), (2, A73), (3, A74), (4, A75), (5, A76)]);
        self.y_new.copy_from_slice(&self.tmp);
        self.eval(t + h, 6)?;
        let mut sum = 0.0;
        for i in 0..self.dim {
            let k = &self.k;
            let err = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = self.cfg.atol + self.cfg.rtol * y[i].abs().max(self.y_new[i].abs());
            sum += (err / sc).powi(2);
        }
        Ok((sum / self.dim.max(1) as f64).sqrt())
    }

    /// Continuous-extension coefficients of the accepted step.
    fn dense(&self, y: &[f64], h: f64) -> [Vec<f64>; 5] {
        let d = self.dim;
        let mut r = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        let k = &self.k;
        for i in 0..d {
            let ydiff = self.y_new[i] - y[i];
            let bspl = h * k[0][i] - ydiff;
            r[0][i] = y[i];
            r[1][i] = ydiff;
            r[2][i] = bspl;
            r[3][i] = ydiff - h * k[6][i] - bspl;
            r[4][i] = h * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
        }
        r
    }
}

fn interpolate(r: &[Vec<f64>; 5], theta: f64) -> Vec<f64> {
    let t1 = 1.0 - theta;
    (0..r[0].len())
        .map(|i| r[0][i] + theta * (r[1][i] + t1 * (r[2][i] + theta * (r[3][i] + t1 * r[4][i]))))
        .collect()
}

fn initial_step<E, F>(st: &mut Stepper<'_, F>, t0: f64, y0: &[f64], span: f64) -> Result<f64, E>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    let d = st.dim.max(1) as f64;
    let sc: Vec<f64> = y0.iter().map(|y| st.cfg.atol + st.cfg.rtol * y.abs()).collect();
    let d0 = (y0.iter().zip(&sc).map(|(y, s)| (y / s).powi(2)).sum::<f64>() / d).sqrt();
    let d1 = (st.k[0].iter().zip(&sc).map(|(f, s)| (f / s).powi(2)).sum::<f64>() / d).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = st.cfg.cap(t0, h0.min(span));
    for i in 0..st.dim {
        st.tmp[i] = y0[i] + h0 * st.k[0][i];
    }
    st.eval(t0 + h0, 1)?;
    let d2 = (st.k[1].iter().zip(&st.k[0]).zip(&sc).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>() / d).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok(st.cfg.cap(t0, (100.0 * h0).min(h1).min(span)))
}

/// Integrates `y' = rhs(t, y)` from `t0` to `t_end`.
pub fn solve<E, F>(
    rhs: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    cfg: &OdeConfig,
    sampling: &Sampling,
) -> Result<OdeSolution, OdeFailure<E>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    let dim = y0.len();
    let mut out = OdeSolution { times: vec![t0], states: vec![y0.to_vec()], stats: OdeStats::default() };
    let fail = |kind, t: f64, y: &[f64], out: OdeSolution| Err(OdeFailure { kind, t, state: y.to_vec(), partial: out });
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return fail(OdeErrorKind::Invalid(format!("need t_end > t0, got [{t0}, {t_end}]")), t0, y0, out);
    }
    if !(cfg.rtol > 0.0) || !(cfg.atol > 0.0) {
        return fail(OdeErrorKind::Invalid("tolerances must be positive".into()), t0, y0, out);
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return fail(OdeErrorKind::NonFinite, t0, y0, out);
    }
    let mut targets: Vec<f64> = match sampling {
        Sampling::Steps => Vec::new(),
        Sampling::Every(dt) => {
            if !(*dt > 0.0) {
                return fail(OdeErrorKind::Invalid(format!("sample spacing must be positive, got {dt}")), t0, y0, out);
            }
            let n = ((t_end - t0) / dt).floor() as usize;
            let mut v: Vec<f64> = (1..=n).map(|k| t0 + k as f64 * dt).filter(|t| *t < t_end).collect();
            v.push(t_end);
            v
        }
        Sampling::Times(ts) => {
            if ts.windows(2).any(|w| !(w[1] > w[0])) || ts.iter().any(|t| *t < t0 || *t > t_end) {
                return fail(OdeErrorKind::Invalid("sample times must increase within [t0, t_end]".into()), t0, y0, out);
            }
            ts.iter().copied().filter(|t| *t > t0).collect()
        }
    };
    targets.reverse();

    let mut st = Stepper {
        rhs,
        dim,
        cfg,
        k: std::array::from_fn(|_| vec![0.0; dim]),
        tmp: y0.to_vec(),
        y_new: vec![0.0; dim],
        stats: OdeStats::default(),
    };
    if let Err(e) = st.eval(t0, 0) {
        return fail(OdeErrorKind::Rhs(e), t0, y0, out);
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let span = t_end - t0;
    let mut h = match initial_step(&mut st, t0, &y, span) {
        Ok(h) => h,
        Err(e) => return fail(OdeErrorKind::Rhs(e), t0, y0, out),
    };
    let mut last_rejected = false;
    let mut rhs_failures = 0usize;
    loop {
        let h_min = 16.0 * f64::EPSILON * t.abs().max(span);
        h = cfg.cap(t, h);
        let last = t + h >= t_end - h_min;
        if last {
            h = t_end - t;
        }
        if h < h_min && !last {
            out.stats = st.stats;
            return fail(OdeErrorKind::MinStep { h }, t, &y, out);
        }
        if st.stats.accepted + st.stats.rejected >= cfg.max_steps {
            out.stats = st.stats;
            return fail(OdeErrorKind::MaxSteps, t, &y, out);
        }
        let err = match st.attempt(t, &y, h) {
            Ok(e) => e,
            Err(e) => {
                // A trial stage left the RHS domain: retry smaller, give up
                // once the step underflows.
                st.stats.rejected += 1;
                rhs_failures += 1;
                h *= 0.25;
                if h < h_min || rhs_failures > 60 {
                    out.stats = st.stats;
                    return fail(OdeErrorKind::Rhs(e), t, &y, out);
                }
                last_rejected = true;
                continue;
            }
        };
        if !err.is_finite() || st.y_new.iter().any(|v| !v.is_finite()) {
            st.stats.rejected += 1;
            h *= 0.2;
            if h < h_min {
                out.stats = st.stats;
                return fail(OdeErrorKind::NonFinite, t, &y, out);
            }
            last_rejected = true;
            continue;
        }
        if err <= 1.0 {
            rhs_failures = 0;
            st.stats.accepted += 1;
            st.stats.min_step = st.stats.min_step.min(h);
            st.stats.max_step = st.stats.max_step.max(h);
            let t_new = if last { t_end } else { t + h };
            match sampling {
                Sampling::Steps => {
                    out.times.push(t_new);
                    out.states.push(st.y_new.clone());
                }
                _ => {
                    let mut coeffs = None;
                    while let Some(&ts) = targets.last() {
                        if ts > t_new {
                            break;
                        }
                        targets.pop();
                        let state = if ts == t_new {
                            st.y_new.clone()
                        } else {
                            let r = coeffs.get_or_insert_with(|| st.dense(&y, h));
                            interpolate(r, (ts - t) / h)
                        };
                        out.times.push(ts);
                        out.states.push(state);
                    }
                }
            }
            y.copy_from_slice(&st.y_new);
            t = t_new;
            st.k.swap(0, 6);
            if last {
                break;
            }
            let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            last_rejected = false;
        } else {
            st.stats.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            last_rejected = true;
        }
    }
    out.stats = st.stats;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn decay(_: f64, y: &[f64], dy: &mut [f64]) -> Result<(), Infallible> {
        dy[0] = -y[0];
        Ok(())
    }

    #[test]
    fn constant_solution() {
        let s = solve(|_, _: &[f64], dy: &mut [f64]| -> Result<(), Infallible> { dy[0] = 0.0; Ok(()) }, 0.0, &[2.5], 3.0, &OdeConfig::with_tol(1e-8), &Sampling::Every(0.5)).unwrap();
        assert_eq!(s.times.len(), 7);
        assert!(s.states.iter().all(|y| y[0] == 2.5));
    }

    #[test]
    fn exponential_decay() {
        let s = solve(decay, 0.0, &[1.0], 1.0, &OdeConfig::with_tol(1e-10), &Sampling::Steps).unwrap();
        assert_eq!(*s.times.last().unwrap(), 1.0);
        assert!((s.states.last().unwrap()[0] - (-1f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn dense_output_is_fourth_order_accurate() {
        let ts: Vec<f64> = (0..=100).map(|k| k as f64 * 0.05).collect();
        let s = solve(decay, 0.0, &[1.0], 5.0, &OdeConfig::with_tol(1e-9), &Sampling::Times(ts.clone())).unwrap();
        assert_eq!(s.times, ts);
        for (t, y) in s.times.iter().zip(&s.states) {
            assert!((y[0] - (-t).exp()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn step_cap_follows_frequency_hint() {
        let cfg = OdeConfig::with_tol(1e-6).freq_hint(Some(std::sync::Arc::new(|_| 2.0 * PI * 100.0)));
        let s = solve(decay, 0.0, &[1.0], 1.0, &cfg, &Sampling::Steps).unwrap();
        assert!(s.stats.max_step <= 1.0 / 800.0 + 1e-15);
        assert!(s.stats.accepted >= 800);
    }

    #[test]
    fn blow_up_is_reported() {
        let r = solve(
            |_, y: &[f64], dy: &mut [f64]| -> Result<(), Infallible> {
                dy[0] = y[0] * y[0];
                Ok(())
            },
            0.0,
            &[1.0],
            2.0,
            &OdeConfig::with_tol(1e-8),
            &Sampling::Steps,
        );
        let f = r.unwrap_err();
        assert!(matches!(f.kind, OdeErrorKind::MinStep { .. } | OdeErrorKind::NonFinite));
        assert!((f.t - 1.0).abs() < 1e-3, "{f:?}");
        assert!(f.partial.times.len() > 1);
    }

    #[test]
    fn rhs_errors_carry_the_last_state() {
        let r = solve(
            |t: f64, y: &[f64], dy: &mut [f64]| {
                if t > 0.5 {
                    return Err("outside domain");
                }
                dy[0] = -y[0];
                Ok(())
            },
            0.0,
            &[1.0],
            1.0,
            &OdeConfig::with_tol(1e-8),
            &Sampling::Steps,
        );
        let f = r.unwrap_err();
        assert_eq!(f.kind, OdeErrorKind::Rhs("outside domain"));
        assert!((f.t - 0.5).abs() < 1e-6);
        assert!((f.state[0] - (-f.t).exp()).abs() < 1e-7);
    }

    #[test]
    fn invalid_requests() {
        assert!(matches!(solve(decay, 1.0, &[1.0], 1.0, &OdeConfig::with_tol(1e-8), &Sampling::Steps).unwrap_err().kind, OdeErrorKind::Invalid(_)));
        assert!(matches!(
            solve(decay, 0.0, &[1.0], 1.0, &OdeConfig::with_tol(1e-8), &Sampling::Times(vec![0.5, 0.2])).unwrap_err().kind,
            OdeErrorKind::Invalid(_)
        ));
    }

    #[test]
    fn global_error_tracks_tolerance() {
        let mut errs = Vec::new();
        for k in 4..=10 {
            let tol = 10f64.powi(-k);
            let s = solve(decay, 0.0, &[1.0], 1.0, &OdeConfig::with_tol(tol), &Sampling::Steps).unwrap();
            let e = (s.states.last().unwrap()[0] - (-1f64).exp()).abs();
            assert!(e <= 10.0 * tol, "tol {tol}: error {e}");
            errs.push(e.max(1e-17));
        }
        // Fitted log-log slope of error against tolerance is close to one.
        let n = errs.len() as f64;
        let xs: Vec<f64> = (4..=10).map(|k| -(k as f64)).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.log10()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((0.7..=1.4).contains(&slope), "slope {slope}");
    }
}
