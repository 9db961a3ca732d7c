//! The controlled system `Y^(n) = F(Y, ..., Y^(n-1), U) + W(t, X)` in
//! state-space form, perturbation data, and the built-in model catalog.
//!
//! States are `m x n` matrices `X = [X_1, ..., X_n] = [Y, Y', ..., Y^(n-1)]`.
//! The flat view used by the integrator is column-major, so entry `(j, i)`
//! (channel `j`, derivative order `i`) lives at index `i * m + j`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::signal::{catalog_signal, FreqHint, Signal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("non-finite value from {source_name} at component {component} (t = {t:?})")]
    NonFinite { source_name: &'static str, component: usize, t: Option<f64> },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown catalog entry '{0}'")]
    UnknownCatalog(String),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Shape { what, expected, got })
    }
}

fn check_finite(source_name: &'static str, v: &[f64], t: Option<f64>) -> Result<(), ModelError> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(component) => Err(ModelError::NonFinite { source_name, component, t }),
    }
}

/// `F(x, u, out)`: flattened state of length `m*n`, input of length `m`.
pub type DynamicsFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Analytic Jacobian callback; fills a preallocated matrix.
pub type JacobianFn = Arc<dyn Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync>;

/// `m x n` state matrix with column `i` holding `Y^(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix(DMatrix<f64>);

impl StateMatrix {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self(DMatrix::zeros(m, n))
    }

    pub fn from_flat(m: usize, n: usize, flat: &[f64]) -> Result<Self, ModelError> {
        check_len("flattened state", m * n, flat.len())?;
        Ok(Self(DMatrix::from_column_slice(m, n, flat)))
    }

    pub fn from_matrix(x: DMatrix<f64>) -> Self {
        Self(x)
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn n(&self) -> usize {
        self.0.ncols()
    }

    pub fn flat(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `Y^(order)` for channel `channel`.
    pub fn get(&self, channel: usize, order: usize) -> f64 {
        self.0[(channel, order)]
    }
}

/// System model: `m` equations of order `n > 1` with input map `F`.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    m: usize,
    n: usize,
    f: DynamicsFn,
    jac_u: Option<JacobianFn>,
    jac_x: Option<JacobianFn>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("m", &self.m)
            .field("n", &self.n)
            .field("analytic_jac_u", &self.jac_u.is_some())
            .field("analytic_jac_x", &self.jac_x.is_some())
            .finish()
    }
}

/// Tolerance for the equilibrium check `|F(0,0)| <= tol`.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;

impl SystemModel {
    pub fn new<F>(name: impl Into<String>, m: usize, n: usize, f: F) -> Result<Self, ModelError>
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if m == 0 {
            return Err(ModelError::Invalid("m must be at least 1".into()));
        }
        if n < 2 {
            return Err(ModelError::Invalid(format!("derivative order n must exceed 1, got {n}")));
        }
        Ok(Self { name: name.into(), m, n, f: Arc::new(f), jac_u: None, jac_x: None })
    }

    /// Analytic `J_{F,U}` (an `m x m` matrix).
    pub fn with_jacobian_u<J>(mut self, j: J) -> Self
    where
        J: Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    {
        self.jac_u = Some(Arc::new(j));
        self
    }

    /// Analytic `J_{F,X}` (an `m x mn` matrix, columns in flat state order).
    pub fn with_jacobian_x<J>(mut self, j: J) -> Self
    where
        J: Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    {
        self.jac_x = Some(Arc::new(j));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn state_dim(&self) -> usize {
        self.m * self.n
    }

    pub fn has_analytic_jacobian_u(&self) -> bool {
        self.jac_u.is_some()
    }

    /// Evaluates `F(x, u)` into `out` with shape and finiteness checks.
    pub fn eval_f(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        check_len("state", self.state_dim(), x.len())?;
        check_len("input", self.m, u.len())?;
        check_len("output", self.m, out.len())?;
        (self.f)(x, u, out);
        check_finite("F", out, None)
    }

    pub fn f_value(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.m];
        self.eval_f(x, u, &mut out)?;
        Ok(out)
    }

    /// Checks `|F(0,0)| <= EQUILIBRIUM_TOL` and returns the residual norm.
    pub fn equilibrium_residual(&self) -> Result<f64, ModelError> {
        let f0 = self.f_value(&vec![0.0; self.state_dim()], &vec![0.0; self.m])?;
        Ok(f0.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// `J_{F,U}(x, u)`: analytic if supplied, else central differences.
    pub fn jacobian_u(&self, x: &[f64], u: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        check_len("state", self.state_dim(), x.len())?;
        check_len("input", self.m, u.len())?;
        let mut jac = DMatrix::zeros(self.m, self.m);
        match &self.jac_u {
            Some(j) => j(x, u, &mut jac),
            None => {
                let mut up = u.to_vec();
                let mut fp = vec![0.0; self.m];
                let mut fm = vec![0.0; self.m];
                for k in 0..self.m {
                    let h = fd_step(u[k]);
                    up[k] = u[k] + h;
                    self.eval_f(x, &up, &mut fp)?;
                    up[k] = u[k] - h;
                    self.eval_f(x, &up, &mut fm)?;
                    up[k] = u[k];
                    let width = (u[k] + h) - (u[k] - h);
                    for i in 0..self.m {
                        jac[(i, k)] = (fp[i] - fm[i]) / width;
                    }
                }
            }
        }
        check_finite("J_{F,U}", jac.as_slice(), None)?;
        Ok(jac)
    }

    /// `J_{F,X}(x, u)`: analytic if supplied, else central differences.
    pub fn jacobian_x(&self, x: &[f64], u: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        check_len("state", self.state_dim(), x.len())?;
        check_len("input", self.m, u.len())?;
        let d = self.state_dim();
        let mut jac = DMatrix::zeros(self.m, d);
        match &self.jac_x {
            Some(j) => j(x, u, &mut jac),
            None => {
                let mut xp = x.to_vec();
                let mut fp = vec![0.0; self.m];
                let mut fm = vec![0.0; self.m];
                for k in 0..d {
                    let h = fd_step(x[k]);
                    xp[k] = x[k] + h;
                    self.eval_f(&xp, u, &mut fp)?;
                    xp[k] = x[k] - h;
                    self.eval_f(&xp, u, &mut fm)?;
                    xp[k] = x[k];
                    let width = (x[k] + h) - (x[k] - h);
                    for i in 0..self.m {
                        jac[(i, k)] = (fp[i] - fm[i]) / width;
                    }
                }
            }
        }
        check_finite("J_{F,X}", jac.as_slice(), None)?;
        Ok(jac)
    }
}

/// Central-difference step `cbrt(eps) * max(1, |v|)`.
pub fn fd_step(v: f64) -> f64 {
    f64::EPSILON.cbrt() * v.abs().max(1.0)
}

/// `D(t)` filled column-major into an `m*m` slice.
pub type MatrixSignalFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// `K(X)`.
pub type StateMapFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum PerturbationKind {
    Zero,
    TimeOnly(Signal),
    Factored { d: MatrixSignalFn, k: StateMapFn },
}

/// User-declared properties; informational, checked by the analyzer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PerturbationFlags {
    pub bounded_columns: bool,
    pub diminishing_claimed: bool,
}

/// `W(t, X)`, either zero, a pure time signal, or `D(t) K(X)`.
#[derive(Clone)]
pub struct PerturbationSpec {
    name: String,
    dim: usize,
    state_dim: Option<usize>,
    kind: PerturbationKind,
    pub flags: PerturbationFlags,
    freq_hint: Option<FreqHint>,
}

impl fmt::Debug for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            PerturbationKind::Zero => "zero",
            PerturbationKind::TimeOnly(_) => "time-only",
            PerturbationKind::Factored { .. } => "factored",
        };
        f.debug_struct("PerturbationSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("kind", &kind)
            .field("flags", &self.flags)
            .finish()
    }
}

impl PerturbationSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            name: "zero".into(),
            dim,
            state_dim: None,
            kind: PerturbationKind::Zero,
            flags: PerturbationFlags { bounded_columns: true, diminishing_claimed: true },
            freq_hint: None,
        }
    }

    pub fn time_only(signal: Signal) -> Self {
        let freq_hint = signal.freq_hint().cloned();
        Self {
            name: signal.name().to_string(),
            dim: signal.dim(),
            state_dim: None,
            kind: PerturbationKind::TimeOnly(signal),
            flags: PerturbationFlags::default(),
            freq_hint,
        }
    }

    /// General factored form with `D(t)` an `dim x dim` matrix signal.
    pub fn factored<D, K>(name: impl Into<String>, dim: usize, state_dim: Option<usize>, d: D, k: K) -> Self
    where
        D: Fn(f64, &mut [f64]) + Send + Sync + 'static,
        K: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            state_dim,
            kind: PerturbationKind::Factored { d: Arc::new(d), k: Arc::new(k) },
            flags: PerturbationFlags::default(),
            freq_hint: None,
        }
    }

    /// Factored form with `D(t) = diag(h_1(t), ..., h_m(t))` from scalar signals.
    pub fn diagonal<K>(name: impl Into<String>, diag: Vec<Signal>, state_dim: Option<usize>, k: K) -> Self
    where
        K: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let dim = diag.len();
        assert!(diag.iter().all(|s| s.dim() == 1), "diagonal entries must be scalar signals");
        let hints: Vec<FreqHint> = diag.iter().filter_map(|s| s.freq_hint().cloned()).collect();
        let mut spec = Self::factored(name, dim, state_dim, move |t, out| {
            out.fill(0.0);
            let mut v = [0.0];
            for (j, s) in diag.iter().enumerate() {
                s.eval(t, &mut v);
                out[j * dim + j] = v[0];
            }
        }, k);
        spec.freq_hint = combine_hints(hints);
        spec
    }

    pub fn with_freq_hint<H>(mut self, hint: H) -> Self
    where
        H: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.freq_hint = Some(Arc::new(hint));
        self
    }

    pub fn with_flags(mut self, flags: PerturbationFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.state_dim
    }

    pub fn kind(&self) -> &PerturbationKind {
        &self.kind
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, PerturbationKind::Zero)
    }

    pub fn freq_hint(&self) -> Option<&FreqHint> {
        self.freq_hint.as_ref()
    }

    /// Evaluates `W(t, x)` into `out` (length `dim`).
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        check_len("perturbation output", self.dim, out.len())?;
        if let Some(sd) = self.state_dim {
            check_len("perturbation state", sd, x.len())?;
        }
        match &self.kind {
            PerturbationKind::Zero => out.fill(0.0),
            PerturbationKind::TimeOnly(s) => s.eval(t, out),
            PerturbationKind::Factored { d, k } => {
                let m = self.dim;
                let mut dm = vec![0.0; m * m];
                let mut kv = vec![0.0; m];
                d(t, &mut dm);
                k(x, &mut kv);
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += dm[j * m + i] * kv[j];
                    }
                    out[i] = acc;
                }
            }
        }
        check_finite("W", out, Some(t))
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.dim];
        self.eval(t, x, &mut out)?;
        Ok(out)
    }

    /// Columns of `D` as time signals; a time-only `W` is read as
    /// `D = diag(W)`, `K = 1`. `None` for the zero perturbation.
    pub fn d_columns(&self) -> Option<Vec<Signal>> {
        let m = self.dim;
        match &self.kind {
            PerturbationKind::Zero => None,
            PerturbationKind::TimeOnly(s) => Some((0..m).map(|j| s.component(j).embed(m, j)).collect()),
            PerturbationKind::Factored { d, .. } => Some(
                (0..m)
                    .map(|j| {
                        let d = d.clone();
                        let mut col = Signal::new(format!("{}:D[:,{j}]", self.name), m, move |t, out| {
                            let mut dm = vec![0.0; m * m];
                            d(t, &mut dm);
                            out.copy_from_slice(&dm[j * m..(j + 1) * m]);
                        });
                        if let Some(h) = self.freq_hint.clone() {
                            col = col.with_freq_hint(move |t| h(t));
                        }
                        col
                    })
                    .collect(),
            ),
        }
    }

    /// Rewrites a time-only perturbation as `diag(W(t)) * (1, ..., 1)`.
    pub fn to_factored(&self) -> PerturbationSpec {
        match &self.kind {
            PerturbationKind::TimeOnly(s) => {
                let s = s.clone();
                let m = self.dim;
                let mut spec = PerturbationSpec::factored(
                    self.name.clone(),
                    m,
                    None,
                    move |t, out| {
                        let mut w = vec![0.0; m];
                        s.eval(t, &mut w);
                        out.fill(0.0);
                        for j in 0..m {
                            out[j * m + j] = w[j];
                        }
                    },
                    |_, k| k.fill(1.0),
                );
                spec.freq_hint = self.freq_hint.clone();
                spec.flags = self.flags;
                spec
            }
            _ => self.clone(),
        }
    }
}

fn combine_hints(hints: Vec<FreqHint>) -> Option<FreqHint> {
    if hints.is_empty() {
        None
    } else {
        Some(Arc::new(move |t| hints.iter().map(|h| h(t)).fold(0.0, f64::max)))
    }
}

/// Right-hand side of the state-space form: the first `(n-1)m` entries are
/// the shifted columns `X_2..X_n`, the last `m` are `F(X,U) + W(t,X)`.
pub fn evaluate_dynamics(
    model: &SystemModel,
    pert: &PerturbationSpec,
    t: f64,
    x: &[f64],
    u: &[f64],
    out: &mut [f64],
) -> Result<(), ModelError> {
    let (m, n) = (model.m, model.n);
    check_len("state", m * n, x.len())?;
    check_len("input", m, u.len())?;
    check_len("derivative", m * n, out.len())?;
    check_len("perturbation dimension", m, pert.dim())?;
    out[..(n - 1) * m].copy_from_slice(&x[m..]);
    let tail = &mut out[(n - 1) * m..];
    model.eval_f(x, u, tail)?;
    let mut w = vec![0.0; m];
    pert.eval(t, x, &mut w)?;
    for (o, wi) in tail.iter_mut().zip(&w) {
        *o += wi;
    }
    Ok(())
}

/// Built-in model names with one-line descriptions.
pub const MODEL_CATALOG: &[(&str, &str)] = &[
    ("chain", "integrator chains F = gain * U, any m and n"),
    ("cubic", "scalar F = u + u^3"),
    ("tanh", "scalar F = tanh(u); fails coercivity"),
    ("pendulum", "inverted pendulum F = sin(y) + u (m = 1, n = 2)"),
    ("coupled", "two coupled second-order channels, nonlinear in X and U"),
];

/// Parameters for catalog models; `m`/`n` are ignored where fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub m: usize,
    pub n: usize,
    pub gain: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { m: 1, n: 2, gain: 1.0 }
    }
}

pub fn catalog_model(name: &str, p: ModelParams) -> Result<SystemModel, ModelError> {
    match name {
        "chain" => chain(p.m, p.n, p.gain),
        "cubic" => Ok(SystemModel::new("cubic", 1, p.n, |_, u, out| out[0] = u[0] + u[0].powi(3))?
            .with_jacobian_u(|_, u, j| j[(0, 0)] = 1.0 + 3.0 * u[0] * u[0])
            .with_jacobian_x(|_, _, j| j.fill(0.0))),
        "tanh" => Ok(SystemModel::new("tanh", 1, p.n, |_, u, out| out[0] = u[0].tanh())?
            .with_jacobian_u(|_, u, j| j[(0, 0)] = 1.0 - u[0].tanh().powi(2))
            .with_jacobian_x(|_, _, j| j.fill(0.0))),
        "pendulum" => Ok(SystemModel::new("pendulum", 1, 2, |x, u, out| out[0] = x[0].sin() + u[0])?
            .with_jacobian_u(|_, _, j| j[(0, 0)] = 1.0)
            .with_jacobian_x(|x, _, j| {
                j[(0, 0)] = x[0].cos();
                j[(0, 1)] = 0.0;
            })),
        "coupled" => SystemModel::new("coupled", 2, 2, |x, u, out| {
            // x = (y1, y2, y1', y2')
            out[0] = x[0].sin() + x[0] * x[3] + u[0] + 0.3 * u[1] + 0.1 * u[0].powi(3);
            out[1] = -x[1] + 0.5 * x[2] + 0.2 * u[0] + u[1] + 0.1 * u[1].powi(3);
        }),
        other => Err(ModelError::UnknownCatalog(other.to_string())),
    }
}

/// `F = gain * U` for `m` chains of length `n`.
pub fn chain(m: usize, n: usize, gain: f64) -> Result<SystemModel, ModelError> {
    Ok(SystemModel::new("chain", m, n, move |_, u, out| {
        for (o, ui) in out.iter_mut().zip(u) {
            *o = gain * ui;
        }
    })?
    .with_jacobian_u(move |_, _, j| {
        j.fill(0.0);
        j.fill_diagonal(gain);
    })
    .with_jacobian_x(|_, _, j| j.fill(0.0)))
}

/// Built-in perturbation names with one-line descriptions.
pub const PERTURBATION_CATALOG: &[(&str, &str)] = &[
    ("zero", "no perturbation"),
    ("example1_unbounded", "(0.5 t sin(t^4), -t cos(t^4)); unbounded, diminishing"),
    ("example1_bounded", "(-e2 sin(e^t), 2(cbrt(e1) + e2 + 1) cos(e^t)); factored D(t)K(E)"),
    ("constant_1_0", "constant (1, 0); not diminishing"),
];

/// Looks up a perturbation for a system with `dim` channels. Catalog signals
/// may also be referenced as `<signal>` (on channel 0) or `<signal>@<channel>`.
pub fn catalog_perturbation(name: &str, dim: usize) -> Result<PerturbationSpec, ModelError> {
    let need2 = |what: &str| {
        if dim == 2 {
            Ok(())
        } else {
            Err(ModelError::Invalid(format!("perturbation '{what}' needs 2 channels, system has {dim}")))
        }
    };
    match name {
        "zero" => Ok(PerturbationSpec::zero(dim)),
        "example1_unbounded" => {
            need2(name)?;
            let s = Signal::new(name, 2, |t, out| {
                let (s, c) = t.powi(4).sin_cos();
                out[0] = 0.5 * t * s;
                out[1] = -t * c;
            })
            .with_freq_hint(|t| 4.0 * t.abs().powi(3));
            Ok(PerturbationSpec::time_only(s).with_flags(PerturbationFlags {
                bounded_columns: false,
                diminishing_claimed: true,
            }))
        }
        "example1_bounded" => {
            need2(name)?;
            let sin_exp = Signal::scalar("sin_exp", |t| t.exp().sin()).with_freq_hint(f64::exp);
            let cos_exp = catalog_signal("cos_exp").expect("catalog");
            Ok(PerturbationSpec::diagonal(name, vec![sin_exp, cos_exp], Some(2), |e, k| {
                k[0] = -e[1];
                k[1] = 2.0 * (e[0].cbrt() + e[1] + 1.0);
            })
            .with_flags(PerturbationFlags { bounded_columns: true, diminishing_claimed: true }))
        }
        "constant_1_0" => {
            need2(name)?;
            Ok(PerturbationSpec::time_only(Signal::new(name, 2, |_, out| {
                out[0] = 1.0;
                out[1] = 0.0;
            })))
        }
        other => {
            let (sig, channel) = match other.split_once('@') {
                Some((s, c)) => (
                    s,
                    c.parse::<usize>()
                        .map_err(|_| ModelError::Invalid(format!("bad channel in '{other}'")))?,
                ),
                None => (other, 0),
            };
            let s = catalog_signal(sig).ok_or_else(|| ModelError::UnknownCatalog(other.to_string()))?;
            if s.dim() == dim && channel == 0 {
                return Ok(PerturbationSpec::time_only(s));
            }
            if s.dim() != 1 || channel >= dim {
                return Err(ModelError::Invalid(format!(
                    "signal '{sig}' (dim {}) cannot drive channel {channel} of a {dim}-channel system",
                    s.dim()
                )));
            }
            Ok(PerturbationSpec::time_only(s.embed(dim, channel)).named(other))
        }
    }
}
