//! Scenario files and the staged pipeline behind the command-line tool.
//!
//! A scenario is one JSON document. Stages run in the fixed order
//! classify → synthesize → simulate → verify; each writes its artifacts into
//! the output directory and a manifest lists them all with SHA-256 digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diminishing::{classify, diminishing_profile, random_on_sphere, WindowConfig};
use crate::linalg::C64;
use crate::model::{catalog_model, catalog_perturbation, ModelParams, PerturbationSpec, SystemModel};
use crate::norm::Norm;
use crate::ode::Sampling;
use crate::output::{profile_csv, profile_svg, sha256_hex, trajectory_csv, trajectory_svg};
use crate::signal::{catalog_signal, Signal};
use crate::simulate::{simulate_closed_loop, simulate_error_dynamics, simulate_tracking, SimConfig, SimError, TrackingSpec, Trajectory};
use crate::synthesis::{
    build_gamma, build_hurwitz, closed_loop_spectrum, coercivity_probe, estimate_roa, linearize_and_place, synthesize_feedback,
    Controller, GammaDesign, HurwitzMatrix, NewtonConfig, RoaConstants,
};
use crate::verify::{estimate_delta_of_eps, verify_evuas, ClosedLoopSystem, ErrorSystem, VerifyConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Without a model the scenario runs the error dynamics `E' = A_H E + W~(t, E)`.
    #[serde(default)]
    pub model: Option<ModelRef>,
    #[serde(default)]
    pub perturbation: PerturbationRef,
    #[serde(default)]
    pub design: Design,
    pub run: RunParams,
    #[serde(default)]
    pub analysis: Analysis,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub name: String,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "two")]
    pub n: usize,
    #[serde(default = "unit")]
    pub gain: f64,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationRef {
    Catalog(String),
    /// `W(t, X) = diag(scale_j s_j(t)) (K X + k0)`.
    Diagonal(DiagonalSpec),
}

impl Default for PerturbationRef {
    fn default() -> Self {
        PerturbationRef::Catalog("zero".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiagonalSpec {
    pub signals: Vec<ScaledSignal>,
    /// Rows per channel, columns per state entry; zero when absent.
    #[serde(default)]
    pub k_matrix: Option<Vec<Vec<f64>>>,
    /// Ones when absent.
    #[serde(default)]
    pub k_offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScaledSignal {
    pub signal: String,
    #[serde(default = "unit")]
    pub scale: f64,
}

/// Real pole or `[re, im]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Pole {
    Real(f64),
    Complex([f64; 2]),
}

impl Pole {
    fn c64(self) -> C64 {
        match self {
            Pole::Real(r) => C64::new(r, 0.0),
            Pole::Complex([re, im]) => C64::new(re, im),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Keyword {
    Default,
}

/// `A_H` as rows, or `"default"` for `-I`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MatrixSpec {
    Keyword(Keyword),
    Rows(Vec<Vec<f64>>),
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec::Keyword(Keyword::Default)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Implicit,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct Design {
    /// `n - 1` poles per channel for Γ; all `-1` when absent.
    #[serde(default)]
    pub poles: Option<Vec<Vec<Pole>>>,
    #[serde(default)]
    pub a_h: MatrixSpec,
    #[serde(default)]
    pub controller: ControllerKind,
    /// `m n` closed-loop poles for the linear gain; all `-1` when absent.
    #[serde(default)]
    pub placement_poles: Option<Vec<Pole>>,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub roa: Option<RoaRequest>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RoaRequest {
    pub r_max: f64,
    pub eps: f64,
    #[serde(default = "roa_horizon")]
    pub horizon: f64,
    #[serde(default = "roa_directions")]
    pub directions: usize,
}

fn roa_horizon() -> f64 {
    10.0
}
fn roa_directions() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_dt")]
    pub sample_dt: f64,
    #[serde(default)]
    pub norm: Norm,
    /// `E(t0)`, `X(t0)` or `Δ(t0)` depending on the mode; zeros when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Reference name for tracking runs.
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    #[serde(default = "default_eps")]
    pub eps_levels: Vec<f64>,
    #[serde(default = "default_t0_grid")]
    pub t0_grid: Vec<f64>,
    #[serde(default = "default_verify_horizon")]
    pub verify_horizon: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Integrator tolerance for verification runs; `tol` when absent.
    #[serde(default)]
    pub verify_tol: Option<f64>,
}

fn default_tol() -> f64 {
    1e-9
}
fn default_dt() -> f64 {
    0.01
}
fn default_delta0() -> f64 {
    0.5
}
fn default_eps() -> Vec<f64> {
    vec![1.0, 0.5, 0.1]
}
fn default_t0_grid() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 4.0]
}
fn default_verify_horizon() -> f64 {
    8.0
}
fn default_samples() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Analysis {
    /// Catalog signals whose window-metric profiles are written.
    #[serde(default)]
    pub signals: Vec<String>,
    #[serde(default = "default_grid")]
    pub t_grid: Vec<f64>,
    /// Horizon of the perturbation classification.
    #[serde(default = "default_classify_horizon")]
    pub horizon: f64,
    #[serde(default = "unit")]
    pub probe_radius: f64,
    #[serde(default = "default_quad_tol")]
    pub quad_tol: f64,
}

fn default_grid() -> Vec<f64> {
    (0..=8).map(f64::from).collect()
}
fn default_classify_horizon() -> f64 {
    8.0
}
fn default_quad_tol() -> f64 {
    1e-9
}

impl Default for Analysis {
    fn default() -> Self {
        Self {
            signals: Vec::new(),
            t_grid: default_grid(),
            horizon: default_classify_horizon(),
            probe_radius: 1.0,
            quad_tol: default_quad_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classify,
    Synthesize,
    Simulate,
    Verify,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Classify => "classify",
            Stage::Synthesize => "synthesize",
            Stage::Simulate => "simulate",
            Stage::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Svg,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub directory: Option<String>,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
}

fn all_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json, Format::Svg]
}

impl Default for Outputs {
    fn default() -> Self {
        Self { directory: None, formats: all_formats() }
    }
}

#[derive(Error, Debug)]
pub enum ScenarioError {
    /// Exit code 2.
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    /// Exit code 1.
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    /// Exit code 1.
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl ScenarioError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Schema { .. } => 2,
            _ => 1,
        }
    }
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema { path: path.into(), message: message.into() }
}

/// Parses a scenario; errors carry the JSON path of the offending field.
pub fn parse_scenario(json: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        schema(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
    })
}

pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("example1_unbounded", include_str!("../scenarios/example1_unbounded.json")),
    ("example1_bounded", include_str!("../scenarios/example1_bounded.json")),
    ("remark1_bounds", include_str!("../scenarios/remark1_bounds.json")),
    ("remark1_unbounded_profile", include_str!("../scenarios/remark1_unbounded_profile.json")),
    ("tracking_demo", include_str!("../scenarios/tracking_demo.json")),
    ("pole_placement_demo", include_str!("../scenarios/pole_placement_demo.json")),
];

pub fn bundled_scenario(name: &str) -> Option<Scenario> {
    BUNDLED_SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, j)| parse_scenario(j).expect("bundled scenarios parse"))
}

/// Scenario files (`*.json`) found in `dirs`, sorted by name; unreadable
/// or invalid files are skipped.
pub fn user_scenarios(dirs: &[PathBuf]) -> Vec<(String, PathBuf, Scenario)> {
    let mut out = Vec::new();
    for dir in dirs {
        let Ok(entries) = fs::read_dir(dir) else { continue };
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|e| e == "json")).collect();
        paths.sort();
        for p in paths {
            if let Some(s) = fs::read_to_string(&p).ok().and_then(|j| parse_scenario(&j).ok()) {
                out.push((s.name.clone(), p, s));
            }
        }
    }
    out
}

/// Splits a path list in `EVUAS_SCENARIO_PATH` style.
pub fn scenario_dirs_from_env(value: Option<&str>) -> Vec<PathBuf> {
    value.map(|v| std::env::split_paths(v).filter(|p| !p.as_os_str().is_empty()).collect()).unwrap_or_default()
}

/// Resolves a path, a user-directory scenario name, or a bundled name, in
/// that order.
pub fn load_scenario(reference: &str, dirs: &[PathBuf]) -> Result<Scenario, ScenarioError> {
    let p = Path::new(reference);
    if p.is_file() {
        let json = fs::read_to_string(p).map_err(|e| ScenarioError::Io { path: reference.into(), message: e.to_string() })?;
        return parse_scenario(&json);
    }
    if let Some((_, _, s)) = user_scenarios(dirs).into_iter().find(|(n, _, _)| n == reference) {
        return Ok(s);
    }
    bundled_scenario(reference).ok_or_else(|| schema(".", format!("no scenario file or catalog entry named '{reference}'")))
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub norm: Option<Norm>,
    pub formats: Option<Vec<Format>>,
}

impl Scenario {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(t) = o.tol {
            self.run.tol = t;
        }
        if let Some(n) = o.norm {
            self.run.norm = n;
        }
        if let Some(f) = &o.formats {
            self.outputs.formats = f.clone();
        }
    }
}

pub const TOL_RANGE: (f64, f64) = (1e-14, 1e-3);
pub const MAX_SPAN: f64 = 1e4;
pub const MAX_SAMPLES_OUT: f64 = 1e7;
pub const MAX_VERIFY_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ErrorDynamics,
    ClosedLoop,
    Tracking,
}

/// Scenario with every catalog reference resolved.
pub struct Resolved {
    pub mode: Mode,
    pub model: Option<SystemModel>,
    pub pert: PerturbationSpec,
    pub reference: Option<TrackingSpec>,
    pub a_h: DMatrix<f64>,
    pub gamma_poles: Vec<Vec<C64>>,
    pub placement_poles: Vec<C64>,
    pub signals: Vec<Signal>,
    pub initial: Vec<f64>,
    pub state_dim: usize,
}

fn check_range(path: &str, v: f64, lo: f64, hi: f64) -> Result<(), ScenarioError> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(schema(path, format!("{v} is outside [{lo:e}, {hi:e}]")))
    }
}

fn rows_to_matrix(path: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<f64>, ScenarioError> {
    if rows.len() != r {
        return Err(schema(path, format!("expected {r} rows, got {}", rows.len())));
    }
    let mut mat = DMatrix::zeros(r, c);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(schema(format!("{path}[{i}]"), format!("expected {c} entries, got {}", row.len())));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(schema(format!("{path}[{i}][{j}]"), "non-finite entry"));
            }
            mat[(i, j)] = *v;
        }
    }
    Ok(mat)
}

fn resolve_perturbation(p: &PerturbationRef, m: usize, state_dim: usize) -> Result<PerturbationSpec, ScenarioError> {
    match p {
        PerturbationRef::Catalog(name) => catalog_perturbation(name, m).map_err(|e| schema("perturbation.catalog", e.to_string())),
        PerturbationRef::Diagonal(d) => {
            if d.signals.len() != m {
                return Err(schema("perturbation.diagonal.signals", format!("expected {m} signals, got {}", d.signals.len())));
            }
            let mut diag = Vec::new();
            for (j, s) in d.signals.iter().enumerate() {
                let path = format!("perturbation.diagonal.signals[{j}].signal");
                let sig = catalog_signal(&s.signal).ok_or_else(|| schema(&path, format!("unknown signal '{}'", s.signal)))?;
                if sig.dim() != 1 {
                    return Err(schema(path, format!("signal '{}' is not scalar", s.signal)));
                }
                if !s.scale.is_finite() {
                    return Err(schema(format!("perturbation.diagonal.signals[{j}].scale"), "non-finite scale"));
                }
                diag.push(sig.scaled(s.scale));
            }
            let k = match &d.k_matrix {
                Some(rows) => rows_to_matrix("perturbation.diagonal.k_matrix", rows, m, state_dim)?,
                None => DMatrix::zeros(m, state_dim),
            };
            let k0 = d.k_offset.clone().unwrap_or_else(|| vec![1.0; m]);
            if k0.len() != m || k0.iter().any(|v| !v.is_finite()) {
                return Err(schema("perturbation.diagonal.k_offset", format!("expected {m} finite entries")));
            }
            Ok(PerturbationSpec::diagonal("diagonal", diag, Some(state_dim), move |x, out| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = k0[i] + (0..x.len()).map(|c| k[(i, c)] * x[c]).sum::<f64>();
                }
            }))
        }
    }
}

/// Semantic validation: catalog names resolve and parameters lie in their
/// documented ranges.
pub fn resolve(s: &Scenario) -> Result<Resolved, ScenarioError> {
    let r = &s.run;
    if s.name.is_empty() || s.name.contains(['/', '\\']) {
        return Err(schema("name", "must be nonempty and contain no path separators"));
    }
    check_range("run.tol", r.tol, TOL_RANGE.0, TOL_RANGE.1)?;
    if let Some(t) = r.verify_tol {
        check_range("run.verify_tol", t, TOL_RANGE.0, TOL_RANGE.1)?;
    }
    check_range("run.t0", r.t0, -MAX_SPAN, MAX_SPAN)?;
    if !(r.t_end > r.t0) || r.t_end - r.t0 > MAX_SPAN {
        return Err(schema("run.t_end", format!("must exceed t0 by at most {MAX_SPAN:e}")));
    }
    if !(r.sample_dt > 0.0) || (r.t_end - r.t0) / r.sample_dt > MAX_SAMPLES_OUT {
        return Err(schema("run.sample_dt", format!("must be positive with at most {MAX_SAMPLES_OUT:e} samples")));
    }
    check_range("run.delta0", r.delta0, 0.0, 1e6)?;
    if r.eps_levels.is_empty() || r.eps_levels.iter().any(|e| !(*e > 0.0) || !e.is_finite()) || r.eps_levels.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(schema("run.eps_levels", "must be positive and strictly decreasing"));
    }
    if r.t0_grid.is_empty() || r.t0_grid.iter().any(|t| !t.is_finite()) {
        return Err(schema("run.t0_grid", "must be nonempty and finite"));
    }
    if !(r.verify_horizon > 0.0) || r.verify_horizon > MAX_SPAN {
        return Err(schema("run.verify_horizon", format!("must be in (0, {MAX_SPAN:e}]")));
    }
    if r.samples == 0 || r.samples > MAX_VERIFY_SAMPLES {
        return Err(schema("run.samples", format!("must be in [1, {MAX_VERIFY_SAMPLES}]")));
    }
    let a = &s.analysis;
    if a.t_grid.is_empty() || a.t_grid.iter().any(|t| !t.is_finite()) || a.t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(schema("analysis.t_grid", "must be nonempty, finite and increasing"));
    }
    check_range("analysis.quad_tol", a.quad_tol, TOL_RANGE.0, TOL_RANGE.1)?;
    check_range("analysis.horizon", a.horizon, 2.0, 1e3)?;
    if !(a.probe_radius > 0.0) || !a.probe_radius.is_finite() {
        return Err(schema("analysis.probe_radius", "must be positive"));
    }
    let mut signals = Vec::new();
    for (i, name) in a.signals.iter().enumerate() {
        signals.push(catalog_signal(name).ok_or_else(|| schema(format!("analysis.signals[{i}]"), format!("unknown signal '{name}'")))?);
    }
    if s.outputs.formats.is_empty() {
        return Err(schema("outputs.formats", "at least one format is required"));
    }

    let model = match &s.model {
        Some(mr) => {
            if mr.m == 0 || mr.m > 64 || mr.n == 0 || mr.n > 64 {
                return Err(schema("model", "m and n must be in [1, 64]"));
            }
            Some(catalog_model(&mr.name, ModelParams { m: mr.m, n: mr.n, gain: mr.gain }).map_err(|e| schema("model.name", e.to_string()))?)
        }
        None => None,
    };
    let mode = match (&model, &r.reference) {
        (None, Some(_)) => return Err(schema("run.reference", "tracking needs a model")),
        (None, None) => Mode::ErrorDynamics,
        (Some(_), None) => Mode::ClosedLoop,
        (Some(_), Some(_)) => Mode::Tracking,
    };
    let (m, n) = match &model {
        Some(md) => (md.m(), md.n()),
        None => {
            let m = match (&s.design.a_h, &r.initial) {
                (MatrixSpec::Rows(rows), _) => rows.len(),
                (_, Some(x)) => x.len(),
                _ => 1,
            };
            (m, 1)
        }
    };
    if m == 0 {
        return Err(schema("design.a_h", "must have at least one row"));
    }
    let state_dim = if mode == Mode::ErrorDynamics { m } else { m * n };
    let a_h = match &s.design.a_h {
        MatrixSpec::Keyword(Keyword::Default) => -DMatrix::identity(m, m),
        MatrixSpec::Rows(rows) => rows_to_matrix("design.a_h", rows, m, m)?,
    };
    let gamma_poles: Vec<Vec<C64>> = match &s.design.poles {
        Some(cols) => {
            if cols.len() != m {
                return Err(schema("design.poles", format!("expected {m} columns, got {}", cols.len())));
            }
            cols.iter().map(|c| c.iter().map(|p| p.c64()).collect()).collect()
        }
        None => vec![vec![C64::new(-1.0, 0.0); n.saturating_sub(1)]; m],
    };
    let placement_poles: Vec<C64> = match &s.design.placement_poles {
        Some(ps) => {
            if ps.len() != m * n {
                return Err(schema("design.placement_poles", format!("expected {} poles, got {}", m * n, ps.len())));
            }
            ps.iter().map(|p| p.c64()).collect()
        }
        None => vec![C64::new(-1.0, 0.0); m * n],
    };
    let pert = resolve_perturbation(&s.perturbation, m, state_dim)?;
    let reference = match &r.reference {
        Some(name) => Some(TrackingSpec::catalog(name, m, n).map_err(|e| schema("run.reference", e.to_string()))?),
        None => None,
    };
    if mode == Mode::Tracking && s.design.controller == ControllerKind::Linear {
        return Err(schema("design.controller", "tracking needs the implicit controller"));
    }
    let initial = r.initial.clone().unwrap_or_else(|| vec![0.0; state_dim]);
    if initial.len() != state_dim || initial.iter().any(|v| !v.is_finite()) {
        return Err(schema("run.initial", format!("expected {state_dim} finite entries, got {}", initial.len())));
    }
    Ok(Resolved { mode, model, pert, reference, a_h, gamma_poles, placement_poles, signals, initial, state_dim })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Manifest {
    pub scenario: String,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub status: String,
    pub versions: BTreeMap<&'static str, &'static str>,
    pub created_unix: u64,
    pub artifacts: Vec<ArtifactEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Pipeline<'a> {
    s: &'a Scenario,
    r: Resolved,
    hurwitz: Option<HurwitzMatrix>,
    design: Option<GammaDesign>,
    controller: Option<Controller>,
    artifacts: Vec<(String, Vec<u8>)>,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable report");
    b.push(b'\n');
    b
}

fn stage_err(stage: Stage, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Stage { stage: stage.name(), message: message.into() }
}

impl Pipeline<'_> {
    fn wants(&self, f: Format) -> bool {
        self.s.outputs.formats.contains(&f)
    }

    fn emit(&mut self, file: impl Into<String>, bytes: Vec<u8>) {
        self.artifacts.push((file.into(), bytes));
    }

    fn hurwitz(&mut self, stage: Stage) -> Result<&HurwitzMatrix, ScenarioError> {
        if self.hurwitz.is_none() {
            self.hurwitz = Some(build_hurwitz(self.r.a_h.clone()).map_err(|e| stage_err(stage, e.to_string()))?);
        }
        Ok(self.hurwitz.as_ref().expect("set above"))
    }

    fn controller(&mut self, stage: Stage) -> Result<&Controller, ScenarioError> {
        if self.controller.is_none() {
            let model = self.r.model.as_ref().ok_or_else(|| stage_err(stage, "no model in this scenario"))?;
            let ctrl = match self.s.design.controller {
                ControllerKind::Linear => linearize_and_place(model, &self.r.placement_poles),
                ControllerKind::Implicit => {
                    let design = build_gamma(&self.r.gamma_poles, model.n()).map_err(|e| stage_err(stage, e.to_string()))?;
                    let h = build_hurwitz(self.r.a_h.clone()).map_err(|e| stage_err(stage, e.to_string()))?;
                    let c = synthesize_feedback(model, &design, &h, self.s.design.newton);
                    self.design = Some(design);
                    self.hurwitz = Some(h);
                    c
                }
            }
            .map_err(|e| stage_err(stage, e.to_string()))?;
            self.controller = Some(ctrl);
        }
        Ok(self.controller.as_ref().expect("set above"))
    }

    fn classify(&mut self) -> Result<(), ScenarioError> {
        let st = Stage::Classify;
        let a = &self.s.analysis;
        let cfg = WindowConfig::default().with_tol(a.quad_tol).with_norm(self.s.run.norm);
        for sig in self.r.signals.clone() {
            let p = diminishing_profile(&sig, &a.t_grid, &cfg).map_err(|e| stage_err(st, e.to_string()))?;
            if self.wants(Format::Csv) {
                self.emit(format!("profile_{}.csv", sig.name()), profile_csv(&p));
            }
            if self.wants(Format::Svg) {
                self.emit(format!("profile_{}.svg", sig.name()), profile_svg(&p).into_bytes());
            }
            if self.wants(Format::Json) {
                self.emit(format!("profile_{}.json", sig.name()), json_bytes(&p));
            }
        }
        if !self.r.pert.is_zero() {
            let c = classify(&self.r.pert, a.probe_radius, a.horizon, &cfg).map_err(|e| stage_err(st, e.to_string()))?;
            if self.wants(Format::Json) {
                self.emit("classification.json", json_bytes(&c));
            }
        }
        Ok(())
    }

    fn synthesize(&mut self) -> Result<(), ScenarioError> {
        let st = Stage::Synthesize;
        let mut doc = serde_json::Map::new();
        if self.r.mode == Mode::ErrorDynamics {
            let h = self.hurwitz(st)?;
            let eig: Vec<[f64; 2]> = h.eigenvalues().iter().map(|z| [z.re, z.im]).collect();
            doc.insert("a_h".into(), serde_json::json!(h.matrix().row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()));
            doc.insert("a_h_eigenvalues".into(), serde_json::json!(eig));
            doc.insert("max_real_part".into(), serde_json::json!(h.max_real_part()));
        } else {
            let seed = self.s.run.seed;
            let ctrl = self.controller(st)?;
            doc.insert("controller".into(), serde_json::to_value(ctrl.summary()).expect("summary"));
            if ctrl.is_linear() {
                let spec = closed_loop_spectrum(ctrl).map_err(|e| stage_err(st, e.to_string()))?;
                doc.insert("closed_loop_spectrum".into(), serde_json::json!(spec.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>()));
            }
            let model = ctrl.model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut xs = vec![vec![0.0; model.state_dim()]];
            xs.extend((0..3).map(|_| random_on_sphere(&mut rng, model.state_dim(), 1.0)));
            let radii = [1.0, 10.0, 100.0, 1e3, 1e4];
            let probe = coercivity_probe(model, &xs, 4, &radii, seed).map_err(|e| stage_err(st, e.to_string()))?;
            doc.insert("coercivity".into(), serde_json::to_value(probe).expect("report"));
        }
        if let Some(req) = self.s.design.roa.clone() {
            self.controller(st)?;
            let design = self.design.as_ref().ok_or_else(|| stage_err(st, "region of attraction needs the implicit controller"))?;
            let h = self.hurwitz.as_ref().expect("built with the controller");
            let norm = self.s.run.norm;
            let sys = ErrorSystem::new(h, &self.r.pert, self.s.run.verify_tol.unwrap_or(self.s.run.tol), norm);
            let d = estimate_delta_of_eps(&sys, req.eps, self.s.run.t0, req.horizon, req.directions, self.s.run.seed)
                .map_err(|e| stage_err(st, e.to_string()))?;
            let m = design.m();
            let (t1, t2) = norm.equivalence_constants(m * design.n());
            let roa = if d.delta > 0.0 {
                Some(estimate_roa(RoaConstants::from(design), req.r_max, req.eps, d.delta, t1, t2, m).map_err(|e| stage_err(st, e.to_string()))?)
            } else {
                None
            };
            doc.insert("delta_e_of_eps".into(), serde_json::to_value(&d).expect("estimate"));
            doc.insert("roa".into(), serde_json::to_value(roa).expect("estimate"));
        }
        if self.wants(Format::Json) {
            self.emit("controller.json", json_bytes(&doc));
        }
        Ok(())
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig::with_tol(self.s.run.tol).sampling(Sampling::Every(self.s.run.sample_dt)).norm(self.s.run.norm)
    }

    fn emit_trajectory(&mut self, tr: &Trajectory, stem: &str) {
        if self.wants(Format::Csv) {
            self.emit(format!("{stem}.csv"), trajectory_csv(tr));
        }
        if self.wants(Format::Svg) {
            self.emit(format!("{stem}.svg"), trajectory_svg(&self.s.name, tr).into_bytes());
        }
        if self.wants(Format::Json) {
            self.emit(format!("{stem}_diagnostics.json"), json_bytes(&tr.diagnostics));
        }
    }

    /// Runs the simulation stage and returns the trajectory.
    fn simulate(&mut self) -> Result<Trajectory, ScenarioError> {
        let st = Stage::Simulate;
        let cfg = self.sim_config();
        let (t0, t1) = (self.s.run.t0, self.s.run.t_end);
        let result = match self.r.mode {
            Mode::ErrorDynamics => {
                self.hurwitz(st)?;
                simulate_error_dynamics(self.hurwitz.as_ref().expect("built"), &self.r.pert, &self.r.initial, t0, t1, &cfg)
            }
            Mode::ClosedLoop | Mode::Tracking => {
                self.controller(st)?;
                let (ctrl, model) = (self.controller.as_ref().expect("built"), self.r.model.as_ref().expect("model"));
                match &self.r.reference {
                    Some(spec) => simulate_tracking(model, ctrl, spec, &self.r.pert, &self.r.initial, t0, t1, &cfg),
                    None => simulate_closed_loop(model, ctrl, &self.r.pert, &self.r.initial, t0, t1, &cfg),
                }
            }
        };
        match result {
            Ok(tr) => {
                self.emit_trajectory(&tr, "trajectory");
                Ok(tr)
            }
            Err(e) => {
                if let Some(p) = e.partial() {
                    let p = p.clone();
                    self.emit_trajectory(&p, "trajectory_partial");
                }
                Err(stage_err(st, sim_message(&e)))
            }
        }
    }

    fn verify(&mut self) -> Result<(), ScenarioError> {
        let st = Stage::Verify;
        let r = &self.s.run;
        let cfg = VerifyConfig {
            delta0: r.delta0,
            t0_grid: r.t0_grid.clone(),
            eps_levels: r.eps_levels.clone(),
            horizon: r.verify_horizon,
            samples: r.samples,
            seed: r.seed,
        };
        let tol = r.verify_tol.unwrap_or(r.tol);
        let norm = r.norm;
        let report = match self.r.mode {
            Mode::ErrorDynamics => {
                self.hurwitz(st)?;
                let sys = ErrorSystem::new(self.hurwitz.as_ref().expect("built"), &self.r.pert, tol, norm);
                verify_evuas(&sys, &cfg)
            }
            Mode::ClosedLoop => {
                self.controller(st)?;
                let sys = ClosedLoopSystem::new(self.r.model.as_ref().expect("model"), self.controller.as_ref().expect("built"), &self.r.pert, tol, norm);
                verify_evuas(&sys, &cfg)
            }
            Mode::Tracking => return Err(stage_err(st, "verification of tracking runs is not supported")),
        }
        .map_err(|e| stage_err(st, e.to_string()))?;
        if self.wants(Format::Json) {
            self.emit("verify_report.json", json_bytes(&report));
        }
        Ok(())
    }
}

fn sim_message(e: &SimError) -> String {
    e.to_string()
}

/// Result of running a scenario in memory.
pub struct RunOutput {
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub trajectory: Option<Trajectory>,
    pub error: Option<ScenarioError>,
    pub stages: Vec<Stage>,
}

/// Runs `stages` (or the scenario's own list) in pipeline order without
/// touching the file system. Schema errors are returned directly; stage
/// failures are reported in `RunOutput::error` with the artifacts written
/// so far.
pub fn execute(s: &Scenario, stages: Option<&[Stage]>) -> Result<RunOutput, ScenarioError> {
    let r = resolve(s)?;
    let mut order: Vec<Stage> = stages.unwrap_or(&s.stages).to_vec();
    order.sort();
    order.dedup();
    let mut p = Pipeline { s, r, hurwitz: None, design: None, controller: None, artifacts: Vec::new() };
    let mut trajectory = None;
    let mut error = None;
    for &stage in &order {
        let res = match stage {
            Stage::Classify => p.classify(),
            Stage::Synthesize => p.synthesize(),
            Stage::Simulate => p.simulate().map(|tr| trajectory = Some(tr)),
            Stage::Verify => p.verify(),
        };
        if let Err(e) = res {
            error = Some(e);
            break;
        }
    }
    Ok(RunOutput { artifacts: p.artifacts, trajectory, error, stages: order })
}

/// Canonical digest of the effective configuration.
pub fn config_digest(s: &Scenario) -> String {
    sha256_hex(&serde_json::to_vec(s).expect("scenario serializes"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ScenarioError> {
    fs::write(path, bytes).map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Runs a scenario and writes its artifacts and manifest into `out`. The
/// manifest is written even when a stage fails.
pub fn run_scenario(s: &Scenario, stages: Option<&[Stage]>, out: &Path) -> Result<Manifest, ScenarioError> {
    let run = execute(s, stages)?;
    fs::create_dir_all(out).map_err(|e| ScenarioError::Io { path: out.display().to_string(), message: e.to_string() })?;
    let mut entries = Vec::new();
    for (name, bytes) in &run.artifacts {
        write_file(&out.join(name), bytes)?;
        entries.push(ArtifactEntry { file: name.clone(), sha256: sha256_hex(bytes), bytes: bytes.len() });
    }
    let status = match &run.error {
        None => "ok".to_string(),
        Some(e) => format!("failed: {e}"),
    };
    let manifest = Manifest {
        scenario: s.name.clone(),
        config_sha256: config_digest(s),
        seed: s.run.seed,
        stages: run.stages.clone(),
        status,
        versions: BTreeMap::from([("evuas", env!("CARGO_PKG_VERSION"))]),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        artifacts: entries,
    };
    write_file(&out.join(MANIFEST_FILE), &json_bytes(&manifest))?;
    match run.error {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}
