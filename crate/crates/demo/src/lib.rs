//! Browser demo: window-metric profiles of catalog signals, two-dimensional error
//! trajectories, and linear pole placement on the inverted pendulum.
//!
//! Every export returns a JSON plot description
//! `{ title, log_y, series: [{ name, xs, ys }], notes }`.

use wasm_bindgen::prelude::*;

pub mod ops {
    use nalgebra::DMatrix;
    use serde::Serialize;

    use evuas::diminishing::{diminishing_profile, WindowConfig};
    use evuas::linalg::C64;
    use evuas::model::{catalog_model, catalog_perturbation, ModelParams, PerturbationSpec};
    use evuas::ode::Sampling;
    use evuas::signal::catalog_signal;
    use evuas::simulate::{simulate_closed_loop, simulate_error_dynamics, SimConfig, Trajectory};
    use evuas::synthesis::{build_hurwitz, closed_loop_spectrum, linearize_and_place};

    #[derive(Debug, Serialize)]
    pub struct Series {
        pub name: String,
        pub xs: Vec<f64>,
        pub ys: Vec<f64>,
    }

    #[derive(Debug, Serialize)]
    pub struct Plot {
        pub title: String,
        pub log_y: bool,
        pub series: Vec<Series>,
        pub notes: Vec<String>,
    }

    pub const PROFILE_SIGNALS: &[&str] = &["cos_exp", "vec_cos_sin_exp", "t_cos_t4", "vec_t_cos_sin_t4", "const1"];

    fn trajectory_series(tr: &Trajectory, label: &str) -> Vec<Series> {
        let mut out: Vec<Series> = (0..tr.dim())
            .map(|i| Series { name: format!("{label}{}", i + 1), xs: tr.times.clone(), ys: tr.states.iter().map(|s| s[i]).collect() })
            .collect();
        out.push(Series { name: "norm".into(), xs: tr.times.clone(), ys: tr.norms.clone() });
        out
    }

    /// Window-metric profile of a catalog signal on `{t_min, ..., t_max}`.
    pub fn profile(signal: &str, t_min: u32, t_max: u32) -> Result<Plot, String> {
        if !PROFILE_SIGNALS.contains(&signal) {
            return Err(format!("unknown signal '{signal}'"));
        }
        if t_min >= t_max || t_max > 10 {
            return Err("need t_min < t_max <= 10".into());
        }
        let h = catalog_signal(signal).ok_or("catalog")?;
        let grid: Vec<f64> = (t_min..=t_max).map(f64::from).collect();
        let p = diminishing_profile(&h, &grid, &WindowConfig::default()).map_err(|e| e.to_string())?;
        let mut series = vec![Series { name: "window sup".into(), xs: grid.clone(), ys: p.values.clone() }];
        if let Some(b) = &p.bounds {
            series.push(Series { name: "bound".into(), xs: grid.clone(), ys: b.clone() });
        }
        Ok(Plot { title: format!("window metric of {signal}"), log_y: true, series, notes: vec![format!("trend: {:?}", p.trend)] })
    }

    /// `E' = A_H E + W~(t, E)` with `A_H = [[-1, 2], [0, -1.5]]`.
    pub fn example1(perturbation: &str, e1: f64, e2: f64, t_end: f64) -> Result<Plot, String> {
        if !["example1_unbounded", "example1_bounded", "constant_1_0", "zero"].contains(&perturbation) {
            return Err(format!("unknown perturbation '{perturbation}'"));
        }
        if !(t_end > 0.0 && t_end <= 20.0) || !e1.is_finite() || !e2.is_finite() {
            return Err("need 0 < t_end <= 20 and a finite initial state".into());
        }
        let h = build_hurwitz(DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -1.5])).map_err(|e| e.to_string())?;
        let w: PerturbationSpec = catalog_perturbation(perturbation, 2).map_err(|e| e.to_string())?;
        let cfg = SimConfig::with_tol(1e-8).sampling(Sampling::Every(t_end / 1000.0));
        let tr = simulate_error_dynamics(&h, &w, &[e1, e2], 0.0, t_end, &cfg).map_err(|e| e.to_string())?;
        let notes = vec![
            format!("final |E| = {:.3e}", tr.final_norm()),
            format!("sup |E| over the last 10%: {:.3e}", tr.tail_sup(0.1)),
            format!("{} accepted steps", tr.diagnostics.accepted_steps),
        ];
        Ok(Plot { title: format!("error dynamics, {perturbation}"), log_y: false, series: trajectory_series(&tr, "e"), notes })
    }

    /// Inverted pendulum `y'' = sin y + u` under the linear gain placing the
    /// linearised poles at `p1, p2` (real, or `re ± i im` when `im != 0`).
    pub fn placement(re1: f64, im1: f64, re2: f64, angle0: f64, t_end: f64) -> Result<Plot, String> {
        let poles = if im1 != 0.0 { [C64::new(re1, im1), C64::new(re1, -im1)] } else { [C64::new(re1, 0.0), C64::new(re2, 0.0)] };
        if poles.iter().any(|p| !p.re.is_finite() || !p.im.is_finite() || p.re >= 0.0) {
            return Err("poles must have negative real parts".into());
        }
        if !(t_end > 0.0 && t_end <= 30.0) || !angle0.is_finite() {
            return Err("need 0 < t_end <= 30 and a finite angle".into());
        }
        let model = catalog_model("pendulum", ModelParams::default()).map_err(|e| e.to_string())?;
        let ctrl = linearize_and_place(&model, &poles).map_err(|e| e.to_string())?;
        let gain = ctrl.summary().g_lin.unwrap_or_default();
        let spectrum = closed_loop_spectrum(&ctrl).map_err(|e| e.to_string())?;
        let cfg = SimConfig::with_tol(1e-9).sampling(Sampling::Every(t_end / 1000.0));
        let tr = simulate_closed_loop(&model, &ctrl, &PerturbationSpec::zero(1), &[angle0, 0.0], 0.0, t_end, &cfg).map_err(|e| e.to_string())?;
        let mut series = trajectory_series(&tr, "x");
        if let Some(u) = &tr.inputs {
            series.push(Series { name: "u".into(), xs: tr.times.clone(), ys: u.iter().map(|v| v[0]).collect() });
        }
        let eig: Vec<String> = spectrum.iter().map(|z| format!("{:.4}{:+.4}i", z.re, z.im)).collect();
        let notes = vec![
            format!("G_lin = [{:.4}, {:.4}]", gain[0][0], gain[0][1]),
            format!("linearised closed-loop eigenvalues: {}", eig.join(", ")),
            format!("final |X| = {:.3e}", tr.final_norm()),
        ];
        Ok(Plot { title: "inverted pendulum, linear gain".into(), log_y: false, series, notes })
    }
}

fn to_js(r: Result<ops::Plot, String>) -> Result<String, JsError> {
    r.map(|p| serde_json::to_string(&p).expect("plot serializes")).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn profile(signal: &str, t_min: u32, t_max: u32) -> Result<String, JsError> {
    to_js(ops::profile(signal, t_min, t_max))
}

#[wasm_bindgen]
pub fn example1(perturbation: &str, e1: f64, e2: f64, t_end: f64) -> Result<String, JsError> {
    to_js(ops::example1(perturbation, e1, e2, t_end))
}

#[wasm_bindgen]
pub fn placement(re1: f64, im1: f64, re2: f64, angle0: f64, t_end: f64) -> Result<String, JsError> {
    to_js(ops::placement(re1, im1, re2, angle0, t_end))
}
