//! Time signals `h: [0, inf) -> R^d` and the built-in signal catalog.
//!
//! A signal may carry a frequency hint (local angular frequency of its fastest
//! oscillation) used by the quadrature mesh and the integrator step cap, and an
//! analytic bound on its unit-window integral used for reporting.

use std::fmt;
use std::sync::Arc;

pub type SignalFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// Local angular frequency (rad per unit time) of a signal at time `t`.
pub type FreqHint = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type WindowBound = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Signal {
    name: String,
    dim: usize,
    f: SignalFn,
    freq_hint: Option<FreqHint>,
    window_bound: Option<WindowBound>,
}

impl fmt::Debug for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signal")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("freq_hint", &self.freq_hint.is_some())
            .finish()
    }
}

impl Signal {
    pub fn new<F>(name: impl Into<String>, dim: usize, f: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            f: Arc::new(f),
            freq_hint: None,
            window_bound: None,
        }
    }

    /// Scalar signal from a plain function.
    pub fn scalar<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(name, 1, move |t, out| out[0] = f(t))
    }

    pub fn with_freq_hint<H>(mut self, hint: H) -> Self
    where
        H: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.freq_hint = Some(Arc::new(hint));
        self
    }

    pub fn with_window_bound<B>(mut self, bound: B) -> Self
    where
        B: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.window_bound = Some(Arc::new(bound));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        (self.f)(t, out)
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval(t, &mut out);
        out
    }

    pub fn freq_hint(&self) -> Option<&FreqHint> {
        self.freq_hint.as_ref()
    }

    pub fn angular_frequency(&self, t: f64) -> Option<f64> {
        self.freq_hint.as_ref().map(|h| h(t))
    }

    /// Analytic upper bound on `sup_lambda |int_t^{t+lambda} h|`, if known.
    pub fn window_bound(&self, t: f64) -> Option<f64> {
        self.window_bound.as_ref().map(|b| b(t))
    }

    /// `c * h`. Frequency hint is kept; the window bound scales with `|c|`.
    pub fn scaled(&self, c: f64) -> Signal {
        let inner = self.f.clone();
        let mut s = Signal::new(format!("{}*{c}", self.name), self.dim, move |t, out| {
            inner(t, out);
            for v in out.iter_mut() {
                *v *= c;
            }
        });
        s.freq_hint = self.freq_hint.clone();
        if let Some(b) = self.window_bound.clone() {
            s.window_bound = Some(Arc::new(move |t| c.abs() * b(t)));
        }
        s
    }

    /// Places a scalar signal into component `channel` of a `dim`-vector.
    pub fn embed(&self, dim: usize, channel: usize) -> Signal {
        assert!(self.dim == 1 && channel < dim, "embed expects a scalar signal and a valid channel");
        let inner = self.f.clone();
        let mut s = Signal::new(format!("{}@{channel}", self.name), dim, move |t, out| {
            let mut v = [0.0];
            inner(t, &mut v);
            out.fill(0.0);
            out[channel] = v[0];
        });
        s.freq_hint = self.freq_hint.clone();
        s.window_bound = self.window_bound.clone();
        s
    }

    /// Single component `j` of a vector signal.
    pub fn component(&self, j: usize) -> Signal {
        assert!(j < self.dim);
        let inner = self.f.clone();
        let dim = self.dim;
        let mut s = Signal::new(format!("{}[{j}]", self.name), 1, move |t, out| {
            let mut buf = vec![0.0; dim];
            inner(t, &mut buf);
            out[0] = buf[j];
        });
        s.freq_hint = self.freq_hint.clone();
        s
    }
}

/// Built-in signal names with one-line descriptions.
pub const SIGNAL_CATALOG: &[(&str, &str)] = &[
    ("cos_exp", "cos(e^t); bounded, non-vanishing, diminishing"),
    ("vec_cos_sin_exp", "(cos(e^t), sin(e^t)); unit norm, diminishing"),
    ("t_cos_t4", "t cos(t^4); unbounded, diminishing"),
    ("vec_t_cos_sin_t4", "(t cos(t^4), t sin(t^4)); norm t, diminishing"),
    ("const1", "constant 1; not diminishing"),
    ("zero", "identically zero"),
];

fn exp_phase_hint(t: f64) -> f64 {
    t.exp()
}

fn quartic_phase_hint(t: f64) -> f64 {
    4.0 * t.abs().powi(3)
}

/// Looks up a catalog signal by name.
pub fn catalog_signal(name: &str) -> Option<Signal> {
    let s = match name {
        "cos_exp" => Signal::scalar(name, |t| t.exp().cos())
            .with_freq_hint(exp_phase_hint)
            .with_window_bound(|t| 4.0 * (-t).exp()),
        "vec_cos_sin_exp" => Signal::new(name, 2, |t, out| {
            let (s, c) = t.exp().sin_cos();
            out[0] = c;
            out[1] = s;
        })
        .with_freq_hint(exp_phase_hint)
        .with_window_bound(|t| 32f64.sqrt() * (-t).exp()),
        "t_cos_t4" => Signal::scalar(name, |t| t * t.powi(4).cos()).with_freq_hint(quartic_phase_hint),
        "vec_t_cos_sin_t4" => Signal::new(name, 2, |t, out| {
            let (s, c) = t.powi(4).sin_cos();
            out[0] = t * c;
            out[1] = t * s;
        })
        .with_freq_hint(quartic_phase_hint),
        "const1" => Signal::scalar(name, |_| 1.0),
        "zero" => Signal::scalar(name, |_| 0.0),
        _ => return None,
    };
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_resolves_every_listed_name() {
        for (name, _) in SIGNAL_CATALOG {
            let s = catalog_signal(name).expect(name);
            assert_eq!(s.name(), *name);
            let v = s.value(0.7);
            assert_eq!(v.len(), s.dim());
            assert!(v.iter().all(|x| x.is_finite()));
        }
        assert!(catalog_signal("nope").is_none());
    }

    #[test]
    fn vector_catalog_norms() {
        let h = catalog_signal("vec_cos_sin_exp").unwrap();
        let v = h.value(2.3);
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() < 1e-15);
        let g = catalog_signal("vec_t_cos_sin_t4").unwrap();
        let v = g.value(3.0);
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_embedded_and_component() {
        let h = catalog_signal("cos_exp").unwrap();
        let s = h.scaled(-2.0);
        assert_eq!(s.value(0.0)[0], -2.0 * 1f64.cos());
        assert_eq!(s.window_bound(0.0), Some(8.0));
        let e = h.embed(3, 1);
        assert_eq!(e.value(0.0), vec![0.0, 1f64.cos(), 0.0]);
        let v = catalog_signal("vec_cos_sin_exp").unwrap().component(1);
        assert_eq!(v.value(0.0)[0], 1f64.sin());
        assert!(v.freq_hint().is_some());
    }
}
