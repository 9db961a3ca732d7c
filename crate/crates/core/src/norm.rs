use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Vector norm used for state sizes, window integrals and stability bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Euclidean,
    Inf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Euclidean => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Inf => v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())),
        }
    }

    /// Constants `(theta1, theta2)` with `theta1 |x| <= ||x||_2 <= theta2 |x|` on R^dim.
    pub fn equivalence_constants(self, dim: usize) -> (f64, f64) {
        match self {
            Norm::Euclidean => (1.0, 1.0),
            Norm::Inf => (1.0, (dim.max(1) as f64).sqrt()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::Euclidean => "euclidean",
            Norm::Inf => "inf",
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Norm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" | "2" => Ok(Norm::Euclidean),
            "inf" | "max" | "linf" => Ok(Norm::Inf),
            other => Err(format!("unknown norm '{other}' (expected euclidean or inf)")),
        }
    }
}
