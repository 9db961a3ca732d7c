//! Adaptive Gauss-Kronrod (7/15) quadrature for vector-valued integrands.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("quadrature budget exceeded: best estimate {value:?}, error bound {error_bound:.3e}")]
    BudgetExceeded { value: Vec<f64>, error_bound: f64 },
    #[error("invalid quadrature request: {0}")]
    Invalid(String),
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Result of integrating `f: R -> R^d` over an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadEstimate {
    pub value: Vec<f64>,
    /// Bound on the max-component absolute error.
    pub error: f64,
    pub evals: usize,
}

/// One 15-point Kronrod rule on `[a, b]`. Returns the per-component values
/// and the QUADPACK-style error estimate (max over components).
pub fn gk15<F>(f: &mut F, a: f64, b: f64, dim: usize) -> (Vec<f64>, f64)
where
    F: FnMut(f64, &mut [f64]),
{
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut fv = vec![0.0; 15 * dim];
    f(centre, &mut fv[..dim]);
    for j in 0..7 {
        let dx = half * XGK[j];
        let (lo, hi) = fv[dim * (1 + 2 * j)..dim * (3 + 2 * j)].split_at_mut(dim);
        f(centre - dx, lo);
        f(centre + dx, hi);
    }
    let mut value = vec![0.0; dim];
    let mut err = 0.0_f64;
    for c in 0..dim {
        let fc = fv[c];
        let mut resk = WGK[7] * fc;
        let mut resg = WG[3] * fc;
        let mut resabs = WGK[7] * fc.abs();
        for j in 0..7 {
            let f1 = fv[dim * (1 + 2 * j) + c];
            let f2 = fv[dim * (2 + 2 * j) + c];
            resk += WGK[j] * (f1 + f2);
            resabs += WGK[j] * (f1.abs() + f2.abs());
            if j % 2 == 1 {
                resg += WG[j / 2] * (f1 + f2);
            }
        }
        let mean = 0.5 * resk;
        let mut resasc = WGK[7] * (fc - mean).abs();
        for j in 0..7 {
            let f1 = fv[dim * (1 + 2 * j) + c];
            let f2 = fv[dim * (2 + 2 * j) + c];
            resasc += WGK[j] * ((f1 - mean).abs() + (f2 - mean).abs());
        }
        let (resk, resabs, resasc) = (resk * half, resabs * half.abs(), resasc * half.abs());
        let mut e = (resk - resg * half).abs();
        if resasc != 0.0 && e != 0.0 {
            e = resasc * (200.0 * e / resasc).powf(1.5).min(1.0);
        }
        if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
            e = e.max(50.0 * f64::EPSILON * resabs);
        }
        value[c] = resk;
        err = err.max(e);
    }
    (value, err)
}

struct Piece {
    a: f64,
    b: f64,
    value: Vec<f64>,
    err: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive bisection until the summed error is at most `abs_tol`,
/// or until `max_evals` integrand evaluations have been spent.
pub fn integrate<F>(mut f: F, a: f64, b: f64, dim: usize, abs_tol: f64, max_evals: usize) -> Result<QuadEstimate, QuadError>
where
    F: FnMut(f64, &mut [f64]),
{
    if !(abs_tol > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(QuadError::Invalid(format!("a={a}, b={b}, tol={abs_tol}")));
    }
    if a == b {
        return Ok(QuadEstimate { value: vec![0.0; dim], error: 0.0, evals: 0 });
    }
    let (value, err) = gk15(&mut f, a, b, dim);
    let mut evals = 15;
    if err <= abs_tol {
        return Ok(QuadEstimate { value, error: err, evals });
    }
    let mut heap = BinaryHeap::new();
    let mut total = value.clone();
    let mut total_err = err;
    heap.push(Piece { a, b, value, err });
    while total_err > abs_tol {
        if evals + 30 > max_evals {
            return Err(QuadError::BudgetExceeded { value: total, error_bound: total_err });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval at floating-point resolution; keep its estimate.
            heap.push(Piece { err: 0.0, ..worst });
            total_err = heap.iter().map(|p| p.err).sum();
            continue;
        }
        let (lv, le) = gk15(&mut f, worst.a, mid, dim);
        let (rv, re) = gk15(&mut f, mid, worst.b, dim);
        evals += 30;
        for c in 0..dim {
            total[c] += lv[c] + rv[c] - worst.value[c];
        }
        total_err += le + re - worst.err;
        heap.push(Piece { a: worst.a, b: mid, value: lv, err: le });
        heap.push(Piece { a: mid, b: worst.b, value: rv, err: re });
        if total_err <= abs_tol {
            // Re-sum to shed accumulated rounding in the running totals.
            total_err = heap.iter().map(|p| p.err).sum();
        }
    }
    let mut value = vec![0.0; dim];
    for p in heap.iter() {
        for c in 0..dim {
            value[c] += p.value[c];
        }
    }
    Ok(QuadEstimate { value, error: total_err, evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        // GK15 integrates degree <= 22 exactly.
        let r = integrate(|t, o| o[0] = t.powi(9) - 3.0 * t * t, -1.0, 2.0, 1, 1e-10, 1000).unwrap();
        let exact = (2f64.powi(10) - 1.0) / 10.0 - (8.0 + 1.0);
        assert!((r.value[0] - exact).abs() < 1e-10);
    }

    #[test]
    fn oscillatory_vector_integrand() {
        let r = integrate(
            |t, o| {
                o[0] = (50.0 * t).sin();
                o[1] = (50.0 * t).cos();
            },
            0.0,
            3.0,
            2,
            1e-11,
            100_000,
        )
        .unwrap();
        assert!((r.value[0] - (1.0 - 150f64.cos()) / 50.0).abs() < 1e-10);
        assert!((r.value[1] - 150f64.sin() / 50.0).abs() < 1e-10);
    }

    #[test]
    fn empty_interval_and_bad_tolerance() {
        assert_eq!(integrate(|_, o| o[0] = 1.0, 1.0, 1.0, 1, 1e-9, 10).unwrap().value, vec![0.0]);
        assert!(matches!(integrate(|_, o| o[0] = 1.0, 0.0, 1.0, 1, 0.0, 10), Err(QuadError::Invalid(_))));
    }

    #[test]
    fn budget_is_enforced() {
        let err = integrate(|t, o| o[0] = (1.0 / (t + 1e-9)).sin(), 0.0, 1.0, 1, 1e-14, 200).unwrap_err();
        match err {
            QuadError::BudgetExceeded { error_bound, .. } => assert!(error_bound > 1e-14),
            other => panic!("unexpected {other:?}"),
        }
    }
}
