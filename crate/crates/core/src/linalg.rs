//! Small dense helpers: polynomials from roots, spectra, and multiset
//! matching of eigenvalues that tolerates defective (repeated) poles.

use nalgebra::{Complex, DMatrix};

pub type C64 = Complex<f64>;

/// Monic polynomial coefficients (lowest degree first, leading 1 included)
/// of `prod (z - r)`. Imaginary parts are dropped; callers pass
/// conjugate-closed root sets.
pub fn poly_from_roots(roots: &[C64]) -> Vec<f64> {
    let mut c = vec![C64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![C64::new(0.0, 0.0); c.len() + 1];
        for (k, &ck) in c.iter().enumerate() {
            next[k + 1] += ck;
            next[k] -= ck * r;
        }
        c = next;
    }
    c.into_iter().map(|z| z.re).collect()
}

pub fn poly_eval(coeffs: &[f64], z: C64) -> C64 {
    coeffs.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// Companion matrix of a monic polynomial (lowest degree first, leading 1
/// included): ones on the superdiagonal, last row `-c_0, ..., -c_{d-1}`.
pub fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let d = coeffs.len() - 1;
    let mut c = DMatrix::zeros(d, d);
    for i in 0..d.saturating_sub(1) {
        c[(i, i + 1)] = 1.0;
    }
    for k in 0..d {
        c[(d - 1, k)] = -coeffs[k] / coeffs[d];
    }
    c
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<C64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.clone().complex_eigenvalues().iter().copied().collect()
}

pub fn poly_roots(coeffs: &[f64]) -> Vec<C64> {
    eigenvalues(&companion(coeffs))
}

/// True when every non-real entry has its conjugate (with multiplicity).
pub fn is_conjugate_closed(values: &[C64], tol: f64) -> bool {
    let mut used = vec![false; values.len()];
    for i in 0..values.len() {
        if used[i] || values[i].im.abs() <= tol {
            continue;
        }
        let target = values[i].conj();
        let partner = (0..values.len())
            .filter(|&j| j != i && !used[j])
            .find(|&j| (values[j] - target).norm() <= tol * (1.0 + target.norm()));
        match partner {
            Some(j) => {
                used[i] = true;
                used[j] = true;
            }
            None => return false,
        }
    }
    true
}

/// Distance between two multisets of eigenvalues. Targets closer than
/// `cluster_tol` form one cluster; computed values are assigned to their
/// nearest cluster, cluster sizes must agree, and the error is the largest
/// distance between a cluster's computed mean and its target. Means of a
/// cluster are well conditioned even when individual defective eigenvalues
/// are not. Returns infinity when the multiplicities disagree.
pub fn spectrum_distance(computed: &[C64], target: &[C64], cluster_tol: f64) -> f64 {
    if computed.len() != target.len() {
        return f64::INFINITY;
    }
    let mut centres: Vec<(C64, usize)> = Vec::new();
    for &t in target {
        match centres.iter_mut().find(|(c, _)| (*c - t).norm() <= cluster_tol * (1.0 + t.norm())) {
            Some((_, k)) => *k += 1,
            None => centres.push((t, 1)),
        }
    }
    let mut sums = vec![(C64::new(0.0, 0.0), 0usize); centres.len()];
    for &z in computed {
        let (idx, _) = centres
            .iter()
            .enumerate()
            .map(|(i, (c, _))| (i, (z - *c).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty target");
        sums[idx].0 += z;
        sums[idx].1 += 1;
    }
    let mut worst = 0.0_f64;
    for ((c, k), (s, got)) in centres.iter().zip(&sums) {
        if k != got {
            return f64::INFINITY;
        }
        worst = worst.max((s / *k as f64 - c).norm());
    }
    worst
}

/// `(sigma_max, sigma_min)` of a square matrix.
pub fn extreme_singular_values(a: &DMatrix<f64>) -> (f64, f64) {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    (max, min)
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    extreme_singular_values(a).0
}

/// Numerical rank with the usual `max(dim) * eps * sigma_max` threshold.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * max * 16.0;
    sv.iter().filter(|s| **s > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn expands_products() {
        assert_eq!(poly_from_roots(&[c(-1.0, 0.0), c(-2.0, 0.0)]), vec![2.0, 3.0, 1.0]);
        let p = poly_from_roots(&[c(-1.0, 2.0), c(-1.0, -2.0)]);
        assert_eq!(p, vec![5.0, 2.0, 1.0]);
        assert!(poly_eval(&p, c(-1.0, 2.0)).norm() < 1e-14);
    }

    #[test]
    fn companion_roots() {
        let mut r = poly_roots(&[6.0, 5.0, 1.0]);
        r.sort_by(|a, b| a.re.total_cmp(&b.re));
        assert!((r[0] - c(-3.0, 0.0)).norm() < 1e-12);
        assert!((r[1] - c(-2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn conjugate_closure() {
        assert!(is_conjugate_closed(&[c(-1.0, 1.0), c(-2.0, 0.0), c(-1.0, -1.0)], 1e-12));
        assert!(!is_conjugate_closed(&[c(-1.0, 1.0), c(-1.0, 1.0)], 1e-12));
    }

    #[test]
    fn triple_root_cluster_mean_is_accurate() {
        let target = vec![c(-1.0, 0.0); 3];
        let computed = poly_roots(&poly_from_roots(&target));
        // Individual roots scatter at ~1e-5; the cluster mean does not.
        assert!(computed.iter().any(|z| (z - c(-1.0, 0.0)).norm() > 1e-9));
        assert!(spectrum_distance(&computed, &target, 1e-6) < 1e-12);
    }

    #[test]
    fn multiplicity_mismatch_is_infinite() {
        let target = [c(-1.0, 0.0), c(-3.0, 0.0)];
        let computed = [c(-1.0, 0.0), c(-1.0, 0.0)];
        assert!(spectrum_distance(&computed, &target, 1e-6).is_infinite());
    }

    #[test]
    fn rank_and_norms() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(numerical_rank(&a), 1);
        let (mx, mn) = extreme_singular_values(&DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -0.5]));
        assert!((mx - 3.0).abs() < 1e-14 && (mn - 0.5).abs() < 1e-14);
    }
}
