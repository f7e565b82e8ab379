//! Normalized Legendre basis `g_r(x) = √(2r+1) P_r(x)`, orthonormal under
//! Uniform(−1, 1).

use crate::scalar::Scalar;

/// `P_0(x), …, P_n(x)` by the three-term recurrence
/// `(n+1) P_{n+1} = (2n+1) x P_n − n P_{n−1}`.
pub fn legendre_all<S: Scalar>(n: usize, x: S) -> Vec<S> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(S::one());
    if n >= 1 {
        p.push(x);
    }
    for j in 1..n {
        let jf = S::lit(j as f64);
        let next = ((jf + jf + S::one()) * x * p[j] - jf * p[j - 1]) / (jf + S::one());
        p.push(next);
    }
    p
}

/// `P'_0(x), …, P'_n(x)` via `P'_{j+1} = P'_{j−1} + (2j+1) P_j`, which stays
/// finite at the endpoints.
pub fn legendre_deriv_all<S: Scalar>(n: usize, x: S) -> Vec<S> {
    let p = legendre_all(n, x);
    let mut d = vec![S::zero(); n + 1];
    if n >= 1 {
        d[1] = S::one();
    }
    for j in 1..n {
        let jf = S::lit(j as f64);
        d[j + 1] = d[j - 1] + (jf + jf + S::one()) * p[j];
    }
    d
}

/// `g_r(x)` for `r = r0..=r_max`.
pub fn normalized<S: Scalar>(r0: usize, r_max: usize, x: S) -> Vec<S> {
    let p = legendre_all(r_max, x);
    (r0..=r_max)
        .map(|r| S::lit((2 * r + 1) as f64).sqrt() * p[r])
        .collect()
}

/// `g_r'(x)` for `r = r0..=r_max`.
pub fn normalized_deriv<S: Scalar>(r0: usize, r_max: usize, x: S) -> Vec<S> {
    let d = legendre_deriv_all(r_max, x);
    (r0..=r_max)
        .map(|r| S::lit((2 * r + 1) as f64).sqrt() * d[r])
        .collect()
}

/// `sup_{x ∈ [lo, hi]} |g_r(x)|` over degrees `r0..=r_max`.
///
/// Legendre polynomials attain their maximum modulus on `[−1, 1]` at the
/// endpoints and grow monotonically outside it, so the supremum is attained
/// at an endpoint of the hull.
pub fn g_max(r0: usize, r_max: usize, lo: f64, hi: f64) -> f64 {
    let at = |x: f64| {
        normalized::<f64>(r0, r_max, x)
            .into_iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let edge = at(lo).max(at(hi));
    let unit = (2.0 * r_max as f64 + 1.0).sqrt();
    if lo <= -1.0 || hi >= 1.0 {
        edge
    } else {
        // Hull strictly inside [−1, 1]: fall back to a dense scan.
        let n = 4001;
        (0..n)
            .map(|i| at(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .fold(edge, f64::max)
            .min(unit)
    }
}
