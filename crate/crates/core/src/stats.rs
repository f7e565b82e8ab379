//! Small statistical helpers shared by the Monte Carlo laboratories.

use serde::{Deserialize, Serialize};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log N(y; mu, s2)`.
#[inline]
pub fn log_normal_pdf(y: f64, mu: f64, s2: f64) -> f64 {
    let r = y - mu;
    -0.5 * (LN_2PI + s2.ln() + r * r / s2)
}

/// `KL(N(mu_p, s2_p) ‖ N(mu_q, s2_q))`.
pub fn kl_normal(mu_p: f64, s2_p: f64, mu_q: f64, s2_q: f64) -> f64 {
    let d = mu_p - mu_q;
    0.5 * ((s2_q / s2_p).ln() + s2_p / s2_q - 1.0 + d * d / s2_q)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// True when `|mean − target| ≤ z · se`.
    pub fn within(&self, target: f64, z: f64) -> bool {
        (self.mean - target).abs() <= z * self.se
    }
}

/// Streaming mean/variance (Welford), merged in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn estimate(&self) -> Estimate {
        if self.n < 2 {
            return Estimate {
                mean: self.mean,
                se: 0.0,
            };
        }
        let var = self.m2 / (self.n - 1) as f64;
        Estimate {
            mean: self.mean,
            se: (var / self.n as f64).sqrt(),
        }
    }
}

/// Standard normal CDF via `erfc`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, |rel err| < 1.2e-7),
/// refined by one continued-fraction evaluation in the tail.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let r = if z > 3.0 {
        // Lentz continued fraction for erfc, accurate to double precision here.
        let mut f = z;
        let mut c = z;
        let mut d = 0.0;
        let tiny = 1e-300;
        for n in 1..200 {
            let a = n as f64 * 0.5;
            d = z + a * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = z + a / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-z * z).exp() / (f * std::f64::consts::PI.sqrt())
    } else {
        // Maclaurin series of erf, converges quickly for |x| ≤ 3.
        let mut term = z;
        let mut sum = z;
        let z2 = z * z;
        for n in 1..200 {
            term *= -z2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    };
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// `ln Γ(d/2)` for a positive integer `d`.
pub fn ln_gamma_half(d: usize) -> f64 {
    let mut acc = if d % 2 == 0 {
        0.0 // Γ(1)
    } else {
        0.5 * std::f64::consts::PI.ln() // Γ(1/2)
    };
    let mut a = if d % 2 == 0 { 1.0 } else { 0.5 };
    while 2.0 * a < d as f64 {
        acc += a.ln();
        a += 1.0;
    }
    acc
}

/// `P(χ²_d > t)` by composite Simpson integration of the density on
/// `[t, t + 60 + 20 d]`.
pub fn chi2_tail(d: usize, t: f64) -> f64 {
    let df = d as f64;
    let ln_norm = -(0.5 * df) * 2f64.ln() - ln_gamma_half(d);
    let dens = |u: f64| {
        if u <= 0.0 {
            return if d == 2 { 0.5 } else { 0.0 };
        }
        (ln_norm + (0.5 * df - 1.0) * u.ln() - 0.5 * u).exp()
    };
    let hi = t + 60.0 + 20.0 * df;
    let n = 20_000;
    let h = (hi - t) / n as f64;
    let mut s = dens(t) + dens(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * dens(t + h * i as f64);
    }
    s * h / 3.0
}

/// Average ranks (ties share the mean rank).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfc_reference_values() {
        // Reference values from high-precision tables.
        assert!((erfc(0.5) - 0.479_500_122_186_953_5).abs() < 1e-14);
        assert!((erfc(2.0) - 0.004_677_734_981_047_266).abs() < 1e-15);
        assert!((erfc(4.0) / 1.541_725_790_028_002e-8 - 1.0).abs() < 1e-12);
        assert!((normal_cdf(-6.0) / 9.865_876_450_376_98e-10 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn chi2_tail_matches_closed_forms() {
        // d = 2: tail is exp(−t/2).
        assert!((chi2_tail(2, 36.0) / (-18f64).exp() - 1.0).abs() < 1e-8);
        // d = 1: tail is 2Φ(−√t).
        let want = 2.0 * normal_cdf(-3.0);
        assert!((chi2_tail(1, 9.0) / want - 1.0).abs() < 1e-6);
    }

    #[test]
    fn spearman_monotone() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_of_unit_variance_shift() {
        assert!((kl_normal(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
