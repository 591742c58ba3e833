//! One- and two-sample statistics and the special functions behind them.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;

use crate::error::{domain, Result};
use crate::geometry::ln_gamma;

/// Kolmogorov–Smirnov distance of a sample to a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic one-sample KS critical value at significance about 0.01.
pub fn ks_critical_value(count: usize) -> f64 {
    1.63 / (count as f64).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() as f64 - 1.0)).sqrt()
}

/// Median of a copy of `x`.
pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn row(flat: &[f64], dim: usize, i: usize) -> &[f64] {
    &flat[i * dim..(i + 1) * dim]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unbiased energy distance between two point sets given as flat rows.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(domain!("point sets must be whole rows of dimension {dim}"));
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na < 2 || nb < 2 {
        return Err(domain!("energy distance needs at least two points per set"));
    }
    let mut cross = 0.0;
    for i in 0..na {
        for j in 0..nb {
            cross += dist(row(a, dim, i), row(b, dim, j));
        }
    }
    let within = |s: &[f64], n: usize| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += dist(row(s, dim, i), row(s, dim, j));
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    Ok(2.0 * cross / (na * nb) as f64 - within(a, na) - within(b, nb))
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
/// Returns the column assigned to each row.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Exact 2-Wasserstein distance between equal-size empirical measures.
pub fn w2_exact(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || a.len() != b.len() || a.is_empty() {
        return Err(domain!("W2 needs two nonempty equal-size sets of dimension {dim}"));
    }
    let n = a.len() / dim;
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = dist(row(a, dim, i), row(b, dim, j));
            cost[i * n + j] = d * d;
        }
    }
    let assign = assignment(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

/// 2-Wasserstein distance between equal-size one-dimensional samples.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(domain!("W2 needs two nonempty equal-size samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let total: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((total / a.len() as f64).sqrt())
}

const CF_EPS: f64 = 1e-15;
const CF_TINY: f64 = 1e-300;
const CF_ITERS: usize = 10_000;

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let front = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..CF_ITERS {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * CF_EPS {
                break;
            }
        }
        (sum * front).min(1.0)
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / CF_TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..CF_ITERS {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < CF_TINY {
                d = CF_TINY;
            }
            c = b + an / c;
            if c.abs() < CF_TINY {
                c = CF_TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < CF_EPS {
                break;
            }
        }
        (1.0 - front * h).max(0.0)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..CF_ITERS {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// CDF of the chi distribution with `k` degrees of freedom.
pub fn chi_cdf(x: f64, k: usize) -> f64 {
    reg_lower_gamma(k as f64 / 2.0, x * x / 2.0)
}

/// Mean of the chi distribution with `k` degrees of freedom.
pub fn chi_mean(k: usize) -> f64 {
    let k = k as f64;
    2f64.sqrt() * (ln_gamma((k + 1.0) / 2.0) - ln_gamma(k / 2.0)).exp()
}

/// Standard deviation over mean of the chi distribution.
pub fn chi_relative_std(k: usize) -> f64 {
    let m = chi_mean(k);
    (k as f64 - m * m).max(0.0).sqrt() / m
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, dof: usize) -> f64 {
    1.0 - reg_lower_gamma(dof as f64 / 2.0, x / 2.0)
}

/// Pearson statistic over bins with positive expectation.
pub fn chi_square_statistic(observed: &[f64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .filter(|(_, e)| **e > 0.0)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum()
}

/// CDF of the last coordinate of a uniform point on the upper unit
/// hemisphere of `R^(n+1)`: its square is `Beta(1/2, n/2)`.
pub fn hemisphere_height_cdf(t: f64, n: usize) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    reg_inc_beta(0.5, n as f64 / 2.0, t * t)
}

/// CDF of an angle uniform on `(-pi, pi]`.
pub fn uniform_angle_cdf(phi: f64) -> f64 {
    ((phi + PI) / (2.0 * PI)).clamp(0.0, 1.0)
}
