//! The prior on the `z = z_max` hyperplane: radial projection of the uniform
//! hemisphere distribution.
//!
//! A draw is `x = R u` with `u` uniform on the unit sphere of `R^N` and
//! `R = z_max sqrt(R1 / (1 - R1))`, `R1 ~ Beta(N/2, 1/2)`. The ratio
//! `R1 / (1 - R1)` is formed directly as `G_a / G_b` from the two Gamma draws
//! behind the Beta, which avoids cancellation when `R1` is close to 1.

use alloc::vec::Vec;
use core::f64::consts::LN_2;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{ln_surface_area_unit_sphere, standard_normal};
use crate::linalg;
use crate::perturb::sample_direction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub z_max: f64,
    pub n: usize,
    /// Draws with norm outside `(0, norm_clip)` are resampled.
    #[serde(default)]
    pub norm_clip: Option<f64>,
}

impl PriorSpec {
    pub fn new(z_max: f64, n: usize) -> Result<Self> {
        let p = Self { z_max, n, norm_clip: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self> {
        self.norm_clip = Some(clip);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_max > 0.0 && self.z_max.is_finite()) {
            return Err(domain!("z_max must be positive, got {}", self.z_max));
        }
        if self.n == 0 {
            return Err(domain!("data dimension must be positive"));
        }
        if let Some(c) = self.norm_clip {
            if !(c > 0.0) {
                return Err(domain!("norm clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// `log p_prior(x)`.
pub fn prior_log_density(x: &[f64], p: &PriorSpec) -> Result<f64> {
    p.validate()?;
    if x.len() != p.n {
        return Err(crate::error::Error::DimensionMismatch { expected: p.n, got: x.len() });
    }
    let n = p.n as f64;
    Ok(LN_2 + p.z_max.ln() - ln_surface_area_unit_sphere(p.n)?
        - 0.5 * (n + 1.0) * (linalg::norm_sq(x) + p.z_max * p.z_max).ln())
}

/// Log of the radius density `S_{N-1} R^(N-1) p_prior(R)`.
pub fn prior_radius_log_density(r: f64, p: &PriorSpec) -> Result<f64> {
    p.validate()?;
    if r <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let n = p.n as f64;
    let ln_shell = if p.n == 1 { LN_2 } else { ln_surface_area_unit_sphere(p.n - 1)? };
    Ok(ln_shell + (n - 1.0) * r.ln() + LN_2 + p.z_max.ln() - ln_surface_area_unit_sphere(p.n)?
        - 0.5 * (n + 1.0) * (r * r + p.z_max * p.z_max).ln())
}

/// Radius CDF for `N = 2`: `1 - z_max / sqrt(R^2 + z_max^2)`.
pub fn radius_cdf_2d(r: f64, z_max: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        1.0 - z_max / (r * r + z_max * z_max).sqrt()
    }
}

/// Marsaglia–Tsang Gamma(shape, 1) sampler, boosted for `shape < 1`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(domain!("gamma shape must be positive, got {shape}"));
    }
    if shape < 1.0 {
        let g = sample_gamma(shape + 1.0, rng)?;
        let u: f64 = rng.random();
        return Ok(g * u.powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (x, v) = loop {
            let x = standard_normal(rng);
            let v = 1.0 + c * x;
            if v > 0.0 {
                break (x, v * v * v);
            }
        };
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x * x * x * x || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return Ok(d * v);
        }
    }
}

/// Beta(alpha, beta) as `G_a / (G_a + G_b)`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64> {
    let a = sample_gamma(alpha, rng)?;
    let b = sample_gamma(beta, rng)?;
    Ok(a / (a + b))
}

/// Draw a prior radius without clipping.
pub fn sample_radius<R: Rng + ?Sized>(p: &PriorSpec, rng: &mut R) -> Result<f64> {
    let ga = sample_gamma(p.n as f64 / 2.0, rng)?;
    let gb = sample_gamma(0.5, rng)?;
    Ok(p.z_max * (ga / gb).sqrt())
}

/// Draw `x` from the prior, resampling outside the clip range.
pub fn sample_prior<R: Rng + ?Sized>(p: &PriorSpec, rng: &mut R) -> Result<Vec<f64>> {
    p.validate()?;
    let r = loop {
        let r = sample_radius(p, rng)?;
        let inside = match p.norm_clip {
            Some(c) => r > 0.0 && r < c,
            None => r > 0.0 && r.is_finite(),
        };
        if inside {
            break r;
        }
    };
    let mut u = sample_direction(p.n, rng);
    linalg::scale_in_place(&mut u, r);
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{surface_area_unit_sphere, RngState};
    use crate::stats;
    use core::f64::consts::PI;

    #[test]
    fn density_at_origin() {
        let p = PriorSpec::new(10.0, 2).unwrap();
        let got = prior_log_density(&[0.0, 0.0], &p).unwrap().exp();
        let expect = 2.0 / (surface_area_unit_sphere(2).unwrap() * 100.0);
        assert!((got - expect).abs() < 1e-15 * expect.max(1.0));
    }

    #[test]
    fn density_is_isotropic() {
        let p = PriorSpec::new(3.0, 3).unwrap();
        let a = prior_log_density(&[1.0, 2.0, 2.0], &p).unwrap();
        let b = prior_log_density(&[0.0, 3.0, 0.0], &p).unwrap();
        let c = prior_log_density(&[-2.0, 1.0, -2.0], &p).unwrap();
        assert!((a - b).abs() < 1e-14 && (a - c).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one_in_2d() {
        // Radial integral 2 pi r p(r) on a log-spaced Simpson grid to 1e4 z_max.
        let p = PriorSpec::new(10.0, 2).unwrap();
        let (lo, hi) = (1e-6f64.ln(), (1e5f64).ln());
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let f = |s: f64| {
            let r = s.exp();
            2.0 * PI * r * r * prior_log_density(&[r, 0.0], &p).unwrap().exp()
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..steps {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        let total = acc * h / 3.0;
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn radius_matches_closed_form_cdf() {
        let mut rng = RngState::new(61, 0).rng();
        let p = PriorSpec::new(10.0, 2).unwrap();
        let r: Vec<f64> = (0..100_000).map(|_| sample_radius(&p, &mut rng).unwrap()).collect();
        assert!(stats::ks_one_sample(&r, |x| radius_cdf_2d(x, 10.0)) < 0.006);
    }

    #[test]
    fn direction_isotropy() {
        let mut rng = RngState::new(62, 0).rng();
        let p = PriorSpec::new(10.0, 3).unwrap();
        let mut mean = [0.0; 3];
        let count = 100_000;
        for _ in 0..count {
            let x = sample_prior(&p, &mut rng).unwrap();
            let nrm = linalg::norm(&x);
            for j in 0..3 {
                mean[j] += x[j] / nrm / count as f64;
            }
        }
        for m in mean {
            assert!(m.abs() < 3.0 / (count as f64).sqrt());
        }
    }

    #[test]
    fn radius_histogram_in_3d() {
        let mut rng = RngState::new(63, 0).rng();
        let p = PriorSpec::new(2.0, 3).unwrap();
        let count = 100_000;
        let edges: Vec<f64> = (0..=20).map(|i| 0.5 * i as f64).collect();
        let mut obs = [0.0; 21];
        for _ in 0..count {
            let r = sample_radius(&p, &mut rng).unwrap();
            let bin = edges.iter().rposition(|e| *e <= r).unwrap().min(20);
            obs[bin] += 1.0;
        }
        // Bin probabilities by fine midpoint quadrature of the normalized density.
        let mut exp = [0.0; 21];
        let sub = 2000;
        for b in 0..20 {
            let h = 0.5 / sub as f64;
            let mass: f64 = (0..sub)
                .map(|k| prior_radius_log_density(edges[b] + (k as f64 + 0.5) * h, &p).unwrap().exp() * h)
                .sum();
            exp[b] = mass * count as f64;
        }
        exp[20] = count as f64 - exp[..20].iter().sum::<f64>();
        let chi2 = stats::chi_square_statistic(&obs, &exp);
        assert!(stats::chi_square_sf(chi2, 20) > 1e-3, "chi2 {chi2}");
    }

    #[test]
    fn projected_polar_angle_is_hemisphere_law() {
        let mut rng = RngState::new(64, 0).rng();
        for n in [2usize, 3] {
            let p = PriorSpec::new(5.0, n).unwrap();
            let t: Vec<f64> = (0..100_000)
                .map(|_| {
                    let r = sample_radius(&p, &mut rng).unwrap();
                    5.0 / (r * r + 25.0).sqrt()
                })
                .collect();
            assert!(stats::ks_one_sample(&t, |c| stats::hemisphere_height_cdf(c, n)) < 0.01);
        }
    }

    #[test]
    fn beta_laws() {
        let mut rng = RngState::new(65, 0).rng();
        let u: Vec<f64> = (0..100_000).map(|_| sample_beta(1.0, 1.0, &mut rng).unwrap()).collect();
        assert!(stats::ks_one_sample(&u, |x| x) < 0.006);
        let h: Vec<f64> = (0..100_000).map(|_| sample_beta(1.0, 0.5, &mut rng).unwrap()).collect();
        assert!(stats::ks_one_sample(&h, |x| 1.0 - (1.0 - x).sqrt()) < 0.006);
        let m: Vec<f64> = (0..100_000).map(|_| sample_beta(3.0, 0.5, &mut rng).unwrap()).collect();
        assert!((stats::mean(&m) / (6.0 / 7.0) - 1.0).abs() < 0.01);
        assert!(sample_beta(0.0, 1.0, &mut rng).is_err());
        assert!(sample_gamma(-1.0, &mut rng).is_err());
    }

    #[test]
    fn clipping_rejects_outside() {
        let mut rng = RngState::new(66, 0).rng();
        let p = PriorSpec::new(10.0, 2).unwrap().with_clip(15.0).unwrap();
        for _ in 0..5000 {
            let r = linalg::norm(&sample_prior(&p, &mut rng).unwrap());
            assert!(r > 0.0 && r < 15.0);
        }
        assert!(PriorSpec::new(0.0, 2).is_err());
        assert!(PriorSpec::new(1.0, 2).unwrap().with_clip(-1.0).is_err());
    }
}
