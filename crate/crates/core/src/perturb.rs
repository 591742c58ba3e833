//! Training-point perturbation and the hyperparameter rules of thumb.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::field::AugmentedPoint;
use crate::geometry::standard_normal;
use crate::linalg;

/// Default lower end of the `z` range.
pub const Z_MIN: f64 = 1e-3;

/// Optional cap on the exponent for draws whose initial `|eps_z|` is tiny.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallEpsZCap {
    pub threshold: f64,
    pub capped_max_exponent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Upper limit `M` of the exponent `m ~ U[0, M]`.
    pub max_exponent: u32,
    pub sigma: f64,
    pub tau: f64,
    /// Stabilizer added to `|E_hat|` when normalizing targets.
    pub gamma: f64,
    #[serde(default)]
    pub small_eps_z_cap: Option<SmallEpsZCap>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            max_exponent: 190,
            sigma: 0.01,
            tau: 0.03,
            gamma: 5.0,
            small_eps_z_cap: None,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_exponent == 0 {
            return Err(domain!("max exponent must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(domain!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(domain!("tau must be positive, got {}", self.tau));
        }
        if !(self.gamma >= 0.0) {
            return Err(domain!("gamma must be nonnegative, got {}", self.gamma));
        }
        if let Some(cap) = self.small_eps_z_cap {
            if !(cap.threshold > 0.0 && cap.capped_max_exponent >= 0.0) {
                return Err(domain!("invalid small-eps_z cap"));
            }
        }
        Ok(())
    }

    /// `(1 + tau)^m`.
    pub fn growth(&self, m: f64) -> f64 {
        (1.0 + self.tau).powf(m)
    }
}

/// A perturbed point together with the exponent that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub point: AugmentedPoint,
    pub m: f64,
}

/// Uniform direction on the unit sphere of `R^dim`.
pub fn sample_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = linalg::norm(&u);
        if norm > 0.0 {
            linalg::scale_in_place(&mut u, 1.0 / norm);
            return u;
        }
    }
}

fn perturb_inner<R: Rng + ?Sized>(x: &[f64], cfg: &PerturbConfig, forced_m: Option<f64>, rng: &mut R) -> Perturbation {
    let n = x.len();
    let eps_x: Vec<f64> = (0..n).map(|_| cfg.sigma * standard_normal(rng)).collect();
    let eps_z = cfg.sigma * standard_normal(rng);
    let u = sample_direction(n, rng);
    let m = forced_m.unwrap_or_else(|| {
        let upper = match cfg.small_eps_z_cap {
            Some(cap) if eps_z.abs() < cap.threshold => cap.capped_max_exponent.min(cfg.max_exponent as f64),
            _ => cfg.max_exponent as f64,
        };
        upper * rng.random::<f64>()
    });
    let g = cfg.growth(m);
    let r = linalg::norm(&eps_x) * g;
    let y: Vec<f64> = x.iter().zip(&u).map(|(xi, ui)| xi + r * ui).collect();
    Perturbation {
        point: AugmentedPoint::new(y, eps_z.abs() * g),
        m,
    }
}

/// Perturb a training point with `m ~ U[0, M]`.
pub fn perturb<R: Rng + ?Sized>(x: &[f64], cfg: &PerturbConfig, rng: &mut R) -> Result<Perturbation> {
    cfg.validate()?;
    Ok(perturb_inner(x, cfg, None, rng))
}

/// Perturb with a fixed exponent `m`.
pub fn perturb_at<R: Rng + ?Sized>(x: &[f64], cfg: &PerturbConfig, m: f64, rng: &mut R) -> Result<Perturbation> {
    cfg.validate()?;
    if !(m >= 0.0 && m.is_finite()) {
        return Err(domain!("exponent must be finite and nonnegative, got {m}"));
    }
    Ok(perturb_inner(x, cfg, Some(m), rng))
}

/// `M = ceil(3/4 * ln(E|x|^2 / (2 sqrt(N) sigma^2)) / ln(1 + tau))`, at least 1.
pub fn rule_of_thumb_m(mean_sq_norm: f64, n: usize, sigma: f64, tau: f64) -> Result<u32> {
    if !(mean_sq_norm > 0.0 && sigma > 0.0 && tau > 0.0 && n > 0) {
        return Err(domain!("rule of thumb needs positive arguments"));
    }
    let raw = 0.75 * (mean_sq_norm / (2.0 * (n as f64).sqrt() * sigma * sigma)).ln() / (1.0 + tau).ln();
    Ok(raw.ceil().max(1.0) as u32)
}

/// `z_max`, `z_min` and the prior norm clip implied by `(sigma, tau, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedSchedule {
    pub z_max: f64,
    pub z_min: f64,
    pub norm_clip: f64,
}

pub fn rule_of_thumb_schedule(mean_sq_norm: f64, n: usize, sigma: f64, tau: f64, m: u32) -> Result<DerivedSchedule> {
    if !(mean_sq_norm > 0.0 && sigma > 0.0 && tau > 0.0 && n > 0 && m > 0) {
        return Err(domain!("schedule rule needs positive arguments"));
    }
    let g = (1.0 + tau).powi(m as i32);
    Ok(DerivedSchedule {
        z_max: (2.0 / PI).sqrt() * sigma * g,
        z_min: Z_MIN,
        norm_clip: (n as f64).sqrt() * sigma * g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RngState;
    use crate::stats;

    fn cfg() -> PerturbConfig {
        PerturbConfig {
            max_exponent: 100,
            sigma: 0.01,
            tau: 0.03,
            gamma: 0.0,
            small_eps_z_cap: None,
        }
    }

    #[test]
    fn m_zero_is_plain_noise() {
        let mut a = RngState::new(51, 0).rng();
        let mut b = RngState::new(51, 0).rng();
        let p = perturb_at(&[1.0, 2.0], &cfg(), 0.0, &mut a).unwrap();
        let ex = [0.01 * standard_normal(&mut b), 0.01 * standard_normal(&mut b)];
        let ez = 0.01 * standard_normal(&mut b);
        let u = sample_direction(2, &mut b);
        let r = linalg::norm(&ex);
        assert_eq!(p.point.z, ez.abs());
        assert!((p.point.x[0] - (1.0 + r * u[0])).abs() < 1e-15);
        assert!((p.point.x[1] - (2.0 + r * u[1])).abs() < 1e-15);
    }

    #[test]
    fn radius_is_scaled_chi() {
        let mut rng = RngState::new(52, 0).rng();
        let c = cfg();
        let m = 40.0;
        let g = c.growth(m);
        let (mut radii, mut zs) = (Vec::new(), Vec::new());
        for _ in 0..100_000 {
            let p = perturb_at(&[0.0, 0.0, 0.0], &c, m, &mut rng).unwrap();
            radii.push(linalg::norm(&p.point.x) / g);
            zs.push(p.point.z);
        }
        let ks = stats::ks_one_sample(&radii, |r| stats::chi_cdf(r / 0.01, 3));
        assert!(ks < 0.006, "ks {ks}");
        let mean_z = stats::mean(&zs);
        let expect = (2.0 / PI).sqrt() * 0.01 * g;
        assert!((mean_z / expect - 1.0).abs() < 0.02);
    }

    #[test]
    fn z_independent_of_direction() {
        let mut rng = RngState::new(53, 0).rng();
        let c = cfg();
        let count = 50_000;
        let mut zs = Vec::with_capacity(count);
        let mut dirs = [Vec::with_capacity(count), Vec::with_capacity(count)];
        for _ in 0..count {
            let p = perturb_at(&[0.0, 0.0], &c, 10.0, &mut rng).unwrap();
            let nrm = linalg::norm(&p.point.x);
            zs.push(p.point.z);
            dirs[0].push(p.point.x[0] / nrm);
            dirs[1].push(p.point.x[1] / nrm);
        }
        for d in &dirs {
            assert!(stats::correlation(&zs, d).abs() < 3.0 / (count as f64).sqrt());
        }
    }

    #[test]
    fn z_bounded_by_full_growth() {
        let mut rng = RngState::new(54, 0).rng();
        let c = cfg();
        for _ in 0..1000 {
            let mut probe = rng.clone();
            let eps_z = {
                for _ in 0..2 {
                    standard_normal(&mut probe);
                }
                0.01 * standard_normal(&mut probe)
            };
            let p = perturb(&[0.0, 0.0], &c, &mut rng).unwrap();
            assert!(p.m >= 0.0 && p.m <= 100.0);
            assert!(p.point.z <= eps_z.abs() * c.growth(100.0) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn small_eps_z_cap_limits_exponent() {
        let mut rng = RngState::new(55, 0).rng();
        let mut c = cfg();
        c.small_eps_z_cap = Some(SmallEpsZCap {
            threshold: 1e9,
            capped_max_exponent: 5.0,
        });
        for _ in 0..200 {
            assert!(perturb(&[0.0], &c, &mut rng).unwrap().m <= 5.0);
        }
    }

    #[test]
    fn rule_of_thumb_m_closed_form() {
        // Separate arithmetic path: log-difference form, base change via log2.
        let oracle = |e: f64, n: f64, s: f64, t: f64| {
            let num = e.log2() - (2.0f64).log2() - 0.5 * n.log2() - 2.0 * s.log2();
            (0.75 * num / (1.0 + t).log2()).ceil() as u32
        };
        assert_eq!(rule_of_thumb_m(0.5, 2, 0.01, 0.03).unwrap(), oracle(0.5, 2.0, 0.01, 0.03));
        assert_eq!(rule_of_thumb_m(0.5, 2, 0.01, 0.03).unwrap(), 190);
        let a = rule_of_thumb_m(900.0, 3072, 0.01, 0.03).unwrap();
        let b = rule_of_thumb_m(900.0, 3072, 0.02, 0.03).unwrap();
        assert!(b < a);
        assert!(rule_of_thumb_m(0.0, 2, 0.01, 0.03).is_err());
    }

    #[test]
    fn schedule_ratio() {
        for (s, t, m) in [(0.01, 0.03, 291), (0.2, 0.1, 7), (1.0, 0.5, 3)] {
            let d = rule_of_thumb_schedule(1.0, 10, s, t, m).unwrap();
            assert!((d.z_max / d.norm_clip - (2.0 / PI).sqrt() / 10f64.sqrt()).abs() < 1e-14);
            assert_eq!(d.z_min, 1e-3);
        }
    }

    #[test]
    fn invalid_config() {
        let mut rng = RngState::new(56, 0).rng();
        let mut c = cfg();
        c.sigma = 0.0;
        assert!(perturb(&[0.0], &c, &mut rng).is_err());
        assert!(perturb_at(&[0.0], &cfg(), -1.0, &mut rng).is_err());
    }
}
