//! Log-density through the instantaneous change of variables along the
//! forward map: `log p(x) = log p_prior(x_T) + integral of div_x g dt'`.

use alloc::vec::Vec;
use core::f64::consts::LN_2;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::field::AugmentedPoint;
use crate::linalg;
use crate::model::VectorField;
use crate::ode::{dormand_prince, drift, OdeConfig, Rk45Options, Solver};
use crate::prior::{prior_log_density, PriorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum DivergenceMethod {
    /// Central differences along each coordinate.
    #[default]
    ExactFd,
    /// Rademacher probes with directional differences.
    Hutchinson { probes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodResult {
    pub log_density: f64,
    pub bits_per_dim: f64,
    pub divergence_integral: f64,
    pub nfe: usize,
    /// Forward image of the point on the `z = z_max` hyperplane.
    pub latent: Vec<f64>,
}

fn fd_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + linalg::norm(x))
}

fn x_drift<F: VectorField + ?Sized>(x: &[f64], z: f64, model: &F, cfg: &OdeConfig, nfe: &mut usize) -> Result<Vec<f64>> {
    *nfe += 1;
    let mut g = drift(&AugmentedPoint::new(x.to_vec(), z), model, cfg)?;
    g.pop();
    Ok(g)
}

/// Trace of the Jacobian of the x-drift by central differences.
pub fn divergence_fd<F: VectorField + ?Sized>(q: &AugmentedPoint, model: &F, cfg: &OdeConfig, nfe: &mut usize) -> Result<f64> {
    let h = fd_step(&q.x);
    let mut tr = 0.0;
    let mut xp = q.x.clone();
    for i in 0..q.x.len() {
        xp[i] = q.x[i] + h;
        let up = x_drift(&xp, q.z, model, cfg, nfe)?;
        xp[i] = q.x[i] - h;
        let dn = x_drift(&xp, q.z, model, cfg, nfe)?;
        xp[i] = q.x[i];
        let d = (up[i] - dn[i]) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFiniteDivergence { coordinate: i });
        }
        tr += d;
    }
    Ok(tr)
}

/// Per-probe Hutchinson terms `e^T J e` for the given probes.
pub fn hutchinson_terms<F: VectorField + ?Sized>(
    q: &AugmentedPoint,
    model: &F,
    cfg: &OdeConfig,
    probes: &[Vec<f64>],
    nfe: &mut usize,
) -> Result<Vec<f64>> {
    let h = fd_step(&q.x);
    probes
        .iter()
        .map(|e| {
            let up: Vec<f64> = q.x.iter().zip(e).map(|(x, ei)| x + h * ei).collect();
            let dn: Vec<f64> = q.x.iter().zip(e).map(|(x, ei)| x - h * ei).collect();
            let gu = x_drift(&up, q.z, model, cfg, nfe)?;
            let gd = x_drift(&dn, q.z, model, cfg, nfe)?;
            let jv: Vec<f64> = gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            if let Some(i) = jv.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteDivergence { coordinate: i });
            }
            Ok(linalg::dot(e, &jv))
        })
        .collect()
}

pub fn rademacher_probes<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect()
}

/// Divergence of the x-drift at `q`.
pub fn drift_divergence<F: VectorField + ?Sized, R: Rng + ?Sized>(
    q: &AugmentedPoint,
    model: &F,
    cfg: &OdeConfig,
    method: DivergenceMethod,
    rng: &mut R,
) -> Result<f64> {
    let mut nfe = 0;
    match method {
        DivergenceMethod::ExactFd => divergence_fd(q, model, cfg, &mut nfe),
        DivergenceMethod::Hutchinson { probes } => {
            if probes == 0 {
                return Err(domain!("need at least one probe"));
            }
            let p = rademacher_probes(q.data_dim(), probes, rng);
            let t = hutchinson_terms(q, model, cfg, &p, &mut nfe)?;
            Ok(t.iter().sum::<f64>() / t.len() as f64)
        }
    }
}

/// Result of integrating the state together with the divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergencePath {
    pub x_end: Vec<f64>,
    pub integral: f64,
    pub nfe: usize,
}

/// Integrate `x` from `z_from` to `z_to` while accumulating
/// `integral of div_x g dt'`. Hutchinson probes are drawn once per path.
pub fn integrate_divergence<F: VectorField + ?Sized, R: Rng + ?Sized>(
    x0: &[f64],
    model: &F,
    cfg: &OdeConfig,
    method: DivergenceMethod,
    z_from: f64,
    z_to: f64,
    rng: &mut R,
) -> Result<DivergencePath> {
    cfg.validate()?;
    let n = model.data_dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x0.len() });
    }
    let probes = match method {
        DivergenceMethod::ExactFd => Vec::new(),
        DivergenceMethod::Hutchinson { probes: 0 } => return Err(domain!("need at least one probe")),
        DivergenceMethod::Hutchinson { probes } => rademacher_probes(n, probes, rng),
    };
    let mut nfe = 0usize;
    let (t0, t1) = (z_from.ln(), z_to.ln());
    let z_of = |t: f64| {
        if t == t0 {
            z_from
        } else if t == t1 {
            z_to
        } else {
            t.exp()
        }
    };
    let rhs = |t: f64, y: &[f64], nfe: &mut usize| -> Result<Vec<f64>> {
        let z = z_of(t);
        let q = AugmentedPoint::new(y[..n].to_vec(), z);
        let mut g = x_drift(&q.x, z, model, cfg, nfe)?;
        let div = if probes.is_empty() {
            divergence_fd(&q, model, cfg, nfe)?
        } else {
            let terms = hutchinson_terms(&q, model, cfg, &probes, nfe)?;
            terms.iter().sum::<f64>() / terms.len() as f64
        };
        g.push(div);
        Ok(g)
    };
    let mut y0 = x0.to_vec();
    y0.push(0.0);
    let y = match cfg.solver {
        Solver::Euler => {
            let steps = cfg.euler_steps;
            let mut y = y0;
            let mut t = t0;
            for i in 0..steps {
                let t_next = if i + 1 == steps { t1 } else { t0 + (t1 - t0) * (i + 1) as f64 / steps as f64 };
                let (z, z_next) = (z_of(t), z_of(t_next));
                let r = rhs(t, &y, &mut nfe)?;
                linalg::axpy((z_next - z) / z, &r[..n], &mut y[..n]);
                y[n] += r[n] * (t_next - t);
                t = t_next;
            }
            y
        }
        Solver::Rk45 => {
            let opts = Rk45Options {
                atol: cfg.rk45_atol,
                rtol: cfg.rk45_rtol,
                max_steps: cfg.max_steps,
                error_components: None,
            };
            let (_, y, _) = dormand_prince(|t, y| rhs(t, y, &mut nfe), t0, t1, y0, &opts, |_, _| true).map_err(|(e, _)| e)?;
            y
        }
    };
    if !linalg::all_finite(&y) {
        return Err(Error::NonFinite { t: t1 });
    }
    Ok(DivergencePath {
        x_end: y[..n].to_vec(),
        integral: y[n],
        nfe,
    })
}

/// `log p(x)` and bits/dim under the flow defined by `model`.
pub fn log_likelihood<F: VectorField + ?Sized, R: Rng + ?Sized>(
    x: &[f64],
    model: &F,
    cfg: &OdeConfig,
    method: DivergenceMethod,
    rng: &mut R,
) -> Result<LikelihoodResult> {
    let path = integrate_divergence(x, model, cfg, method, cfg.z_min, cfg.z_max, rng)?;
    let prior = PriorSpec::new(cfg.z_max, model.data_dim())?;
    let log_density = prior_log_density(&path.x_end, &prior)? + path.integral;
    Ok(LikelihoodResult {
        log_density,
        bits_per_dim: bits_per_dim(log_density, model.data_dim()),
        divergence_integral: path.integral,
        nfe: path.nfe,
        latent: path.x_end,
    })
}

pub fn bits_per_dim(log_density: f64, n: usize) -> f64 {
    -log_density / (n as f64 * LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::dataset::{generate_toy, Dataset, ToyName};
    use crate::geometry::RngState;
    use crate::model::FieldModel;

    /// `v = (A x, z)` gives the x-drift `A x` exactly.
    struct Linear {
        a: [[f64; 2]; 2],
    }

    impl VectorField for Linear {
        fn data_dim(&self) -> usize {
            2
        }
        fn evaluate(&self, q: &AugmentedPoint) -> Result<Vec<f64>> {
            let x = &q.x;
            Ok(vec![
                self.a[0][0] * x[0] + self.a[0][1] * x[1],
                self.a[1][0] * x[0] + self.a[1][1] * x[1],
                q.z,
            ])
        }
        fn is_exact(&self) -> bool {
            true
        }
    }

    #[test]
    fn linear_divergence_is_trace() {
        let f = Linear { a: [[0.3, -1.2], [0.7, -0.8]] };
        let mut rng = RngState::new(81, 0).rng();
        let q = AugmentedPoint::new(vec![1.5, -2.0], 0.4);
        let cfg = OdeConfig::default();
        let d = drift_divergence(&q, &f, &cfg, DivergenceMethod::ExactFd, &mut rng).unwrap();
        assert!((d + 0.5).abs() < 1e-6);
        // Rademacher probes are exact on the diagonal; off-diagonal terms cancel only in mean.
        let h = drift_divergence(&q, &f, &cfg, DivergenceMethod::Hutchinson { probes: 4000 }, &mut rng).unwrap();
        assert!((h + 0.5).abs() < 0.1);
    }

    #[test]
    fn linear_flow_log_density() {
        // A = [[a, -b], [b, a]]: exp(A s) = e^{a s} R(b s), trace 2a.
        let (a, b) = (0.2, 0.5);
        let f = Linear { a: [[a, -b], [b, a]] };
        let cfg = OdeConfig {
            z_min: 0.1,
            z_max: 5.0,
            rk45_atol: 1e-10,
            rk45_rtol: 1e-10,
            ..OdeConfig::default()
        };
        let mut rng = RngState::new(82, 0).rng();
        let x = [0.4, -0.3];
        let res = log_likelihood(&x, &f, &cfg, DivergenceMethod::ExactFd, &mut rng).unwrap();
        let s = (5.0f64 / 0.1).ln();
        let (c, sn) = ((b * s).cos(), (b * s).sin());
        let xt = [(a * s).exp() * (c * x[0] - sn * x[1]), (a * s).exp() * (sn * x[0] + c * x[1])];
        let prior = PriorSpec::new(5.0, 2).unwrap();
        let expect = prior_log_density(&xt, &prior).unwrap() + 2.0 * a * s;
        assert!((res.log_density - expect).abs() < 1e-4);
        assert!((res.latent[0] - xt[0]).abs() < 1e-6);
        assert_eq!(res.bits_per_dim, -res.log_density / (2.0 * LN_2));
    }

    #[test]
    fn single_source_divergence_matches_dense_jacobian() {
        let m = FieldModel::ExactEmpirical {
            dataset: Dataset::from_rows(&[[0.1, -0.2]]).unwrap(),
            gamma: 0.0,
        };
        let cfg = OdeConfig::default();
        let q = AugmentedPoint::new(vec![0.7, 0.4], 0.3);
        let mut nfe = 0;
        let got = divergence_fd(&q, &m, &cfg, &mut nfe).unwrap();
        assert_eq!(nfe, 4);
        // Dense Jacobian with a different step and forward/backward mix, then trace.
        let h = 1e-5;
        let g = |x: &[f64]| {
            let mut v = drift(&AugmentedPoint::new(x.to_vec(), 0.3), &m, &cfg).unwrap();
            v.pop();
            v
        };
        let mut jac = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut up = q.x.clone();
            let mut dn = q.x.clone();
            up[k] += h;
            dn[k] -= h;
            let (gu, gd) = (g(&up), g(&dn));
            for i in 0..2 {
                jac[i][k] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        assert!((got - (jac[0][0] + jac[1][1])).abs() < 1e-5);
        // For one source the x-drift is x - x_0, so the divergence is N.
        assert!((got - 2.0).abs() < 1e-6);
    }

    #[test]
    fn hutchinson_agrees_with_fd_on_disk() {
        let mut rng = RngState::new(83, 0).rng();
        let d = generate_toy(ToyName::Disk, 300, &mut rng).unwrap();
        let m = FieldModel::ExactEmpirical { dataset: d, gamma: 5.0 };
        let cfg = OdeConfig::default();
        let q = AugmentedPoint::new(vec![0.2, 0.5], 0.4);
        let mut nfe = 0;
        let exact = divergence_fd(&q, &m, &cfg, &mut nfe).unwrap();
        let probes = rademacher_probes(2, 256, &mut rng);
        let terms = hutchinson_terms(&q, &m, &cfg, &probes, &mut nfe).unwrap();
        let mean = terms.iter().sum::<f64>() / 256.0;
        let se = crate::stats::std_dev(&terms) / 16.0;
        assert!((mean - exact).abs() <= 3.0 * se + 1e-9, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn divergence_round_trip_cancels() {
        let mut rng = RngState::new(84, 0).rng();
        let d = generate_toy(ToyName::Disk, 200, &mut rng).unwrap();
        let m = FieldModel::ExactEmpirical { dataset: d, gamma: 5.0 };
        let cfg = OdeConfig {
            rk45_atol: 1e-8,
            rk45_rtol: 1e-8,
            z_min: 0.01,
            ..OdeConfig::default()
        };
        let fwd = integrate_divergence(&[0.3, 0.1], &m, &cfg, DivergenceMethod::ExactFd, cfg.z_min, cfg.z_max, &mut rng).unwrap();
        let back = integrate_divergence(&fwd.x_end, &m, &cfg, DivergenceMethod::ExactFd, cfg.z_max, cfg.z_min, &mut rng).unwrap();
        let gap = (fwd.integral + back.integral).abs();
        assert!(gap < 10.0 * cfg.rk45_rtol * (1.0 + fwd.integral.abs()), "gap {gap}");
        assert!(linalg::dist_sq(&back.x_end, &[0.3, 0.1]).sqrt() < 1e-5);
    }
}
