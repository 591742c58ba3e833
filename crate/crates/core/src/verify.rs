//! Statistical checks of the flow's theoretical properties.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{stats as dataset_stats, Dataset};
use crate::error::{domain, Error, Result};
use crate::field::AugmentedPoint;
use crate::geometry::sample_unit_sphere;
use crate::linalg;
use crate::model::{FieldModel, VectorField};
use crate::ode::{hit_particles, integrate_backward, integrate_forward, trace_to_radius, OdeConfig, OdeRun};
use crate::prior::{sample_prior, PriorSpec};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Pass when the statistic is strictly below the threshold.
    Below,
    /// Pass when the statistic is strictly above the threshold.
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub direction: Direction,
    pub pass: bool,
    pub samples_used: usize,
    pub details: BTreeMap<String, f64>,
}

impl TestReport {
    pub fn new(name: &str, statistic: f64, threshold: f64, direction: Direction, samples_used: usize) -> Self {
        let pass = match direction {
            Direction::Below => statistic < threshold,
            Direction::Above => statistic > threshold,
        };
        Self {
            name: name.to_string(),
            statistic,
            threshold,
            direction,
            pass,
            samples_used,
            details: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    /// Force a failure for a reason outside the main statistic.
    pub fn require(mut self, key: &str, ok: bool) -> Self {
        self.details.insert(key.to_string(), if ok { 1.0 } else { 0.0 });
        self.pass &= ok;
        self
    }
}

/// `kappa = 2 |y|^2 / (sqrt(N) E|x|^2)`.
pub fn kappa(q_norm: f64, mean_sq_norm: f64, n: usize) -> f64 {
    2.0 * q_norm * q_norm / ((n as f64).sqrt() * mean_sq_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Far,
    Intermediate,
    Near,
}

pub fn kappa_zone(k: f64) -> Zone {
    if k > 100.0 {
        Zone::Far
    } else if k < 0.01 {
        Zone::Near
    } else {
        Zone::Intermediate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Options {
    /// Start offset from a source, as a fraction of the dataset's max norm
    /// (or absolute when every source sits at the origin).
    pub delta: f64,
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    /// Defaults to `1.63 / sqrt(count)`.
    pub threshold: Option<f64>,
}

impl Default for Theorem1Options {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            atol: 1e-9,
            rtol: 1e-7,
            max_steps: 100_000,
            threshold: None,
        }
    }
}

/// Crossing points of `count` field lines with the hemisphere of radius `r`.
///
/// Each line starts at a source chosen with probability proportional to its
/// charge, offset by `delta` along a uniform upper-hemisphere direction. Near
/// a source the field is that of a point charge, so these starts carry equal
/// shares of the upward flux.
pub fn hemisphere_crossings<R: Rng + ?Sized>(
    d: &Dataset,
    r: f64,
    count: usize,
    opts: &Theorem1Options,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let st = dataset_stats(d)?;
    if r < 1e3 * st.max_norm {
        let k = kappa(r, st.mean_sq_norm, d.dim().n());
        return Err(Error::Precondition(alloc::format!(
            "radius {r} is below 1e3 x max norm {} (kappa = {k:.3e}); the crossing law is only uniform in the far zone",
            st.max_norm
        )));
    }
    let n = d.dim().n();
    let model = FieldModel::ExactEmpirical {
        dataset: d.clone(),
        gamma: 0.0,
    };
    let delta = opts.delta * if st.max_norm > 0.0 { st.max_norm } else { 1.0 };
    let total = d.total_charge();
    let mut nfe = 0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let src = pick_by_charge(d, total, rng);
        let mut u = sample_unit_sphere(n, rng)?;
        u[n] = u[n].abs();
        let x: Vec<f64> = d.point(src).iter().zip(&u).map(|(p, ui)| p + delta * ui).collect();
        let start = AugmentedPoint::new(x, (delta * u[n]).max(1e-300));
        let (c, used) = trace_to_radius(&start, &model, r, opts.atol * delta, opts.rtol, opts.max_steps)?;
        nfe += used;
        out.push(c);
    }
    Ok((out, nfe))
}

fn pick_by_charge<R: Rng + ?Sized>(d: &Dataset, total: f64, rng: &mut R) -> usize {
    match d.charges() {
        None => rng.random_range(0..d.len()),
        Some(q) => {
            let mut u = rng.random::<f64>() * total;
            for (i, c) in q.iter().enumerate() {
                if u < *c {
                    return i;
                }
                u -= c;
            }
            d.len() - 1
        }
    }
}

/// Uniformity of forward field-line crossings on a far hemisphere.
pub fn theorem1_uniformity<R: Rng + ?Sized>(
    d: &Dataset,
    r: f64,
    count: usize,
    opts: &Theorem1Options,
    rng: &mut R,
) -> Result<TestReport> {
    let n = d.dim().n();
    let (cross, nfe) = hemisphere_crossings(d, r, count, opts, rng)?;
    let heights: Vec<f64> = cross.iter().map(|c| c[n] / linalg::norm(c)).collect();
    let ks_height = stats::ks_one_sample(&heights, |t| stats::hemisphere_height_cdf(t, n));
    let ks_azimuth = if n >= 2 {
        let phi: Vec<f64> = cross.iter().map(|c| c[1].atan2(c[0])).collect();
        stats::ks_one_sample(&phi, stats::uniform_angle_cdf)
    } else {
        0.0
    };
    let threshold = opts.threshold.unwrap_or_else(|| stats::ks_critical_value(count));
    Ok(TestReport::new("theorem1_uniformity", ks_height.max(ks_azimuth), threshold, Direction::Below, count)
        .with("ks_height", ks_height)
        .with("ks_azimuth", ks_azimuth)
        .with("radius", r)
        .with("mean_nfe", nfe as f64 / count as f64))
}

/// 99th percentile of the energy distance between two disjoint random
/// subsets of `pool`, each of `size` points.
pub fn calibrate_energy_threshold<R: Rng + ?Sized>(pool: &Dataset, size: usize, reps: usize, rng: &mut R) -> Result<f64> {
    if 2 * size > pool.len() || reps == 0 {
        return Err(domain!("need at least {} points for calibration, have {}", 2 * size, pool.len()));
    }
    let n = pool.dim().n();
    let mut values = Vec::with_capacity(reps);
    for _ in 0..reps {
        let idx = index::sample(rng, pool.len(), 2 * size).into_vec();
        let a = pool.subset(&idx[..size]);
        let b = pool.subset(&idx[size..]);
        values.push(stats::energy_distance(a.flat(), b.flat(), n)?);
    }
    Ok(stats::quantile(&values, 0.99))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardOutcome {
    pub report: TestReport,
    pub samples: Dataset,
    pub mean_nfe: f64,
}

/// Draw `count` prior samples and map them back with `model`.
pub fn generate<F: VectorField + ?Sized, R: Rng + ?Sized>(
    model: &F,
    prior: &PriorSpec,
    cfg: &OdeConfig,
    count: usize,
    rng: &mut R,
) -> Result<(Dataset, f64)> {
    let cfg = OdeConfig { record_every: 0, ..*cfg };
    let mut flat = Vec::with_capacity(count * prior.n);
    let mut nfe = 0;
    for _ in 0..count {
        let x0 = sample_prior(prior, rng)?;
        let run = integrate_backward(&x0, model, &cfg)?;
        nfe += run.nfe;
        flat.extend_from_slice(&run.terminal().x);
    }
    Ok((Dataset::from_flat(prior.n, flat)?, nfe as f64 / count.max(1) as f64))
}

/// Backward sampling compared to held-out data by energy distance.
///
/// The energy distance uses the first `ed_size` generated points against
/// `ed_size` reference points.
#[allow(clippy::too_many_arguments)]
pub fn backward_recovery<F: VectorField + ?Sized, R: Rng + ?Sized>(
    model: &F,
    prior: &PriorSpec,
    cfg: &OdeConfig,
    reference: &Dataset,
    count: usize,
    ed_size: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<BackwardOutcome> {
    if ed_size > count || ed_size > reference.len() {
        return Err(domain!("energy-distance subset of {ed_size} exceeds available points"));
    }
    let (samples, mean_nfe) = generate(model, prior, cfg, count, rng)?;
    let n = prior.n;
    let ed = stats::energy_distance(&samples.flat()[..ed_size * n], &reference.flat()[..ed_size * n], n)?;
    let report = TestReport::new("backward_recovery", ed, threshold, Direction::Below, count).with("mean_nfe", mean_nfe);
    Ok(BackwardOutcome {
        report,
        samples,
        mean_nfe,
    })
}

/// One z-bin of the norm-z diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormZBin {
    pub z_lo: f64,
    pub z_hi: f64,
    pub count: usize,
    pub mean_norm: f64,
    pub std_norm: f64,
}

/// Bin recorded `(|x|, z)` pairs by `ln z` (descending) and summarize `|x|`.
pub fn norm_z_diagnostic(runs: &[OdeRun], bins: usize) -> Result<(TestReport, Vec<NormZBin>)> {
    if runs.is_empty() || bins == 0 {
        return Err(domain!("need at least one run and one bin"));
    }
    let points: Vec<(f64, f64)> = runs
        .iter()
        .flat_map(|r| r.trajectory.iter().map(|p| (p.z, p.norm_x)))
        .collect();
    let (zlo, zhi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (z, _)| (a.min(*z), b.max(*z)));
    let (llo, lhi) = (zlo.ln(), zhi.ln());
    let width = (lhi - llo) / bins as f64;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for (z, nx) in &points {
        let k = if width > 0.0 { (((z.ln() - llo) / width) as usize).min(bins - 1) } else { 0 };
        groups[k].push(*nx);
    }
    let mut table: Vec<NormZBin> = groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let mean = if g.is_empty() { f64::NAN } else { stats::mean(g) };
            let std = match g.len() {
                0 => f64::NAN,
                1 => 0.0,
                _ => {
                    let ss: f64 = g.iter().map(|v| (v - mean) * (v - mean)).sum();
                    (ss / g.len() as f64).sqrt()
                }
            };
            NormZBin {
                z_lo: (llo + k as f64 * width).exp(),
                z_hi: (llo + (k + 1) as f64 * width).exp(),
                count: g.len(),
                mean_norm: mean,
                std_norm: std,
            }
        })
        .collect();
    table.reverse();
    let monotone = runs.iter().all(|r| {
        let t: Vec<f64> = r.trajectory.iter().map(|p| p.t).collect();
        t.windows(2).all(|w| w[1] < w[0]) || t.windows(2).all(|w| w[1] > w[0])
    });
    let populated = table.iter().filter(|b| b.count > 0 && b.std_norm.is_finite()).count();
    let report = TestReport::new("norm_z_diagnostic", populated as f64, (bins - 1) as f64, Direction::Above, points.len())
        .require("monotone_t", monotone)
        .with("bins", bins as f64);
    Ok((report, table))
}

/// Relative spread of prior norms against a Gaussian with matching mean norm.
pub fn prior_norm_spread(norms: &[f64], n: usize) -> TestReport {
    let rel = stats::std_dev(norms) / stats::mean(norms);
    TestReport::new("prior_norm_spread", rel, stats::chi_relative_std(n), Direction::Above, norms.len())
}

/// Slerp between two latents: direction by spherical interpolation, norm linearly.
pub fn slerp_linear_norm(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    let norm = (1.0 - s) * na + s * nb;
    if na == 0.0 || nb == 0.0 {
        return a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y).collect();
    }
    let ua: Vec<f64> = a.iter().map(|x| x / na).collect();
    let ub: Vec<f64> = b.iter().map(|x| x / nb).collect();
    let cos = linalg::dot(&ua, &ub).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let dir: Vec<f64> = if omega.abs() < 1e-12 {
        ua
    } else {
        let (wa, wb) = (((1.0 - s) * omega).sin() / omega.sin(), (s * omega).sin() / omega.sin());
        ua.iter().zip(&ub).map(|(x, y)| wa * x + wb * y).collect()
    };
    dir.iter().map(|x| x * norm).collect()
}

/// Latent-space interpolation: forward-map both ends, slerp, map back.
pub fn interpolate<F: VectorField + ?Sized>(a: &[f64], b: &[f64], steps: usize, model: &F, cfg: &OdeConfig) -> Result<Vec<Vec<f64>>> {
    if steps < 2 {
        return Err(domain!("need at least two interpolation steps"));
    }
    let cfg = OdeConfig { record_every: 0, ..*cfg };
    let la = integrate_forward(a, model, &cfg)?.terminal().x.clone();
    let lb = integrate_forward(b, model, &cfg)?.terminal().x.clone();
    (0..steps)
        .map(|k| {
            let s = k as f64 / (steps - 1) as f64;
            let l = slerp_linear_norm(&la, &lb, s);
            Ok(integrate_backward(&l, model, &cfg)?.terminal().x.clone())
        })
        .collect()
}

/// Hit frequencies of far-released particles against `|q_i| / |Q|`.
///
/// The default threshold is three binomial standard deviations of the
/// worst charge; lost particles must stay below 0.1%.
pub fn hit_probability<R: Rng + ?Sized>(
    charges: &Dataset,
    count: usize,
    r_start: f64,
    eps_hit: f64,
    threshold: Option<f64>,
    rng: &mut R,
) -> Result<TestReport> {
    let h = hit_particles(charges, count, r_start, eps_hit, rng)?;
    let total: f64 = (0..charges.len()).map(|i| charges.charge(i).abs()).sum();
    let freq = h.frequencies();
    let mut worst: f64 = 0.0;
    let mut sigma: f64 = 0.0;
    let mut report_details = Vec::new();
    for (i, f) in freq.iter().enumerate() {
        let p = charges.charge(i).abs() / total;
        worst = worst.max((f - p).abs());
        sigma = sigma.max((p * (1.0 - p) / count as f64).sqrt());
        report_details.push((i, *f, p));
    }
    let lost_fraction = h.lost as f64 / count as f64;
    let mut r = TestReport::new("hit_probability", worst, threshold.unwrap_or(3.0 * sigma), Direction::Below, count)
        .with("lost_fraction", lost_fraction)
        .require("lost_below_0.1%", lost_fraction < 1e-3);
    for (i, f, p) in report_details {
        r = r.with(&alloc::format!("freq_{i}"), f).with(&alloc::format!("expected_{i}"), p);
    }
    Ok(r)
}

/// Standard deviation of the exact W2 between disjoint random subsets.
pub fn w2_noise<R: Rng + ?Sized>(pool: &Dataset, size: usize, reps: usize, rng: &mut R) -> Result<f64> {
    if 2 * size > pool.len() || reps < 2 {
        return Err(domain!("need at least {} points and two repetitions", 2 * size));
    }
    let n = pool.dim().n();
    let mut values = Vec::with_capacity(reps);
    for _ in 0..reps {
        let idx = index::sample(rng, pool.len(), 2 * size).into_vec();
        let a = pool.subset(&idx[..size]);
        let b = pool.subset(&idx[size..]);
        values.push(stats::w2_exact(a.flat(), b.flat(), n)?);
    }
    Ok(stats::std_dev(&values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub steps: usize,
    pub w2: f64,
    pub mean_nfe: f64,
}

/// W2 to the reference for Euler sampling at each step count, using the
/// same prior draws for every step count. Passes when each W2 is at most the
/// previous one plus `noise`.
pub fn euler_step_sweep<F: VectorField + ?Sized, R: Rng + ?Sized>(
    model: &F,
    prior: &PriorSpec,
    cfg: &OdeConfig,
    reference: &Dataset,
    steps: &[usize],
    noise: f64,
    rng: &mut R,
) -> Result<(TestReport, Vec<SweepPoint>)> {
    let count = reference.len();
    let n = prior.n;
    let starts: Vec<Vec<f64>> = (0..count).map(|_| sample_prior(prior, rng)).collect::<Result<_>>()?;
    let mut table = Vec::with_capacity(steps.len());
    for &s in steps {
        let c = OdeConfig {
            solver: crate::ode::Solver::Euler,
            euler_steps: s,
            record_every: 0,
            ..*cfg
        };
        let mut flat = Vec::with_capacity(count * n);
        let mut nfe = 0;
        for x0 in &starts {
            let run = integrate_backward(x0, model, &c)?;
            nfe += run.nfe;
            flat.extend_from_slice(&run.terminal().x);
        }
        table.push(SweepPoint {
            steps: s,
            w2: stats::w2_exact(&flat, reference.flat(), n)?,
            mean_nfe: nfe as f64 / count as f64,
        });
    }
    let worst_increase = table.windows(2).map(|w| w[1].w2 - w[0].w2).fold(f64::NEG_INFINITY, f64::max);
    let mut report = TestReport::new("euler_step_sweep", worst_increase, noise, Direction::Below, count);
    for p in &table {
        report = report.with(&alloc::format!("w2_steps_{}", p.steps), p.w2);
    }
    Ok((report, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy, ToyName};
    use crate::geometry::RngState;

    #[test]
    fn kappa_values() {
        let k = kappa(3000.0, 900.0, 3072);
        assert!((k - 361.0).abs() < 1.0);
        assert_eq!(kappa_zone(k), Zone::Far);
        let y = (3072f64.sqrt() * 900.0 / 2.0).sqrt();
        assert!((kappa(y, 900.0, 3072) - 1.0).abs() < 1e-12);
        assert_eq!(kappa_zone(1.0), Zone::Intermediate);
        assert_eq!(kappa_zone(kappa(0.01, 0.5, 2)), Zone::Near);
        // scale consistency
        assert!((kappa(2.0 * 1.3, 4.0 * 0.7, 5) - kappa(1.3, 0.7, 5)).abs() < 1e-12);
    }

    #[test]
    fn single_source_crossings_uniform() {
        let d = Dataset::from_rows(&[[0.0, 0.0]]).unwrap();
        let mut rng = RngState::new(91, 0).rng();
        // max_norm is zero, so any radius is far.
        let rep = theorem1_uniformity(&d, 5.0, 2000, &Theorem1Options::default(), &mut rng).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn theorem1_rejects_near_radius() {
        let mut rng = RngState::new(92, 0).rng();
        let d = generate_toy(ToyName::Disk, 50, &mut rng).unwrap();
        let err = theorem1_uniformity(&d, 10.0, 10, &Theorem1Options::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Precondition(ref m) if m.contains("kappa")));
    }

    #[test]
    fn slerp_properties() {
        let a = [3.0, 0.0];
        let b = [0.0, 1.0];
        let mid = slerp_linear_norm(&a, &b, 0.5);
        assert!((linalg::norm(&mid) - 2.0).abs() < 1e-12);
        assert!((mid[0] - mid[1]).abs() < 1e-12);
        assert_eq!(slerp_linear_norm(&a, &b, 0.0), vec![3.0, 0.0]);
        let same = slerp_linear_norm(&a, &a, 0.3);
        assert!(linalg::dist_sq(&same, &a) < 1e-24);
    }

    #[test]
    fn identical_endpoints_give_constant_path() {
        let m = FieldModel::ExactEmpirical {
            dataset: Dataset::from_rows(&[[0.0, 0.0], [1.0, 0.5]]).unwrap(),
            gamma: 5.0,
        };
        let path = interpolate(&[0.4, 0.2], &[0.4, 0.2], 4, &m, &OdeConfig::default()).unwrap();
        for p in &path {
            assert!(linalg::dist_sq(p, &path[0]) < 1e-24);
        }
    }

    #[test]
    fn norm_z_of_radial_trajectory() {
        let m = FieldModel::ExactEmpirical {
            dataset: Dataset::from_rows(&[[0.0, 0.0]]).unwrap(),
            gamma: 0.0,
        };
        let cfg = OdeConfig {
            solver: crate::ode::Solver::Euler,
            euler_steps: 50,
            ..OdeConfig::default()
        };
        let run = integrate_backward(&[3.0, 4.0], &m, &cfg).unwrap();
        let (rep, table) = norm_z_diagnostic(&[run], 10).unwrap();
        assert!(rep.pass);
        assert!(table.iter().all(|b| b.count > 0));
        assert!(table.windows(2).all(|w| w[1].z_hi <= w[0].z_hi));
        // a single trajectory per bin still spreads along z, but its norms lie on one ray
        assert!(table.iter().all(|b| b.std_norm.is_finite()));
    }

    #[test]
    fn prior_norms_spread_more_than_gaussian() {
        let mut rng = RngState::new(93, 0).rng();
        let p = PriorSpec::new(40.0, 2).unwrap().with_clip(3000.0).unwrap();
        let norms: Vec<f64> = (0..20_000).map(|_| linalg::norm(&sample_prior(&p, &mut rng).unwrap())).collect();
        assert!(prior_norm_spread(&norms, 2).pass);
    }

    #[test]
    fn energy_calibration_is_positive_and_small() {
        let mut rng = RngState::new(94, 0).rng();
        let d = generate_toy(ToyName::Disk, 2000, &mut rng).unwrap();
        let t = calibrate_energy_threshold(&d, 300, 20, &mut rng).unwrap();
        assert!(t > 0.0 && t < 0.05, "{t}");
        assert!(calibrate_energy_threshold(&d, 1500, 2, &mut rng).is_err());
    }
}
