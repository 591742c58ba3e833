//! The anchored Poisson-flow ODE and its solvers.
//!
//! With `t' = ln z` the flow reads `dx/dt' = v_x z / v_z`, `dz/dt' = z`, so
//! `z = e^{t'}` is known in closed form and only `x` is integrated. Backward
//! sampling runs `t'` from `ln z_max` down to `ln z_min`; the forward map runs
//! the other way.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{domain, Error, Result};
use crate::field::{discrete_charge_field, AugmentedPoint, ChargeSign};
use crate::linalg;
use crate::model::VectorField;
use crate::perturb::sample_direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    #[default]
    Rk45,
}

impl core::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "rk45" => Ok(Solver::Rk45),
            other => Err(domain!("unknown solver '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub solver: Solver,
    pub euler_steps: usize,
    pub rk45_atol: f64,
    pub rk45_rtol: f64,
    /// Substitute `v_z` below this `z` for learned fields; 0 disables.
    pub z_sub_threshold: f64,
    pub gamma: f64,
    pub v_z_floor: f64,
    /// Accepted-step budget for RK45.
    pub max_steps: usize,
    /// Record every k-th accepted step; 0 keeps only the endpoints.
    pub record_every: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            z_min: 1e-3,
            z_max: 40.0,
            solver: Solver::Rk45,
            euler_steps: 100,
            rk45_atol: 1e-4,
            rk45_rtol: 1e-4,
            z_sub_threshold: 0.1,
            gamma: 5.0,
            v_z_floor: 1e-8,
            max_steps: 100_000,
            record_every: 1,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_min > 0.0 && self.z_min < self.z_max && self.z_max.is_finite()) {
            return Err(domain!("need 0 < z_min < z_max, got {} and {}", self.z_min, self.z_max));
        }
        if !(self.rk45_atol > 0.0 && self.rk45_rtol > 0.0) {
            return Err(domain!("tolerances must be positive"));
        }
        if self.euler_steps == 0 || self.max_steps == 0 {
            return Err(domain!("step counts must be positive"));
        }
        if !(self.gamma >= 0.0 && self.z_sub_threshold >= 0.0 && self.v_z_floor >= 0.0) {
            return Err(domain!("gamma, substitution threshold and v_z floor must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: f64,
    pub norm_x: f64,
}

impl TrajectoryPoint {
    fn new(t: f64, x: &[f64], z: f64) -> Self {
        Self {
            t,
            x: x.to_vec(),
            z,
            norm_x: linalg::norm(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OdeRun {
    pub trajectory: Vec<TrajectoryPoint>,
    pub nfe: usize,
    pub terminal: Option<AugmentedPoint>,
    pub accepted: usize,
    pub rejected: usize,
    /// Times the `z` substitution was skipped because `|f_x| >= sqrt(N)`.
    pub substitution_skips: usize,
}

impl OdeRun {
    /// The generated point; panics on an aborted run.
    pub fn terminal(&self) -> &AugmentedPoint {
        self.terminal.as_ref().expect("run finished")
    }
}

/// A failed integration with everything recorded up to the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeAbort {
    pub error: Error,
    pub partial: Box<OdeRun>,
}

impl core::fmt::Display for OdeAbort {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} after {} accepted steps", self.error, self.partial.accepted)
    }
}

impl From<OdeAbort> for Error {
    fn from(a: OdeAbort) -> Self {
        a.error
    }
}

/// `|E_x|` reconstructed from a learned `|f_x|`.
pub fn reconstruct_ex_norm(fx_norm: f64, gamma: f64, n: usize) -> Option<f64> {
    let r = fx_norm / (n as f64).sqrt();
    (r < 1.0).then(|| gamma * r / (1.0 - r))
}

/// `v_z = -sqrt(N) z / (sqrt(|E_x|^2 + z^2) + gamma)`.
pub fn v_z_from_ex_norm(ex_norm: f64, z: f64, gamma: f64, n: usize) -> f64 {
    -(n as f64).sqrt() * z / ((ex_norm * ex_norm + z * z).sqrt() + gamma)
}

/// Replace `v_z` by its reconstruction; `None` when `|f_x| >= sqrt(N)`.
pub fn substitute_z_direction(v: &[f64], z: f64, gamma: f64, n: usize) -> Option<Vec<f64>> {
    let fx = linalg::norm(&v[..n]);
    let ex = reconstruct_ex_norm(fx, gamma, n)?;
    let mut out = v.to_vec();
    out[n] = v_z_from_ex_norm(ex, z, gamma, n);
    Some(out)
}

/// Drift evaluator that counts model calls.
struct Drift<'a, F: ?Sized> {
    model: &'a F,
    cfg: &'a OdeConfig,
    n: usize,
    nfe: usize,
    skips: usize,
}

impl<F: VectorField + ?Sized> Drift<'_, F> {
    fn eval(&mut self, x: &[f64], z: f64) -> Result<Vec<f64>> {
        let q = AugmentedPoint::new(x.to_vec(), z);
        self.nfe += 1;
        let mut v = self.model.evaluate(&q)?;
        if v.len() != self.n + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.n + 1,
                got: v.len(),
            });
        }
        if !self.model.is_exact() && z < self.cfg.z_sub_threshold {
            match substitute_z_direction(&v, z, self.cfg.gamma, self.n) {
                Some(s) => v = s,
                None => self.skips += 1,
            }
        }
        let vz = v[self.n];
        if !(vz.abs() >= self.cfg.v_z_floor) || vz == 0.0 {
            return Err(Error::DegenerateField {
                z,
                v_z_abs: vz.abs(),
                v_x_norm: linalg::norm(&v[..self.n]),
            });
        }
        let ratio = z / vz;
        Ok(v[..self.n].iter().map(|vx| vx * ratio).collect())
    }
}

/// `(dx/dt', dz/dt') = (v_x z / v_z, z)` at `q`.
pub fn drift<F: VectorField + ?Sized>(q: &AugmentedPoint, model: &F, cfg: &OdeConfig) -> Result<Vec<f64>> {
    let mut d = Drift {
        model,
        cfg,
        n: q.data_dim(),
        nfe: 0,
        skips: 0,
    };
    let mut out = d.eval(&q.x, q.z)?;
    out.push(q.z);
    Ok(out)
}

/// Dormand–Prince 5(4) options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rk45Options {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    /// Only the first `error_components` entries enter the error norm
    /// (`None` means all).
    pub error_components: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rk45Stats {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

fn rms_scaled(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, b)| (a / b) * (a / b)).sum();
    (s / v.len().max(1) as f64).sqrt()
}

/// Adaptive Dormand–Prince from `t0` to `t1` (either direction).
///
/// `on_accept(t, y)` runs after every accepted step and returns `false` to
/// stop early. Returns the final `(t, y)` and counters.
pub fn dormand_prince<F, G>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: Vec<f64>,
    opts: &Rk45Options,
    mut on_accept: G,
) -> core::result::Result<(f64, Vec<f64>, Rk45Stats), (Error, Rk45Stats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    G: FnMut(f64, &[f64]) -> bool,
{
    let mut stats = Rk45Stats::default();
    let dim = y0.len();
    let ne = opts.error_components.unwrap_or(dim).min(dim);
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = y0;
    if span == 0.0 {
        return Ok((t, y, stats));
    }

    macro_rules! call {
        ($t:expr, $y:expr) => {{
            stats.nfe += 1;
            match f($t, $y) {
                Ok(v) => v,
                Err(e) => return Err((e, stats)),
            }
        }};
    }

    let mut k0 = call!(t, &y);

    // Initial step as in Hairer–Nørsett–Wanner.
    let scale0: Vec<f64> = y[..ne].iter().map(|v| opts.atol + v.abs() * opts.rtol).collect();
    let d0 = rms_scaled(&y[..ne], &scale0);
    let d1 = rms_scaled(&k0[..ne], &scale0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(&k0).map(|(a, b)| a + h0 * dir * b).collect();
    let k1 = call!(t + h0 * dir, &y1);
    let diff: Vec<f64> = k1[..ne].iter().zip(&k0[..ne]).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, &scale0) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(span);

    let mut ks: [Vec<f64>; 7] = Default::default();
    let mut ytmp = vec![0.0; dim];
    loop {
        if stats.accepted >= opts.max_steps {
            return Err((Error::StepBudget { budget: opts.max_steps }, stats));
        }
        let min_step = 10.0 * f64::EPSILON * t.abs().max(1.0);
        let mut rejected_here = false;
        let (t_new, y_new, k_last) = loop {
            if h < min_step {
                return Err((Error::NonFinite { t }, stats));
            }
            let remaining = (t1 - t) * dir;
            let (hs, last) = if h >= remaining { (remaining, true) } else { (h, false) };
            let hd = hs * dir;
            ks[0] = k0.clone();
            for s in 1..7 {
                for i in 0..dim {
                    let mut acc = 0.0;
                    for (j, kj) in ks.iter().enumerate().take(s) {
                        acc += A[s - 1][j] * kj[i];
                    }
                    ytmp[i] = y[i] + hd * acc;
                }
                let ts = match (s >= 5, last) {
                    (true, true) => t1,
                    (true, false) => t + hd,
                    _ => t + C[s - 1] * hd,
                };
                ks[s] = call!(ts, &ytmp);
            }
            // The last stage was evaluated at the fifth-order solution.
            let y_next = ytmp.clone();
            let mut err = vec![0.0; ne];
            for (i, e) in err.iter_mut().enumerate() {
                *e = hd * (0..7).map(|s| E[s] * ks[s][i]).sum::<f64>();
            }
            let scale: Vec<f64> = (0..ne)
                .map(|i| opts.atol + y[i].abs().max(y_next[i].abs()) * opts.rtol)
                .collect();
            let en = rms_scaled(&err, &scale);
            if !en.is_finite() || !linalg::all_finite(&y_next) {
                stats.rejected += 1;
                rejected_here = true;
                h = hs * MIN_FACTOR;
                continue;
            }
            if en < 1.0 {
                let mut factor = if en == 0.0 { MAX_FACTOR } else { (SAFETY * en.powf(-0.2)).min(MAX_FACTOR) };
                if rejected_here {
                    factor = factor.min(1.0);
                }
                h = hs * factor;
                let t_next = if last { t1 } else { t + hd };
                break (t_next, y_next, ks[6].clone());
            }
            stats.rejected += 1;
            rejected_here = true;
            h = hs * (SAFETY * en.powf(-0.2)).max(MIN_FACTOR);
        };
        t = t_new;
        y = y_new;
        k0 = k_last;
        stats.accepted += 1;
        let go_on = on_accept(t, &y);
        if t == t1 || !go_on {
            return Ok((t, y, stats));
        }
    }
}

fn z_at(t: f64, ends: [(f64, f64); 2]) -> f64 {
    if t == ends[0].0 {
        ends[0].1
    } else if t == ends[1].0 {
        ends[1].1
    } else {
        t.exp()
    }
}

fn integrate<F: VectorField + ?Sized>(
    x0: &[f64],
    model: &F,
    cfg: &OdeConfig,
    z_from: f64,
    z_to: f64,
) -> core::result::Result<OdeRun, OdeAbort> {
    let abort = |error: Error, run: OdeRun| OdeAbort {
        error,
        partial: Box::new(run),
    };
    let mut run = OdeRun::default();
    if let Err(e) = cfg.validate() {
        return Err(abort(e, run));
    }
    let n = model.data_dim();
    if x0.len() != n {
        return Err(abort(Error::DimensionMismatch { expected: n, got: x0.len() }, run));
    }
    if !linalg::all_finite(x0) {
        return Err(abort(domain!("initial state is not finite"), run));
    }
    let (t0, t1) = (z_from.ln(), z_to.ln());
    let ends = [(t0, z_from), (t1, z_to)];
    run.trajectory.push(TrajectoryPoint::new(t0, x0, z_from));
    let mut drift = Drift {
        model,
        cfg,
        n,
        nfe: 0,
        skips: 0,
    };
    let every = cfg.record_every;

    match cfg.solver {
        Solver::Euler => {
            let steps = cfg.euler_steps;
            let mut x = x0.to_vec();
            let mut z = z_from;
            for i in 0..steps {
                let t_next = if i + 1 == steps { t1 } else { t0 + (t1 - t0) * (i + 1) as f64 / steps as f64 };
                let z_next = z_at(t_next, ends);
                let g = match drift.eval(&x, z) {
                    Ok(g) => g,
                    Err(e) => {
                        run.nfe = drift.nfe;
                        run.substitution_skips = drift.skips;
                        return Err(abort(e, run));
                    }
                };
                // x += (v_x / v_z)(z_next - z), with g = v_x z / v_z.
                linalg::axpy((z_next - z) / z, &g, &mut x);
                z = z_next;
                run.accepted += 1;
                if !linalg::all_finite(&x) {
                    run.nfe = drift.nfe;
                    return Err(abort(Error::NonFinite { t: t_next }, run));
                }
                if every > 0 && (run.accepted % every == 0) && i + 1 < steps {
                    run.trajectory.push(TrajectoryPoint::new(t_next, &x, z));
                }
            }
            run.trajectory.push(TrajectoryPoint::new(t1, &x, z_to));
            run.terminal = Some(AugmentedPoint::new(x, z_to));
        }
        Solver::Rk45 => {
            let opts = Rk45Options {
                atol: cfg.rk45_atol,
                rtol: cfg.rk45_rtol,
                max_steps: cfg.max_steps,
                error_components: None,
            };
            let mut traj = core::mem::take(&mut run.trajectory);
            let mut count = 0usize;
            let result = dormand_prince(
                |t, x| drift.eval(x, z_at(t, ends)),
                t0,
                t1,
                x0.to_vec(),
                &opts,
                |t, x| {
                    count += 1;
                    if t != t1 && every > 0 && count.is_multiple_of(every) {
                        traj.push(TrajectoryPoint::new(t, x, z_at(t, ends)));
                    }
                    true
                },
            );
            run.trajectory = traj;
            match result {
                Ok((_, x, stats)) => {
                    run.accepted = stats.accepted;
                    run.rejected = stats.rejected;
                    run.trajectory.push(TrajectoryPoint::new(t1, &x, z_to));
                    run.terminal = Some(AugmentedPoint::new(x, z_to));
                }
                Err((e, stats)) => {
                    run.accepted = stats.accepted;
                    run.rejected = stats.rejected;
                    run.nfe = drift.nfe;
                    run.substitution_skips = drift.skips;
                    let e = match e {
                        Error::NonFinite { .. } => Error::NonFinite {
                            t: run.trajectory.last().map_or(t0, |p| p.t),
                        },
                        other => other,
                    };
                    return Err(abort(e, run));
                }
            }
        }
    }
    run.nfe = drift.nfe;
    run.substitution_skips = drift.skips;
    Ok(run)
}

/// Generate a sample: integrate from `(x0, z_max)` down to `z_min`.
pub fn integrate_backward<F: VectorField + ?Sized>(
    x0: &[f64],
    model: &F,
    cfg: &OdeConfig,
) -> core::result::Result<OdeRun, OdeAbort> {
    integrate(x0, model, cfg, cfg.z_max, cfg.z_min)
}

/// Forward map: integrate from `(x, z_min)` up to `z_max`.
pub fn integrate_forward<F: VectorField + ?Sized>(
    x: &[f64],
    model: &F,
    cfg: &OdeConfig,
) -> core::result::Result<OdeRun, OdeAbort> {
    integrate(x, model, cfg, cfg.z_min, cfg.z_max)
}

/// Point where an exact-field line started at `start` crosses the sphere of
/// radius `r` in the augmented space, plus the number of field evaluations.
///
/// Uses the anchored parameterization, valid because `E_hat_z = z > 0` makes
/// `z` strictly increasing along every line in the upper half space.
pub fn trace_to_radius<F: VectorField + ?Sized>(
    start: &AugmentedPoint,
    model: &F,
    r: f64,
    atol: f64,
    rtol: f64,
    max_steps: usize,
) -> Result<(Vec<f64>, usize)> {
    if !(start.z > 0.0) {
        return Err(domain!("field-line start must have z > 0"));
    }
    if start.norm() >= r {
        return Err(domain!("start already outside radius {r}"));
    }
    let cfg = OdeConfig {
        z_min: start.z,
        z_max: r,
        z_sub_threshold: 0.0,
        v_z_floor: 0.0,
        ..OdeConfig::default()
    };
    let n = start.data_dim();
    let mut drift = Drift {
        model,
        cfg: &cfg,
        n,
        nfe: 0,
        skips: 0,
    };
    let opts = Rk45Options {
        atol,
        rtol,
        max_steps,
        error_components: None,
    };
    let mut prev = start.to_vec();
    let mut crossing: Option<Vec<f64>> = None;
    let result = dormand_prince(
        |t, x| drift.eval(x, t.exp()),
        start.z.ln(),
        r.ln(),
        start.x.clone(),
        &opts,
        |t, x| {
            let mut cur = x.to_vec();
            cur.push(t.exp());
            if linalg::norm(&cur) >= r {
                crossing = Some(sphere_crossing(&prev, &cur, r));
                false
            } else {
                prev = cur;
                true
            }
        },
    );
    let nfe = drift.nfe;
    result.map_err(|(e, _)| e)?;
    crossing
        .map(|c| (c, nfe))
        .ok_or_else(|| domain!("field line did not reach radius {r}"))
}

/// Point on the segment `a -> b` at norm `r`, with `|a| < r <= |b|`.
fn sphere_crossing(a: &[f64], b: &[f64], r: f64) -> Vec<f64> {
    let d: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let qa = linalg::norm_sq(&d);
    let qb = 2.0 * linalg::dot(a, &d);
    let qc = linalg::norm_sq(a) - r * r;
    let s = if qa == 0.0 { 1.0 } else { (-qb + (qb * qb - 4.0 * qa * qc).max(0.0).sqrt()) / (2.0 * qa) };
    let s = s.clamp(0.0, 1.0);
    a.iter().zip(&d).map(|(x, dx)| x + s * dx).collect()
}

/// Outcome of releasing test particles towards a set of charges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitCounts {
    pub hits: Vec<usize>,
    pub lost: usize,
    pub released: usize,
}

impl HitCounts {
    pub fn frequencies(&self) -> Vec<f64> {
        self.hits.iter().map(|&h| h as f64 / self.released as f64).collect()
    }
}

/// Step-size fraction of the distance to the nearest charge.
const HIT_STEP_FRACTION: f64 = 0.05;
const HIT_STEP_BUDGET: usize = 100_000;

/// Release `count` particles uniformly on the sphere of radius `r_start`
/// and follow `-E / |E|` until one comes within `eps_hit` of a charge.
///
/// Steps are classical RK4 in arc length with length a fixed fraction of the
/// distance to the nearest charge, so the resolution tracks the local scale
/// of the field.
pub fn hit_particles<R: Rng + ?Sized>(
    charges: &Dataset,
    count: usize,
    r_start: f64,
    eps_hit: f64,
    rng: &mut R,
) -> Result<HitCounts> {
    let n = charges.dim().n();
    if n < 3 {
        return Err(domain!("hit probabilities need ambient dimension >= 3, got {n}"));
    }
    let max_norm = charges.iter().map(linalg::norm).fold(0.0, f64::max);
    if !(r_start > max_norm && eps_hit > 0.0) {
        return Err(domain!("need r_start beyond every charge and eps_hit > 0"));
    }
    let sign = match charges.charges() {
        Some(q) if q.iter().all(|&c| c < 0.0) => ChargeSign::Negative,
        _ => ChargeSign::Positive,
    };
    let nearest = |y: &[f64]| {
        charges
            .iter()
            .enumerate()
            .map(|(i, c)| (i, linalg::dist_sq(y, c).sqrt()))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
    };
    let dir = |y: &[f64]| -> Result<Vec<f64>> {
        let mut e = discrete_charge_field(y, charges, sign)?;
        let norm = linalg::norm(&e);
        if !(norm > 0.0) {
            return Err(Error::DegenerateField {
                z: 0.0,
                v_z_abs: 0.0,
                v_x_norm: norm,
            });
        }
        linalg::scale_in_place(&mut e, -sign_factor(sign) / norm);
        Ok(e)
    };
    let mut out = HitCounts {
        hits: vec![0; charges.len()],
        lost: 0,
        released: count,
    };
    'particle: for _ in 0..count {
        let mut y = sample_direction(n, rng);
        linalg::scale_in_place(&mut y, r_start);
        for _ in 0..HIT_STEP_BUDGET {
            let (idx, d) = nearest(&y);
            if d < eps_hit {
                out.hits[idx] += 1;
                continue 'particle;
            }
            let h = HIT_STEP_FRACTION * d;
            let step = (|| -> Result<Vec<f64>> {
                let k1 = dir(&y)?;
                let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
                let k2 = dir(&y2)?;
                let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
                let k3 = dir(&y3)?;
                let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
                let k4 = dir(&y4)?;
                Ok((0..n).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
            })();
            match step {
                Ok(next) => y = next,
                Err(_) => {
                    out.lost += 1;
                    continue 'particle;
                }
            }
        }
        out.lost += 1;
    }
    Ok(out)
}

fn sign_factor(s: ChargeSign) -> f64 {
    match s {
        ChargeSign::Positive => 1.0,
        ChargeSign::Negative => -1.0,
    }
}
