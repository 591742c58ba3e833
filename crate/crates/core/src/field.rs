//! Empirical Poisson field of a dataset in the augmented space.
//!
//! Every source `x_i` is lifted to `(x_i, 0)`. For a query `q = (x, z)` the
//! raw field is `sum_i q_i (q - x_i) / |q - x_i|^(N+1)`; dividing by the
//! matching scalar sum `sum_i q_i / |q - x_i|^(N+1)` gives the empirical field
//! `E_hat(q) = sum_i w_i (q - x_i)`, a convex combination whose `z` component
//! is exactly `z`.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Queries closer than this to a source are rejected as singular.
pub const SINGULAR_RADIUS: f64 = 1e-12;

/// Kernel sums are reduced block-wise, then pairwise across blocks.
const BLOCK: usize = 128;

/// Above this augmented dimension kernels are rescaled by the nearest source
/// distance before accumulation so `|r|^-(N+1)` cannot overflow.
const RESCALE_ABOVE_AUG: usize = 8;

/// A point `(x, z)` of the augmented space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPoint {
    pub x: Vec<f64>,
    pub z: f64,
}

impl AugmentedPoint {
    pub fn new(x: Vec<f64>, z: f64) -> Self {
        Self { x, z }
    }

    /// A training point, lifted onto the `z = 0` hyperplane.
    pub fn on_data(x: &[f64]) -> Self {
        Self { x: x.to_vec(), z: 0.0 }
    }

    /// Split an `(N+1)`-vector into `x` and the trailing `z`.
    pub fn from_slice(v: &[f64]) -> Self {
        let (z, x) = v.split_last().expect("augmented vector must be non-empty");
        Self { x: x.to_vec(), z: *z }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.x.len() + 1);
        v.extend_from_slice(&self.x);
        v.push(self.z);
        v
    }

    pub fn norm(&self) -> f64 {
        (linalg::norm_sq(&self.x) + self.z * self.z).sqrt()
    }

    #[inline]
    pub fn data_dim(&self) -> usize {
        self.x.len()
    }
}

/// Empirical field at a query together with its negative normalized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEstimate {
    /// `E_hat(q)`, an `(N+1)`-vector.
    pub e_hat: Vec<f64>,
    /// `-sqrt(N) E_hat / (|E_hat| + gamma)`.
    pub v: Vec<f64>,
    /// The `gamma` used.
    pub stabilizer: f64,
}

/// Raw kernel sums against a dataset.
///
/// The true sums are `vector * scale^-(N+1)` and `scalar * scale^-(N+1)`;
/// `scale` is 1 unless rescaling was needed.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSums {
    pub vector: Vec<f64>,
    pub scalar: f64,
    pub scale: f64,
}

impl KernelSums {
    /// `sum_i q_i (q - x_i) / |q - x_i|^(N+1)` without normalization.
    pub fn raw_vector(&self) -> Vec<f64> {
        let aug = self.vector.len();
        let f = self.scale.powi(-(aug as i32));
        self.vector.iter().map(|v| v * f).collect()
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.vector.iter().map(|v| v / self.scalar).collect()
    }
}

fn check_query(q: &AugmentedPoint, d: &Dataset) -> Result<()> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if q.data_dim() != d.dim().n() {
        return Err(Error::DimensionMismatch {
            expected: d.dim().n(),
            got: q.data_dim(),
        });
    }
    Ok(())
}

#[inline]
fn sq_dist_to_source(x: &[f64], z2: f64, src: &[f64]) -> f64 {
    linalg::dist_sq(x, src) + z2
}

/// `(s2 / r2)^(aug / 2)` for integer `aug`.
#[inline]
pub(crate) fn inverse_power(ratio: f64, aug: usize) -> f64 {
    match aug {
        2 => ratio,
        3 => ratio * ratio.sqrt(),
        4 => ratio * ratio,
        _ if aug.is_multiple_of(2) => ratio.powi((aug / 2) as i32),
        _ => ratio.powi((aug / 2) as i32) * ratio.sqrt(),
    }
}

/// Sum kernels of sources `[start, end)` against `q`, pairwise across blocks.
pub(crate) fn kernel_sums_range(
    q: &AugmentedPoint,
    d: &Dataset,
    start: usize,
    end: usize,
    scale: f64,
) -> Result<KernelSums> {
    let n = d.dim().n();
    let aug = n + 1;
    let stride = aug + 1;
    let z2 = q.z * q.z;
    let s2 = scale * scale;
    let singular_sq = SINGULAR_RADIUS * SINGULAR_RADIUS;

    let blocks = (end - start).div_ceil(BLOCK).max(1);
    let mut acc = vec![0.0; blocks * stride];
    for (b, block_acc) in acc.chunks_exact_mut(stride).enumerate() {
        let lo = start + b * BLOCK;
        let hi = (lo + BLOCK).min(end);
        for i in lo..hi {
            let src = d.point(i);
            let r2 = sq_dist_to_source(&q.x, z2, src);
            if r2 < singular_sq {
                return Err(Error::Singularity { index: i });
            }
            let k = d.charge(i) * inverse_power(s2 / r2, aug);
            for j in 0..n {
                block_acc[j] += k * (q.x[j] - src[j]);
            }
            block_acc[n] += k * q.z;
            block_acc[aug] += k;
        }
    }
    pairwise_reduce(&mut acc, stride, blocks);
    acc.truncate(stride);
    let scalar = acc.pop().unwrap_or(0.0);
    Ok(KernelSums {
        vector: acc,
        scalar,
        scale,
    })
}

fn pairwise_reduce(acc: &mut [f64], stride: usize, mut count: usize) {
    while count > 1 {
        let half = count / 2;
        for i in 0..half {
            for j in 0..stride {
                acc[i * stride + j] = acc[2 * i * stride + j] + acc[(2 * i + 1) * stride + j];
            }
        }
        if count % 2 == 1 {
            for j in 0..stride {
                acc[half * stride + j] = acc[(count - 1) * stride + j];
            }
        }
        count = count.div_ceil(2);
    }
}

/// Kernel sums of the whole dataset against `q`.
pub fn kernel_sums(q: &AugmentedPoint, d: &Dataset) -> Result<KernelSums> {
    check_query(q, d)?;
    let aug = d.dim().aug();
    let scale = if aug > RESCALE_ABOVE_AUG {
        let z2 = q.z * q.z;
        let min_r2 = d
            .iter()
            .map(|src| sq_dist_to_source(&q.x, z2, src))
            .fold(f64::INFINITY, f64::min);
        min_r2.sqrt().max(SINGULAR_RADIUS)
    } else {
        1.0
    };
    kernel_sums_range(q, d, 0, d.len(), scale)
}

/// Empirical field `E_hat(q)`.
pub fn empirical_field(q: &AugmentedPoint, d: &Dataset) -> Result<Vec<f64>> {
    Ok(kernel_sums(q, d)?.normalized())
}

/// The unnormalized sum `sum_i q_i (q - x_i) / |q - x_i|^(N+1)`.
pub fn unnormalized_field(q: &AugmentedPoint, d: &Dataset) -> Result<Vec<f64>> {
    Ok(kernel_sums(q, d)?.raw_vector())
}

/// Convex-combination weights `w_i` of the empirical field.
pub fn empirical_weights(q: &AugmentedPoint, d: &Dataset) -> Result<Vec<f64>> {
    check_query(q, d)?;
    let aug = d.dim().aug();
    let z2 = q.z * q.z;
    let r2: Vec<f64> = d.iter().map(|src| sq_dist_to_source(&q.x, z2, src)).collect();
    if let Some(i) = r2.iter().position(|&r| r < SINGULAR_RADIUS * SINGULAR_RADIUS) {
        return Err(Error::Singularity { index: i });
    }
    let min_r2 = r2.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = r2
        .iter()
        .enumerate()
        .map(|(i, &r)| d.charge(i) * inverse_power(min_r2 / r, aug))
        .collect();
    let total: f64 = w.iter().sum();
    linalg::scale_in_place(&mut w, 1.0 / total);
    Ok(w)
}

/// `-sqrt(N) e / (|e| + gamma)`; the zero vector when both norms vanish.
pub fn negative_normalized(e_hat: &[f64], sqrt_n: f64, gamma: f64) -> Vec<f64> {
    let denom = linalg::norm(e_hat) + gamma;
    if denom == 0.0 {
        return vec![0.0; e_hat.len()];
    }
    e_hat.iter().map(|e| -sqrt_n * e / denom).collect()
}

/// Empirical field and negative normalized field with stabilizer `gamma`.
pub fn normalized_field(q: &AugmentedPoint, d: &Dataset, gamma: f64) -> Result<FieldEstimate> {
    if !(gamma >= 0.0) {
        return Err(crate::error::domain!("gamma must be nonnegative, got {gamma}"));
    }
    let e_hat = empirical_field(q, d)?;
    let v = negative_normalized(&e_hat, d.dim().sqrt_n(), gamma);
    Ok(FieldEstimate {
        e_hat,
        v,
        stabilizer: gamma,
    })
}

/// Empirical field at many queries against one dataset.
pub fn empirical_field_batch(queries: &[AugmentedPoint], d: &Dataset) -> Result<Vec<Vec<f64>>> {
    queries.iter().map(|q| empirical_field(q, d)).collect()
}

/// Sign convention for [`discrete_charge_field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChargeSign {
    Positive,
    Negative,
}

impl ChargeSign {
    fn factor(self) -> f64 {
        match self {
            ChargeSign::Positive => 1.0,
            ChargeSign::Negative => -1.0,
        }
    }
}

/// Field of point charges in their own ambient space `R^n`:
/// `E(y) = sum_i s q_i (y - x_i) / |y - x_i|^n`.
pub fn discrete_charge_field(y: &[f64], charges: &Dataset, sign: ChargeSign) -> Result<Vec<f64>> {
    if charges.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = charges.dim().n();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    let mut e = vec![0.0; n];
    for (i, src) in charges.iter().enumerate() {
        let r2 = linalg::dist_sq(y, src);
        if r2 < SINGULAR_RADIUS * SINGULAR_RADIUS {
            return Err(Error::Singularity { index: i });
        }
        let k = sign.factor() * charges.charge(i) * inverse_power(1.0 / r2, n);
        for j in 0..n {
            e[j] += k * (y[j] - src[j]);
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy, ToyName};
    use crate::geometry::RngState;
    use rand::Rng;

    /// Independent brute-force oracle: plain loops, direct powf, no blocking.
    fn oracle_field(q: &[f64], sources: &[Vec<f64>]) -> Vec<f64> {
        let aug = q.len();
        let mut num = vec![0.0; aug];
        let mut den = 0.0;
        for s in sources {
            let mut lifted = s.clone();
            lifted.push(0.0);
            let r: f64 = q.iter().zip(&lifted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let k = 1.0 / r.powf(aug as f64);
            for j in 0..aug {
                num[j] += k * (q[j] - lifted[j]);
            }
            den += k;
        }
        num.iter().map(|v| v / den).collect()
    }

    #[test]
    fn single_source_reproduces_query() {
        let d = Dataset::from_rows(&[[0.0, 0.0]]).unwrap();
        let q = AugmentedPoint::new(vec![0.3, -0.7], 1.9);
        let e = empirical_field(&q, &d).unwrap();
        assert_eq!(e, q.to_vec());
    }

    #[test]
    fn mirror_pair_cancels_x() {
        let d = Dataset::from_rows(&[[1.0], [-1.0]]).unwrap();
        let q = AugmentedPoint::new(vec![0.0], 0.8);
        let e = empirical_field(&q, &d).unwrap();
        assert!(e[0].abs() < 1e-15);
        assert!((e[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = RngState::new(21, 0).rng();
        let sources: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let d = Dataset::from_rows(&sources).unwrap();
        for _ in 0..20 {
            let q = AugmentedPoint::new(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)], rng.random_range(0.01..3.0));
            let e = empirical_field(&q, &d).unwrap();
            let o = oracle_field(&q.to_vec(), &sources);
            let err = linalg::norm(&e.iter().zip(&o).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(err <= 1e-10 * linalg::norm(&o));
        }
    }

    #[test]
    fn rescaled_path_matches_oracle_in_high_dimension() {
        let mut rng = RngState::new(22, 0).rng();
        let sources: Vec<Vec<f64>> = (0..40).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let d = Dataset::from_rows(&sources).unwrap();
        let q = AugmentedPoint::new((0..12).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.4);
        let e = empirical_field(&q, &d).unwrap();
        let o = oracle_field(&q.to_vec(), &sources);
        for (a, b) in e.iter().zip(&o) {
            assert!((a - b).abs() < 1e-10 * linalg::norm(&o));
        }
    }

    #[test]
    fn weights_identity_and_z_component() {
        let mut rng = RngState::new(23, 0).rng();
        let d = generate_toy(ToyName::Disk, 700, &mut rng).unwrap();
        for _ in 0..20 {
            let z = rng.random_range(0.0..2.0);
            let q = AugmentedPoint::new(vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)], z);
            let w = empirical_weights(&q, &d).unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let e = empirical_field(&q, &d).unwrap();
            assert!((e[2] - z).abs() <= 1e-12 * (1.0 + z));
        }
    }

    #[test]
    fn mirror_symmetry_in_z() {
        let mut rng = RngState::new(24, 0).rng();
        let d = generate_toy(ToyName::Heart, 300, &mut rng).unwrap();
        let up = AugmentedPoint::new(vec![0.2, 0.4], 0.7);
        let down = AugmentedPoint::new(vec![0.2, 0.4], -0.7);
        let eu = empirical_field(&up, &d).unwrap();
        let ed = empirical_field(&down, &d).unwrap();
        assert!((eu[0] - ed[0]).abs() < 1e-14 && (eu[1] - ed[1]).abs() < 1e-14);
        assert!((eu[2] + ed[2]).abs() < 1e-14);
    }

    #[test]
    fn charge_rescaling_keeps_direction() {
        let mut rng = RngState::new(25, 0).rng();
        let base = generate_toy(ToyName::Disk, 100, &mut rng).unwrap();
        let charges: Vec<f64> = (0..100).map(|_| rng.random_range(0.5..2.0)).collect();
        let a = base.clone().with_charges(charges.clone()).unwrap();
        let b = base.with_charges(charges.iter().map(|c| 7.5 * c).collect()).unwrap();
        let q = AugmentedPoint::new(vec![0.1, 0.9], 0.3);
        let va = normalized_field(&q, &a, 0.0).unwrap().v;
        let vb = normalized_field(&q, &b, 0.0).unwrap().v;
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn far_field_is_radial() {
        let mut rng = RngState::new(26, 0).rng();
        let d = crate::dataset::center(&generate_toy(ToyName::Disk, 500, &mut rng).unwrap()).unwrap();
        let max_norm = crate::dataset::stats(&d).unwrap().max_norm;
        for dir in [[1.0, 0.0, 0.0], [0.6, 0.0, 0.8], [0.0, -0.28, 0.96]] {
            let q = AugmentedPoint::from_slice(&dir.map(|c| c * 1e3 * max_norm));
            let e = empirical_field(&q, &d).unwrap();
            let cos = linalg::dot(&e, &q.to_vec()) / (linalg::norm(&e) * q.norm());
            assert!(cos.min(1.0).acos() < 1e-3);
        }
    }

    #[test]
    fn normalized_field_examples() {
        let d = Dataset::from_rows(&[[0.0, 0.0]]).unwrap();
        let q = AugmentedPoint::new(vec![0.6, 0.0], 0.8);
        let f = normalized_field(&q, &d, 0.0).unwrap();
        let s = 2f64.sqrt();
        assert!((f.v[0] + s * 0.6).abs() < 1e-15 && (f.v[2] + s * 0.8).abs() < 1e-15);

        // |e| = 5 with gamma = 5 halves the norm.
        let q = AugmentedPoint::new(vec![3.0, 0.0], 4.0);
        let f = normalized_field(&q, &d, 5.0).unwrap();
        assert!((linalg::norm(&f.v) - s / 2.0).abs() < 1e-15);
        assert!(linalg::dot(&f.v, &f.e_hat) < 0.0);
        assert!(linalg::norm(&f.v) < s);
        assert!(normalized_field(&q, &d, -1.0).is_err());
    }

    #[test]
    fn singular_query_reports_index() {
        let d = Dataset::from_rows(&[[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]).unwrap();
        let q = AugmentedPoint::new(vec![0.5, 0.5], 0.0);
        assert_eq!(empirical_field(&q, &d), Err(Error::Singularity { index: 1 }));
        let q = AugmentedPoint::new(vec![0.5, 0.5], 1e-3);
        assert!(empirical_field(&q, &d).is_ok());
        let bad = AugmentedPoint::new(vec![0.5], 1.0);
        assert!(matches!(empirical_field(&bad, &d), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn discrete_charges() {
        let one = Dataset::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let e = discrete_charge_field(&[1.0, 0.0, 0.0], &one, ChargeSign::Positive).unwrap();
        assert_eq!(e, vec![1.0, 0.0, 0.0]);
        let en = discrete_charge_field(&[1.0, 0.0, 0.0], &one, ChargeSign::Negative).unwrap();
        assert_eq!(en, vec![-1.0, 0.0, 0.0]);

        let pair = Dataset::from_rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        let e = discrete_charge_field(&[0.0, 0.7, -1.3], &pair, ChargeSign::Positive).unwrap();
        assert!(e[0].abs() < 1e-15);

        // term-by-term oracle
        let mut rng = RngState::new(27, 0).rng();
        let rows: Vec<[f64; 3]> = (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let qs = [0.5, 1.5, 2.5];
        let d = Dataset::from_rows(&rows).unwrap().with_charges(qs.to_vec()).unwrap();
        let y = [2.0, -1.0, 0.5];
        let mut o = [0.0; 3];
        for (r, q) in rows.iter().zip(qs) {
            let diff = [y[0] - r[0], y[1] - r[1], y[2] - r[2]];
            let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            for j in 0..3 {
                o[j] += q * diff[j] / dist.powi(3);
            }
        }
        let e = discrete_charge_field(&y, &d, ChargeSign::Positive).unwrap();
        for j in 0..3 {
            assert!((e[j] - o[j]).abs() < 1e-12 * o[j].abs().max(1e-3));
        }
        assert_eq!(
            discrete_charge_field(&[1.0, 0.0, 0.0], &pair, ChargeSign::Positive),
            Err(Error::Singularity { index: 0 })
        );
    }
}
