//! Source datasets: toy generators, centering and the moments the
//! hyperparameter rules consume.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{standard_normal, Dim};
use crate::linalg;

/// A set of `N`-dimensional source points with optional positive charges.
///
/// Points are stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: Vec<f64>,
    dim: Dim,
    charges: Option<Vec<f64>>,
    centered: bool,
}

impl Dataset {
    pub fn from_flat(n: usize, points: Vec<f64>) -> Result<Self> {
        let dim = Dim::new(n)?;
        if !points.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: points.len() % n,
            });
        }
        Ok(Self {
            points,
            dim,
            charges: None,
            centered: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let n = first.as_ref().len();
        let mut flat = Vec::with_capacity(n * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: row.len() });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(n, flat)
    }

    pub fn with_charges(mut self, charges: Vec<f64>) -> Result<Self> {
        if charges.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: charges.len(),
            });
        }
        if let Some((i, q)) = charges.iter().enumerate().find(|(_, q)| !(**q > 0.0 && q.is_finite())) {
            return Err(domain!("charge {i} must be positive and finite, got {q}"));
        }
        self.charges = Some(charges);
        Ok(self)
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len() / self.dim.n()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        let n = self.dim.n();
        &self.points[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim.n())
    }

    #[inline]
    pub fn flat(&self) -> &[f64] {
        &self.points
    }

    pub fn charges(&self) -> Option<&[f64]> {
        self.charges.as_deref()
    }

    /// Charge of point `i` (1 when the dataset carries no charges).
    #[inline]
    pub fn charge(&self, i: usize) -> f64 {
        self.charges.as_ref().map_or(1.0, |c| c[i])
    }

    pub fn total_charge(&self) -> f64 {
        self.charges.as_ref().map_or(self.len() as f64, |c| c.iter().sum())
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter().map(|p| p.to_vec()).collect()
    }

    /// New dataset holding the points at `indices` (charges follow).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.dim.n();
        let mut points = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            points.extend_from_slice(self.point(i));
        }
        let charges = self.charges.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect());
        Self {
            points,
            dim: self.dim,
            charges,
            centered: false,
        }
    }

    /// Split into the first `k` points and the rest.
    pub fn split_at(&self, k: usize) -> (Self, Self) {
        let k = k.min(self.len());
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Sample moments used by the rules of thumb and the multipole criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean_sq_norm: f64,
    pub max_norm: f64,
    pub count: usize,
}

pub fn stats(d: &Dataset) -> Result<DatasetStats> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum_sq = 0.0;
    let mut max_sq = 0.0f64;
    for p in d.iter() {
        let s = linalg::norm_sq(p);
        sum_sq += s;
        max_sq = max_sq.max(s);
    }
    Ok(DatasetStats {
        mean_sq_norm: sum_sq / d.len() as f64,
        max_norm: max_sq.sqrt(),
        count: d.len(),
    })
}

/// Translate the points so every coordinate has zero sample mean.
pub fn center(d: &Dataset) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = d.dim.n();
    let mut mean = alloc::vec![0.0; n];
    for p in d.iter() {
        linalg::axpy(1.0, p, &mut mean);
    }
    linalg::scale_in_place(&mut mean, 1.0 / d.len() as f64);
    let mut points = d.points.clone();
    for row in points.chunks_exact_mut(n) {
        linalg::axpy(-1.0, &mean, row);
    }
    Ok(Dataset {
        points,
        dim: d.dim,
        charges: d.charges.clone(),
        centered: true,
    })
}

/// Built-in two-dimensional toy distributions, all with bounded support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyName {
    /// Region `x^2 + (y - |x|^(2/3))^2 <= 1`.
    Heart,
    /// Uniform unit disk.
    Disk,
    /// Eight Gaussians (sigma 0.1) on the unit circle, truncated at 3 sigma.
    Gaussians,
    /// Alternating unit squares of a 4x4 board on `[-2, 2]^2`.
    Checkerboard,
}

impl ToyName {
    pub const ALL: [ToyName; 4] = [ToyName::Heart, ToyName::Disk, ToyName::Gaussians, ToyName::Checkerboard];

    pub fn as_str(self) -> &'static str {
        match self {
            ToyName::Heart => "heart",
            ToyName::Disk => "disk",
            ToyName::Gaussians => "gaussians",
            ToyName::Checkerboard => "checkerboard",
        }
    }

    /// Radius of a ball containing the support.
    pub fn support_radius(self) -> f64 {
        match self {
            ToyName::Heart => 5f64.sqrt(),
            ToyName::Disk => 1.0,
            ToyName::Gaussians => 1.0 + 3.0 * GAUSSIANS_SIGMA,
            ToyName::Checkerboard => 8f64.sqrt(),
        }
    }
}

impl FromStr for ToyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownDataset(String::from(s)))
    }
}

impl core::fmt::Display for ToyName {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

const GAUSSIANS_SIGMA: f64 = 0.1;

/// Whether `(x, y)` lies in the heart region.
pub fn in_heart(x: f64, y: f64) -> bool {
    let dy = y - x.abs().powf(2.0 / 3.0);
    x * x + dy * dy <= 1.0
}

/// Draw `count` points from a toy distribution.
pub fn generate_toy<R: Rng + ?Sized>(name: ToyName, count: usize, rng: &mut R) -> Result<Dataset> {
    if count == 0 {
        return Err(domain!("count must be at least 1"));
    }
    let mut flat = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let (x, y) = match name {
            ToyName::Disk => {
                let r = rng.random::<f64>().sqrt();
                let phi = 2.0 * PI * rng.random::<f64>();
                (r * phi.cos(), r * phi.sin())
            }
            ToyName::Heart => loop {
                let x = rng.random_range(-1.0..1.0);
                let y = rng.random_range(-1.0..2.0);
                if in_heart(x, y) {
                    break (x, y);
                }
            },
            ToyName::Gaussians => {
                let k = rng.random_range(0..8u32) as f64;
                let (cx, cy) = ((k * PI / 4.0).cos(), (k * PI / 4.0).sin());
                loop {
                    let dx = standard_normal(rng);
                    let dy = standard_normal(rng);
                    if dx * dx + dy * dy <= 9.0 {
                        break (cx + GAUSSIANS_SIGMA * dx, cy + GAUSSIANS_SIGMA * dy);
                    }
                }
            }
            ToyName::Checkerboard => {
                let x: f64 = rng.random_range(-2.0..2.0);
                let column = x.floor() as i64;
                let row = 2 * rng.random_range(0..2i64) + column.rem_euclid(2) - 2;
                (x, row as f64 + rng.random::<f64>())
            }
        };
        flat.push(x);
        flat.push(y);
    }
    Dataset::from_flat(2, flat)
}
