//! Dimension bookkeeping, sphere constants, Green's-function kernels and the
//! seeded random primitives every other module draws from.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg;

/// Data dimension `n` together with the augmented dimension `n + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dim {
    n: usize,
}

impl Dim {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(domain!("data dimension must be at least 1"));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn n(self) -> usize {
        self.n
    }

    #[inline]
    pub fn aug(self) -> usize {
        self.n + 1
    }

    /// `sqrt(N)`, the norm of every negative normalized field vector at `gamma = 0`.
    #[inline]
    pub fn sqrt_n(self) -> f64 {
        (self.n as f64).sqrt()
    }
}

/// The random generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Reproducible handle on a random stream.
///
/// The seed keys a ChaCha8 generator and `stream_id` (passed through
/// splitmix64) selects its 64-bit stream, so two states with the same seed
/// but different stream ids produce independent sequences while the same
/// pair always reproduces the same draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngState {
    pub const fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(splitmix64(self.stream_id));
        rng
    }

    /// Derive the `index`-th child stream; children of distinct parents or
    /// distinct indices never share a stream id except by hash collision.
    pub fn child(&self, index: u64) -> Self {
        let mixed = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        Self {
            seed: self.seed,
            stream_id: mixed,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// Lanczos approximation, g = 7, nine coefficients.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

fn lanczos_sum(x: f64) -> f64 {
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    a
}

/// The Gamma function.
pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        PI / ((PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let t = x + LANCZOS_G + 0.5;
        (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * lanczos_sum(x)
    }
}

/// Natural log of `|Gamma(x)|`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        (PI / (PI * x).sin().abs()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let t = x + LANCZOS_G + 0.5;
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + lanczos_sum(x).ln()
    }
}

/// Area of the unit `n`-sphere `{x in R^(n+1) : |x| = 1}`, i.e. `S_n(1)`.
pub fn surface_area_unit_sphere(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(domain!("sphere order must be at least 1"));
    }
    let half = (n as f64 + 1.0) / 2.0;
    if half < 150.0 {
        Ok(2.0 * PI.powf(half) / gamma(half))
    } else {
        Ok(ln_surface_area_unit_sphere(n)?.exp())
    }
}

/// `ln S_n(1)`; stays finite for the large `n` where `S_n(1)` underflows.
pub fn ln_surface_area_unit_sphere(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(domain!("sphere order must be at least 1"));
    }
    let half = (n as f64 + 1.0) / 2.0;
    Ok(2.0f64.ln() + half * PI.ln() - ln_gamma(half))
}

fn check_kernel_args(x: &[f64], y: &[f64], n: usize) -> Result<f64> {
    if n < 3 {
        return Err(domain!("Green's kernel needs dimension >= 3, got {n}"));
    }
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    let r = linalg::dist_sq(x, y).sqrt();
    if r == 0.0 {
        return Err(Error::Singularity { index: 0 });
    }
    Ok(r)
}

/// Green's function of the Laplacian in `R^n`, `n >= 3`:
/// `G(x, y) = 1 / ((n - 2) S_{n-1}(1) |x - y|^(n-2))`.
pub fn greens_potential(x: &[f64], y: &[f64], n: usize) -> Result<f64> {
    let r = check_kernel_args(x, y, n)?;
    let area = surface_area_unit_sphere(n - 1)?;
    Ok(1.0 / ((n as f64 - 2.0) * area * r.powi(n as i32 - 2)))
}

/// `grad_x G(x, y) = -(x - y) / (S_{n-1}(1) |x - y|^n)`.
pub fn greens_gradient(x: &[f64], y: &[f64], n: usize) -> Result<Vec<f64>> {
    let r = check_kernel_args(x, y, n)?;
    let area = surface_area_unit_sphere(n - 1)?;
    let scale = -1.0 / (area * r.powi(n as i32));
    Ok(x.iter().zip(y).map(|(a, b)| scale * (a - b)).collect())
}

/// Uniform direction on `S_n(1)`, returned as a unit vector in `R^(n+1)`.
pub fn sample_unit_sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(domain!("sphere order must be at least 1"));
    }
    loop {
        let mut u: Vec<f64> = (0..=n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = linalg::norm(&u);
        if r > 1e-300 {
            linalg::scale_in_place(&mut u, 1.0 / r);
            return Ok(u);
        }
    }
}

/// I.i.d. `N(0, sigma^2)` components.
pub fn sample_gaussian<R: Rng + ?Sized>(dim: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(domain!("sigma must be positive and finite, got {sigma}"));
    }
    Ok((0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Standard normal draw.
#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
