//! Directional primitives on the unit hypersphere: normalization, the
//! modified Bessel function of the first kind (in log space), the
//! von Mises-Fisher log-density and an exact vMF sampler.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Norms below this are treated as a dead feature.
pub const MIN_NORM: f64 = 1e-12;

/// An L2-normalized vector of dimension at least 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    /// The antipodal point.
    pub fn negated(&self) -> UnitVector {
        UnitVector(self.0.iter().map(|x| -x).collect())
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Projects `v` onto the unit sphere.
///
/// Vectors whose norm is already within a few ulps of one are returned
/// unchanged, which makes the operation bitwise idempotent.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    if v.len() < 2 {
        return Err(Error::Domain(format!(
            "unit vectors need at least 2 coordinates, got {}",
            v.len()
        )));
    }
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::Numerical { term: "normalize" });
    }
    if n < MIN_NORM {
        return Err(Error::DegenerateFeature { norm: n });
    }
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(UnitVector(v.to_vec()));
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Parameters of one vMF density.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    pub mean: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mean: UnitVector, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::Domain(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        Ok(Self { mean, kappa })
    }
}

/// Argument above which the large-argument expansion replaces the
/// ascending series.
pub fn bessel_crossover(order: f64) -> f64 {
    30.0 * (order + 1.0)
}

/// `log I_order(x)` for the modified Bessel function of the first kind.
///
/// Below [`bessel_crossover`] the ascending series is summed to
/// convergence in scaled arithmetic (all terms are positive, so there is
/// no cancellation). Above it the Hankel large-argument expansion is
/// summed up to its smallest term.
pub fn log_bessel_i(order: f64, x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("bessel argument must be >= 0, got {x}")));
    }
    if !(order >= 0.0) || !order.is_finite() {
        return Err(Error::Domain(format!("bessel order must be >= 0, got {order}")));
    }
    if x == 0.0 {
        return Ok(if order == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if x <= bessel_crossover(order) {
        Ok(log_bessel_series(order, x))
    } else {
        Ok(log_bessel_asymptotic(order, x))
    }
}

fn log_bessel_series(order: f64, x: f64) -> f64 {
    const RESCALE: f64 = 1e250;
    let half = 0.5 * x;
    let q = half * half;
    let mut offset = 0.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0.0f64;
    loop {
        term *= q / ((k + 1.0) * (k + order + 1.0));
        sum += term;
        k += 1.0;
        if sum > RESCALE {
            sum /= RESCALE;
            term /= RESCALE;
            offset += RESCALE.ln();
        }
        // terms grow until k ~ x/2, so only stop once past the peak
        if (k > half && term < 1e-17 * sum) || k > 20_000.0 {
            break;
        }
    }
    order * half.ln() - ln_gamma(order + 1.0) + sum.ln() + offset
}

fn log_bessel_asymptotic(order: f64, x: f64) -> f64 {
    let mu = 4.0 * order * order;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (8.0 * kf * x);
        if next.abs() >= term.abs() || next == 0.0 {
            break;
        }
        sum += next;
        term = next;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

/// Log surface area of the unit sphere embedded in `R^d`.
pub fn log_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::LN_2 + h * PI.ln() - ln_gamma(h)
}

/// `log C_d(kappa)`, the vMF normalizing constant.
pub fn log_normalizer(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::Domain(format!("vMF needs d >= 2, got {d}")));
    }
    if kappa == 0.0 {
        return Ok(-log_sphere_area(d));
    }
    let order = d as f64 / 2.0 - 1.0;
    Ok(order * kappa.ln() - (d as f64 / 2.0) * (2.0 * PI).ln() - log_bessel_i(order, kappa)?)
}

/// `log p(v | mean, kappa)` with respect to the surface measure.
pub fn vmf_log_density(v: &UnitVector, p: &VmfParams) -> Result<f64> {
    if v.dim() != p.mean.dim() {
        return Err(Error::Dimension { expected: p.mean.dim(), actual: v.dim() });
    }
    let base = log_normalizer(v.dim(), p.kappa)?;
    if p.kappa == 0.0 {
        return Ok(base);
    }
    Ok(base + p.kappa * p.mean.dot(v.as_slice()))
}

/// Uniform draw on the sphere in `R^d` via a normalized Gaussian.
pub fn sample_uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> UnitVector {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&g) {
            return u;
        }
    }
}

/// Exact vMF draw using Wood's rejection scheme for the cosine to the
/// mean, then a uniform tangent direction.
pub fn sample_vmf<R: Rng + ?Sized>(p: &VmfParams, rng: &mut R) -> UnitVector {
    let d = p.mean.dim();
    let kappa = p.kappa;
    if kappa == 0.0 {
        return sample_uniform(d, rng);
    }
    let dm1 = (d - 1) as f64;
    // b written to avoid cancellation at large kappa
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta shape");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    let mean = p.mean.as_slice();
    let tangent = loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let proj = dot(&g, mean);
        let t: Vec<f64> = g.iter().zip(mean).map(|(gi, mi)| gi - proj * mi).collect();
        if let Ok(t) = normalize(&t) {
            break t;
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let out: Vec<f64> = mean
        .iter()
        .zip(tangent.as_slice())
        .map(|(m, t)| w * m + s * t)
        .collect();
    normalize(&out).expect("vMF draw has unit norm")
}
