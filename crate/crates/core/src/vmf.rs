//! von Mises–Fisher distribution on the unit sphere `S^{m−1}`.
//!
//! Density `C_m(κ)·exp(κ μᵀz)` with
//! `C_m(κ) = κ^{m/2−1} / ((2π)^{m/2} I_{m/2−1}(κ))`. All normalizers are
//! evaluated in log space so `κ` can go to `1e4` without overflow.
//!
//! Sampling follows Wood (1994): the cosine `ω = μᵀz` is drawn by rejection
//! around the north pole `e_0`, a tangent direction is drawn uniformly, and a
//! Householder reflection carries `e_0` onto `μ`. With `κ` fixed, the pole
//! sample does not depend on `μ`, so the reflection is the only
//! `μ`-dependent step and is differentiable.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::tensor::reflect;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VmfError {
    #[error("dimension must be at least 2, got {0}")]
    Dimension(usize),
    #[error("concentration must be finite and non-negative, got {0}")]
    Concentration(f64),
    #[error("mean direction must have unit norm, got norm {0}")]
    MeanNotUnit(f64),
    #[error("point must lie on the unit sphere, got norm {0}")]
    PointNotUnit(f64),
    #[error("dimension mismatch: mean has {mean}, point has {point}")]
    DimensionMismatch { mean: usize, point: usize },
    #[error("rejection sampler exceeded {0} proposals (m={1}, kappa={2})")]
    RejectionCap(usize, usize, f64),
}

pub type Result<T> = std::result::Result<T, VmfError>;

const REJECTION_CAP: usize = 1000;
const CF_TOL: f64 = 1e-14;
const CF_MAX_ITERS: usize = 1_000_000;
const SMALL_KAPPA: f64 = 1e-6;

/// Mean direction and concentration of a vMF on `S^{m−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        check_dim(mu.len())?;
        check_kappa(kappa)?;
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(VmfError::MeanNotUnit(norm));
        }
        Ok(Self { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_dim(m: usize) -> Result<()> {
    if m < 2 {
        return Err(VmfError::Dimension(m));
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(VmfError::Concentration(kappa));
    }
    Ok(())
}

/// `I_{ν+1}(x) / I_ν(x)` by the modified Lentz method on
/// `1 / (2(ν+1)/x + 1 / (2(ν+2)/x + …))`.
fn bessel_i_ratio(nu: f64, x: f64) -> f64 {
    if x < SMALL_KAPPA {
        // leading terms of the power series
        let a = nu + 1.0;
        return x / (2.0 * a) - x * x * x / (8.0 * a * a * (a + 1.0));
    }
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for k in 1..=CF_MAX_ITERS {
        let b = 2.0 * (nu + k as f64) / x;
        d = b + d;
        if d == 0.0 {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < CF_TOL {
            break;
        }
    }
    f
}

/// Mean resultant length `A_m(κ) = I_{m/2}(κ) / I_{m/2−1}(κ)`, in `[0, 1)`.
pub fn bessel_ratio(m: usize, kappa: f64) -> Result<f64> {
    check_dim(m)?;
    check_kappa(kappa)?;
    if kappa == 0.0 {
        return Ok(0.0);
    }
    Ok(bessel_i_ratio(m as f64 / 2.0 - 1.0, kappa))
}

fn log_bessel_i0(x: f64) -> f64 {
    if x <= 20.0 {
        let q = x * x / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1.0;
        }
        sum.ln()
    } else {
        // Hankel asymptotic expansion; terms decrease until k ≈ 2x
        let z = 8.0 * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..30 {
            let odd = (2 * k - 1) as f64;
            term *= odd * odd / (k as f64 * z);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
    }
}

fn log_sinh(x: f64) -> f64 {
    if x < 1.0 {
        x.sinh().ln()
    } else {
        x + (-(-2.0 * x).exp()).ln_1p() - std::f64::consts::LN_2
    }
}

/// `log I_ν(x)` for integer or half-integer `ν ≥ 0` and `x > 0`, built up
/// from `I_0` or `I_{1/2}` through continued-fraction ratios.
fn log_bessel_i(nu: f64, x: f64) -> f64 {
    let (mut order, mut acc) = if nu.fract() == 0.0 {
        (0.0, log_bessel_i0(x))
    } else {
        (
            0.5,
            0.5 * (2.0 / (std::f64::consts::PI * x)).ln() + log_sinh(x),
        )
    };
    while order < nu {
        acc += bessel_i_ratio(order, x).ln();
        order += 1.0;
    }
    acc
}

/// `log` of the surface area of `S^{m−1}`, `2π^{m/2} / Γ(m/2)`.
pub fn log_sphere_area(m: usize) -> f64 {
    let h = m as f64 / 2.0;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - ln_gamma(h)
}

/// `log C_m(κ)`.
pub fn log_normalizer(m: usize, kappa: f64) -> Result<f64> {
    check_dim(m)?;
    check_kappa(kappa)?;
    if kappa == 0.0 {
        return Ok(-log_sphere_area(m));
    }
    let nu = m as f64 / 2.0 - 1.0;
    Ok(nu * kappa.ln()
        - (m as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln()
        - log_bessel_i(nu, kappa))
}

/// `log q(z)` for `q = vMF(μ, κ)`.
pub fn log_density(z: &[f64], p: &VmfParams) -> Result<f64> {
    if z.len() != p.dim() {
        return Err(VmfError::DimensionMismatch {
            mean: p.dim(),
            point: z.len(),
        });
    }
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(VmfError::PointNotUnit(norm));
    }
    let dot: f64 = p.mu.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(p.kappa * dot + log_normalizer(p.dim(), p.kappa)?)
}

/// `KL(vMF(μ, κ) ‖ Uniform(S^{m−1})) = κ A_m(κ) + log C_m(κ) + log|S^{m−1}|`.
/// The divergence does not depend on `μ`.
pub fn kl_to_uniform(m: usize, kappa: f64) -> Result<f64> {
    if kappa == 0.0 {
        check_dim(m)?;
        return Ok(0.0);
    }
    let kl = kappa * bessel_ratio(m, kappa)? + log_normalizer(m, kappa)? + log_sphere_area(m);
    // exact value is non-negative; clip rounding noise at tiny κ
    Ok(kl.max(0.0))
}

/// Draws `w ~ vMF(e_0, κ)` on `S^{m−1}`.
pub fn sample_pole<R: Rng + ?Sized>(m: usize, kappa: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_dim(m)?;
    check_kappa(kappa)?;
    let dm1 = (m - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("positive shape");
    let mut omega = None;
    for _ in 0..REJECTION_CAP {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            omega = Some(w);
            break;
        }
    }
    let omega = omega.ok_or(VmfError::RejectionCap(REJECTION_CAP, m, kappa))?;

    let mut tangent: Vec<f64> = (0..m - 1).map(|_| rng.sample(StandardNormal)).collect();
    let tn = tangent.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tn > 0.0 {
        tangent.iter_mut().for_each(|v| *v /= tn);
    } else {
        tangent[0] = 1.0;
    }
    let s = (1.0 - omega * omega).max(0.0).sqrt();
    let mut out = Vec::with_capacity(m);
    out.push(omega);
    out.extend(tangent.into_iter().map(|v| s * v));
    Ok(out)
}

/// Draws `z ~ vMF(μ, κ)`.
pub fn sample<R: Rng + ?Sized>(p: &VmfParams, rng: &mut R) -> Result<Vec<f64>> {
    let w = sample_pole(p.dim(), p.kappa, rng)?;
    Ok(reflect(&p.mu, &w))
}
