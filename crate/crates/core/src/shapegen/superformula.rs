//! Gielis superformula and the spherical-product supershape surface.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible curvature exponent. Below this the `-1/n1` power
/// blows up.
pub const EXPONENT_FLOOR: f64 = 1e-2;

/// Parameters of one supershape. The same parameter set drives both the
/// longitudinal and latitudinal superformula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupershapeParams {
    pub m: u32,
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
    pub a: f64,
    pub b: f64,
}

impl SupershapeParams {
    pub fn new(m: u32, n1: f64, n2: f64, n3: f64) -> Self {
        Self {
            m,
            n1,
            n2,
            n3,
            a: 1.0,
            b: 1.0,
        }
    }

    /// The unit sphere: m = 4, n1 = n2 = n3 = 2.
    pub fn sphere() -> Self {
        Self::new(4, 2.0, 2.0, 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=7).contains(&self.m) {
            return Err(Error::Domain(format!("lobe count {} outside [3, 7]", self.m)));
        }
        for (name, n) in [("n1", self.n1), ("n2", self.n2), ("n3", self.n3)] {
            if !(n.is_finite() && n > EXPONENT_FLOOR) {
                return Err(Error::Domain(format!(
                    "{name} = {n} must exceed {EXPONENT_FLOOR}"
                )));
            }
        }
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::Domain(format!(
                "scale parameters must be positive (a = {}, b = {})",
                self.a, self.b
            )));
        }
        Ok(())
    }

    /// Draws lobes uniformly from {3..=7} and exponents from chi-squared(4),
    /// redrawing exponents that fall under the floor.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, max_retries: usize) -> Result<Self> {
        let m = rng.gen_range(3..=7u32);
        let chi = ChiSquared::new(4.0).expect("4 degrees of freedom is valid");
        let draw = |rng: &mut R| -> Result<f64> {
            for _ in 0..=max_retries {
                let v: f64 = chi.sample(rng);
                if v > EXPONENT_FLOOR {
                    return Ok(v);
                }
            }
            Err(Error::Domain(format!(
                "curvature exponent below {EXPONENT_FLOOR} after {max_retries} retries"
            )))
        };
        let n1 = draw(rng)?;
        let n2 = draw(rng)?;
        let n3 = draw(rng)?;
        Ok(Self::new(m, n1, n2, n3))
    }
}

/// r(θ) = (|cos(mθ/4)/a|^n2 + |sin(mθ/4)/b|^n3)^(-1/n1)
pub fn superformula_radius(theta: f64, p: &SupershapeParams) -> Result<f64> {
    let arg = p.m as f64 * theta / 4.0;
    let sum = (arg.cos() / p.a).abs().powf(p.n2) + (arg.sin() / p.b).abs().powf(p.n3);
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Domain(format!(
            "superformula sum {sum} at theta = {theta} (params {p:?})"
        )));
    }
    let r = sum.powf(-1.0 / p.n1);
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Domain(format!("superformula radius {r} at theta = {theta}")));
    }
    Ok(r)
}

/// Spherical product of two superformula curves, θ ∈ [-π, π], φ ∈ [-π/2, π/2].
pub fn supershape_point(theta: f64, phi: f64, p: &SupershapeParams) -> Result<[f64; 3]> {
    let rt = superformula_radius(theta, p)?;
    let rp = superformula_radius(phi, p)?;
    Ok([
        rt * theta.cos() * rp * phi.cos(),
        rt * theta.sin() * rp * phi.cos(),
        rp * phi.sin(),
    ])
}

/// Near-uniform parameter locations from a Fibonacci lattice on the sphere,
/// expressed as (θ, φ) pairs. Index i is the same location on every shape.
pub fn fibonacci_parameters(count: usize) -> Vec<(f64, f64)> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let phi = z.clamp(-1.0, 1.0).asin();
            let raw = golden * i as f64;
            let theta = (raw + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                - std::f64::consts::PI;
            (theta, phi)
        })
        .collect()
}
