//! Model parameters, spacetime/momentum points and the shared error type.

use serde::{Deserialize, Serialize};

/// Errors surfaced by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no Fermi point for detuning r = {r}")]
    NoFermiPoint { r: f64 },
    #[error("no metallic solution: {0}")]
    NoMetallicSolution(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("coupling bound violated at scale {scale}: {detail}")]
    CouplingBound { scale: i32, detail: String },
    #[error("shooting bracket not found: {0}")]
    ShootingBracket(String),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error("momentum below resolved scale floor: {0}")]
    BelowScaleFloor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// A point of the Matsubara/momentum grid: `k0` antiperiodic frequency,
/// `k` spatial momentum in `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Momentum {
    pub k0: f64,
    pub k: f64,
}

impl Momentum {
    pub fn new(k0: f64, k: f64) -> Self {
        Self { k0, k }
    }

    /// Fermionic Matsubara frequency `(2n+1) pi / beta`.
    pub fn matsubara(n: i64, beta: f64) -> f64 {
        (2 * n + 1) as f64 * std::f64::consts::PI / beta
    }

    /// Lattice momentum `2 pi m / L` reduced to `[-pi, pi)`.
    pub fn lattice(m: i64, sites: usize) -> f64 {
        let l = sites as f64;
        let mut k = 2.0 * std::f64::consts::PI * (m as f64) / l;
        while k >= std::f64::consts::PI {
            k -= 2.0 * std::f64::consts::PI;
        }
        while k < -std::f64::consts::PI {
            k += 2.0 * std::f64::consts::PI;
        }
        k
    }
}

/// Imaginary-time/space point: `x0` in `[-beta, beta]`, `x` a site offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacetimePoint {
    pub x0: f64,
    pub x: i64,
}

impl SpacetimePoint {
    pub fn new(x0: f64, x: i64) -> Self {
        Self { x0, x }
    }
}

/// Finite even real potential `v(x)`, stored as `v(0), v(1), ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    half: Vec<f64>,
}

impl Potential {
    /// Build from `v(0), v(1), ..., v(range)`; evenness is by construction.
    pub fn from_half(half: Vec<f64>) -> Self {
        Self { half }
    }

    /// Symmetrized nearest-neighbor potential, `v(+-1) = 1/2`.
    pub fn nearest_neighbor() -> Self {
        Self::from_half(vec![0.0, 0.5])
    }

    pub fn at(&self, x: i64) -> f64 {
        let idx = x.unsigned_abs() as usize;
        self.half.get(idx).copied().unwrap_or(0.0)
    }

    pub fn range(&self) -> i64 {
        self.half.len() as i64 - 1
    }

    /// Fourier transform `v_hat(k) = sum_x v(x) e^{-ikx}`, real by evenness.
    pub fn fourier(&self, k: f64) -> f64 {
        let mut sum = self.half[0];
        for (x, &v) in self.half.iter().enumerate().skip(1) {
            sum += 2.0 * v * (k * x as f64).cos();
        }
        sum
    }
}

/// Model parameters of the interacting chain.
///
/// The detuning `r` parametrizes the chemical potential as `h = -1 + r`;
/// the scale base `gamma` lies in `(1, 2]`. RG flows require `|r| <= 1/2`;
/// free-theory routines accept the full band `r` in `(-1, 2)` directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub lambda: f64,
    pub r: f64,
    pub gamma: f64,
    pub sites: usize,
    pub beta: f64,
    pub uv_index: u32,
    pub potential: Potential,
}

impl ModelParams {
    pub fn new(
        lambda: f64,
        r: f64,
        gamma: f64,
        sites: usize,
        beta: f64,
        uv_index: u32,
        potential: Potential,
    ) -> Result<Self> {
        if !(gamma > 1.0 && gamma <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (1, 2], got {gamma}"
            )));
        }
        if sites == 0 {
            return Err(Error::InvalidParameter("sites must be positive".into()));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive, got {beta}"
            )));
        }
        if uv_index == 0 {
            return Err(Error::InvalidParameter("uv_index must be positive".into()));
        }
        if !r.is_finite() || !lambda.is_finite() {
            return Err(Error::InvalidParameter("non-finite lambda or r".into()));
        }
        Ok(Self {
            lambda,
            r,
            gamma,
            sites,
            beta,
            uv_index,
            potential,
        })
    }

    /// Flow routines work in the detuning window `|r| <= 1/2`.
    pub fn validate_for_flow(&self) -> Result<()> {
        if self.r.abs() > 0.5 {
            return Err(Error::InvalidParameter(format!(
                "flow requires |r| <= 1/2, got r = {}",
                self.r
            )));
        }
        Ok(())
    }

    /// Chemical-potential parameter `h = -1 + r`.
    pub fn field(&self) -> f64 {
        -1.0 + self.r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_momenta_reduce_to_first_zone() {
        assert!((Momentum::lattice(4, 8) - (-std::f64::consts::PI)).abs() < 1e-15);
        assert!((Momentum::lattice(2, 8) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn nearest_neighbor_fourier() {
        let v = Potential::nearest_neighbor();
        assert!((v.fourier(0.0) - 1.0).abs() < 1e-15);
        assert!((v.fourier(std::f64::consts::PI) + 1.0).abs() < 1e-15);
        let k = 0.7;
        assert!((v.fourier(k) - k.cos()).abs() < 1e-15);
        assert!((v.fourier(-k) - v.fourier(k)).abs() < 1e-15);
    }

    #[test]
    fn params_reject_bad_gamma() {
        let v = Potential::nearest_neighbor();
        assert!(ModelParams::new(0.1, 0.2, 2.5, 8, 16.0, 20, v.clone()).is_err());
        assert!(ModelParams::new(0.1, 0.2, 1.0, 8, 16.0, 20, v).is_err());
    }

    #[test]
    fn flow_window_enforced() {
        let v = Potential::nearest_neighbor();
        let p = ModelParams::new(0.1, 0.8, 2.0, 8, 16.0, 20, v).unwrap();
        assert!(p.validate_for_flow().is_err());
    }
}
