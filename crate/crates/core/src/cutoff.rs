//! Smooth compact-support cutoffs, the scale decomposition they generate,
//! the crossover scale, and the quasi-particle splitting function.

use crate::lattice::Momentum;
use crate::numerics::{smoothstep, smoothstep_deriv};
use serde::{Deserialize, Serialize};

/// The smooth even bump chi_0 that seeds every scale decomposition.
///
/// `chi0(t) = 1` for `|t| <= 1`, `0` for `|t| >= gamma`, monotone and
/// C-infinity in between. The profile is the `exp(-1/t)` mollifier step,
/// frozen here so tables are reproducible bit-for-bit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub gamma: f64,
}

impl CutoffSpec {
    pub fn new(gamma: f64) -> Self {
        assert!(gamma > 1.0 && gamma <= 2.0, "scale base must be in (1, 2]");
        Self { gamma }
    }

    #[inline]
    pub fn chi0(&self, t: f64) -> f64 {
        smoothstep((self.gamma - t.abs()) / (self.gamma - 1.0))
    }

    #[inline]
    pub fn chi0_deriv(&self, t: f64) -> f64 {
        let u = (self.gamma - t.abs()) / (self.gamma - 1.0);
        -t.signum() * smoothstep_deriv(u) / (self.gamma - 1.0)
    }

    /// Aperture `a0 = gamma^{-1} (1/2 - r)` of the infrared decomposition.
    #[inline]
    pub fn aperture(&self, r: f64) -> f64 {
        (0.5 - r) / self.gamma
    }

    /// Quasi-particle splitting profile: 1 for `t >= 1/2`, 0 for
    /// `t <= -1/2`, with `split(t) + split(-t) = 1` exactly.
    #[inline]
    pub fn split(&self, t: f64) -> f64 {
        smoothstep(t + 0.5)
    }
}

/// Running couplings of the lattice (single-ring) regime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatticeCouplings {
    pub z: f64,
    pub alpha: f64,
    pub mu: f64,
}

impl LatticeCouplings {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn max_abs(&self) -> f64 {
        self.z.abs().max(self.alpha.abs()).max(self.mu.abs())
    }
}

/// Inverse-propagator denominator of the lattice regime,
/// `-i k0 (1+z) + (1+alpha)(cos k - 1) + r + gamma^h mu`.
#[inline]
pub fn denominator(kk: Momentum, c: &LatticeCouplings, r: f64, gamma: f64, h: i32) -> num_complex::Complex64 {
    let real = (1.0 + c.alpha) * (kk.k.cos() - 1.0) + r + gamma.powi(h) * c.mu;
    num_complex::Complex64::new(real, -(1.0 + c.z) * kk.k0)
}

/// Cumulative cutoff `chi_{<= h}` of the lattice regime.
pub fn chi_leq(h: i32, kk: Momentum, c: &LatticeCouplings, r: f64, cut: &CutoffSpec) -> f64 {
    let a0 = cut.aperture(r);
    let gh = cut.gamma.powi(h);
    let e = (1.0 + c.alpha) * (kk.k.cos() - 1.0) + r + gh * c.mu;
    let w = (1.0 + c.z) * kk.k0;
    let arg = (w * w + e * e).sqrt() / (gh * a0);
    cut.chi0(arg)
}

/// Single-scale slice `f_h = chi_{<= h} - chi_{<= h-1}`.
///
/// `hi` enters the scale-`h` cutoff and `lo` the scale-`h-1` one; passing
/// the same couplings to both freezes them inside the cutoff, which the
/// tests use to isolate pure cutoff effects.
pub fn slice(
    h: i32,
    kk: Momentum,
    hi: &LatticeCouplings,
    lo: &LatticeCouplings,
    r: f64,
    cut: &CutoffSpec,
) -> f64 {
    chi_leq(h, kk, hi, r, cut) - chi_leq(h - 1, kk, lo, r, cut)
}

/// Cumulative quasi-particle cutoff for the split regime, built on the
/// dressed dispersion `cos k - cos p_F` with the couplings frozen at the
/// crossover. `kk` carries absolute momenta.
pub fn chi_leq_split(
    h: i32,
    kk: Momentum,
    z_star: f64,
    alpha_star: f64,
    cos_pf: f64,
    r: f64,
    cut: &CutoffSpec,
) -> f64 {
    let a0 = cut.aperture(r);
    let gh = cut.gamma.powi(h);
    let e = (1.0 + alpha_star) * (kk.k.cos() - cos_pf);
    let w = (1.0 + z_star) * kk.k0;
    let arg = (w * w + e * e).sqrt() / (gh * a0);
    cut.chi0(arg)
}

/// Crossover scale `h* = inf { h : a0 gamma^{h+1} > |r| }`.
///
/// `None` is the `-infinity` sentinel for `r = 0`, where the single-ring
/// regime runs forever.
pub fn crossover_scale(r: f64, cut: &CutoffSpec) -> Option<i32> {
    if r == 0.0 {
        return None;
    }
    let a0 = cut.aperture(r.abs().min(0.5));
    let holds = |h: i32| a0 * cut.gamma.powi(h + 1) > r.abs();
    let mut h = 64;
    debug_assert!(holds(h));
    while h > -512 && holds(h - 1) {
        h -= 1;
    }
    Some(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cut() -> CutoffSpec {
        CutoffSpec::new(2.0)
    }

    #[test]
    fn bump_support_and_monotonicity() {
        let c = cut();
        assert_eq!(c.chi0(0.3), 1.0);
        assert_eq!(c.chi0(-1.0), 1.0);
        assert_eq!(c.chi0(2.0), 0.0);
        assert_eq!(c.chi0(-3.5), 0.0);
        let mut prev = 1.0;
        for i in 0..=50 {
            let t = 1.0 + i as f64 * 0.02;
            let v = c.chi0(t);
            assert!(v <= prev + 1e-15, "not monotone at t={t}");
            prev = v;
        }
    }

    #[test]
    fn split_partition_of_unity() {
        let c = cut();
        for i in -30..=30 {
            let t = i as f64 / 10.0;
            assert!((c.split(t) + c.split(-t) - 1.0).abs() < 1e-15);
        }
        assert_eq!(c.split(0.7), 1.0);
        assert_eq!(c.split(-0.7), 0.0);
    }

    #[test]
    fn chi_leq_at_fermi_point_is_one() {
        let c = cut();
        let r = 0.25;
        let pf = (1.0f64 - r).acos();
        let v = chi_leq(0, Momentum::new(0.0, pf), &LatticeCouplings::zero(), r, &c);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn chi_leq_vanishes_outside_support() {
        let c = cut();
        let r = 0.0;
        for h in [-1, -3, -6] {
            let a0 = c.aperture(r);
            let k0 = 2.0 * c.gamma.powi(h + 1) * a0;
            let v = chi_leq(h, Momentum::new(k0, 0.0), &LatticeCouplings::zero(), r, &c);
            assert_eq!(v, 0.0, "h={h}");
        }
    }

    #[test]
    fn crossover_matches_direct_scan() {
        let c = cut();
        let r = 2f64.powi(-6);
        let h = crossover_scale(r, &c).unwrap();
        // brute-force scan oracle
        let a0 = c.aperture(r);
        let mut expect = None;
        for cand in (-60..=10).rev() {
            if a0 * c.gamma.powi(cand + 1) > r {
                expect = Some(cand);
            } else {
                break;
            }
        }
        assert_eq!(Some(h), expect);
        assert_eq!(h, -4);
        assert_eq!(crossover_scale(0.0, &c), None);
    }

    #[test]
    fn crossover_shifts_by_two_under_gamma_squared() {
        let c = cut();
        for e in 3..9 {
            let r = 2f64.powi(-e);
            let h1 = crossover_scale(r, &c).unwrap();
            let h2 = crossover_scale(r / 4.0, &c).unwrap();
            // a0 drifts with r, so allow the boundary wiggle of one step
            assert!(
                (h2 - (h1 - 2)).abs() <= 1,
                "r=2^-{e}: h*={h1}, h*(r/4)={h2}"
            );
        }
    }

    #[test]
    fn telescoping_with_frozen_couplings() {
        let c = cut();
        let r = 0.1;
        let frozen = LatticeCouplings {
            z: 0.02,
            alpha: -0.01,
            mu: 0.005,
        };
        for &kk in &[
            Momentum::new(0.01, 0.2),
            Momentum::new(0.2, 0.02),
            Momentum::new(0.003, 0.4),
        ] {
            let mut total = chi_leq(-12, kk, &frozen, r, &c);
            for h in (-11..=0).rev() {
                total += slice(h, kk, &frozen, &frozen, r, &c);
            }
            let direct = chi_leq(0, kk, &frozen, r, &c);
            assert!((total - direct).abs() < 1e-14);
        }
    }
}
