//! Free theory of the chain: dispersion, Fermi data, free Schwinger
//! functions in the time-domain and Matsubara representations, and the
//! interacting Fermi-momentum root solve.

use crate::lattice::{Error, Momentum, Potential, Result};
use crate::numerics::{self, Kahan};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Band dispersion `eps(k) = -cos k - h` with `h = -1 + r`.
#[inline]
pub fn dispersion(k: f64, r: f64) -> f64 {
    -k.cos() + 1.0 - r
}

/// Fermi momentum and velocity for a metallic detuning `0 < r < 2`.
///
/// `p_F = arccos(1 - r)`, `v_F = sin p_F`. Outside the metallic window no
/// Fermi point exists and the insulating code paths take over.
pub fn fermi_data(r: f64) -> Result<(f64, f64)> {
    if !(r > 0.0 && r < 2.0) {
        return Err(Error::NoFermiPoint { r });
    }
    let pf = (1.0 - r).acos();
    Ok((pf, pf.sin()))
}

/// Fourier transform of the density-density potential at momentum `k`.
pub fn potential_fourier(v: &Potential, k: f64) -> f64 {
    v.fourier(k)
}

/// Free momentum-space two-point function `1 / (-i k0 + cos k + h)`.
#[inline]
pub fn free_propagator_momentum(kk: Momentum, r: f64) -> Complex64 {
    Complex64::new(kk.k.cos() - 1.0 + r, -kk.k0).inv()
}

/// Occupation-weight factors of the time-domain kernel, evaluated without
/// overflow for either sign of the dispersion.
///
/// For `x0 in (0, beta]` returns `e^{-x0 eps} / (1 + e^{-beta eps})`; for
/// `x0 in (-beta, 0]` returns `-e^{-(beta + x0) eps} / (1 + e^{-beta eps})`.
fn time_kernel(x0: f64, eps: f64, beta: f64) -> f64 {
    if x0 > 0.0 {
        if eps >= 0.0 {
            (-x0 * eps).exp() / (1.0 + (-beta * eps).exp())
        } else {
            ((beta - x0) * eps).exp() / (1.0 + (beta * eps).exp())
        }
    } else if eps >= 0.0 {
        -(-(beta + x0) * eps).exp() / (1.0 + (-beta * eps).exp())
    } else {
        -(-x0 * eps).exp() / (1.0 + (beta * eps).exp())
    }
}

/// Reduce `x0` to the fundamental window `(-beta, beta]`, tracking the
/// antiperiodic sign (period `beta`, so period `2 beta` with sign `+1`).
fn reduce_time(mut x0: f64, beta: f64) -> (f64, f64) {
    let mut sign = 1.0;
    while x0 > beta {
        x0 -= beta;
        sign = -sign;
    }
    while x0 <= -beta {
        x0 += beta;
        sign = -sign;
    }
    (x0, sign)
}

/// Time-domain free Schwinger function at finite `L`, `beta`.
///
/// Equal times return the symmetrized value (the mean of the two one-sided
/// limits), which is the convention the Grassmann propagator obeys.
pub fn free_schwinger_time(x0: f64, x: i64, r: f64, sites: usize, beta: f64) -> f64 {
    let (tau, sign) = reduce_time(x0, beta);
    let l = sites as f64;
    let mut acc = Kahan::new();
    for m in 0..sites {
        let k = Momentum::lattice(m as i64, sites);
        let eps = dispersion(k, r);
        let weight = if tau == 0.0 {
            0.5 * (0.5 * beta * eps).tanh()
        } else {
            time_kernel(tau, eps, beta)
        };
        acc.add((k * x as f64).cos() * weight);
    }
    sign * acc.value() / l
}

/// Number of frequency-tail subtraction terms in the Matsubara route.
const TAIL_TERMS: usize = 4;

/// Antiperiodic polynomial profiles `f_m(tau)` with Fourier coefficients
/// `1/(i k0)^m`, valid on `(0, beta)`; `f_1(0)` is the symmetrized 0.
fn tail_profile(m: usize, tau: f64, beta: f64) -> f64 {
    match m {
        1 => {
            if tau == 0.0 {
                0.0
            } else {
                0.5
            }
        }
        2 => 0.5 * tau - 0.25 * beta,
        3 => 0.25 * tau * (tau - beta),
        4 => tau * tau * tau / 12.0 - beta * tau * tau / 8.0 + beta * beta * beta / 48.0,
        _ => unreachable!("tail expansion fixed at four terms"),
    }
}

/// Matsubara-frequency resummation of a single dispersion mode.
///
/// Evaluates `(1/beta) sum_{k0} e^{i k0 tau} / (i k0 + eps)` by subtracting
/// the first four `1/(i k0)^m` tail terms (whose profiles are elementary
/// antiperiodic polynomials) and summing the absolutely convergent rest.
fn matsubara_mode(tau: f64, eps: f64, beta: f64, nfreq: usize) -> f64 {
    // The tail profiles already carry their 1/beta normalization.
    let mut poly = 0.0;
    let mut pow = 1.0;
    for m in 1..=TAIL_TERMS {
        poly += pow * tail_profile(m, tau, beta);
        pow *= -eps;
    }
    // Remainder eps^4 / [(i k0)^4 (i k0 + eps)], summed over +-k0 pairs.
    let e4 = eps.powi(4);
    let mut rest = Kahan::new();
    for n in 0..nfreq {
        let k0 = Momentum::matsubara(n as i64, beta);
        let ik0_4 = Complex64::new(k0 * k0 * k0 * k0, 0.0); // (i k0)^4
        let rem = e4 / (ik0_4 * Complex64::new(eps, k0));
        let phase = Complex64::from_polar(1.0, k0 * tau);
        rest.add(2.0 * (phase * rem).re);
    }
    poly + rest.value() / beta
}

/// Free Schwinger function evaluated through its Matsubara series.
///
/// Independent route from [`free_schwinger_time`]: the mode kernel is
/// `1/(i k0 + eps(k))`, i.e. minus [`free_propagator_momentum`], which is
/// the frequency pairing that resums to the time-ordered profile.
pub fn matsubara_schwinger_time(
    x0: f64,
    x: i64,
    r: f64,
    sites: usize,
    beta: f64,
    nfreq: usize,
) -> f64 {
    let (tau, sign) = reduce_time(x0, beta);
    // Map (-beta, 0) to (0, beta) antiperiodically so the tail profiles apply.
    let (tau, sign) = if tau < 0.0 {
        (tau + beta, -sign)
    } else {
        (tau, sign)
    };
    let l = sites as f64;
    let mut acc = Kahan::new();
    for m in 0..sites {
        let k = Momentum::lattice(m as i64, sites);
        let eps = dispersion(k, r);
        acc.add((k * x as f64).cos() * matsubara_mode(tau, eps, beta, nfreq));
    }
    sign * acc.value() / l
}

/// Interacting Fermi momentum from the dressed dispersion condition
/// `(1 + alpha) cos p = (1 + alpha) - r - gamma^{h*} mu + gamma^{h*} nu`.
pub fn solve_interacting_pf(
    r: f64,
    alpha: f64,
    mu: f64,
    nu: f64,
    gamma: f64,
    hstar: i32,
) -> Result<f64> {
    let scale = gamma.powi(hstar);
    let rhs = (1.0 + alpha) - r - scale * mu + scale * nu;
    let cos_pf = rhs / (1.0 + alpha);
    if !(-1.0 < cos_pf && cos_pf < 1.0) {
        return Err(Error::NoMetallicSolution(format!(
            "dressed condition needs cos p_F in (-1, 1), got {cos_pf}"
        )));
    }
    let root = numerics::find_root(|p| p.cos() - cos_pf, 0.0, PI, 1e-12)
        .expect("cosine is monotone on (0, pi) and the bracket has a sign change");
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispersion_zeros() {
        assert!(dispersion(0.0, 0.0).abs() < 1e-15);
        assert!(dispersion(PI / 2.0, 1.0).abs() < 1e-15);
        assert!(dispersion(PI / 3.0, 0.5).abs() < 1e-15);
        // Evenness on the grid.
        for m in 0..16 {
            let k = Momentum::lattice(m, 16);
            assert_eq!(dispersion(k, 0.3), dispersion(-k, 0.3));
        }
    }

    #[test]
    fn fermi_point_values() {
        let (pf, vf) = fermi_data(1.0).unwrap();
        assert!((pf - PI / 2.0).abs() < 1e-15 && (vf - 1.0).abs() < 1e-15);
        let (pf, vf) = fermi_data(0.5).unwrap();
        assert!((pf - PI / 3.0).abs() < 1e-15);
        assert!((vf - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(fermi_data(0.0).is_err());
        assert!(fermi_data(-0.1).is_err());
    }

    #[test]
    fn fermi_momentum_square_root_scaling() {
        // p_F / sqrt(r) -> sqrt(2) with an O(r) correction.
        let r = 2f64.powi(-6);
        let (pf, _) = fermi_data(r).unwrap();
        assert!((pf / r.sqrt() - 2f64.sqrt()).abs() < 5e-3);
    }

    #[test]
    fn potential_identity_on_fermi_grid() {
        let v = Potential::nearest_neighbor();
        for i in 1..40 {
            let r = i as f64 / 40.0;
            let (pf, vf) = fermi_data(r).unwrap();
            let lhs = potential_fourier(&v, 0.0) - potential_fourier(&v, 2.0 * pf);
            assert!((lhs - 2.0 * vf * vf).abs() < 1e-12, "r = {r}");
        }
    }

    #[test]
    fn propagator_values_and_symmetries() {
        let kk = Momentum::new(0.7, PI / 2.0);
        let g = free_propagator_momentum(kk, 1.0);
        let expect = Complex64::new(0.0, -0.7).inv();
        assert!((g - expect).norm() < 1e-15);

        for &(k0, k) in &[(0.3, 0.9), (1.1, -2.0), (0.05, 2.7)] {
            let r = 0.25;
            let g = free_propagator_momentum(Momentum::new(k0, k), r);
            let gk = free_propagator_momentum(Momentum::new(k0, -k), r);
            let gw = free_propagator_momentum(Momentum::new(-k0, k), r);
            assert!((g - gk).norm() < 1e-15);
            assert!((g - gw.conj()).norm() < 1e-15);
        }
    }

    #[test]
    fn insulating_sup_bound_is_exact() {
        let r = -0.1;
        let (sites, beta) = (32, 24.0);
        let mut max = 0.0f64;
        for m in 0..sites {
            for n in -64..64i64 {
                let kk = Momentum::new(Momentum::matsubara(n, beta), Momentum::lattice(m as i64, sites));
                max = max.max(free_propagator_momentum(kk, r).norm());
            }
        }
        assert!(max <= 1.0 / r.abs() + 1e-12);
    }

    #[test]
    fn representation_equivalence_spot() {
        let (sites, beta) = (8, 16.0);
        for &r in &[-0.2, 0.0, 0.25, 1.0] {
            for &x in &[0i64, 1, 3] {
                for &tau in &[beta / 4.0, -beta / 3.0, 0.0, beta * 0.9] {
                    let a = free_schwinger_time(tau, x, r, sites, beta);
                    let b = matsubara_schwinger_time(tau, x, r, sites, beta, 4096);
                    assert!(
                        (a - b).abs() < 1e-9,
                        "mismatch at r={r} x={x} tau={tau}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn equal_time_jump_is_density_difference() {
        // S(0+) - S(0-) at x = 0 equals 1 - 2 <n> ... jump of the two
        // one-sided limits is 1 per anticommutation; check via the kernel.
        let (sites, beta, r) = (8, 16.0, 1.0);
        let eps = 1e-9;
        let up = free_schwinger_time(eps, 0, r, sites, beta);
        let dn = free_schwinger_time(-eps, 0, r, sites, beta);
        assert!((up - dn - 1.0).abs() < 1e-6);
        // Filled fraction at r=1 and x=0: occupation 1/2 by symmetry.
        let occupancy: f64 = (0..sites)
            .map(|m| {
                let eps_k = dispersion(Momentum::lattice(m as i64, sites), r);
                1.0 / (1.0 + (beta * eps_k).exp())
            })
            .sum::<f64>()
            / sites as f64;
        assert!((up - (1.0 - occupancy)).abs() < 1e-6);
    }

    #[test]
    fn ground_state_correlator_limit() {
        // Large L, beta: the symmetrized equal-time correlator tends to
        // -sin(p_F x)/(pi x) for x != 0 (minus the filled-sea occupation).
        let r = 1.0;
        let (pf, _) = fermi_data(r).unwrap();
        for &x in &[1i64, 2, 5] {
            let val = free_schwinger_time(0.0, x, r, 512, 256.0);
            let target = -(pf * x as f64).sin() / (PI * x as f64);
            // Convergence sweep: doubled sizes barely move the value.
            let val2 = free_schwinger_time(0.0, x, r, 1024, 512.0);
            assert!((val - val2).abs() < 2e-3);
            assert!((val - target).abs() < 5e-3, "x={x}: {val} vs {target}");
        }
    }

    #[test]
    fn interacting_pf_reductions() {
        let pf = solve_interacting_pf(0.25, 0.0, 0.0, 0.0, 2.0, -3).unwrap();
        assert!((pf - (0.75f64).acos()).abs() < 1e-12);
        let pf = solve_interacting_pf(0.25, 0.01, 0.0, 0.0, 2.0, -3).unwrap();
        assert!((pf - ((1.01 - 0.25) / 1.01f64).acos()).abs() < 1e-11);
        // Empty-band side: no solution.
        assert!(solve_interacting_pf(-0.1, 0.0, 0.0, 0.0, 2.0, -3).is_err());
    }
}
