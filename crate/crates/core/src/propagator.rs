//! Numerical propagators of the two-regime scale decomposition.
//!
//! Every integral here is a Matsubara sum times a momentum grid at large
//! `beta`, `L`, restricted to the compact support of the scale slice. Grids
//! are midpoint-symmetric so parity cancellations are exact, and every
//! public evaluation can be refinement-checked (doubled grids) against the
//! relative tolerance carried by the quadrature spec.

use crate::cutoff::{self, CutoffSpec, LatticeCouplings};
use crate::lattice::{Error, Momentum, Result, SpacetimePoint};
use crate::numerics::{merge_partials_complex, KahanComplex};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Quadrature resolution: Matsubara spacing `2 pi / beta`, momentum spacing
/// `2 pi / sites`, and the relative tolerance for refinement checks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub beta: f64,
    pub sites: u32,
    pub rel_tol: f64,
}

impl QuadratureSpec {
    /// Resolution adapted to scale `h`: frequency support shrinks like
    /// `gamma^h` and momentum support like `gamma^{h/2}`.
    pub fn for_scale(h: i32, gamma: f64) -> Self {
        let beta = 1024.0 * gamma.powi(-h);
        let sites = (1024.0 * gamma.powf(-0.5 * h as f64)).ceil() as u32;
        Self {
            beta,
            sites: sites.max(64),
            rel_tol: 1e-7,
        }
    }

    /// Resolution adapted to the split regime at scale `h`, where the
    /// momentum support around each Fermi point shrinks like
    /// `gamma^h / v_F`.
    pub fn for_split_scale(h: i32, gamma: f64, vf: f64) -> Self {
        let beta = 1024.0 * gamma.powi(-h);
        let sites = (512.0 * gamma.powi(-h) / vf).ceil() as u32;
        Self {
            beta,
            sites: sites.clamp(64, 80_000_000),
            rel_tol: 1e-7,
        }
    }

    pub fn refined(&self) -> Self {
        Self {
            beta: 2.0 * self.beta,
            sites: 2 * self.sites,
            rel_tol: self.rel_tol,
        }
    }

    #[inline]
    pub fn dk0(&self) -> f64 {
        2.0 * PI / self.beta
    }

    #[inline]
    pub fn dk(&self) -> f64 {
        2.0 * PI / self.sites as f64
    }

    /// Integration weight of one grid cell, `(1/beta)(1/L)`.
    #[inline]
    pub fn weight(&self) -> f64 {
        1.0 / (self.beta * self.sites as f64)
    }
}

/// One precomputed support point: momentum, slice value over denominator.
#[derive(Debug, Clone, Copy)]
pub struct ShellPoint {
    pub kk: Momentum,
    pub value: Complex64,
    pub f: f64,
}

/// Scale context of the lattice (single-ring) regime.
///
/// `denom` enters the inverse propagator, `chi_hi`/`chi_lo` the two cutoffs
/// of the slice; passing one set everywhere freezes couplings inside the
/// cutoff.
#[derive(Debug, Clone, Copy)]
pub struct LatticeScale {
    pub h: i32,
    pub r: f64,
    pub denom: LatticeCouplings,
    pub chi_hi: LatticeCouplings,
    pub chi_lo: LatticeCouplings,
}

impl LatticeScale {
    pub fn free(h: i32, r: f64) -> Self {
        Self {
            h,
            r,
            denom: LatticeCouplings::zero(),
            chi_hi: LatticeCouplings::zero(),
            chi_lo: LatticeCouplings::zero(),
        }
    }

    pub fn with_couplings(h: i32, r: f64, denom: LatticeCouplings, hi: LatticeCouplings, lo: LatticeCouplings) -> Self {
        Self {
            h,
            r,
            denom,
            chi_hi: hi,
            chi_lo: lo,
        }
    }
}

/// Momentum window `|k|` such that the scale-`h` cutoff can be nonzero.
fn lattice_k_window(h: i32, r: f64, alpha: f64, mu: f64, cut: &CutoffSpec) -> Option<(f64, f64)> {
    let a0 = cut.aperture(r);
    let reach = cut.gamma.powi(h + 1) * a0 * 1.0001;
    let shift = r + cut.gamma.powi(h) * mu;
    // (1 + alpha)(cos k - 1) + shift in [-reach, reach]
    let lo_cos = 1.0 + (-shift - reach) / (1.0 + alpha);
    let hi_cos = 1.0 + (-shift + reach) / (1.0 + alpha);
    if lo_cos > 1.0 || hi_cos < -1.0 {
        return None;
    }
    let k_min = if hi_cos >= 1.0 { 0.0 } else { hi_cos.acos() };
    let k_max = if lo_cos <= -1.0 { PI } else { lo_cos.acos() };
    Some((k_min, k_max))
}

/// Enumerate the support points of the scale-`h` slice with their
/// `f_h / D` values. Grid is midpoint-symmetric in both directions.
pub fn lattice_shell(scale: &LatticeScale, cut: &CutoffSpec, quad: &QuadratureSpec) -> Vec<ShellPoint> {
    let (k_min, k_max) = match lattice_k_window(scale.h, scale.r, scale.chi_hi.alpha, scale.chi_hi.mu, cut) {
        Some(w) => w,
        None => return Vec::new(),
    };
    let dk = quad.dk();
    let dk0 = quad.dk0();
    let a0 = cut.aperture(scale.r);
    let k0_max = cut.gamma.powi(scale.h + 1) * a0 * cut.gamma / (1.0 + scale.chi_hi.z).min(1.0 + scale.chi_lo.z) * 1.01;
    let n0_max = (k0_max / dk0).ceil() as i64 + 1;
    let m_lo = ((k_min - 2.0 * dk) / dk).floor().max(0.0) as i64;
    let m_hi = ((k_max + 2.0 * dk) / dk).ceil() as i64;

    let mut points = Vec::new();
    for m in m_lo..=m_hi {
        let k_abs = (m as f64 + 0.5) * dk;
        if k_abs > PI {
            break;
        }
        for sk in [1.0, -1.0] {
            let k = sk * k_abs;
            for n in 0..n0_max {
                let k0_abs = (2 * n + 1) as f64 * PI / quad.beta;
                for s0 in [1.0, -1.0] {
                    let kk = Momentum::new(s0 * k0_abs, k);
                    let f = cutoff::slice(scale.h, kk, &scale.chi_hi, &scale.chi_lo, scale.r, cut);
                    if f == 0.0 {
                        continue;
                    }
                    let d = cutoff::denominator(kk, &scale.denom, scale.r, cut.gamma, scale.h);
                    points.push(ShellPoint {
                        kk,
                        value: f / d,
                        f,
                    });
                }
            }
        }
    }
    points
}

/// Support points of the cumulative cutoff `chi_{<= h} / D`.
pub fn lattice_cumulative_shell(
    h: i32,
    couplings: &LatticeCouplings,
    r: f64,
    cut: &CutoffSpec,
    quad: &QuadratureSpec,
) -> Vec<ShellPoint> {
    let (k_min, k_max) = match lattice_k_window(h, r, couplings.alpha, couplings.mu, cut) {
        Some(w) => w,
        None => return Vec::new(),
    };
    let dk = quad.dk();
    let dk0 = quad.dk0();
    let a0 = cut.aperture(r);
    let k0_max = cut.gamma.powi(h + 1) * a0 * cut.gamma / (1.0 + couplings.z) * 1.01;
    let n0_max = (k0_max / dk0).ceil() as i64 + 1;
    let m_hi = ((k_max + 2.0 * dk) / dk).ceil() as i64;
    let m_lo = ((k_min - 2.0 * dk) / dk).floor().max(0.0) as i64;

    let mut points = Vec::new();
    for m in m_lo..=m_hi {
        let k_abs = (m as f64 + 0.5) * dk;
        if k_abs > PI {
            break;
        }
        for sk in [1.0, -1.0] {
            let k = sk * k_abs;
            for n in 0..n0_max {
                let k0_abs = (2 * n + 1) as f64 * PI / quad.beta;
                for s0 in [1.0, -1.0] {
                    let kk = Momentum::new(s0 * k0_abs, k);
                    let f = cutoff::chi_leq(h, kk, couplings, r, cut);
                    if f == 0.0 {
                        continue;
                    }
                    let d = cutoff::denominator(kk, couplings, r, cut.gamma, h);
                    points.push(ShellPoint {
                        kk,
                        value: f / d,
                        f,
                    });
                }
            }
        }
    }
    points
}

/// Fourier-sum a shell at a spacetime point, optionally with momentum-space
/// derivative insertions `(i k0)^{n0} (i sin k)^{n1}`.
pub fn shell_transform(points: &[ShellPoint], weight: f64, x: SpacetimePoint, n0: u32, n1: u32) -> Complex64 {
    let chunk = 4096;
    let partials: Vec<Complex64> = points
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = KahanComplex::new();
            for p in part {
                let mut term = p.value;
                for _ in 0..n0 {
                    term *= Complex64::new(0.0, p.kk.k0);
                }
                for _ in 0..n1 {
                    term *= Complex64::new(0.0, p.kk.k.sin());
                }
                let phase = p.kk.k * x.x as f64 + p.kk.k0 * x.x0;
                acc.add(term * Complex64::from_polar(1.0, phase));
            }
            acc.value()
        })
        .collect();
    merge_partials_complex(&partials) * weight
}

/// Integral of the slice alone, `int f_h dkk`.
pub fn shell_measure(points: &[ShellPoint], weight: f64) -> f64 {
    points.iter().map(|p| p.f).sum::<f64>() * weight
}

/// Single-scale propagator of the lattice regime at one spacetime point,
/// refinement-checked against the spec tolerance.
pub fn single_scale_propagator(
    scale: &LatticeScale,
    cut: &CutoffSpec,
    x: SpacetimePoint,
    quad: &QuadratureSpec,
) -> Result<Complex64> {
    let coarse = shell_transform(&lattice_shell(scale, cut, quad), quad.weight(), x, 0, 0);
    let fine_q = quad.refined();
    let fine = shell_transform(&lattice_shell(scale, cut, &fine_q), fine_q.weight(), x, 0, 0);
    check_refinement(coarse, fine, quad, scale.h)?;
    Ok(fine)
}

fn check_refinement(coarse: Complex64, fine: Complex64, quad: &QuadratureSpec, h: i32) -> Result<()> {
    let scale_norm = fine.norm().max(1e-300);
    let rel = (fine - coarse).norm() / scale_norm;
    if rel > quad.rel_tol {
        return Err(Error::Quadrature(format!(
            "scale h={h}: refinement moved the value by {rel:.3e} (> {:.1e}) at beta={}, sites={}",
            quad.rel_tol, quad.beta, quad.sites
        )));
    }
    Ok(())
}

/// Scale context of the split (quasi-particle) regime: couplings frozen at
/// the crossover, dispersion measured from the dressed Fermi momentum.
#[derive(Debug, Clone, Copy)]
pub struct SplitScale {
    pub h: i32,
    pub r: f64,
    pub z_star: f64,
    pub alpha_star: f64,
    pub pf: f64,
    /// Replace `cos k - cos p_F` by its tangent at the Fermi points.
    pub linear_dispersion: bool,
}

impl SplitScale {
    pub fn free(h: i32, r: f64, pf: f64) -> Self {
        Self {
            h,
            r,
            z_star: 0.0,
            alpha_star: 0.0,
            pf,
            linear_dispersion: false,
        }
    }

    #[inline]
    fn dispersion_term(&self, k: f64) -> f64 {
        if self.linear_dispersion {
            // tangent at the nearer Fermi point
            let omega = if k >= 0.0 { 1.0 } else { -1.0 };
            -omega * self.pf.sin() * (k - omega * self.pf)
        } else {
            k.cos() - self.pf.cos()
        }
    }

    fn denominator(&self, kk: Momentum) -> Complex64 {
        Complex64::new(
            (1.0 + self.alpha_star) * self.dispersion_term(kk.k),
            -(1.0 + self.z_star) * kk.k0,
        )
    }

    fn chi_split(&self, h: i32, kk: Momentum, cut: &CutoffSpec) -> f64 {
        let a0 = cut.aperture(self.r);
        let gh = cut.gamma.powi(h);
        let e = (1.0 + self.alpha_star) * self.dispersion_term(kk.k);
        let w = (1.0 + self.z_star) * kk.k0;
        cut.chi0((w * w + e * e).sqrt() / (gh * a0))
    }
}

/// Enumerate support points of a split-regime slice (or cumulative cutoff
/// when `cumulative` is set) restricted by the quasi-particle label.
/// Momenta are absolute; `value` already carries the splitting weight.
fn split_shell(
    scale: &SplitScale,
    omega: i8,
    cumulative: bool,
    cut: &CutoffSpec,
    quad: &QuadratureSpec,
) -> Vec<ShellPoint> {
    let a0 = cut.aperture(scale.r);
    let reach = cut.gamma.powi(scale.h + 1) * a0 * 1.0001 / (1.0 + scale.alpha_star);
    let dk = quad.dk();
    let dk0 = quad.dk0();
    let k0_max = cut.gamma.powi(scale.h + 1) * a0 * cut.gamma / (1.0 + scale.z_star) * 1.01;
    let n0_max = (k0_max / dk0).ceil() as i64 + 1;

    let cos_pf = scale.pf.cos();
    let hi_cos = (cos_pf + reach).min(1.0);
    let lo_cos = (cos_pf - reach).max(-1.0);
    let (k_min, k_max) = if scale.linear_dispersion {
        let half_width = reach / scale.pf.sin();
        ((scale.pf - half_width).max(0.0), (scale.pf + half_width).min(PI))
    } else {
        (hi_cos.acos(), lo_cos.acos())
    };

    let m_lo = ((k_min - 2.0 * dk) / dk).floor().max(0.0) as i64;
    let m_hi = ((k_max + 2.0 * dk) / dk).ceil() as i64;

    let mut points = Vec::new();
    for m in m_lo..=m_hi {
        let k_abs = (m as f64 + 0.5) * dk;
        if k_abs > PI {
            break;
        }
        for sk in [1.0, -1.0] {
            let k = sk * k_abs;
            let split_weight = cut.split(omega as f64 * k / scale.pf);
            if split_weight == 0.0 {
                continue;
            }
            for n in 0..n0_max {
                let k0_abs = (2 * n + 1) as f64 * PI / quad.beta;
                for s0 in [1.0, -1.0] {
                    let kk = Momentum::new(s0 * k0_abs, k);
                    let f = if cumulative {
                        scale.chi_split(scale.h, kk, cut)
                    } else {
                        scale.chi_split(scale.h, kk, cut) - scale.chi_split(scale.h - 1, kk, cut)
                    };
                    if f == 0.0 {
                        continue;
                    }
                    let fw = f * split_weight;
                    points.push(ShellPoint {
                        kk,
                        value: fw / scale.denominator(kk),
                        f: fw,
                    });
                }
            }
        }
    }
    points
}

/// Support points of a split-regime slice as `(momentum, f/D)` pairs, for
/// loop summation in the kernel machinery.
pub fn split_shell_points(
    scale: &SplitScale,
    omega: i8,
    cut: &CutoffSpec,
    quad: &QuadratureSpec,
) -> Vec<(Momentum, Complex64)> {
    split_shell(scale, omega, false, cut, quad)
        .into_iter()
        .map(|p| (p.kk, p.value))
        .collect()
}

/// Analytic value of the split-regime slice `f_{h,omega} / D` at an
/// arbitrary absolute momentum.
pub fn split_slice_value(scale: &SplitScale, omega: i8, kk: Momentum, cut: &CutoffSpec) -> Complex64 {
    let split_weight = cut.split(omega as f64 * kk.k / scale.pf);
    if split_weight == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let f = scale.chi_split(scale.h, kk, cut) - scale.chi_split(scale.h - 1, kk, cut);
    if f == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    f * split_weight / scale.denominator(kk)
}

/// Quasi-particle single-scale propagator `g_omega^{(h)}(x)`, momenta
/// measured from `omega p_F`.
pub fn qp_propagator(
    scale: &SplitScale,
    omega: i8,
    cut: &CutoffSpec,
    x: SpacetimePoint,
    quad: &QuadratureSpec,
) -> Result<Complex64> {
    let eval = |q: &QuadratureSpec| {
        let points = split_shell(scale, omega, false, cut, q);
        qp_transform(&points, q.weight(), omega, scale.pf, x)
    };
    let coarse = eval(quad);
    let fine = eval(&quad.refined());
    check_refinement(coarse, fine, quad, scale.h)?;
    Ok(fine)
}

/// Cumulative quasi-particle propagator `g_omega^{(<= h)}(x)`.
pub fn qp_cumulative(
    scale: &SplitScale,
    omega: i8,
    cut: &CutoffSpec,
    x: SpacetimePoint,
    quad: &QuadratureSpec,
) -> Complex64 {
    let points = split_shell(scale, omega, true, cut, quad);
    qp_transform(&points, quad.weight(), omega, scale.pf, x)
}

/// Cumulative propagator without the quasi-particle split (absolute
/// momenta), used to verify the partition of unity.
pub fn cumulative_split_total(
    scale: &SplitScale,
    cut: &CutoffSpec,
    x: SpacetimePoint,
    quad: &QuadratureSpec,
) -> Complex64 {
    let mut acc = KahanComplex::new();
    for omega in [1i8, -1] {
        let points = split_shell(scale, omega, true, cut, quad);
        // absolute-momentum transform: no Fermi shift
        acc.add(shell_transform(&points, quad.weight(), x, 0, 0));
    }
    acc.value()
}

fn qp_transform(points: &[ShellPoint], weight: f64, omega: i8, pf: f64, x: SpacetimePoint) -> Complex64 {
    let chunk = 4096;
    let shift = omega as f64 * pf;
    let partials: Vec<Complex64> = points
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = KahanComplex::new();
            for p in part {
                let phase = (p.kk.k - shift) * x.x as f64 + p.kk.k0 * x.x0;
                acc.add(p.value * Complex64::from_polar(1.0, phase));
            }
            acc.value()
        })
        .collect();
    merge_partials_complex(&partials) * weight
}

/// Linear-dispersion reference part and lattice remainder of a
/// quasi-particle propagator: `g = g_L + remainder` with `g_L` built from
/// the tangent dispersion under the same slice.
pub fn luttinger_decompose(
    scale: &SplitScale,
    omega: i8,
    cut: &CutoffSpec,
    x: SpacetimePoint,
    quad: &QuadratureSpec,
) -> Result<(Complex64, Complex64)> {
    let full = qp_propagator(scale, omega, cut, x, quad)?;
    let linear = SplitScale {
        linear_dispersion: true,
        ..*scale
    };
    let reference = qp_propagator(&linear, omega, cut, x, quad)?;
    Ok((reference, full - reference))
}

/// Tabulated propagator values with full reproduction metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableMeta {
    pub schema: String,
    pub h: i32,
    pub regime: String,
    pub omega: i8,
    pub r: f64,
    pub gamma: f64,
    pub denom: LatticeCouplings,
    pub chi_hi: LatticeCouplings,
    pub chi_lo: LatticeCouplings,
    pub beta: f64,
    pub sites: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropagatorTable {
    pub meta: TableMeta,
    /// Rows `(x0, x, re, im)`, in row-major scan order of the build grid.
    pub rows: Vec<(f64, i64, f64, f64)>,
}

impl PropagatorTable {
    pub fn build_lattice(
        scale: &LatticeScale,
        cut: &CutoffSpec,
        quad: &QuadratureSpec,
        times: &[f64],
        sites: &[i64],
    ) -> Result<Self> {
        let points = lattice_shell(scale, cut, quad);
        // refinement spot check at the origin and the grid corner
        let probe = [
            SpacetimePoint::new(times[0], sites[0]),
            SpacetimePoint::new(times[times.len() / 2], sites[sites.len() / 2]),
        ];
        for p in probe {
            single_scale_propagator(scale, cut, p, quad)?;
        }
        let mut rows = Vec::with_capacity(times.len() * sites.len());
        for &x0 in times {
            for &x in sites {
                let v = shell_transform(&points, quad.weight(), SpacetimePoint::new(x0, x), 0, 0);
                rows.push((x0, x, v.re, v.im));
            }
        }
        Ok(Self {
            meta: TableMeta {
                schema: "fermichain/propagator-table/v1".into(),
                h: scale.h,
                regime: "lattice".into(),
                omega: 0,
                r: scale.r,
                gamma: cut.gamma,
                denom: scale.denom,
                chi_hi: scale.chi_hi,
                chi_lo: scale.chi_lo,
                beta: quad.beta,
                sites: quad.sites,
            },
            rows,
        })
    }

    pub fn build_split(
        scale: &SplitScale,
        omega: i8,
        cut: &CutoffSpec,
        quad: &QuadratureSpec,
        times: &[f64],
        sites: &[i64],
    ) -> Result<Self> {
        let points = split_shell(scale, omega, false, cut, quad);
        qp_propagator(scale, omega, cut, SpacetimePoint::new(times[0], sites[0]), quad)?;
        let mut rows = Vec::with_capacity(times.len() * sites.len());
        for &x0 in times {
            for &x in sites {
                let v = qp_transform(&points, quad.weight(), omega, scale.pf, SpacetimePoint::new(x0, x));
                rows.push((x0, x, v.re, v.im));
            }
        }
        Ok(Self {
            meta: TableMeta {
                schema: "fermichain/propagator-table/v1".into(),
                h: scale.h,
                regime: "split".into(),
                omega,
                r: scale.r,
                gamma: cut.gamma,
                denom: LatticeCouplings {
                    z: scale.z_star,
                    alpha: scale.alpha_star,
                    mu: 0.0,
                },
                chi_hi: LatticeCouplings::zero(),
                chi_lo: LatticeCouplings::zero(),
                beta: quad.beta,
                sites: quad.sites,
            },
            rows,
        })
    }

    /// CSV rows `(h, omega, x0, x, re, im)`; omega 0 marks "none".
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "h,omega,x0,x,re,im")?;
        for &(x0, x, re, im) in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", self.meta.h, self.meta.omega, x0, x, re, im)?;
        }
        Ok(())
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }

    pub fn sup_norm(&self) -> f64 {
        self.rows
            .iter()
            .map(|&(_, _, re, im)| (re * re + im * im).sqrt())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{efolding_length, linear_fit};

    fn cut() -> CutoffSpec {
        CutoffSpec::new(2.0)
    }

    #[test]
    fn origin_value_is_real() {
        let c = cut();
        let scale = LatticeScale::free(-3, 0.0);
        let quad = QuadratureSpec::for_scale(-3, 2.0);
        let g = single_scale_propagator(&scale, &c, SpacetimePoint::new(0.0, 0), &quad).unwrap();
        assert!(g.im.abs() < 1e-12 * g.re.abs().max(1e-30));
    }

    #[test]
    fn support_measure_scales_like_three_halves() {
        let c = cut();
        let mut ratios = Vec::new();
        for h in (-8..=-2).rev() {
            let quad = QuadratureSpec::for_scale(h, 2.0);
            let points = lattice_shell(&LatticeScale::free(h, 0.0), &c, &quad);
            let measure = shell_measure(&points, quad.weight());
            ratios.push(measure / c.gamma.powf(1.5 * h as f64));
        }
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
        assert!(hi / lo < 2.0, "measure ratios not flat: {ratios:?}");
    }

    #[test]
    fn lemma1_envelope_flat_incl_derivatives() {
        let c = cut();
        // sup over a spacetime grid of |d^n g| / gamma^{h(1/2 + n0 + n1/2)}
        for (n0, n1) in [(0u32, 0u32), (1, 0), (0, 1)] {
            let mut ratios = Vec::new();
            for h in [-2i32, -4, -6, -8] {
                let quad = QuadratureSpec::for_scale(h, 2.0);
                let points = lattice_shell(&LatticeScale::free(h, 0.0), &c, &quad);
                let mut sup = 0.0f64;
                for i in 0..10 {
                    for j in 0..10 {
                        let x = SpacetimePoint::new(
                            i as f64 * 0.35 * 2f64.powi(-h),
                            (j as f64 * 0.4 * 2f64.powf(-0.5 * h as f64)) as i64,
                        );
                        let v = shell_transform(&points, quad.weight(), x, n0, n1).norm();
                        sup = sup.max(v);
                    }
                }
                let expo = 0.5 + n0 as f64 + 0.5 * n1 as f64;
                ratios.push(sup / 2f64.powf(expo * h as f64));
            }
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
            assert!(
                hi / lo < 2.0,
                "envelope (n0={n0}, n1={n1}) varies too much: {ratios:?}"
            );
        }
    }

    #[test]
    fn decay_lengths_scale_anisotropically() {
        let c = cut();
        let hs = [-2i32, -3, -4, -5, -6];
        let mut log_len0 = Vec::new();
        let mut log_len1 = Vec::new();
        for &h in &hs {
            let quad = QuadratureSpec::for_scale(h, 2.0);
            let points = lattice_shell(&LatticeScale::free(h, 0.0), &c, &quad);
            let xs: Vec<f64> = (0..110).map(|i| i as f64 * 0.2 * 2f64.powi(-h)).collect();
            let mags: Vec<f64> = xs
                .iter()
                .map(|&t| shell_transform(&points, quad.weight(), SpacetimePoint::new(t, 0), 0, 0).norm())
                .collect();
            log_len0.push(efolding_length(&xs, &mags).unwrap().ln());

            let sites: Vec<i64> = (0..120)
                .map(|i| (i as f64 * 0.33 * 2f64.powf(-0.5 * h as f64)).round() as i64)
                .collect();
            let xs1: Vec<f64> = sites.iter().map(|&s| s as f64).collect();
            let mags1: Vec<f64> = sites
                .iter()
                .map(|&s| shell_transform(&points, quad.weight(), SpacetimePoint::new(0.0, s), 0, 0).norm())
                .collect();
            log_len1.push(efolding_length(&xs1, &mags1).unwrap().ln());
        }
        let hsf: Vec<f64> = hs.iter().map(|&h| h as f64 * 2f64.ln()).collect();
        let (slope0, _) = linear_fit(&hsf, &log_len0);
        let (slope1, _) = linear_fit(&hsf, &log_len1);
        assert!((slope0 + 1.0).abs() < 0.15, "x0 decay exponent {slope0}");
        assert!((slope1 + 0.5).abs() < 0.15 * 0.5, "x decay exponent {slope1}");
    }

    #[test]
    fn split_partition_of_unity() {
        let c = cut();
        let r = 2f64.powi(-6);
        let hstar = cutoff::crossover_scale(r, &c).unwrap();
        let pf = (1.0f64 - r).acos();
        let h = hstar - 2;
        let scale = SplitScale::free(h, r, pf);
        let quad = QuadratureSpec::for_split_scale(h, 2.0, pf.sin());
        for i in 0..20 {
            // deterministic scatter of probe points
            let x = SpacetimePoint::new((i * 7 % 13) as f64 * 3.1, (i * 5 % 17) as i64 * 2);
            let total = cumulative_split_total(&scale, &c, x, &quad);
            let mut sum = Complex64::new(0.0, 0.0);
            for omega in [1i8, -1] {
                let g = qp_cumulative(&scale, omega, &c, x, &quad);
                sum += Complex64::from_polar(1.0, omega as f64 * pf * x.x as f64) * g;
            }
            assert!(
                (sum - total).norm() < 1e-9 * total.norm().max(1.0),
                "partition broken at {x:?}: {sum} vs {total}"
            );
        }
    }

    #[test]
    fn lemma3_envelope_flat() {
        let c = cut();
        let r = 2f64.powi(-6);
        let hstar = cutoff::crossover_scale(r, &c).unwrap();
        let (pf, vf) = crate::model::fermi_data(r).unwrap();
        let mut ratios = Vec::new();
        for dh in 1..=4 {
            let h = hstar - dh;
            let scale = SplitScale::free(h, r, pf);
            let quad = QuadratureSpec::for_split_scale(h, 2.0, vf);
            let points = split_shell(&scale, 1, false, &c, &quad);
            let mut sup = 0.0f64;
            for i in 0..8 {
                for j in 0..8 {
                    let x = SpacetimePoint::new(
                        i as f64 * 0.4 * 2f64.powi(-h),
                        (j as f64 * 0.4 * 2f64.powi(-h) * vf) as i64,
                    );
                    sup = sup.max(qp_transform(&points, quad.weight(), 1, pf, x).norm());
                }
            }
            ratios.push(sup * vf / 2f64.powi(h));
        }
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
        assert!(hi / lo < 2.0, "split envelope varies: {ratios:?}");
    }

    #[test]
    fn luttinger_remainder_suppressed_and_parity() {
        let c = cut();
        let r = 2f64.powi(-4);
        let hstar = cutoff::crossover_scale(r, &c).unwrap();
        let (pf, _) = crate::model::fermi_data(r).unwrap();
        let mut rels = Vec::new();
        for dh in [2i32, 4] {
            let h = hstar - dh;
            let scale = SplitScale::free(h, r, pf);
            let quad = QuadratureSpec::for_split_scale(h, 2.0, pf.sin());
            let x = SpacetimePoint::new(0.2 * 2f64.powi(-h), 0);
            let (g_l, rem) = luttinger_decompose(&scale, 1, &c, x, &quad).unwrap();
            rels.push(rem.norm() / (g_l + rem).norm());

            // omega parity: g_L for -omega is the conjugate of g_L for +omega
            let (g_l_neg, _) = luttinger_decompose(&scale, -1, &c, x, &quad).unwrap();
            assert!((g_l_neg - g_l.conj()).norm() < 1e-8 * g_l.norm());
        }
        assert!(
            rels[1] < rels[0],
            "remainder should shrink with depth: {rels:?}"
        );
        // exactly linearized dispersion: remainder vanishes identically
        let h = hstar - 2;
        let mut scale = SplitScale::free(h, r, pf);
        scale.linear_dispersion = true;
        let quad = QuadratureSpec::for_split_scale(h, 2.0, pf.sin());
        let (_, rem) = luttinger_decompose(&scale, 1, &c, SpacetimePoint::new(1.0, 1), &quad).unwrap();
        assert_eq!(rem, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn table_csv_shape() {
        let c = cut();
        let scale = LatticeScale::free(-2, 0.0);
        let quad = QuadratureSpec::for_scale(-2, 2.0);
        let table =
            PropagatorTable::build_lattice(&scale, &c, &quad, &[0.0, 1.0], &[0, 1, 2]).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("h,omega,x0,x,re,im"));
        assert!(table.meta_json().unwrap().contains("propagator-table"));
    }
}
