//! Small numerical building blocks shared across the crate: compensated
//! summation, the smooth bump used by every cutoff, scalar root finding,
//! least-squares fits and a dense complex determinant.

use num_complex::Complex64;

/// Neumaier-compensated accumulator for f64 sums.
///
/// Momentum sums run over many near-cancelling terms; plain summation loses
/// digits exactly where the physics lives (small `r`, deep scales).
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated complex accumulator (independent real/imaginary tracks).
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanComplex {
    re: Kahan,
    im: Kahan,
}

impl KahanComplex {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, z: Complex64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    #[inline]
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value())
    }
}

/// Sums chunk-local compensated partials in a fixed order.
///
/// Used to merge rayon chunk results deterministically: chunk boundaries are
/// fixed by index, so the reduction is independent of thread scheduling.
pub fn merge_partials(parts: &[f64]) -> f64 {
    let mut acc = Kahan::new();
    for &p in parts {
        acc.add(p);
    }
    acc.value()
}

pub fn merge_partials_complex(parts: &[Complex64]) -> Complex64 {
    let mut acc = KahanComplex::new();
    for &p in parts {
        acc.add(p);
    }
    acc.value()
}

/// `exp(-1/u)` mollifier piece, zero for `u <= 0`.
#[inline]
fn mollifier(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        (-1.0 / u).exp()
    }
}

/// Smooth step: 0 for `u <= 0`, 1 for `u >= 1`, C-infinity in between,
/// with `smoothstep(u) + smoothstep(1 - u) = 1` exactly.
#[inline]
pub fn smoothstep(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let a = mollifier(u);
    let b = mollifier(1.0 - u);
    a / (a + b)
}

/// Derivative of [`smoothstep`]; identically zero outside (0, 1).
#[inline]
pub fn smoothstep_deriv(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    let a = mollifier(u);
    let b = mollifier(1.0 - u);
    let s = a + b;
    // d/du [a/(a+b)] with a' = a/u^2, b' = -b/(1-u)^2.
    let ap = a / (u * u);
    let bp = -b / ((1.0 - u) * (1.0 - u));
    (ap * b - a * bp) / (s * s)
}

/// Scalar root find on a bracket, bisection with secant acceleration.
///
/// Returns the root of `f` in `[a, b]` to relative tolerance `rel_tol`;
/// requires a sign change on the bracket.
pub fn find_root<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Option<f64> {
    let (mut lo, mut hi) = (a, b);
    let (mut flo, mut fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let scale = lo.abs().max(hi.abs()).max(1e-300);
        if (hi - lo).abs() <= rel_tol * scale {
            break;
        }
        // Secant candidate, fall back to midpoint when it leaves the bracket.
        let mut mid = lo - flo * (hi - lo) / (fhi - flo);
        if !(mid > lo && mid < hi) {
            mid = 0.5 * (lo + hi);
        }
        let fmid = f(mid);
        if fmid == 0.0 {
            return Some(mid);
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
            fhi = fmid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Ordinary least squares fit `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points for a fit");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Determinant of a dense complex matrix by partial-pivot LU.
///
/// Sizes here are tiny (Wick moments, Gram blocks), so no external solver.
pub fn complex_det(matrix: &[Vec<Complex64>]) -> Complex64 {
    let n = matrix.len();
    if n == 0 {
        return Complex64::new(1.0, 0.0);
    }
    let mut m: Vec<Vec<Complex64>> = matrix.to_vec();
    let mut det = Complex64::new(1.0, 0.0);
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[col][col].norm_sqr();
        for (row, rowv) in m.iter().enumerate().skip(col + 1) {
            let mag = rowv[col].norm_sqr();
            if mag > best {
                best = mag;
                pivot = row;
            }
        }
        if best == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        det *= m[col][col];
        let inv = Complex64::new(1.0, 0.0) / m[col][col];
        for row in col + 1..n {
            let factor = m[row][col] * inv;
            if factor.norm_sqr() == 0.0 {
                continue;
            }
            for k in col..n {
                let sub = factor * m[col][k];
                m[row][k] -= sub;
            }
        }
    }
    det
}

/// E-folding length of a sampled decay profile `|f(x_i)|`.
///
/// The profiles here are humped, not monotone, so the length is measured
/// from the global maximum: distance from the peak to the first crossing
/// of `peak/e`, log-interpolated. `None` if the window never decays.
pub fn efolding_length(xs: &[f64], magnitudes: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), magnitudes.len());
    let (imax, peak) = magnitudes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite magnitudes"))?;
    let target = peak.abs() / std::f64::consts::E;
    if target == 0.0 {
        return None;
    }
    for i in imax + 1..xs.len() {
        if magnitudes[i] < target && magnitudes[i] > 0.0 {
            let (x0, x1) = (xs[i - 1], xs[i]);
            let (l0, l1) = (magnitudes[i - 1].ln(), magnitudes[i].ln());
            let lt = target.ln();
            let t = (lt - l0) / (l1 - l0);
            return Some(x0 + t * (x1 - x0) - xs[imax]);
        }
    }
    None
}
