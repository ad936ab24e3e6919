//! Fermionic expectations against a given propagator: Wick moments as
//! determinants, truncated expectations by the cumulant formula and by
//! direct connected-contraction enumeration (two independent routes), and
//! the Gram-factor representation with its Hadamard determinant bound.

use crate::cutoff::CutoffSpec;
use crate::lattice::{Error, Result, SpacetimePoint};
use crate::numerics::{complex_det, KahanComplex};
use crate::propagator::{lattice_shell, LatticeScale, QuadratureSpec, ShellPoint};
use num_complex::Complex64;
use serde::Serialize;

/// Creation (`Plus`) or annihilation (`Minus`) field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy)]
pub struct Field {
    pub point: SpacetimePoint,
    pub sign: FieldSign,
}

impl Field {
    pub fn plus(point: SpacetimePoint) -> Self {
        Self {
            point,
            sign: FieldSign::Plus,
        }
    }

    pub fn minus(point: SpacetimePoint) -> Self {
        Self {
            point,
            sign: FieldSign::Minus,
        }
    }
}

/// Ordered product of fields carrying a cluster label.
#[derive(Debug, Clone)]
pub struct FieldMonomial {
    pub cluster: usize,
    pub fields: Vec<Field>,
}

/// Propagator interface: `eval(x, y) = <psi-_x psi+_y>`.
pub trait Propagator {
    fn eval(&self, x: SpacetimePoint, y: SpacetimePoint) -> Complex64;
}

impl<F: Fn(SpacetimePoint, SpacetimePoint) -> Complex64> Propagator for F {
    fn eval(&self, x: SpacetimePoint, y: SpacetimePoint) -> Complex64 {
        self(x, y)
    }
}

const MAX_CLUSTERS: usize = 4;
const MAX_FIELDS: usize = 10;

/// Parity of moving every minus field in front of every plus field while
/// keeping relative orders, as the determinant convention requires.
fn canonical_parity(fields: &[Field]) -> f64 {
    let mut plus_seen = 0u32;
    let mut inversions = 0u32;
    for f in fields {
        match f.sign {
            FieldSign::Plus => plus_seen += 1,
            FieldSign::Minus => inversions += plus_seen,
        }
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn split_points(fields: &[Field]) -> (Vec<SpacetimePoint>, Vec<SpacetimePoint>) {
    let minus = fields
        .iter()
        .filter(|f| f.sign == FieldSign::Minus)
        .map(|f| f.point)
        .collect();
    let plus = fields
        .iter()
        .filter(|f| f.sign == FieldSign::Plus)
        .map(|f| f.point)
        .collect();
    (minus, plus)
}

/// Gaussian moment of an ordered field product: the signed determinant of
/// the propagator matrix. Unbalanced products vanish identically.
///
/// Signs follow the anticommuting Wick rule (each contraction carries the
/// parity of the fields it crosses), which is the unique convention under
/// which moments factorize over independent blocks and the cumulant and
/// connected-contraction routes can agree. A single pair `psi- psi+` gives
/// `+g`; for the canonically ordered product the value is
/// `(-1)^{n(n-1)/2} det g(x_i - y_j)`.
pub fn wick_moment<P: Propagator>(fields: &[Field], g: &P) -> Complex64 {
    let (minus, plus) = split_points(fields);
    if minus.len() != plus.len() {
        return Complex64::new(0.0, 0.0);
    }
    if minus.is_empty() {
        return Complex64::new(1.0, 0.0);
    }
    let n = minus.len();
    let crossing = if (n * (n - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let matrix: Vec<Vec<Complex64>> = minus
        .iter()
        .map(|&x| plus.iter().map(|&y| g.eval(x, y)).collect())
        .collect();
    crossing * canonical_parity(fields) * complex_det(&matrix)
}

/// Kernel coefficient of a partially contracted product: the listed
/// `external` fields (by index, in the given order) are pulled to the
/// front and left uncontracted; the rest is Wick-integrated.
pub fn partial_wick<P: Propagator>(fields: &[Field], external: &[usize], g: &P) -> Complex64 {
    // parity of extracting the externals to the front in order
    let mut sign = 1.0f64;
    let mut remaining: Vec<(usize, Field)> = fields.iter().copied().enumerate().collect();
    for &target in external {
        let pos = remaining
            .iter()
            .position(|(idx, _)| *idx == target)
            .expect("external index present exactly once");
        // the field hops over everything still ahead of it
        if pos % 2 == 1 {
            sign = -sign;
        }
        remaining.remove(pos);
    }
    let rest: Vec<Field> = remaining.into_iter().map(|(_, f)| f).collect();
    sign * wick_moment(&rest, g)
}

fn validate_clusters(clusters: &[FieldMonomial]) -> Result<()> {
    if clusters.is_empty() || clusters.len() > MAX_CLUSTERS {
        return Err(Error::SizeLimit(format!(
            "between 1 and {MAX_CLUSTERS} clusters supported, got {}",
            clusters.len()
        )));
    }
    let total: usize = clusters.iter().map(|c| c.fields.len()).sum();
    if total > MAX_FIELDS {
        return Err(Error::SizeLimit(format!(
            "at most {MAX_FIELDS} fields supported, got {total}"
        )));
    }
    for c in clusters {
        if c.fields.len() % 2 != 0 {
            return Err(Error::InvalidParameter(
                "clusters must hold an even number of fields".into(),
            ));
        }
    }
    Ok(())
}

fn concat_block(clusters: &[FieldMonomial], block: &[usize]) -> Vec<Field> {
    let mut fields = Vec::new();
    for &i in block {
        fields.extend_from_slice(&clusters[i].fields);
    }
    fields
}

fn partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for elem in 0..n {
        let mut next = Vec::new();
        for p in &out {
            for b in 0..p.len() {
                let mut q = p.clone();
                q[b].push(elem);
                next.push(q);
            }
            let mut q = p.clone();
            q.push(vec![elem]);
            next.push(q);
        }
        out = next;
    }
    out
}

/// Truncated expectation by the cumulant (set-partition) formula; this is
/// the oracle the connected-contraction route is checked against.
pub fn truncated_expectation_cumulant<P: Propagator>(
    clusters: &[FieldMonomial],
    g: &P,
) -> Result<Complex64> {
    validate_clusters(clusters)?;
    let mut acc = KahanComplex::new();
    for partition in partitions(clusters.len()) {
        let blocks = partition.len();
        // (-1)^{|pi|-1} (|pi|-1)!
        let mut coeff = 1.0f64;
        for m in 1..blocks {
            coeff *= -(m as f64);
        }
        let mut product = Complex64::new(1.0, 0.0);
        for block in &partition {
            product *= wick_moment(&concat_block(clusters, block), g);
            if product.norm_sqr() == 0.0 {
                break;
            }
        }
        acc.add(coeff * product);
    }
    Ok(acc.value())
}

/// Direct signed sum over Wick pairings whose contraction graph connects
/// all clusters; must agree with the cumulant route exactly.
pub fn connected_contractions<P: Propagator>(clusters: &[FieldMonomial], g: &P) -> Result<Complex64> {
    validate_clusters(clusters)?;
    let fields = concat_block(clusters, &(0..clusters.len()).collect::<Vec<_>>());
    let mut cluster_of_minus = Vec::new();
    let mut cluster_of_plus = Vec::new();
    for (ci, c) in clusters.iter().enumerate() {
        for f in &c.fields {
            match f.sign {
                FieldSign::Minus => cluster_of_minus.push(ci),
                FieldSign::Plus => cluster_of_plus.push(ci),
            }
        }
    }
    let (minus, plus) = split_points(&fields);
    if minus.len() != plus.len() {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let n = minus.len();
    let crossing = if (n * (n - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let base = crossing * canonical_parity(&fields);
    let mut total = KahanComplex::new();
    // iterate permutations with their signs
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let sgn = permutation_sign(&perm);
        if connects_all(clusters.len(), &perm, &cluster_of_minus, &cluster_of_plus) {
            let mut value = Complex64::new(base * sgn, 0.0);
            for (i, &j) in perm.iter().enumerate() {
                value *= g.eval(minus[i], plus[j]);
                if value.norm_sqr() == 0.0 {
                    break;
                }
            }
            total.add(value);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(total.value())
}

/// Sign of one Wick term: the `external` fields (in order) are pulled to
/// the front, the rest contracted along `matching` (minus index i paired
/// with plus index `matching[i]`, both counted within the remaining
/// fields). Shares the conventions of [`wick_moment`]/[`partial_wick`].
pub fn term_sign(signs: &[FieldSign], external: &[usize], matching: &[usize]) -> f64 {
    let mut sign = 1.0f64;
    let mut remaining: Vec<(usize, FieldSign)> = signs.iter().copied().enumerate().collect();
    for &target in external {
        let pos = remaining
            .iter()
            .position(|(idx, _)| *idx == target)
            .expect("external index present");
        if pos % 2 == 1 {
            sign = -sign;
        }
        remaining.remove(pos);
    }
    let rest: Vec<Field> = remaining
        .iter()
        .map(|&(_, s)| Field {
            point: SpacetimePoint::new(0.0, 0),
            sign: s,
        })
        .collect();
    let n = matching.len();
    let crossing = if (n * (n - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    sign * crossing * canonical_parity(&rest) * permutation_sign(matching)
}

/// Signed sum over Wick contractions of the internal fields with the
/// `external` ones pulled to the front, restricted to contraction graphs
/// that connect all clusters. The kernel-extraction companion of
/// [`connected_contractions`].
pub fn connected_partial<P: Propagator>(
    fields: &[Field],
    external: &[usize],
    cluster_of: &[usize],
    g: &P,
) -> Complex64 {
    let internals: Vec<usize> = (0..fields.len())
        .filter(|i| !external.contains(i))
        .collect();
    let minus: Vec<usize> = internals
        .iter()
        .copied()
        .filter(|&i| fields[i].sign == FieldSign::Minus)
        .collect();
    let plus: Vec<usize> = internals
        .iter()
        .copied()
        .filter(|&i| fields[i].sign == FieldSign::Plus)
        .collect();
    if minus.len() != plus.len() {
        return Complex64::new(0.0, 0.0);
    }
    let n_clusters = cluster_of.iter().max().map_or(0, |m| m + 1);
    let signs: Vec<FieldSign> = fields.iter().map(|f| f.sign).collect();
    let n = minus.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut total = KahanComplex::new();
    loop {
        let cm: Vec<usize> = minus.iter().map(|&i| cluster_of[i]).collect();
        let cp: Vec<usize> = plus.iter().map(|&i| cluster_of[i]).collect();
        if connects_all(n_clusters, &perm, &cm, &cp) {
            let sign = term_sign(&signs, external, &perm);
            let mut value = Complex64::new(sign, 0.0);
            for (i, &j) in perm.iter().enumerate() {
                value *= g.eval(fields[minus[i]].point, fields[plus[j]].point);
                if value.norm_sqr() == 0.0 {
                    break;
                }
            }
            total.add(value);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    total.value()
}

fn permutation_sign(perm: &[usize]) -> f64 {
    let mut seen = vec![false; perm.len()];
    let mut sign = 1.0;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = perm[i];
            len += 1;
        }
        if len % 2 == 0 {
            sign = -sign;
        }
    }
    sign
}

fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

fn connects_all(s: usize, perm: &[usize], cm: &[usize], cp: &[usize]) -> bool {
    if s <= 1 {
        return true;
    }
    let mut parent: Vec<usize> = (0..s).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = s;
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = (find(&mut parent, cm[i]), find(&mut parent, cp[j]));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    components == 1
}

/// Gram factors of a single-scale propagator: vectors over the quadrature
/// grid whose inner products reproduce `t g^{(h)}(x - y)` and whose norms
/// obey the scale bound.
pub struct GramFactors {
    shell: Vec<ShellPoint>,
    a_hat: Vec<Complex64>,
    b_hat: Vec<Complex64>,
    weight: f64,
}

impl GramFactors {
    pub fn build(scale: &LatticeScale, cut: &CutoffSpec, quad: &QuadratureSpec) -> Self {
        let shell = lattice_shell(scale, cut, quad);
        let mut a_hat = Vec::with_capacity(shell.len());
        let mut b_hat = Vec::with_capacity(shell.len());
        for p in &shell {
            let d = crate::cutoff::denominator(p.kk, &scale.denom, scale.r, cut.gamma, scale.h);
            let dn = d.norm();
            let root_f = p.f.max(0.0).sqrt();
            a_hat.push(root_f * dn.sqrt() / d.conj());
            b_hat.push(Complex64::new(root_f / dn.sqrt(), 0.0));
        }
        Self {
            shell,
            a_hat,
            b_hat,
            weight: quad.weight(),
        }
    }

    /// Norms of one `f` and one `g` factor; equal by construction of the
    /// split.
    pub fn factor_norms(&self) -> (f64, f64) {
        let mut na = 0.0;
        let mut nb = 0.0;
        for (a, b) in self.a_hat.iter().zip(&self.b_hat) {
            na += a.norm_sqr() * self.weight;
            nb += b.norm_sqr() * self.weight;
        }
        (na.sqrt(), nb.sqrt())
    }

    /// Inner product `(A(x - .), B(y - .))` evaluated in the quadrature
    /// space (conjugation on the first slot).
    pub fn inner_product(&self, x: SpacetimePoint, y: SpacetimePoint) -> Complex64 {
        let mut acc = KahanComplex::new();
        for ((p, a), b) in self.shell.iter().zip(&self.a_hat).zip(&self.b_hat) {
            let phase = p.kk.k * (x.x - y.x) as f64 + p.kk.k0 * (x.x0 - y.x0);
            acc.add(a.conj() * b * Complex64::from_polar(1.0, phase));
        }
        acc.value() * self.weight
    }

    /// Position-space tabulation of one factor on the quadrature torus:
    /// `factor(z) = int dkk e^{-i kk z} hat`.
    fn tabulate(&self, hat: &[Complex64], times: &[f64], sites: i64) -> Vec<Vec<Complex64>> {
        times
            .iter()
            .map(|&z0| {
                (0..sites)
                    .map(|z| {
                        let mut acc = KahanComplex::new();
                        for (p, v) in self.shell.iter().zip(hat) {
                            let phase = -(p.kk.k * z as f64 + p.kk.k0 * z0);
                            acc.add(v * Complex64::from_polar(1.0, phase));
                        }
                        acc.value() * self.weight
                    })
                    .collect()
            })
            .collect()
    }

    /// Verify the factorization in position space: tabulate `A`, `B` on
    /// the torus and integrate `conj A (x-z) B(y-z)` over `z` directly.
    /// Returns the inner product computed that way.
    pub fn inner_product_position_space(
        &self,
        x: SpacetimePoint,
        y: SpacetimePoint,
        beta: f64,
        torus_sites: i64,
        time_slices: usize,
    ) -> Complex64 {
        let dz0 = beta / time_slices as f64;
        let times: Vec<f64> = (0..time_slices).map(|i| i as f64 * dz0).collect();
        let a = self.tabulate(&self.a_hat, &times, torus_sites);
        let b = self.tabulate(&self.b_hat, &times, torus_sites);
        // translation on the torus; antiperiodic in time (Matsubara grid)
        // and in space (half-offset momentum grid)
        let shift = |table: &Vec<Vec<Complex64>>, p: SpacetimePoint, ti: usize, z: i64| {
            let mut t0 = p.x0 - times[ti];
            let mut sign = 1.0;
            while t0 < 0.0 {
                t0 += beta;
                sign = -sign;
            }
            while t0 >= beta {
                t0 -= beta;
                sign = -sign;
            }
            let idx = (t0 / dz0).round() as usize % time_slices;
            let dx = p.x - z;
            if dx.div_euclid(torus_sites) % 2 != 0 {
                sign = -sign;
            }
            let zs = dx.rem_euclid(torus_sites) as usize;
            sign * table[idx][zs]
        };
        let mut acc = KahanComplex::new();
        for ti in 0..time_slices {
            for z in 0..torus_sites {
                acc.add(shift(&a, x, ti, z).conj() * shift(&b, y, ti, z));
            }
        }
        acc.value() * dz0
    }
}

/// Outcome of a Gram-representation audit at one scale.
#[derive(Debug, Clone, Serialize)]
pub struct GramReport {
    pub h: i32,
    pub det_abs: f64,
    pub hadamard_bound: f64,
    pub bound_holds: bool,
    pub norm_product: f64,
    pub reproduction_error: f64,
}

/// Build the Gram matrix `t_{ii'} g^{(h)}(x_{ij} - y_{i'j'})`, check the
/// Hadamard bound against the factor norms, and report how well the inner
/// products reproduce the propagator.
pub fn gram_check(
    scale: &LatticeScale,
    cut: &CutoffSpec,
    quad: &QuadratureSpec,
    minus_points: &[(usize, SpacetimePoint)],
    plus_points: &[(usize, SpacetimePoint)],
    unit_vectors: &[Vec<f64>],
) -> Result<GramReport> {
    if minus_points.len() != plus_points.len() || minus_points.is_empty() {
        return Err(Error::InvalidParameter(
            "need equally many minus and plus points".into(),
        ));
    }
    let factors = GramFactors::build(scale, cut, quad);
    let (na, nb) = factors.factor_norms();
    let n = minus_points.len();
    let dot = |i: usize, j: usize| -> f64 {
        unit_vectors[i]
            .iter()
            .zip(&unit_vectors[j])
            .map(|(a, b)| a * b)
            .sum()
    };

    let shell = lattice_shell(scale, cut, quad);
    let direct = |x: SpacetimePoint, y: SpacetimePoint| -> Complex64 {
        crate::propagator::shell_transform(
            &shell,
            quad.weight(),
            SpacetimePoint::new(x.x0 - y.x0, x.x - y.x),
            0,
            0,
        )
    };

    let mut matrix = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    let mut reproduction_error = 0.0f64;
    for (i, &(ci, x)) in minus_points.iter().enumerate() {
        for (j, &(cj, y)) in plus_points.iter().enumerate() {
            let t = dot(ci, cj);
            let g = direct(x, y);
            matrix[i][j] = t * g;
            let viainner = t * factors.inner_product(x, y);
            let scale_norm = g.norm().max(1e-300);
            reproduction_error = reproduction_error.max((viainner - matrix[i][j]).norm() / scale_norm.max(1.0));
        }
    }
    let det_abs = complex_det(&matrix).norm();
    let hadamard_bound = (na * nb).powi(n as i32);
    Ok(GramReport {
        h: scale.h,
        det_abs,
        hadamard_bound,
        bound_holds: det_abs <= hadamard_bound * (1.0 + 1e-8),
        norm_product: na * nb,
        reproduction_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pt(x0: f64, x: i64) -> SpacetimePoint {
        SpacetimePoint::new(x0, x)
    }

    /// synthetic smooth complex propagator for algebra tests
    fn toy() -> impl Propagator {
        |x: SpacetimePoint, y: SpacetimePoint| {
            let dt = x.x0 - y.x0;
            let dx = (x.x - y.x) as f64;
            Complex64::new(
                (-0.3 * dt * dt - 0.2 * dx * dx).exp() + 0.1 * (dx + dt).cos(),
                0.25 * (0.7 * dt - 0.4 * dx).sin(),
            )
        }
    }

    #[test]
    fn single_pair_is_propagator() {
        let g = toy();
        let fields = [Field::minus(pt(0.3, 1)), Field::plus(pt(0.0, 0))];
        let direct = g.eval(pt(0.3, 1), pt(0.0, 0));
        assert_eq!(wick_moment(&fields, &g), direct);
        // opposite written order flips the sign
        let swapped = [Field::plus(pt(0.0, 0)), Field::minus(pt(0.3, 1))];
        assert_eq!(wick_moment(&swapped, &g), -direct);
    }

    #[test]
    fn two_pairs_closed_form() {
        let g = toy();
        let (x1, x2, y1, y2) = (pt(0.1, 0), pt(0.5, 2), pt(0.2, 1), pt(0.9, 3));
        // two psi- psi+ pairs in sequence
        let fields = [
            Field::minus(x1),
            Field::plus(y1),
            Field::minus(x2),
            Field::plus(y2),
        ];
        let expect = g.eval(x1, y1) * g.eval(x2, y2) - g.eval(x1, y2) * g.eval(x2, y1);
        assert!((wick_moment(&fields, &g) - expect).norm() < 1e-14);
    }

    #[test]
    fn four_pairs_match_leibniz_oracle() {
        let g = toy();
        let xs: Vec<SpacetimePoint> = (0..4).map(|i| pt(0.1 * i as f64, i)).collect();
        let ys: Vec<SpacetimePoint> = (0..4).map(|i| pt(0.07 * i as f64 + 0.3, 2 * i)).collect();
        let mut fields = Vec::new();
        fields.extend(xs.iter().map(|&p| Field::minus(p)));
        fields.extend(ys.iter().map(|&p| Field::plus(p)));
        // brute-force signed permutation sum
        let mut perm = vec![0usize, 1, 2, 3];
        let mut total = Complex64::new(0.0, 0.0);
        loop {
            let mut term = Complex64::new(permutation_sign(&perm), 0.0);
            for (i, &j) in perm.iter().enumerate() {
                term *= g.eval(xs[i], ys[j]);
            }
            total += term;
            if !next_permutation(&mut perm) {
                break;
            }
        }
        assert!((wick_moment(&fields, &g) - total).norm() < 1e-12);
    }

    #[test]
    fn unbalanced_vanishes_and_antisymmetry_holds() {
        let g = toy();
        let fields = [Field::minus(pt(0.0, 0)), Field::minus(pt(0.2, 1))];
        assert_eq!(wick_moment(&fields, &g), Complex64::new(0.0, 0.0));

        let mut f2 = vec![
            Field::minus(pt(0.0, 0)),
            Field::minus(pt(0.4, 2)),
            Field::plus(pt(0.1, 1)),
            Field::plus(pt(0.6, 3)),
        ];
        let before = wick_moment(&f2, &g);
        f2.swap(2, 3);
        assert!((wick_moment(&f2, &g) + before).norm() < 1e-14);
    }

    #[test]
    fn partial_wick_consistency() {
        // extracting nothing reduces to the full moment
        let g = toy();
        let fields = [
            Field::plus(pt(0.0, 0)),
            Field::minus(pt(0.2, 1)),
            Field::minus(pt(0.5, 2)),
            Field::plus(pt(0.3, 3)),
        ];
        assert_eq!(partial_wick(&fields, &[], &g), wick_moment(&fields, &g));
        // extracting a balanced pair leaves the complementary moment
        let coeff = partial_wick(&fields, &[0, 1], &g);
        let inner = g.eval(pt(0.5, 2), pt(0.3, 3));
        assert!((coeff - inner).norm() < 1e-14);
    }

    #[test]
    fn cumulant_reductions() {
        let g = toy();
        let single = FieldMonomial {
            cluster: 0,
            fields: vec![Field::plus(pt(0.0, 0)), Field::minus(pt(0.3, 1))],
        };
        let et = truncated_expectation_cumulant(std::slice::from_ref(&single), &g).unwrap();
        assert_eq!(et, wick_moment(&single.fields, &g));

        // intra-cluster-only propagator: factorized moments cancel
        let blockg = |x: SpacetimePoint, y: SpacetimePoint| {
            if (x.x < 10) == (y.x < 10) {
                toy().eval(x, y)
            } else {
                Complex64::new(0.0, 0.0)
            }
        };
        let c0 = FieldMonomial {
            cluster: 0,
            fields: vec![Field::plus(pt(0.0, 0)), Field::minus(pt(0.3, 1))],
        };
        let c1 = FieldMonomial {
            cluster: 1,
            fields: vec![Field::plus(pt(0.1, 12)), Field::minus(pt(0.2, 13))],
        };
        let et = truncated_expectation_cumulant(&[c0, c1], &blockg).unwrap();
        assert!(et.norm() < 1e-14);
    }

    #[test]
    fn routes_agree_exhaustively() {
        let g = toy();
        let mut rng = StdRng::seed_from_u64(7);
        // all cluster shapes with <= 3 clusters, <= 8 fields, even sizes
        let shapes: Vec<Vec<usize>> = vec![
            vec![2],
            vec![4],
            vec![6],
            vec![8],
            vec![2, 2],
            vec![2, 4],
            vec![4, 4],
            vec![2, 6],
            vec![2, 2, 2],
            vec![2, 2, 4],
        ];
        for shape in shapes {
            for _trial in 0..4 {
                let clusters: Vec<FieldMonomial> = shape
                    .iter()
                    .enumerate()
                    .map(|(ci, &len)| {
                        let fields = (0..len)
                            .map(|_| {
                                let p = pt(rng.gen_range(-1.0..1.0), rng.gen_range(-4..4));
                                if rng.gen_bool(0.5) {
                                    Field::plus(p)
                                } else {
                                    Field::minus(p)
                                }
                            })
                            .collect();
                        FieldMonomial {
                            cluster: ci,
                            fields,
                        }
                    })
                    .collect();
                let a = truncated_expectation_cumulant(&clusters, &g).unwrap();
                let b = connected_contractions(&clusters, &g).unwrap();
                assert!(
                    (a - b).norm() <= 1e-10 * (1.0 + a.norm()),
                    "shape {shape:?}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn size_limits_refused() {
        let g = toy();
        let big = FieldMonomial {
            cluster: 0,
            fields: (0..12)
                .map(|i| Field::plus(pt(0.0, i)))
                .collect(),
        };
        assert!(truncated_expectation_cumulant(std::slice::from_ref(&big), &g).is_err());
        let odd = FieldMonomial {
            cluster: 0,
            fields: vec![Field::plus(pt(0.0, 0))],
        };
        assert!(connected_contractions(std::slice::from_ref(&odd), &g).is_err());
    }

    #[test]
    fn gram_factors_reproduce_propagator_and_bound() {
        let cut = CutoffSpec::new(2.0);
        let h = -3;
        let scale = LatticeScale::free(h, 0.0);
        let quad = QuadratureSpec::for_scale(h, 2.0);
        let factors = GramFactors::build(&scale, &cut, &quad);
        let shell = lattice_shell(&scale, &cut, &quad);
        for &(x, y) in &[
            (pt(0.0, 0), pt(0.0, 0)),
            (pt(2.0, 1), pt(0.5, 3)),
            (pt(5.0, 0), pt(0.0, 4)),
        ] {
            let via = factors.inner_product(x, y);
            let direct = crate::propagator::shell_transform(
                &shell,
                quad.weight(),
                pt(x.x0 - y.x0, x.x - y.x),
                0,
                0,
            );
            assert!(
                (via - direct).norm() < 1e-10 * direct.norm().max(1e-12),
                "at {x:?},{y:?}"
            );
        }
        // norms scale like gamma^{h/4} each
        let (na, nb) = factors.factor_norms();
        assert!((na - nb).abs() < 1e-12 * na);

        // randomized Hadamard suite
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..60 {
            let s = rng.gen_range(1..=3usize);
            let n = rng.gen_range(1..=4usize);
            let us: Vec<Vec<f64>> = (0..s)
                .map(|_| {
                    let mut v: Vec<f64> = (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter_mut().for_each(|x| *x /= norm.max(1e-9));
                    v
                })
                .collect();
            let scatter = 8.0 * 2f64.powi(-h);
            let minus: Vec<(usize, SpacetimePoint)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0..s),
                        pt(rng.gen_range(-scatter..scatter), rng.gen_range(-30..30)),
                    )
                })
                .collect();
            let plus: Vec<(usize, SpacetimePoint)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0..s),
                        pt(rng.gen_range(-scatter..scatter), rng.gen_range(-30..30)),
                    )
                })
                .collect();
            let report = gram_check(&scale, &cut, &quad, &minus, &plus, &us).unwrap();
            assert!(report.bound_holds, "violation: {report:?}");
            assert!(report.reproduction_error < 1e-9);
        }
    }

    #[test]
    fn gram_position_space_factorization() {
        // independent z-space integration of the tabulated factors
        let cut = CutoffSpec::new(2.0);
        let h = -2;
        let scale = LatticeScale::free(h, 0.0);
        // deliberately small dedicated torus
        let quad = QuadratureSpec {
            beta: 96.0 * 2f64.powi(-h),
            sites: 192,
            rel_tol: 1e-4,
        };
        let factors = GramFactors::build(&scale, &cut, &quad);
        // bandwidth: largest Matsubara index present in the shell
        let shell = lattice_shell(&scale, &cut, &quad);
        let nmax = shell
            .iter()
            .map(|p| (p.kk.k0.abs() * quad.beta / (2.0 * PI_CONST)).ceil() as usize)
            .max()
            .unwrap();
        let slices = (4 * nmax + 8).next_power_of_two();
        // probe points on the z0 grid so torus translation is exact
        let dz0 = quad.beta / slices as f64;
        let x = pt(3.0 * dz0, 1);
        let y = pt(dz0, 3);
        let via_z = factors.inner_product_position_space(x, y, quad.beta, quad.sites as i64, slices);
        let via_k = factors.inner_product(x, y);
        assert!(
            (via_z - via_k).norm() < 1e-8 * via_k.norm().max(1e-12),
            "{via_z} vs {via_k}"
        );
    }

    const PI_CONST: f64 = std::f64::consts::PI;
}
