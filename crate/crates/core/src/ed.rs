//! Exact diagonalization of the fermionic chain at small sizes: blockwise
//! spectra by particle number, thermal two-point functions via the Lehmann
//! representation, ground-truth momentum propagators, and phase scans.
//!
//! Fermions obey periodic boundary conditions; the wrap-around hop carries
//! the string sign `(-1)^{N-1}` that the occupation-basis representation
//! produces for it.

use crate::lattice::{Error, Momentum, Potential, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Largest chain the dense/iterative machinery accepts.
pub const MAX_SITES: usize = 14;
/// Largest chain diagonalized densely in every sector.
pub const MAX_DENSE_SITES: usize = 12;

/// Occupation-basis states of one particle-number sector, sorted.
#[derive(Debug, Clone)]
pub struct SectorBasis {
    pub particles: usize,
    pub states: Vec<u32>,
}

impl SectorBasis {
    pub fn enumerate(sites: usize, particles: usize) -> Self {
        let mut states: Vec<u32> = (0u32..1 << sites)
            .filter(|s| s.count_ones() as usize == particles)
            .collect();
        states.sort_unstable();
        Self { particles, states }
    }

    pub fn index_of(&self, state: u32) -> usize {
        self.states.binary_search(&state).expect("state in sector")
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }
}

#[inline]
fn string_sign(state: u32, site: usize) -> f64 {
    if (state & ((1u32 << site) - 1)).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Blockwise Hamiltonian of the chain
/// `H = -sum_x [ (a+_{x+1} a-_x + h.c.)/2 + h n_x ] - lambda sum v(x-y) n_x n_y`.
#[derive(Debug, Clone)]
pub struct ChainHamiltonian {
    pub sites: usize,
    pub lambda: f64,
    pub r: f64,
    pub potential: Potential,
    pub sectors: Vec<SectorBasis>,
}

impl ChainHamiltonian {
    pub fn new(sites: usize, lambda: f64, r: f64, potential: Potential) -> Result<Self> {
        if sites == 0 || sites > MAX_SITES {
            return Err(Error::SizeLimit(format!(
                "chain length {sites} outside 1..={MAX_SITES}"
            )));
        }
        let sectors = (0..=sites)
            .map(|n| SectorBasis::enumerate(sites, n))
            .collect();
        Ok(Self {
            sites,
            lambda,
            r,
            potential,
            sectors,
        })
    }

    fn field(&self) -> f64 {
        -1.0 + self.r
    }

    /// Interaction uses the minimal-image distance on the ring.
    fn pair_potential(&self, x: usize, y: usize) -> f64 {
        let d = (x as i64 - y as i64).unsigned_abs() as usize;
        let d = d.min(self.sites - d);
        self.potential.at(d as i64)
    }

    fn diagonal_energy(&self, state: u32) -> f64 {
        let mut occ = Vec::with_capacity(state.count_ones() as usize);
        for x in 0..self.sites {
            if state >> x & 1 == 1 {
                occ.push(x);
            }
        }
        let mut e = -self.field() * occ.len() as f64;
        for &x in &occ {
            for &y in &occ {
                e -= self.lambda * self.pair_potential(x, y);
            }
        }
        e
    }

    /// Dense matrix of one particle-number sector.
    pub fn sector_matrix(&self, particles: usize) -> DMatrix<f64> {
        let basis = &self.sectors[particles];
        let dim = basis.dim();
        let mut m = DMatrix::<f64>::zeros(dim, dim);
        for (col, &s) in basis.states.iter().enumerate() {
            m[(col, col)] = self.diagonal_energy(s);
            for x in 0..self.sites {
                let i = x;
                let j = (x + 1) % self.sites;
                // a+_j a-_i and its conjugate
                for (from, to) in [(i, j), (j, i)] {
                    if s >> from & 1 == 1 && s >> to & 1 == 0 {
                        let mid = s ^ (1 << from);
                        let sign = string_sign(s, from) * string_sign(mid, to);
                        let target = mid | (1 << to);
                        let row = basis.index_of(target);
                        m[(row, col)] += -0.5 * sign;
                    }
                }
            }
        }
        m
    }

    /// Apply the sector Hamiltonian to a vector without storing the matrix.
    fn sector_matvec(&self, basis: &SectorBasis, v: &DVector<f64>, out: &mut DVector<f64>) {
        out.fill(0.0);
        for (col, &s) in basis.states.iter().enumerate() {
            let amp = v[col];
            if amp == 0.0 {
                continue;
            }
            out[col] += self.diagonal_energy(s) * amp;
            for x in 0..self.sites {
                let i = x;
                let j = (x + 1) % self.sites;
                for (from, to) in [(i, j), (j, i)] {
                    if s >> from & 1 == 1 && s >> to & 1 == 0 {
                        let mid = s ^ (1 << from);
                        let sign = string_sign(s, from) * string_sign(mid, to);
                        let target = mid | (1 << to);
                        out[basis.index_of(target)] += -0.5 * sign * amp;
                    }
                }
            }
        }
    }

    /// Full spectral decomposition, sector by sector in parallel.
    pub fn diagonalize(&self) -> Result<SpectralData> {
        if self.sites > MAX_DENSE_SITES {
            return Err(Error::SizeLimit(format!(
                "full diagonalization capped at {MAX_DENSE_SITES} sites; use ground_energy_lanczos beyond"
            )));
        }
        let sectors: Vec<SectorSpectrum> = (0..=self.sites)
            .into_par_iter()
            .map(|n| {
                let m = self.sector_matrix(n);
                let eig = m.symmetric_eigen();
                let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
                order.sort_by(|&a, &b| {
                    eig.eigenvalues[a]
                        .partial_cmp(&eig.eigenvalues[b])
                        .expect("real eigenvalues")
                });
                let energies: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
                let dim = eig.eigenvectors.nrows();
                let mut vectors = DMatrix::<f64>::zeros(dim, dim);
                for (new, &old) in order.iter().enumerate() {
                    vectors.set_column(new, &eig.eigenvectors.column(old));
                }
                SectorSpectrum {
                    particles: n,
                    energies,
                    vectors,
                }
            })
            .collect();
        Ok(SpectralData {
            sites: self.sites,
            lambda: self.lambda,
            r: self.r,
            potential: self.potential.clone(),
            sectors,
        })
    }

    /// Lowest eigenvalue of one sector by reorthogonalized Lanczos;
    /// the 13- and 14-site route where dense spectra are out of reach.
    pub fn ground_energy_lanczos(&self, particles: usize, max_iter: usize) -> f64 {
        let basis = &self.sectors[particles];
        let dim = basis.dim();
        if dim == 1 {
            return self.diagonal_energy(basis.states[0]);
        }
        let mut q: Vec<DVector<f64>> = Vec::new();
        let mut alpha = Vec::new();
        let mut beta_c = Vec::new();
        // deterministic pseudo-random start vector
        let mut v = DVector::<f64>::from_iterator(
            dim,
            (0..dim).map(|i| (i as f64 * 0.7391 + 0.137).sin() + 0.3),
        );
        v /= v.norm();
        let mut w = DVector::<f64>::zeros(dim);
        let iters = max_iter.min(dim);
        for it in 0..iters {
            self.sector_matvec(basis, &v, &mut w);
            let a = v.dot(&w);
            alpha.push(a);
            w -= a * &v;
            if let Some(prev) = q.last() {
                w -= beta_c.last().copied().unwrap_or(0.0) * prev;
            }
            // full reorthogonalization keeps the small problems clean
            for qi in &q {
                let c = qi.dot(&w);
                w -= c * qi;
            }
            let c = v.dot(&w);
            w -= c * &v;
            let b = w.norm();
            q.push(v.clone());
            if b < 1e-13 || it == iters - 1 {
                break;
            }
            beta_c.push(b);
            v = &w / b;
        }
        let k = alpha.len();
        let mut tri = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            tri[(i, i)] = alpha[i];
            if i + 1 < k {
                tri[(i, i + 1)] = beta_c[i];
                tri[(i + 1, i)] = beta_c[i];
            }
        }
        tri.symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Eigenvalues and eigenvectors of one particle-number sector.
#[derive(Debug, Clone)]
pub struct SectorSpectrum {
    pub particles: usize,
    pub energies: Vec<f64>,
    /// Columns are eigenvectors in the sorted-basis order.
    pub vectors: DMatrix<f64>,
}

/// Full spectral decomposition of the chain.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub sites: usize,
    pub lambda: f64,
    pub r: f64,
    pub potential: Potential,
    pub sectors: Vec<SectorSpectrum>,
}

impl SpectralData {
    pub fn ground_energy(&self) -> f64 {
        self.sectors
            .iter()
            .flat_map(|s| s.energies.first().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Partition function with the ground energy factored out; finite and
    /// at least one by construction, so no silent over/underflow.
    pub fn partition(&self, beta: f64) -> f64 {
        let e0 = self.ground_energy();
        let z: f64 = self
            .sectors
            .iter()
            .flat_map(|s| s.energies.iter())
            .map(|&e| (-beta * (e - e0)).exp())
            .sum();
        assert!(z.is_finite() && z >= 1.0, "partition function degenerate");
        z
    }

    /// Matrix of `a-_x` from sector `n+1` to sector `n`, in eigenbases.
    fn lowering_in_eigenbasis(&self, x: usize, n: usize, basis_lo: &SectorBasis, basis_hi: &SectorBasis) -> DMatrix<f64> {
        let lo = &self.sectors[n];
        let hi = &self.sectors[n + 1];
        let mut a = DMatrix::<f64>::zeros(basis_lo.dim(), basis_hi.dim());
        for (col, &s) in basis_hi.states.iter().enumerate() {
            if s >> x & 1 == 1 {
                let row = basis_lo.index_of(s ^ (1 << x));
                a[(row, col)] = string_sign(s, x);
            }
        }
        lo.vectors.transpose() * a * &hi.vectors
    }

    /// Time-ordered thermal two-point function `<T a-_(tau,x) a+_(0,0)>`.
    ///
    /// Lehmann double sum; `tau = 0` follows the `tau <= 0` branch of the
    /// time-ordering convention. Antiperiodic in `tau` with period `beta`.
    pub fn thermal_two_point(&self, x: i64, tau: f64, beta: f64) -> f64 {
        self.thermal_grid(&[x], &[tau], beta)[0][0]
    }

    /// Grid evaluation hoisting the operator matrices over `tau`.
    pub fn thermal_grid(&self, xs: &[i64], taus: &[f64], beta: f64) -> Vec<Vec<f64>> {
        let e0 = self.ground_energy();
        let z = self.partition(beta);
        let bases: Vec<SectorBasis> = (0..=self.sites)
            .map(|n| SectorBasis::enumerate(self.sites, n))
            .collect();
        let mut out = vec![vec![0.0; taus.len()]; xs.len()];
        for (xi, &x) in xs.iter().enumerate() {
            let site = x.rem_euclid(self.sites as i64) as usize;
            for n in 0..self.sites {
                // a-_x and a-_0 from sector n+1 down to n
                let mx = self.lowering_in_eigenbasis(site, n, &bases[n], &bases[n + 1]);
                let m0 = self.lowering_in_eigenbasis(0, n, &bases[n], &bases[n + 1]);
                let elo = &self.sectors[n].energies;
                let ehi = &self.sectors[n + 1].energies;
                for (ti, &tau_raw) in taus.iter().enumerate() {
                    let (tau, sign) = reduce_antiperiodic(tau_raw, beta);
                    let mut acc = 0.0;
                    if tau > 0.0 {
                        // <a-_x(tau) a+_0>: thermal state in sector n,
                        // intermediate in n+1.
                        for (m, &em) in elo.iter().enumerate() {
                            let wm = beta - tau;
                            for (k, &ek) in ehi.iter().enumerate() {
                                let w = (-wm * (em - e0) - tau * (ek - e0)).exp();
                                if w == 0.0 {
                                    continue;
                                }
                                acc += mx[(m, k)] * m0[(m, k)] * w;
                            }
                        }
                    } else {
                        // -<a+_0 a-_x(tau)>: thermal state in sector n+1,
                        // intermediate in n.
                        for (m, &em) in ehi.iter().enumerate() {
                            for (k, &ek) in elo.iter().enumerate() {
                                let w = (-(beta + tau) * (em - e0) + tau * (ek - e0)).exp();
                                if w == 0.0 {
                                    continue;
                                }
                                acc -= m0[(k, m)] * mx[(k, m)] * w;
                            }
                        }
                    }
                    out[xi][ti] += sign * acc / z;
                }
            }
        }
        out
    }

    /// Spectral weights of the momentum two-point function at momentum `k`:
    /// pairs `(E_m - E_n, |<n| a+_k |m>|^2 (w_m + w_n))` with `m` in the
    /// lower sector and `n` above it.
    pub fn momentum_weights(&self, k: f64, beta: f64) -> Vec<(f64, f64)> {
        let e0 = self.ground_energy();
        let bases: Vec<SectorBasis> = (0..=self.sites)
            .map(|n| SectorBasis::enumerate(self.sites, n))
            .collect();
        let norm = 1.0 / (self.sites as f64).sqrt();
        let mut pairs = Vec::new();
        for n in 0..self.sites {
            // <n_hi| a+_k |m_lo> = conj of a-_k elements; build from the
            // per-site lowering matrices with plane-wave phases.
            let mut real = DMatrix::<f64>::zeros(bases[n].dim(), bases[n + 1].dim());
            let mut imag = DMatrix::<f64>::zeros(bases[n].dim(), bases[n + 1].dim());
            for site in 0..self.sites {
                let m = self.lowering_in_eigenbasis(site, n, &bases[n], &bases[n + 1]);
                let phase = k * site as f64;
                real += &m * phase.cos();
                imag += &m * -phase.sin();
            }
            // a-_k = (1/sqrt L) sum_x e^{-ikx} a-_x maps n+1 -> n and
            // |<n+1| a+_k |n>|^2 = |<n| a-_k |n+1>|^2 elementwise.
            let elo = &self.sectors[n].energies;
            let ehi = &self.sectors[n + 1].energies;
            for (m_i, &em) in elo.iter().enumerate() {
                let wm = (-beta * (em - e0)).exp();
                for (n_i, &en) in ehi.iter().enumerate() {
                    let sq = real[(m_i, n_i)] * real[(m_i, n_i)] + imag[(m_i, n_i)] * imag[(m_i, n_i)];
                    if sq == 0.0 {
                        continue;
                    }
                    let wn = (-beta * (en - e0)).exp();
                    let weight = sq * norm * norm * (wm + wn);
                    if weight > 0.0 {
                        pairs.push((em - en, weight));
                    }
                }
            }
        }
        pairs
    }

    /// Momentum-space two-point function; at `lambda = 0` this equals
    /// `1/(-i k0 + cos k + h)` identically.
    pub fn momentum_two_point(&self, kk: Momentum, beta: f64) -> Complex64 {
        let z = self.partition(beta);
        let pairs = self.momentum_weights(kk.k, beta);
        eval_momentum_pairs(&pairs, kk.k0, z)
    }

    /// Ground-state occupation `n(k)`; degenerate ground levels are averaged.
    pub fn occupation(&self, k: f64) -> f64 {
        let e0 = self.ground_energy();
        let bases: Vec<SectorBasis> = (0..=self.sites)
            .map(|n| SectorBasis::enumerate(self.sites, n))
            .collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for n in 0..=self.sites {
            let sec = &self.sectors[n];
            for (gi, &e) in sec.energies.iter().enumerate() {
                if e - e0 > 1e-10 {
                    break;
                }
                count += 1;
                if n == 0 {
                    continue; // empty state carries n(k) = 0
                }
                let gs = sec.vectors.column(gi);
                let lowered: Vec<DVector<f64>> = (0..self.sites)
                    .map(|x| self.lowering_raw(x, &bases[n - 1], &bases[n]) * gs)
                    .collect();
                // n(k) = (1/L) sum_{x,y} e^{ik(x-y)} <a+_x a-_y>
                let mut nk = 0.0;
                for x in 0..self.sites {
                    for y in 0..self.sites {
                        nk += (k * (x as f64 - y as f64)).cos() * lowered[x].dot(&lowered[y]);
                    }
                }
                total += nk / self.sites as f64;
            }
        }
        total / count.max(1) as f64
    }

    fn lowering_raw(&self, x: usize, basis_lo: &SectorBasis, basis_hi: &SectorBasis) -> DMatrix<f64> {
        let mut a = DMatrix::<f64>::zeros(basis_lo.dim(), basis_hi.dim());
        for (col, &s) in basis_hi.states.iter().enumerate() {
            if s >> x & 1 == 1 {
                a[(basis_lo.index_of(s ^ (1 << x)), col)] = string_sign(s, x);
            }
        }
        a
    }

    /// Thermal mean density at inverse temperature `beta`.
    pub fn thermal_density(&self, beta: f64) -> f64 {
        let e0 = self.ground_energy();
        let mut num = 0.0;
        let mut den = 0.0;
        for sec in &self.sectors {
            for &e in &sec.energies {
                let w = (-beta * (e - e0)).exp();
                num += sec.particles as f64 * w;
                den += w;
            }
        }
        num / den / self.sites as f64
    }

    /// Charge gap `E0(N+1) + E0(N-1) - 2 E0(N)` at the optimal filling.
    pub fn charge_gap(&self) -> f64 {
        let e0s: Vec<f64> = self
            .sectors
            .iter()
            .map(|s| s.energies.first().copied().unwrap_or(f64::INFINITY))
            .collect();
        let nstar = e0s
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .expect("at least one sector");
        if nstar == 0 {
            return e0s[1] - e0s[0];
        }
        if nstar == self.sites {
            return e0s[self.sites - 1] - e0s[self.sites];
        }
        e0s[nstar + 1] + e0s[nstar - 1] - 2.0 * e0s[nstar]
    }

    /// Persist to the flat cache layout: magic, u64 header length, JSON
    /// header, then little-endian f64 arrays in header order.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            schema: &'a str,
            sites: usize,
            lambda: f64,
            r: f64,
            potential: &'a Potential,
            sector_dims: Vec<usize>,
        }
        let header = serde_json::to_vec(&Header {
            schema: "fermichain/spectral-cache/v1",
            sites: self.sites,
            lambda: self.lambda,
            r: self.r,
            potential: &self.potential,
            sector_dims: self.sectors.iter().map(|s| s.energies.len()).collect(),
        })?;
        w.write_all(b"FCSPEC01")?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for sec in &self.sectors {
            for &e in &sec.energies {
                w.write_all(&e.to_le_bytes())?;
            }
            for v in sec.vectors.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut rd: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            schema: String,
            sites: usize,
            lambda: f64,
            r: f64,
            potential: Potential,
            sector_dims: Vec<usize>,
        }
        let mut magic = [0u8; 8];
        rd.read_exact(&mut magic)?;
        if &magic != b"FCSPEC01" {
            return Err(Error::InvalidParameter("bad spectral cache magic".into()));
        }
        let mut lenb = [0u8; 8];
        rd.read_exact(&mut lenb)?;
        let mut hbuf = vec![0u8; u64::from_le_bytes(lenb) as usize];
        rd.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        if header.schema != "fermichain/spectral-cache/v1" {
            return Err(Error::InvalidParameter(format!(
                "unknown cache schema {}",
                header.schema
            )));
        }
        let mut read_f64 = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 8 * n];
            rd.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect())
        };
        let mut sectors = Vec::new();
        for (n, &dim) in header.sector_dims.iter().enumerate() {
            let energies = read_f64(dim)?;
            let flat = read_f64(dim * dim)?;
            sectors.push(SectorSpectrum {
                particles: n,
                energies,
                vectors: DMatrix::from_column_slice(dim, dim, &flat),
            });
        }
        Ok(Self {
            sites: header.sites,
            lambda: header.lambda,
            r: header.r,
            potential: header.potential,
            sectors,
        })
    }
}

fn reduce_antiperiodic(mut tau: f64, beta: f64) -> (f64, f64) {
    let mut sign = 1.0;
    while tau > beta {
        tau -= beta;
        sign = -sign;
    }
    while tau <= -beta {
        tau += beta;
        sign = -sign;
    }
    (tau, sign)
}

/// Assemble `(1/Z) sum w / (-i k0 + dE)` from precomputed pairs.
pub fn eval_momentum_pairs(pairs: &[(f64, f64)], k0: f64, z: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(de, w) in pairs {
        acc += w / Complex64::new(de, -k0);
    }
    acc / z
}

/// One row of the phase scan.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseRow {
    pub r: f64,
    pub lambda: f64,
    pub density: f64,
    pub charge_gap: f64,
    pub occupation: Vec<f64>,
}

/// Ground-state/thermal diagnostics over an `(r, lambda)` scan.
pub fn phase_diagnostics(
    sites: usize,
    beta: f64,
    rs: &[f64],
    lambdas: &[f64],
    potential: &Potential,
) -> Result<Vec<PhaseRow>> {
    if sites > 12 {
        return Err(Error::SizeLimit("phase scans capped at 12 sites".into()));
    }
    let mut rows = Vec::new();
    for &r in rs {
        for &lambda in lambdas {
            let spec = ChainHamiltonian::new(sites, lambda, r, potential.clone())?.diagonalize()?;
            let occupation = (0..sites)
                .map(|m| spec.occupation(Momentum::lattice(m as i64, sites)))
                .collect();
            rows.push(PhaseRow {
                r,
                lambda,
                density: spec.thermal_density(beta),
                charge_gap: spec.charge_gap(),
                occupation,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;

    #[test]
    fn free_spectra_are_filling_sums() {
        let (sites, r) = (4usize, 0.7);
        let ham = ChainHamiltonian::new(sites, 0.0, r, Potential::nearest_neighbor()).unwrap();
        let spec = ham.diagonalize().unwrap();
        let eps: Vec<f64> = (0..sites)
            .map(|m| model::dispersion(Momentum::lattice(m as i64, sites), r))
            .collect();
        for n in 0..=sites {
            let mut fillings: Vec<f64> = Vec::new();
            for subset in 0u32..1 << sites {
                if subset.count_ones() as usize == n {
                    fillings.push((0..sites).filter(|&i| subset >> i & 1 == 1).map(|i| eps[i]).sum());
                }
            }
            fillings.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            for (a, b) in fillings.iter().zip(&spec.sectors[n].energies) {
                assert!((a - b).abs() < 1e-12, "sector {n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn hermiticity_is_exact() {
        let ham = ChainHamiltonian::new(6, 0.3, 0.2, Potential::nearest_neighbor()).unwrap();
        for n in 0..=6 {
            let m = ham.sector_matrix(n);
            assert_eq!(m, m.transpose());
        }
    }

    #[test]
    fn lanczos_matches_dense_ground_energy() {
        let ham = ChainHamiltonian::new(8, 0.2, 0.6, Potential::nearest_neighbor()).unwrap();
        let dense = ham.diagonalize().unwrap();
        for n in [2usize, 4] {
            let lo = ham.ground_energy_lanczos(n, 120);
            assert!(
                (lo - dense.sectors[n].energies[0]).abs() < 1e-9,
                "sector {n}"
            );
        }
    }

    #[test]
    fn thermal_matches_free_formula() {
        let (sites, beta, r) = (6usize, 6.0, 0.7);
        let spec = ChainHamiltonian::new(sites, 0.0, r, Potential::nearest_neighbor())
            .unwrap()
            .diagonalize()
            .unwrap();
        for x in 0..sites as i64 {
            for &tau in &[0.0, 0.7, beta / 2.0, -1.3, beta * 0.9, -beta * 0.8] {
                let ed = spec.thermal_two_point(x, tau, beta);
                let free = model::free_schwinger_time(
                    if tau == 0.0 { -1e-13 } else { tau },
                    x,
                    r,
                    sites,
                    beta,
                );
                assert!(
                    (ed - free).abs() < 1e-8,
                    "x={x} tau={tau}: ed={ed} free={free}"
                );
            }
        }
    }

    #[test]
    fn thermal_antiperiodicity() {
        let spec = ChainHamiltonian::new(5, 0.4, 0.3, Potential::nearest_neighbor())
            .unwrap()
            .diagonalize()
            .unwrap();
        let beta = 7.0;
        for &tau in &[0.4, 2.0, 5.5] {
            let a = spec.thermal_two_point(2, tau - beta, beta);
            let b = spec.thermal_two_point(2, tau, beta);
            assert!((a + b).abs() < 1e-12, "tau={tau}");
        }
    }

    #[test]
    fn equal_time_jump_is_one_on_site() {
        let spec = ChainHamiltonian::new(5, 0.3, 0.5, Potential::nearest_neighbor())
            .unwrap()
            .diagonalize()
            .unwrap();
        let beta = 8.0;
        let eps = 1e-10;
        for x in 0..5i64 {
            let jump = spec.thermal_two_point(x, eps, beta) - spec.thermal_two_point(x, -eps, beta);
            let expect = if x == 0 { 1.0 } else { 0.0 };
            assert!((jump - expect).abs() < 1e-7, "x={x}: {jump}");
        }
    }

    #[test]
    fn momentum_matches_free_propagator() {
        let (sites, beta, r) = (6usize, 8.0, -0.1);
        let spec = ChainHamiltonian::new(sites, 0.0, r, Potential::nearest_neighbor())
            .unwrap()
            .diagonalize()
            .unwrap();
        for m in 0..sites {
            let k = Momentum::lattice(m as i64, sites);
            for n in -4..4i64 {
                let kk = Momentum::new(Momentum::matsubara(n, beta), k);
                let ed = spec.momentum_two_point(kk, beta);
                let free = model::free_propagator_momentum(kk, r);
                assert!(
                    (ed - free).norm() < 1e-10,
                    "k={k} n={n}: {ed} vs {free}"
                );
            }
        }
    }

    #[test]
    fn particle_hole_spectra_map() {
        // At lambda=0, h -> -h with the staggered map sends the sector-N
        // spectrum to the complementary sector, shifted by -h L.
        let sites = 6usize;
        let r = 0.3;
        let h = -1.0 + r;
        let plus = ChainHamiltonian::new(sites, 0.0, r, Potential::nearest_neighbor())
            .unwrap()
            .diagonalize()
            .unwrap();
        // h' = -h means r' = 2 - r
        let minus = ChainHamiltonian::new(sites, 0.0, 2.0 - r, Potential::nearest_neighbor())
            .unwrap()
            .diagonalize()
            .unwrap();
        for n in 0..=sites {
            let a: Vec<f64> = plus.sectors[n].energies.clone();
            let b: Vec<f64> = minus.sectors[sites - n]
                .energies
                .iter()
                .map(|e| e - h * sites as f64)
                .collect();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10, "sector {n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn particle_hole_with_interaction_shift() {
        // With interaction, n -> 1 - n maps (h, lambda) to
        // (-h - 2 lambda vhat(0), lambda) up to the constant
        // -hL - lambda L vhat(0); minimal-image vhat(0) on the ring.
        let sites = 6usize;
        let (r, lambda) = (0.4, 0.2);
        let h = -1.0 + r;
        let pot = Potential::nearest_neighbor();
        let vhat0: f64 = (0..sites).map(|d| pot.at(d.min(sites - d) as i64)).sum();
        let a = ChainHamiltonian::new(sites, lambda, r, pot.clone())
            .unwrap()
            .diagonalize()
            .unwrap();
        let h_dual = -h - 2.0 * lambda * vhat0;
        let b = ChainHamiltonian::new(sites, lambda, 1.0 + h_dual, pot)
            .unwrap()
            .diagonalize()
            .unwrap();
        let shift = -h * sites as f64 - lambda * sites as f64 * vhat0;
        for n in 0..=sites {
            for (x, y) in a.sectors[n]
                .energies
                .iter()
                .zip(&b.sectors[sites - n].energies)
            {
                assert!((x - (y + shift)).abs() < 1e-9, "sector {n}");
            }
        }
    }

    #[test]
    fn phase_rows_behave() {
        let pot = Potential::nearest_neighbor();
        let rows = phase_diagnostics(8, 32.0, &[-0.2, 1.0], &[0.0], &pot).unwrap();
        // empty-band insulator: density ~ 0 and gap at least |r|
        assert!(rows[0].density < 1e-3, "density {}", rows[0].density);
        assert!(rows[0].charge_gap >= 0.2 - 1e-9);
        // half filling at r = 1 (L multiple of 4) by particle-hole symmetry
        assert!((rows[1].density - 0.5).abs() < 1e-9);
    }

    #[test]
    fn spectral_cache_roundtrip() {
        let spec = ChainHamiltonian::new(5, 0.15, 0.4, Potential::nearest_neighbor())
            .unwrap()
            .diagonalize()
            .unwrap();
        let mut buf = Vec::new();
        spec.save(&mut buf).unwrap();
        let back = SpectralData::load(&buf[..]).unwrap();
        assert_eq!(back.sites, 5);
        for n in 0..=5 {
            for (a, b) in spec.sectors[n].energies.iter().zip(&back.sectors[n].energies) {
                assert_eq!(a, b);
            }
        }
        let beta = 6.0;
        assert_eq!(
            spec.thermal_two_point(1, 0.7, beta),
            back.thermal_two_point(1, 0.7, beta)
        );
    }

    #[test]
    fn refuses_oversize() {
        assert!(ChainHamiltonian::new(15, 0.0, 0.5, Potential::nearest_neighbor()).is_err());
        let h = ChainHamiltonian::new(13, 0.0, 0.5, Potential::nearest_neighbor()).unwrap();
        assert!(h.diagonalize().is_err());
    }
}
