//! Effective-potential kernels at first and second order in the couplings.
//!
//! Contraction topologies are not transcribed by hand: they are generated
//! by enumerating external legs and Wick matchings of one- and two-vertex
//! products, with signs from the tested fermionic-expectation primitives
//! and line momenta solved on the contraction graph. A brute-force
//! position-space evaluation on a small discrete torus pins the whole
//! reduction down in the tests.

use crate::grassmann::{term_sign, FieldSign};
use crate::lattice::{Momentum, Potential};
use crate::numerics::KahanComplex;
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::collections::HashMap;

/// Momentum expressions live on the basis `K1 K2 K3 F1 F2`: three external
/// symbols and two loop momenta.
pub const BASIS: usize = 5;
pub const FREE0: usize = 3;
pub const FREE1: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct MomExpr(pub [i16; BASIS]);

impl MomExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn sym(i: usize) -> Self {
        let mut c = [0i16; BASIS];
        c[i] = 1;
        Self(c)
    }

    fn add(self, other: Self) -> Self {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(other.0) {
            *a += b;
        }
        Self(c)
    }

    fn neg(self) -> Self {
        let mut c = self.0;
        for a in c.iter_mut() {
            *a = -*a;
        }
        Self(c)
    }

    fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub fn depends_on(&self, slot: usize) -> bool {
        self.0[slot] != 0
    }

    /// Numeric momentum for given external and loop values.
    pub fn eval(&self, ext: &[Momentum; 3], free: &[Momentum; 2]) -> Momentum {
        let mut k0 = 0.0;
        let mut k = 0.0;
        for (i, &c) in self.0.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let m = if i < 3 { ext[i] } else { free[i - 3] };
            k0 += c as f64 * m.k0;
            k += c as f64 * m.k;
        }
        Momentum::new(k0, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    /// Propagator line with a quasi-particle label (0 in the single-ring
    /// regime).
    Prop { omega: i8 },
    /// Density-density potential line, `vhat` of the spatial momentum.
    Pot,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Edge {
    pub kind: EdgeKind,
    pub tail: usize,
    pub head: usize,
    pub expr: MomExpr,
}

/// Multiplicative factor attached to a quadratic-coupling vertex,
/// evaluated at the momentum of the adjoining line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InsertionKind {
    /// Unit factor (chemical-potential-like coupling).
    Unit,
    /// Dressed dispersion `cos k - cos p_F` (velocity-like coupling).
    DispersionShift,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Insertion {
    pub kind: InsertionKind,
    /// Propagator edge whose momentum feeds the factor.
    pub edge: usize,
}

/// Coupling content of a diagram: powers of the quartic coupling and the
/// number of velocity-like and chemical-like quadratic insertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct CouplingOrder {
    pub quartic: u32,
    pub dispersion: u32,
    pub unit: u32,
}

#[derive(Debug, Clone)]
pub struct Diagram {
    /// Wick sign times multiplicity times the 1/s! of the expansion.
    pub coeff: f64,
    pub edges: Vec<Edge>,
    /// Edge indices carrying the loop momenta F1, F2 (propagator edges).
    pub free: Vec<usize>,
    pub insertions: Vec<Insertion>,
    pub order: CouplingOrder,
}

/// One interaction vertex: fields `(local position, sign, omega)` in
/// written order, an optional potential edge between two local positions,
/// an optional insertion factor, and its coupling content.
#[derive(Debug, Clone)]
pub struct VertexSpec {
    pub positions: usize,
    pub fields: Vec<(usize, FieldSign, i8)>,
    pub pot_edge: Option<(usize, usize)>,
    pub insertion: Option<InsertionKind>,
    pub order: CouplingOrder,
}

impl VertexSpec {
    /// `lambda v(u - w) psi+_u psi-_u psi+_w psi-_w`
    pub fn density_density() -> Self {
        Self {
            positions: 2,
            fields: vec![
                (0, FieldSign::Plus, 0),
                (0, FieldSign::Minus, 0),
                (1, FieldSign::Plus, 0),
                (1, FieldSign::Minus, 0),
            ],
            pot_edge: Some((0, 1)),
            insertion: None,
            order: CouplingOrder {
                quartic: 1,
                ..Default::default()
            },
        }
    }

    /// Local quasi-particle quartic `psi+_1 psi-_1 psi+_{-1} psi-_{-1}`.
    pub fn local_quartic() -> Self {
        Self {
            positions: 1,
            fields: vec![
                (0, FieldSign::Plus, 1),
                (0, FieldSign::Minus, 1),
                (0, FieldSign::Plus, -1),
                (0, FieldSign::Minus, -1),
            ],
            pot_edge: None,
            insertion: None,
            order: CouplingOrder {
                quartic: 1,
                ..Default::default()
            },
        }
    }

    /// Quadratic insertion `psi+_omega F psi-_omega` summed over omega,
    /// realized as one vertex per omega.
    pub fn quadratic(omega: i8, kind: InsertionKind) -> Self {
        let order = match kind {
            InsertionKind::Unit => CouplingOrder {
                unit: 1,
                ..Default::default()
            },
            InsertionKind::DispersionShift => CouplingOrder {
                dispersion: 1,
                ..Default::default()
            },
        };
        Self {
            positions: 1,
            fields: vec![(0, FieldSign::Plus, omega), (0, FieldSign::Minus, omega)],
            pot_edge: None,
            insertion: Some(kind),
            order,
        }
    }
}

/// External leg selection: which field slots are external and which
/// momentum symbol each carries.
struct ExternalChoice {
    slots: Vec<usize>,
    // +K at minus slots, -K at plus slots
    injections: Vec<(usize, MomExpr)>, // (position, net phase coefficient)
}

/// Enumerate connected Wick terms of a product of vertices with the given
/// external slot pattern and solve every line momentum.
///
/// `ext_pattern`: ordered (sign, omega, symbol) triples; the kernel is the
/// coefficient of the external product in exactly that written order.
pub fn cluster_diagrams(
    specs: &[&VertexSpec],
    ext_pattern: &[(FieldSign, i8, MomExpr)],
) -> Vec<Diagram> {
    merge_equal(
        cluster_diagrams_with_slots(specs, ext_pattern)
            .into_iter()
            .map(|(_, d)| d)
            .collect(),
    )
}

/// As [`cluster_diagrams`], unmerged, tagging each term with its external
/// slot choice (used by the audit tests).
pub fn cluster_diagrams_with_slots(
    specs: &[&VertexSpec],
    ext_pattern: &[(FieldSign, i8, MomExpr)],
) -> Vec<(Vec<usize>, Diagram)> {
    // assemble global fields
    let mut fields: Vec<(usize, FieldSign, i8)> = Vec::new();
    let mut cluster_of: Vec<usize> = Vec::new();
    let mut pot_edges: Vec<(usize, usize)> = Vec::new();
    let mut insertions_at: Vec<(usize, InsertionKind)> = Vec::new();
    let mut order = CouplingOrder::default();
    let mut pos_base = 0usize;
    for (ci, spec) in specs.iter().enumerate() {
        for &(p, s, w) in &spec.fields {
            fields.push((pos_base + p, s, w));
            cluster_of.push(ci);
        }
        if let Some((a, b)) = spec.pot_edge {
            pot_edges.push((pos_base + a, pos_base + b));
        }
        if let Some(kind) = spec.insertion {
            insertions_at.push((pos_base, kind));
        }
        order.quartic += spec.order.quartic;
        order.dispersion += spec.order.dispersion;
        order.unit += spec.order.unit;
        pos_base += spec.positions;
    }
    let n_pos = pos_base;
    let signs: Vec<FieldSign> = fields.iter().map(|f| f.1).collect();
    let symmetry = match specs.len() {
        1 => 1.0,
        2 => 0.5,
        s => {
            let mut f = 1.0;
            for i in 2..=s {
                f *= i as f64;
            }
            1.0 / f
        }
    };

    let mut diagrams: Vec<(Vec<usize>, Diagram)> = Vec::new();
    let mut choices = Vec::new();
    pick_externals(&fields, ext_pattern, 0, &mut Vec::new(), &mut choices);

    for choice in &choices {
        let internal: Vec<usize> = (0..fields.len())
            .filter(|i| !choice.slots.contains(i))
            .collect();
        let minus: Vec<usize> = internal
            .iter()
            .copied()
            .filter(|&i| fields[i].1 == FieldSign::Minus)
            .collect();
        let plus: Vec<usize> = internal
            .iter()
            .copied()
            .filter(|&i| fields[i].1 == FieldSign::Plus)
            .collect();
        if minus.len() != plus.len() {
            continue;
        }
        let n = minus.len();
        let mut perm: Vec<usize> = (0..n).collect();
        loop {
            let valid_omega = perm
                .iter()
                .enumerate()
                .all(|(i, &j)| fields[minus[i]].2 == fields[plus[j]].2);
            let connected = {
                let cm: Vec<usize> = minus.iter().map(|&i| cluster_of[i]).collect();
                let cp: Vec<usize> = plus.iter().map(|&i| cluster_of[i]).collect();
                clusters_connect(specs.len(), &perm, &cm, &cp)
            };
            if valid_omega && connected {
                let d = build_diagram(
                    &fields,
                    &signs,
                    choice,
                    &minus,
                    &plus,
                    &perm,
                    &pot_edges,
                    &insertions_at,
                    n_pos,
                    symmetry,
                    order,
                )
                .expect("every connected matching admits a flow solution");
                diagrams.push((choice.slots.clone(), d));
            }
            if !next_perm(&mut perm) {
                break;
            }
        }
    }
    diagrams
}

fn pick_externals(
    fields: &[(usize, FieldSign, i8)],
    pattern: &[(FieldSign, i8, MomExpr)],
    depth: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<ExternalChoice>,
) {
    if depth == pattern.len() {
        let injections = current
            .iter()
            .zip(pattern)
            .map(|(&slot, &(sign, _, sym))| {
                let coeff = if sign == FieldSign::Plus { sym.neg() } else { sym };
                (fields[slot].0, coeff)
            })
            .collect();
        out.push(ExternalChoice {
            slots: current.clone(),
            injections,
        });
        return;
    }
    let (want_sign, want_omega, _) = pattern[depth];
    for (i, &(_, s, w)) in fields.iter().enumerate() {
        if s == want_sign && w == want_omega && !current.contains(&i) {
            current.push(i);
            pick_externals(fields, pattern, depth + 1, current, out);
            current.pop();
        }
    }
}

fn clusters_connect(s: usize, perm: &[usize], cm: &[usize], cp: &[usize]) -> bool {
    if s <= 1 {
        return true;
    }
    let mut parent: Vec<usize> = (0..s).collect();
    fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut comps = s;
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = (find(&mut parent, cm[i]), find(&mut parent, cp[j]));
        if a != b {
            parent[a] = b;
            comps -= 1;
        }
    }
    comps == 1
}

fn next_perm(perm: &mut [usize]) -> bool {
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

#[allow(clippy::too_many_arguments)]
fn build_diagram(
    fields: &[(usize, FieldSign, i8)],
    signs: &[FieldSign],
    choice: &ExternalChoice,
    minus: &[usize],
    plus: &[usize],
    perm: &[usize],
    pot_edges: &[(usize, usize)],
    insertions_at: &[(usize, InsertionKind)],
    n_pos: usize,
    symmetry: f64,
    order: CouplingOrder,
) -> Option<Diagram> {
    // propagator edges run from the plus-field position to the minus one
    let mut edges: Vec<Edge> = Vec::new();
    for (i, &j) in perm.iter().enumerate() {
        edges.push(Edge {
            kind: EdgeKind::Prop {
                omega: fields[minus[i]].2,
            },
            tail: fields[plus[j]].0,
            head: fields[minus[i]].0,
            expr: MomExpr::zero(),
        });
    }
    let first_pot = edges.len();
    for &(hi, lo) in pot_edges {
        edges.push(Edge {
            kind: EdgeKind::Pot,
            tail: lo,
            head: hi,
            expr: MomExpr::zero(),
        });
    }
    let free = solve_flows(&mut edges, first_pot, &choice.injections, n_pos)?;

    // attach insertion factors to an incident propagator edge, oriented
    // into the vertex (momentum conservation makes either side equal)
    let mut insertions = Vec::new();
    for &(pos, kind) in insertions_at {
        let edge = edges
            .iter()
            .position(|e| matches!(e.kind, EdgeKind::Prop { .. }) && (e.head == pos || e.tail == pos))?;
        insertions.push(Insertion { kind, edge });
    }

    let sign = term_sign(signs, &choice.slots, perm);
    Some(Diagram {
        coeff: sign * symmetry,
        edges,
        free,
        insertions,
        order,
    })
}

/// Choose loop edges among the propagator lines and solve the remaining
/// tree flows by leaf stripping. Returns the free-edge indices.
fn solve_flows(
    edges: &mut [Edge],
    n_prop: usize,
    injections: &[(usize, MomExpr)],
    n_pos: usize,
) -> Option<Vec<usize>> {
    let rank = edges.len() as i64 - (n_pos as i64 - 1);
    assert!(
        (0..=2).contains(&rank),
        "loop rank {rank} outside the supported range"
    );
    let rank = rank as usize;
    let prop_indices: Vec<usize> = (0..n_prop).collect();
    let free_sets: Vec<Vec<usize>> = match rank {
        0 => vec![vec![]],
        1 => prop_indices.iter().map(|&i| vec![i]).collect(),
        _ => {
            let mut sets = Vec::new();
            for (a, &i) in prop_indices.iter().enumerate() {
                for &j in &prop_indices[a + 1..] {
                    sets.push(vec![i, j]);
                }
            }
            sets
        }
    };
    'sets: for set in free_sets {
        // remaining edges must form a spanning tree (no self loops)
        let tree: Vec<usize> = (0..edges.len()).filter(|i| !set.contains(i)).collect();
        if tree.iter().any(|&i| edges[i].tail == edges[i].head) {
            continue;
        }
        if !is_spanning_tree(edges, &tree, n_pos) {
            continue;
        }
        // reset and assign free symbols
        for e in edges.iter_mut() {
            e.expr = MomExpr::zero();
        }
        for (slot, &i) in set.iter().enumerate() {
            edges[i].expr = MomExpr::sym(FREE0 + slot);
        }
        // leaf stripping on the tree
        let mut balance: Vec<MomExpr> = vec![MomExpr::zero(); n_pos];
        for &(pos, coeff) in injections {
            balance[pos] = balance[pos].add(coeff);
        }
        for &i in &set {
            balance[edges[i].head] = balance[edges[i].head].add(edges[i].expr);
            balance[edges[i].tail] = balance[edges[i].tail].add(edges[i].expr.neg());
        }
        let mut remaining: Vec<usize> = tree.clone();
        let mut degree = vec![0usize; n_pos];
        for &i in &remaining {
            degree[edges[i].tail] += 1;
            degree[edges[i].head] += 1;
        }
        while let Some(pos) = (0..n_pos).find(|&p| degree[p] == 1) {
            let idx_in_remaining = remaining
                .iter()
                .position(|&i| edges[i].tail == pos || edges[i].head == pos)
                .expect("leaf has an incident edge");
            let eidx = remaining.swap_remove(idx_in_remaining);
            // balance at pos: +expr if head, -expr if tail; solve expr
            let expr = if edges[eidx].head == pos {
                balance[pos].neg()
            } else {
                balance[pos]
            };
            edges[eidx].expr = expr;
            balance[edges[eidx].head] = balance[edges[eidx].head].add(expr);
            balance[edges[eidx].tail] = balance[edges[eidx].tail].add(expr.neg());
            degree[edges[eidx].tail] -= 1;
            degree[edges[eidx].head] -= 1;
            // mark solved node
            degree[pos] = usize::MAX;
            if remaining.is_empty() {
                break;
            }
        }
        if !remaining.is_empty() {
            continue 'sets;
        }
        // verify conservation everywhere
        let mut check: Vec<MomExpr> = vec![MomExpr::zero(); n_pos];
        for &(pos, coeff) in injections {
            check[pos] = check[pos].add(coeff);
        }
        for e in edges.iter() {
            check[e.head] = check[e.head].add(e.expr);
            check[e.tail] = check[e.tail].add(e.expr.neg());
        }
        if check.iter().all(|c| c.is_zero()) {
            return Some(set);
        }
    }
    None
}

fn is_spanning_tree(edges: &[Edge], tree: &[usize], n_pos: usize) -> bool {
    if tree.len() != n_pos - 1 {
        return false;
    }
    let mut parent: Vec<usize> = (0..n_pos).collect();
    fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut comps = n_pos;
    for &i in tree {
        let (a, b) = (find(&mut parent, edges[i].tail), find(&mut parent, edges[i].head));
        if a == b {
            return false;
        }
        parent[a] = b;
        comps -= 1;
    }
    comps == 1
}

/// Merge diagrams with identical structure after normalizing the loop
/// variables (joint sign flips and swap leave the sums invariant).
fn merge_equal(diagrams: Vec<Diagram>) -> Vec<Diagram> {
    type Key = (
        Vec<(EdgeKind, MomExpr)>,
        Vec<(InsertionKind, EdgeKind, MomExpr)>,
        CouplingOrder,
    );
    let canonical = |d: &Diagram| -> Key {
        let mut best: Option<Key> = None;
        for flip0 in [1i16, -1] {
            for flip1 in [1i16, -1] {
                for swap in [false, true] {
                    let map = |e: &MomExpr| -> MomExpr {
                        let mut c = e.0;
                        c[FREE0] *= flip0;
                        c[FREE1] *= flip1;
                        if swap {
                            c.swap(FREE0, FREE1);
                        }
                        MomExpr(c)
                    };
                    let mut lines: Vec<(EdgeKind, MomExpr)> = d
                        .edges
                        .iter()
                        .map(|e| {
                            // propagators are direction-tagged by their
                            // expression; potentials are even, normalize sign
                            let ex = map(&e.expr);
                            let ex = if e.kind == EdgeKind::Pot {
                                normalize_even(ex)
                            } else {
                                ex
                            };
                            (e.kind, ex)
                        })
                        .collect();
                    lines.sort();
                    let ins: Vec<(InsertionKind, EdgeKind, MomExpr)> = d
                        .insertions
                        .iter()
                        .map(|i| {
                            (
                                i.kind,
                                d.edges[i.edge].kind,
                                normalize_even(map(&d.edges[i.edge].expr)),
                            )
                        })
                        .collect();
                    let key = (lines, ins, d.order);
                    if best.as_ref().map_or(true, |b| key < *b) {
                        best = Some(key);
                    }
                }
            }
        }
        best.expect("canonical key exists")
    };
    let mut merged: HashMap<Key, Diagram> = HashMap::new();
    for d in diagrams {
        let key = canonical(&d);
        merged
            .entry(key)
            .and_modify(|existing| existing.coeff += d.coeff)
            .or_insert(d);
    }
    let mut out: Vec<Diagram> = merged.into_values().filter(|d| d.coeff != 0.0).collect();
    out.sort_by(|a, b| a.coeff.partial_cmp(&b.coeff).expect("finite coefficients"));
    out
}

fn normalize_even(e: MomExpr) -> MomExpr {
    if let Some(&first) = e.0.iter().find(|&&c| c != 0) {
        if first < 0 {
            return e.neg();
        }
    }
    e
}

/// Propagator-and-couplings environment a diagram is evaluated in.
pub trait KernelEnv: Sync {
    /// Single-scale propagator value at absolute momentum `kk`.
    fn propagator(&self, omega: i8, kk: Momentum) -> Complex64;
    /// Support list to sum loop momenta over.
    fn loop_points(&self, omega: i8) -> &[(Momentum, Complex64)];
    /// Integration weight of one loop-grid cell.
    fn loop_weight(&self) -> f64;
    /// Potential transform at spatial momentum `k` (1 for local vertices).
    fn potential(&self, k: f64) -> f64;
    /// Insertion factor at momentum `kk`.
    fn insertion(&self, kind: InsertionKind, kk: Momentum) -> f64;
    /// Coupling prefactor for the diagram's order.
    fn coupling(&self, order: CouplingOrder) -> f64;
    /// Finite-range potential backing [`KernelEnv::potential`], when one
    /// exists; enables the range decomposition of coupled loops.
    fn potential_range(&self) -> Option<&Potential> {
        None
    }
}

/// A diagram factorizes over its two loops when nothing couples them.
fn separable(d: &Diagram) -> bool {
    let both = |e: &MomExpr| e.depends_on(FREE0) && e.depends_on(FREE1);
    d.edges.iter().all(|e| !both(&e.expr))
        && d
            .insertions
            .iter()
            .all(|i| !both(&d.edges[i.edge].expr))
}

/// The loops couple only through potential lines, whose finite range lets
/// them decompose into per-loop plane waves.
fn pot_entangled_only(d: &Diagram) -> bool {
    let both = |e: &MomExpr| e.depends_on(FREE0) && e.depends_on(FREE1);
    d.insertions.iter().all(|i| !both(&d.edges[i.edge].expr))
        && d
            .edges
            .iter()
            .all(|e| e.kind == EdgeKind::Pot || !both(&e.expr))
        && d.edges.iter().any(|e| e.kind == EdgeKind::Pot && both(&e.expr))
}

/// Evaluate a two-loop diagram whose loops touch only through potential
/// lines: decompose `vhat` over the interaction range, turning the term
/// into a short sum of factorized one-dimensional loop sums.
fn eval_pot_separated<E: KernelEnv>(
    d: &Diagram,
    env: &E,
    potential: &Potential,
    ext: &[Momentum; 3],
) -> Complex64 {
    let zero = Momentum::new(0.0, 0.0);
    let range = potential.range();
    let coupled: Vec<usize> = d
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            e.kind == EdgeKind::Pot && e.expr.depends_on(FREE0) && e.expr.depends_on(FREE1)
        })
        .map(|(i, _)| i)
        .collect();
    let mut assignments: Vec<Vec<i64>> = vec![vec![]];
    for _ in &coupled {
        let mut next = Vec::new();
        for a in &assignments {
            for x in -range..=range {
                let mut b = a.clone();
                b.push(x);
                next.push(b);
            }
        }
        assignments = next;
    }
    let mut total = Complex64::new(0.0, 0.0);
    for assign in &assignments {
        let mut vprod = 1.0;
        for &x in assign {
            vprod *= potential.at(x);
        }
        if vprod == 0.0 {
            continue;
        }
        // phases e^{-i arg x} split over the loop variables and externals
        let mut phase = [0.0f64; 2];
        let mut ext_phase = 0.0f64;
        for (&x, &ei) in assign.iter().zip(&coupled) {
            let expr = &d.edges[ei].expr;
            phase[0] += -(expr.0[FREE0] as f64) * x as f64;
            phase[1] += -(expr.0[FREE1] as f64) * x as f64;
            for s in 0..3 {
                ext_phase += -(expr.0[s] as f64) * x as f64 * ext[s].k;
            }
        }
        let group = |idx: usize, slot: usize| -> Complex64 {
            let omega = prop_omega(d, d.free[idx]);
            let mut acc = KahanComplex::new();
            for &(kk, val) in env.loop_points(omega) {
                let free = if slot == FREE0 { [kk, zero] } else { [zero, kk] };
                let mut term = val * Complex64::from_polar(1.0, phase[idx] * kk.k);
                for (i, e) in d.edges.iter().enumerate() {
                    if i == d.free[idx] || coupled.contains(&i) || !e.expr.depends_on(slot) {
                        continue;
                    }
                    let arg = e.expr.eval(ext, &free);
                    match e.kind {
                        EdgeKind::Prop { omega } => term *= env.propagator(omega, arg),
                        EdgeKind::Pot => term *= env.potential(arg.k),
                    }
                }
                for ins in &d.insertions {
                    if d.edges[ins.edge].expr.depends_on(slot) {
                        term *= env.insertion(ins.kind, d.edges[ins.edge].expr.eval(ext, &free));
                    }
                }
                acc.add(term);
            }
            acc.value()
        };
        let mut constant = Complex64::from_polar(vprod.abs(), ext_phase) * vprod.signum();
        for (i, e) in d.edges.iter().enumerate() {
            if d.free.contains(&i)
                || coupled.contains(&i)
                || e.expr.depends_on(FREE0)
                || e.expr.depends_on(FREE1)
            {
                continue;
            }
            let arg = e.expr.eval(ext, &[zero, zero]);
            match e.kind {
                EdgeKind::Prop { omega } => constant *= env.propagator(omega, arg),
                EdgeKind::Pot => constant *= env.potential(arg.k),
            }
        }
        for ins in &d.insertions {
            let ex = &d.edges[ins.edge].expr;
            if !ex.depends_on(FREE0) && !ex.depends_on(FREE1) {
                constant *= env.insertion(ins.kind, ex.eval(ext, &[zero, zero]));
            }
        }
        total += constant * group(0, FREE0) * group(1, FREE1);
    }
    total
}

/// Evaluate one diagram by direct summation over the loop supports; the
/// two-loop case factorizes into two one-dimensional sums whenever no
/// line couples the loops.
pub fn eval_diagram<E: KernelEnv>(d: &Diagram, env: &E, ext: &[Momentum; 3]) -> Complex64 {
    let weight = env.loop_weight();
    let coupling = env.coupling(d.order);
    let mut acc = KahanComplex::new();
    match d.free.len() {
        0 => {
            let free = [Momentum::new(0.0, 0.0); 2];
            acc.add(term_value(d, env, ext, &free, usize::MAX, usize::MAX));
        }
        1 => {
            let omega = prop_omega(d, d.free[0]);
            for &(kk, val) in env.loop_points(omega) {
                let free = [kk, Momentum::new(0.0, 0.0)];
                let mut term = term_value(d, env, ext, &free, d.free[0], usize::MAX);
                term *= val;
                acc.add(term);
            }
        }
        _ if separable(d) => {
            acc.add(eval_separable(d, env, ext));
        }
        _ if pot_entangled_only(d) && env.potential_range().is_some() => {
            let pot = env.potential_range().expect("checked above");
            acc.add(eval_pot_separated(d, env, pot, ext));
        }
        _ => {
            let om0 = prop_omega(d, d.free[0]);
            let om1 = prop_omega(d, d.free[1]);
            let pts1: Vec<(Momentum, Complex64)> = env.loop_points(om1).to_vec();
            for &(kk0, val0) in env.loop_points(om0) {
                for &(kk1, val1) in &pts1 {
                    let free = [kk0, kk1];
                    let mut term = term_value(d, env, ext, &free, d.free[0], d.free[1]);
                    term *= val0 * val1;
                    acc.add(term);
                }
            }
        }
    }
    acc.value() * d.coeff * coupling * weight.powi(d.free.len() as i32)
}

fn eval_separable<E: KernelEnv>(d: &Diagram, env: &E, ext: &[Momentum; 3]) -> Complex64 {
    let zero = Momentum::new(0.0, 0.0);
    let group_product = |slot: usize, kk: Momentum| -> Complex64 {
        let free = if slot == FREE0 { [kk, zero] } else { [zero, kk] };
        let mut value = Complex64::new(1.0, 0.0);
        for (i, e) in d.edges.iter().enumerate() {
            if d.free.contains(&i) || !e.expr.depends_on(slot) {
                continue;
            }
            let arg = e.expr.eval(ext, &free);
            match e.kind {
                EdgeKind::Prop { omega } => value *= env.propagator(omega, arg),
                EdgeKind::Pot => value *= env.potential(arg.k),
            }
        }
        for ins in &d.insertions {
            if d.edges[ins.edge].expr.depends_on(slot) {
                value *= env.insertion(ins.kind, d.edges[ins.edge].expr.eval(ext, &free));
            }
        }
        value
    };
    // constant factors: edges and insertions blind to both loops
    let mut constant = Complex64::new(1.0, 0.0);
    for (i, e) in d.edges.iter().enumerate() {
        if d.free.contains(&i) || e.expr.depends_on(FREE0) || e.expr.depends_on(FREE1) {
            continue;
        }
        let arg = e.expr.eval(ext, &[zero, zero]);
        match e.kind {
            EdgeKind::Prop { omega } => constant *= env.propagator(omega, arg),
            EdgeKind::Pot => constant *= env.potential(arg.k),
        }
    }
    for ins in &d.insertions {
        let ex = &d.edges[ins.edge].expr;
        if !ex.depends_on(FREE0) && !ex.depends_on(FREE1) {
            constant *= env.insertion(ins.kind, ex.eval(ext, &[zero, zero]));
        }
    }
    let mut sums = [Complex64::new(0.0, 0.0); 2];
    for (idx, &slot) in [FREE0, FREE1].iter().enumerate() {
        let omega = prop_omega(d, d.free[idx]);
        let mut acc = KahanComplex::new();
        for &(kk, val) in env.loop_points(omega) {
            acc.add(val * group_product(slot, kk));
        }
        sums[idx] = acc.value();
    }
    constant * sums[0] * sums[1]
}

fn prop_omega(d: &Diagram, edge: usize) -> i8 {
    match d.edges[edge].kind {
        EdgeKind::Prop { omega } => omega,
        EdgeKind::Pot => unreachable!("loop edges are propagators"),
    }
}

fn term_value<E: KernelEnv>(
    d: &Diagram,
    env: &E,
    ext: &[Momentum; 3],
    free: &[Momentum; 2],
    skip_a: usize,
    skip_b: usize,
) -> Complex64 {
    let mut value = Complex64::new(1.0, 0.0);
    for (i, e) in d.edges.iter().enumerate() {
        if i == skip_a || i == skip_b {
            continue;
        }
        let kk = e.expr.eval(ext, free);
        match e.kind {
            EdgeKind::Prop { omega } => value *= env.propagator(omega, kk),
            EdgeKind::Pot => value *= env.potential(kk.k),
        }
        if value.norm_sqr() == 0.0 {
            return value;
        }
    }
    for ins in &d.insertions {
        let kk = d.edges[ins.edge].expr.eval(ext, free);
        value *= env.insertion(ins.kind, kk);
    }
    value
}

/// Evaluate a sum of diagrams at one external momentum (direct path).
pub fn eval_diagrams<E: KernelEnv>(diagrams: &[Diagram], env: &E, ext: &[Momentum; 3]) -> Complex64 {
    let mut acc = KahanComplex::new();
    for d in diagrams {
        acc.add(eval_diagram(d, env, ext));
    }
    acc.value()
}

/// Uniform momentum box for the convolution fast path.
#[derive(Debug, Clone, Copy)]
pub struct BoxGrid {
    pub k0_min: f64,
    pub k_min: f64,
    pub d0: f64,
    pub d1: f64,
    pub n0: usize,
    pub n1: usize,
}

impl BoxGrid {
    pub fn point(&self, i: usize, j: usize) -> Momentum {
        Momentum::new(self.k0_min + self.d0 * i as f64, self.k_min + self.d1 * j as f64)
    }

}

/// Exact discrete convolution `C(c) = sum_a F(a) G(c - a)` of two tables
/// sampled on the same box, by zero-padded FFT. The result grid starts at
/// `f.min + g.min` with the common spacing.
pub fn convolve_boxes(
    f: &BoxGrid,
    fv: &[Complex64],
    g: &BoxGrid,
    gv: &[Complex64],
) -> (BoxGrid, Vec<Complex64>) {
    assert!((f.d0 - g.d0).abs() < 1e-12 && (f.d1 - g.d1).abs() < 1e-12);
    let m0 = (f.n0 + g.n0 - 1).next_power_of_two();
    let m1 = (f.n1 + g.n1 - 1).next_power_of_two();
    let mut a = vec![Complex64::new(0.0, 0.0); m0 * m1];
    let mut b = vec![Complex64::new(0.0, 0.0); m0 * m1];
    for i in 0..f.n0 {
        for j in 0..f.n1 {
            a[i * m1 + j] = fv[i * f.n1 + j];
        }
    }
    for i in 0..g.n0 {
        for j in 0..g.n1 {
            b[i * m1 + j] = gv[i * g.n1 + j];
        }
    }
    fft2(&mut a, m0, m1, false);
    fft2(&mut b, m0, m1, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    fft2(&mut a, m0, m1, true);
    let scale = 1.0 / (m0 * m1) as f64;
    for x in a.iter_mut() {
        *x *= scale;
    }
    let out_grid = BoxGrid {
        k0_min: f.k0_min + g.k0_min,
        k_min: f.k_min + g.k_min,
        d0: f.d0,
        d1: f.d1,
        n0: f.n0 + g.n0 - 1,
        n1: f.n1 + g.n1 - 1,
    };
    let mut out = vec![Complex64::new(0.0, 0.0); out_grid.n0 * out_grid.n1];
    for i in 0..out_grid.n0 {
        for j in 0..out_grid.n1 {
            out[i * out_grid.n1 + j] = a[i * m1 + j];
        }
    }
    (out_grid, out)
}

fn fft2(data: &mut [Complex64], n0: usize, n1: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let row = if inverse {
        planner.plan_fft_inverse(n1)
    } else {
        planner.plan_fft_forward(n1)
    };
    for r in data.chunks_exact_mut(n1) {
        row.process(r);
    }
    let col = if inverse {
        planner.plan_fft_inverse(n0)
    } else {
        planner.plan_fft_forward(n0)
    };
    let mut scratch = vec![Complex64::new(0.0, 0.0); n0];
    for j in 0..n1 {
        for i in 0..n0 {
            scratch[i] = data[i * n1 + j];
        }
        col.process(&mut scratch);
        for i in 0..n0 {
            data[i * n1 + j] = scratch[i];
        }
    }
}

/// Evaluate an entangled two-loop diagram (two loop edges, exactly one
/// solved propagator depending on both) on a set of on-grid external
/// momenta via box convolution. The potential factors are decomposed over
/// the finite range of `v`, attaching plane-wave phases to the loop
/// tables.
///
/// Falls back to `None` when the structure does not match, in which case
/// the caller uses the direct path.
pub fn eval_diagram_convolved<E: KernelEnv>(
    d: &Diagram,
    env: &E,
    potential: Option<&Potential>,
    boxes: &dyn Fn(i8) -> (BoxGrid, Vec<Complex64>),
    ext_list: &[[Momentum; 3]],
) -> Option<Vec<Complex64>> {
    if d.free.len() != 2 || !d.insertions.is_empty() {
        return None;
    }
    // the solved propagator must carry +-F1 +-F2 (+ external part)
    let mixed: Vec<usize> = d
        .edges
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            !d.free.contains(i)
                && matches!(e.kind, EdgeKind::Prop { .. })
                && (e.expr.depends_on(FREE0) || e.expr.depends_on(FREE1))
        })
        .map(|(i, _)| i)
        .collect();
    if mixed.len() != 1 {
        return None;
    }
    let mix = mixed[0];
    let me = &d.edges[mix].expr;
    if me.0[FREE0].abs() != 1 || me.0[FREE1].abs() != 1 {
        return None;
    }
    // potential edges must each touch at most one loop variable linearly
    let mut pot_args: Vec<MomExpr> = Vec::new();
    for e in &d.edges {
        if e.kind == EdgeKind::Pot {
            if e.expr.0[FREE0].abs() > 1 || e.expr.0[FREE1].abs() > 1 {
                return None;
            }
            pot_args.push(e.expr);
        }
    }
    let v_range: i64 = potential.map_or(0, |p| p.range());
    let xs: Vec<i64> = (-v_range..=v_range).collect();
    let n_pot = pot_args.len();
    assert!(n_pot <= 2);

    let (om0, om1) = (prop_omega(d, d.free[0]), prop_omega(d, d.free[1]));
    let mix_omega = prop_omega(d, mix);
    let (g0, t0) = boxes(om0);
    let (g1, t1) = boxes(om1);

    // enumerate potential-range assignments; each dresses the loop tables
    // with plane waves and contributes v(x1) v(x2) e^{-i k-part}
    let mut results = vec![Complex64::new(0.0, 0.0); ext_list.len()];
    let assignments: Vec<Vec<i64>> = match n_pot {
        0 => vec![vec![]],
        1 => xs.iter().map(|&x| vec![x]).collect(),
        _ => xs
            .iter()
            .flat_map(|&x1| xs.iter().map(move |&x2| vec![x1, x2]))
            .collect(),
    };
    let s0 = me.0[FREE0] as f64;
    let s1 = me.0[FREE1] as f64;
    for assign in assignments {
        let mut vprod = 1.0;
        for (&x, _arg) in assign.iter().zip(&pot_args) {
            vprod *= potential.expect("potential present").at(x);
        }
        if vprod == 0.0 {
            continue;
        }
        // phases on loop variables from e^{-i arg . x} per potential edge
        let mut phase0 = 0.0f64; // coefficient of q0-loop spatial momentum
        let mut phase1 = 0.0f64;
        let mut ext_coeff = [0i16; 3];
        for (&x, arg) in assign.iter().zip(&pot_args) {
            phase0 += -(arg.0[FREE0] as f64) * x as f64;
            phase1 += -(arg.0[FREE1] as f64) * x as f64;
            for s in 0..3 {
                ext_coeff[s] += arg.0[s] * x as i16;
            }
        }
        // dressed tables: reflect so the convolution runs over +q
        let dress = |grid: &BoxGrid, tab: &[Complex64], sgn: f64, phase: f64| -> (BoxGrid, Vec<Complex64>) {
            let mut g = *grid;
            let mut t = vec![Complex64::new(0.0, 0.0); tab.len()];
            if sgn < 0.0 {
                g.k0_min = -(grid.k0_min + grid.d0 * (grid.n0 - 1) as f64);
                g.k_min = -(grid.k_min + grid.d1 * (grid.n1 - 1) as f64);
            }
            for i in 0..grid.n0 {
                for j in 0..grid.n1 {
                    let src = if sgn < 0.0 {
                        (grid.n0 - 1 - i) * grid.n1 + (grid.n1 - 1 - j)
                    } else {
                        i * grid.n1 + j
                    };
                    let kk = grid.point(
                        if sgn < 0.0 { grid.n0 - 1 - i } else { i },
                        if sgn < 0.0 { grid.n1 - 1 - j } else { j },
                    );
                    t[i * grid.n1 + j] = tab[src] * Complex64::from_polar(1.0, phase * kk.k);
                }
            }
            (g, t)
        };
        let (ga, ta) = dress(&g0, &t0, s0, phase0);
        let (gb, tb) = dress(&g1, &t1, s1, phase1);
        let (gc, conv) = convolve_boxes(&ga, &ta, &gb, &tb);
        for (ei, ext) in ext_list.iter().enumerate() {
            // mixed edge momentum: s0 F1 + s1 F2 + ext-part
            let mut ext_part = MomExpr::zero();
            for s in 0..3 {
                ext_part.0[s] = me.0[s];
            }
            let ext_kk = ext_part.eval(ext, &[Momentum::new(0.0, 0.0); 2]);
            // external phase from the potential decomposition
            let mut ext_phase = 0.0;
            for s in 0..3 {
                ext_phase += -(ext_coeff[s] as f64) * ext[s].k;
            }
            let mut acc = KahanComplex::new();
            for i in 0..gc.n0 {
                for j in 0..gc.n1 {
                    let c = gc.point(i, j);
                    let arg = Momentum::new(c.k0 + ext_kk.k0, c.k + ext_kk.k);
                    let val = conv[i * gc.n1 + j];
                    if val.norm_sqr() == 0.0 {
                        continue;
                    }
                    acc.add(val * env.propagator(mix_omega, arg));
                }
            }
            results[ei] +=
                acc.value() * vprod * Complex64::from_polar(1.0, ext_phase);
        }
    }
    let weight = env.loop_weight();
    let coupling = env.coupling(d.order);
    Some(
        results
            .into_iter()
            .map(|v| v * d.coeff * coupling * weight * weight)
            .collect(),
    )
}
