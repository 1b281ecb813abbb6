//! Fibered quasi-periodic boundary value problems and partial DN maps.
//!
//! Unknowns are axial modes `|k| <= K` of P1 cross-section fields. A periodic potential
//! `V = sum_m V_m(x') e^{2 pi i m x1}` couples mode `k` to mode `k - m`.

use std::io::{Read, Write};

use faer::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::fem;
use crate::geometry::{BoundaryPartition, CrossSectionMesh, FaceSet, P2};
use crate::linalg::{check_residual, max_generalized_eig, Coo, Csr, SparseLu, C64, ONE, ZERO};
use crate::spectral::{FiberContext, ModeExpansion};

use std::f64::consts::PI;

/// Real 1-periodic potential as axial modes `-M..=M` of nodal fields.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    pub mmax: usize,
    pub modes: Vec<Vec<C64>>,
    pub m_plus: f64,
    pub m_minus: f64,
}

impl PotentialField {
    pub fn zero(n_nodes: usize) -> Self {
        PotentialField { mmax: 0, modes: vec![vec![ZERO; n_nodes]], m_plus: 0.0, m_minus: 0.0 }
    }

    pub fn constant(n_nodes: usize, c: f64) -> Self {
        PotentialField {
            mmax: 0,
            modes: vec![vec![C64::new(c, 0.0); n_nodes]],
            m_plus: c.abs(),
            m_minus: (-c).max(0.0),
        }
    }

    /// Samples `f(x1, x')` on a uniform axial grid and keeps modes `|m| <= mmax`.
    /// Bounds are set from the samples.
    pub fn from_fn(mesh: &CrossSectionMesh, mmax: usize, f: impl Fn(f64, P2) -> f64) -> Self {
        let n = (4 * mmax + 4).max(8);
        let nn = mesh.n_nodes();
        let samples: Vec<Vec<f64>> =
            (0..n).map(|j| mesh.vertices.iter().map(|&p| f(j as f64 / n as f64, p)).collect()).collect();
        let mut modes = vec![vec![ZERO; nn]; 2 * mmax + 1];
        for (s, m) in modes.iter_mut().enumerate() {
            let mm = s as f64 - mmax as f64;
            for (j, row) in samples.iter().enumerate() {
                let ph = C64::from_polar(1.0 / n as f64, -2.0 * PI * mm * j as f64 / n as f64);
                for (a, v) in m.iter_mut().zip(row) {
                    *a += ph * v;
                }
            }
        }
        let mut v = PotentialField { mmax, modes, m_plus: 0.0, m_minus: 0.0 };
        v.symmetrize();
        let (lo, hi) = v.sample_range();
        v.m_plus = lo.abs().max(hi.abs());
        v.m_minus = (-lo).max(0.0);
        v
    }

    /// Force `V_{-m} = conj(V_m)` exactly.
    fn symmetrize(&mut self) {
        let m0 = self.mmax;
        for i in 0..self.modes[0].len() {
            self.modes[m0][i].im = 0.0;
        }
        for m in 1..=m0 {
            for i in 0..self.modes[0].len() {
                let avg = (self.modes[m0 + m][i] + self.modes[m0 - m][i].conj()) * 0.5;
                self.modes[m0 + m][i] = avg;
                self.modes[m0 - m][i] = avg.conj();
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.modes[0].len()
    }

    pub fn mode(&self, m: i64) -> Option<&[C64]> {
        if m.unsigned_abs() as usize > self.mmax {
            None
        } else {
            Some(&self.modes[(m + self.mmax as i64) as usize])
        }
    }

    pub fn is_zero(&self) -> bool {
        self.modes.iter().flatten().all(|v| *v == ZERO)
    }

    /// Values at `(x1, node)`.
    pub fn eval(&self, x1: f64, node: usize) -> f64 {
        let m0 = self.mmax as i64;
        (-m0..=m0)
            .map(|m| self.modes[(m + m0) as usize][node] * C64::from_polar(1.0, 2.0 * PI * m as f64 * x1))
            .sum::<C64>()
            .re
    }

    /// Minimum and maximum over the nodal values on a uniform axial grid.
    pub fn sample_range(&self) -> (f64, f64) {
        let n = (4 * self.mmax + 4).max(8);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..n {
            for i in 0..self.n_nodes() {
                let v = self.eval(j as f64 / n as f64, i);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    /// `self + s * other`, bounds recomputed from samples.
    pub fn add_scaled(&self, other: &PotentialField, s: f64) -> PotentialField {
        let mmax = self.mmax.max(other.mmax);
        let nn = self.n_nodes();
        let mut modes = vec![vec![ZERO; nn]; 2 * mmax + 1];
        for m in -(mmax as i64)..=mmax as i64 {
            let slot = (m + mmax as i64) as usize;
            if let Some(a) = self.mode(m) {
                for (d, v) in modes[slot].iter_mut().zip(a) {
                    *d += v;
                }
            }
            if let Some(b) = other.mode(m) {
                for (d, v) in modes[slot].iter_mut().zip(b) {
                    *d += v * s;
                }
            }
        }
        let mut v = PotentialField { mmax, modes, m_plus: 0.0, m_minus: 0.0 };
        let (lo, hi) = v.sample_range();
        v.m_plus = lo.abs().max(hi.abs());
        v.m_minus = (-lo).max(0.0);
        v
    }

    /// Checks reality, the declared bounds and `M_- < C_omega`.
    pub fn validate(&self, c_omega: f64) -> Result<()> {
        let m0 = self.mmax;
        let scale = self.modes.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
        for m in 0..=m0 {
            for i in 0..self.n_nodes() {
                if (self.modes[m0 + m][i] - self.modes[m0 - m][i].conj()).norm() > 1e-12 * scale {
                    return invalid(format!("potential is not real: mode {m} at node {i}"));
                }
            }
        }
        if self.modes.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return invalid("potential has non-finite values");
        }
        let (lo, hi) = self.sample_range();
        let tol = 1e-12 * scale;
        if hi.abs().max(lo.abs()) > self.m_plus + tol {
            return invalid(format!("|V| reaches {:.6} above M+ = {}", hi.abs().max(lo.abs()), self.m_plus));
        }
        if (-lo).max(0.0) > self.m_minus + tol {
            return invalid(format!("negative part reaches {:.6} above M- = {}", -lo, self.m_minus));
        }
        if self.m_minus >= c_omega {
            return invalid(format!("M- = {} is not below the Poincare constant {c_omega:.6}", self.m_minus));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.mmax as u64).to_le_bytes());
        for v in self.modes.iter().flatten() {
            h.update(v.re.to_le_bytes());
            h.update(v.im.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// Per-mode nodal values on the boundary loop, slot `k + kmax`, position along the loop.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    pub kmax: usize,
    pub values: Vec<Vec<C64>>,
}

/// Dirichlet traces on the cell boundary.
pub type DirichletData = BoundaryField;

impl BoundaryField {
    pub fn zeros(kmax: usize, n_boundary: usize) -> Self {
        BoundaryField { kmax, values: vec![vec![ZERO; n_boundary]; 2 * kmax + 1] }
    }

    pub fn mode(&self, k: i64) -> &[C64] {
        &self.values[(k + self.kmax as i64) as usize]
    }

    pub fn mode_mut(&mut self, k: i64) -> &mut Vec<C64> {
        let s = (k + self.kmax as i64) as usize;
        &mut self.values[s]
    }

    /// Boundary trace of a mode expansion.
    pub fn trace(mesh: &CrossSectionMesh, e: &ModeExpansion) -> Self {
        BoundaryField {
            kmax: e.kmax,
            values: e.modes.iter().map(|m| mesh.boundary_nodes.iter().map(|&i| m[i]).collect()).collect(),
        }
    }

    /// Non-zero values are allowed only at nodes whose hat function is supported in `face`.
    pub fn check_support(&self, mesh: &CrossSectionMesh, face: &FaceSet) -> Result<()> {
        let mut allowed = vec![false; mesh.n_boundary()];
        for p in face.interior_node_positions(mesh) {
            allowed[p] = true;
        }
        for (s, m) in self.values.iter().enumerate() {
            for (p, v) in m.iter().enumerate() {
                if *v != ZERO && !allowed[p] {
                    return invalid(format!(
                        "Dirichlet data in mode slot {s} is nonzero at boundary position {p} outside the input face"
                    ));
                }
            }
        }
        Ok(())
    }

    /// `sum_k int_{edges} a_k conj(b_k)` over the listed boundary edges.
    pub fn pairing(&self, other: &BoundaryField, bmass: &Csr) -> C64 {
        self.values.iter().zip(&other.values).map(|(a, b)| bmass.form(b, a)).sum()
    }

    pub fn norm_sq(&self, bmass: &Csr) -> f64 {
        self.pairing(self, bmass).re
    }

    pub fn sub(&self, other: &BoundaryField) -> BoundaryField {
        BoundaryField {
            kmax: self.kmax,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }
}

/// Factorized block system of one fiber, reused for every boundary datum.
pub struct FiberSolver {
    pub ctx: FiberContext,
    n: usize,
    /// Full block matrix over all nodes of all modes.
    a_full: Csr,
    a_ii: Csr,
    lu: SparseLu,
    interior_global: Vec<usize>,
    global_to_interior: Vec<Option<usize>>,
    mass: Csr,
    bmass_lu: SparseLu,
}

impl FiberSolver {
    pub fn new(v: &PotentialField, ctx: &FiberContext) -> Result<Self> {
        let mesh = &*ctx.mesh;
        if v.n_nodes() != mesh.n_nodes() {
            return invalid("potential and mesh have different node counts");
        }
        let n = mesh.n_nodes();
        let nm = ctx.n_modes();
        let stiff = fem::stiffness(mesh);
        let mass = fem::mass(mesh);
        let m0 = v.mmax as i64;
        let wm: Vec<Option<Csr>> = (-m0..=m0)
            .map(|m| {
                let f = v.mode(m).unwrap();
                if f.iter().all(|x| *x == ZERO) {
                    None
                } else {
                    Some(fem::weighted_mass(mesh, f))
                }
            })
            .collect();
        let mut coo = Coo::with_capacity(nm * n, nm * n, nm * (stiff.nnz() * (2 + wm.len())));
        let k0 = ctx.kmax as i64;
        for k in -k0..=k0 {
            let row0 = ((k + k0) as usize) * n;
            let b2 = ctx.beta(k).powi(2);
            for i in 0..n {
                for (j, s) in stiff.row(i) {
                    coo.push(row0 + i, row0 + j, s);
                }
                for (j, m) in mass.row(i) {
                    coo.push(row0 + i, row0 + j, m * b2);
                }
            }
            for m in -m0..=m0 {
                let j = k - m;
                if j.abs() > k0 {
                    continue;
                }
                if let Some(w) = &wm[(m + m0) as usize] {
                    let col0 = ((j + k0) as usize) * n;
                    for i in 0..n {
                        for (c, x) in w.row(i) {
                            coo.push(row0 + i, col0 + c, x);
                        }
                    }
                }
            }
        }
        Self::from_matrix(ctx, coo.build())
    }

    /// Solver for an already assembled block operator over all nodes of all modes,
    /// ordered mode-major as in `ModeExpansion::to_flat`.
    pub fn from_matrix(ctx: &FiberContext, a_full: Csr) -> Result<Self> {
        let mesh = &*ctx.mesh;
        let n = mesh.n_nodes();
        let nm = ctx.n_modes();
        if a_full.nrows != nm * n || a_full.ncols != nm * n {
            return invalid("block operator does not match the fiber context");
        }
        let mass = fem::mass(mesh);
        let mut interior_global = Vec::new();
        let mut global_to_interior = vec![None; nm * n];
        for s in 0..nm {
            for i in 0..n {
                if !mesh.is_boundary(i) {
                    global_to_interior[s * n + i] = Some(interior_global.len());
                    interior_global.push(s * n + i);
                }
            }
        }
        let a_ii = a_full.select(&interior_global, &interior_global);
        let lu = SparseLu::new(&a_ii)?;
        let bmass_lu = SparseLu::new(&fem::boundary_mass(mesh, 0..mesh.n_boundary()))?;
        Ok(FiberSolver { ctx: ctx.clone(), n, a_full, a_ii, lu, interior_global, global_to_interior, mass, bmass_lu })
    }

    fn mesh(&self) -> &CrossSectionMesh {
        &self.ctx.mesh
    }

    fn source_load(&self, source: Option<&ModeExpansion>) -> Vec<C64> {
        let nm = self.ctx.n_modes();
        let mut f = vec![ZERO; nm * self.n];
        if let Some(src) = source {
            for (s, m) in src.modes.iter().enumerate().take(nm) {
                let mf = self.mass.matvec(m);
                f[s * self.n..(s + 1) * self.n].copy_from_slice(&mf);
            }
        }
        f
    }

    /// Solve `(-Lap + V) v = source` with Dirichlet trace `g`.
    pub fn solve(&self, g: &DirichletData, source: Option<&ModeExpansion>) -> Result<ModeExpansion> {
        let mut u = self.solve_many(std::slice::from_ref(g), source)?;
        Ok(u.pop().unwrap())
    }

    /// Several Dirichlet data against the same factorization.
    pub fn solve_many(&self, gs: &[DirichletData], source: Option<&ModeExpansion>) -> Result<Vec<ModeExpansion>> {
        let mesh = self.mesh();
        let nm = self.ctx.n_modes();
        let n = self.n;
        let load = self.source_load(source);
        let ni = self.interior_global.len();
        let mut fulls = Vec::with_capacity(gs.len());
        let mut rhs = Mat::<C64>::zeros(ni, gs.len());
        for (c, g) in gs.iter().enumerate() {
            if g.kmax != self.ctx.kmax || g.values.iter().any(|m| m.len() != mesh.n_boundary()) {
                return invalid("Dirichlet data shape does not match the fiber context");
            }
            let mut full = vec![ZERO; nm * n];
            for (s, m) in g.values.iter().enumerate() {
                for (p, &node) in mesh.boundary_nodes.iter().enumerate() {
                    full[s * n + node] = m[p];
                }
            }
            let au = self.a_full.matvec(&full);
            for (q, &gi) in self.interior_global.iter().enumerate() {
                rhs[(q, c)] = load[gi] - au[gi];
            }
            fulls.push(full);
        }
        let sol = self.lu.solve_many(&rhs);
        let mut out = Vec::with_capacity(gs.len());
        for (c, mut full) in fulls.into_iter().enumerate() {
            let x: Vec<C64> = (0..ni).map(|q| sol[(q, c)]).collect();
            let b: Vec<C64> = (0..ni).map(|q| rhs[(q, c)]).collect();
            check_residual(&self.a_ii, &x, &b, "fiber problem")?;
            for (q, &gi) in self.interior_global.iter().enumerate() {
                full[gi] = x[q];
            }
            out.push(ModeExpansion::from_flat(self.ctx.theta, self.ctx.kmax, n, &full));
        }
        Ok(out)
    }

    /// Nodal normal derivative on the boundary by variational flux recovery:
    /// the residual of the weak form at boundary test functions, mapped through the
    /// boundary mass matrix.
    pub fn flux(&self, u: &ModeExpansion, source: Option<&ModeExpansion>) -> BoundaryField {
        let r = self.boundary_residual(u, source);
        BoundaryField { kmax: self.ctx.kmax, values: r.values.iter().map(|m| self.bmass_lu.solve(m)).collect() }
    }

    /// Weak-form residual `int grad u . grad phi_p + ... - int f phi_p` at boundary hats,
    /// which equals `int_{boundary} (d_nu u) phi_p`.
    pub fn boundary_residual(&self, u: &ModeExpansion, source: Option<&ModeExpansion>) -> BoundaryField {
        let mesh = self.mesh();
        let n = self.n;
        let full = u.to_flat();
        let au = self.a_full.matvec(&full);
        let load = self.source_load(source);
        let values = (0..self.ctx.n_modes())
            .map(|s| mesh.boundary_nodes.iter().map(|&i| au[s * n + i] - load[s * n + i]).collect())
            .collect();
        BoundaryField { kmax: self.ctx.kmax, values }
    }

    /// `g -> d_nu v_g` on the whole boundary.
    pub fn dn_apply(&self, g: &DirichletData) -> Result<BoundaryField> {
        let u = self.solve(g, None)?;
        Ok(self.flux(&u, None))
    }

    pub fn interior_index(&self, global: usize) -> Option<usize> {
        self.global_to_interior[global]
    }

    pub fn mass(&self) -> &Csr {
        &self.mass
    }
}

pub fn solve_fibered_bvp(
    v: &PotentialField,
    ctx: &FiberContext,
    g: &DirichletData,
    source: Option<&ModeExpansion>,
) -> Result<ModeExpansion> {
    FiberSolver::new(v, ctx)?.solve(g, source)
}

/// Harmonic (V = 0) lifts of every input basis function, block-diagonal in the mode.
fn harmonic_gram(ctx: &FiberContext, inputs: &[(i64, usize)]) -> Result<Mat<C64>> {
    let mesh = &*ctx.mesh;
    let stiff = fem::stiffness(mesh);
    let mass = fem::mass(mesh);
    let interior = mesh.interior_nodes();
    let ni = inputs.len();
    let mut gram = Mat::<C64>::zeros(ni, ni);
    for k in ctx.modes() {
        let cols: Vec<usize> = (0..ni).filter(|&c| inputs[c].0 == k).collect();
        if cols.is_empty() {
            continue;
        }
        let a = fem::add(&stiff, &mass, C64::new(ctx.beta(k).powi(2), 0.0));
        let a_ii = a.select(&interior, &interior);
        let lu = SparseLu::new(&a_ii)?;
        let bnodes: Vec<usize> = cols.iter().map(|&c| mesh.boundary_nodes[inputs[c].1]).collect();
        let a_ib = a.select(&interior, &bnodes);
        let mut rhs = Mat::<C64>::zeros(interior.len(), cols.len());
        for (c, _) in cols.iter().enumerate() {
            let mut e = vec![ZERO; cols.len()];
            e[c] = ONE;
            let col = a_ib.matvec(&e);
            for (q, v) in col.iter().enumerate() {
                rhs[(q, c)] = -v;
            }
        }
        let sol = lu.solve_many(&rhs);
        let lifts: Vec<Vec<C64>> = (0..cols.len())
            .map(|c| {
                let mut f = vec![ZERO; mesh.n_nodes()];
                for (q, &i) in interior.iter().enumerate() {
                    f[i] = sol[(q, c)];
                }
                f[bnodes[c]] = ONE;
                f
            })
            .collect();
        let mls: Vec<Vec<C64>> = lifts.iter().map(|l| mass.matvec(l)).collect();
        for (a_, &ca) in cols.iter().enumerate() {
            for (b_, &cb) in cols.iter().enumerate() {
                gram[(ca, cb)] = crate::linalg::dot(&lifts[a_], &mls[b_]);
            }
        }
    }
    Ok(gram)
}

pub const NORM_CONVENTION: &str = "input: L2 norm of the harmonic lift over the cell; output: L2 over the output face";

/// Matrix form of the partial DN map on one fiber.
#[derive(Clone, Debug)]
pub struct PartialDNMap {
    pub meta: DnMeta,
    /// Rows follow `meta.outputs`, columns follow `meta.inputs`.
    pub matrix: Mat<C64>,
    pub gram: Mat<C64>,
    /// Output quadrature (boundary mass on the output face), block diagonal in the mode.
    pub out_weight: Mat<C64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnMeta {
    pub theta: f64,
    pub kmax: usize,
    pub mesh_hash: String,
    pub potential_hash: String,
    pub input_edges: Vec<usize>,
    pub output_edges: Vec<usize>,
    /// (mode, boundary position) per column.
    pub inputs: Vec<(i64, usize)>,
    /// (mode, boundary position) per row.
    pub outputs: Vec<(i64, usize)>,
    pub norms: String,
}

impl DnMeta {
    fn compatible(&self, o: &DnMeta) -> bool {
        self.theta == o.theta
            && self.kmax == o.kmax
            && self.mesh_hash == o.mesh_hash
            && self.input_edges == o.input_edges
            && self.output_edges == o.output_edges
            && self.inputs == o.inputs
            && self.outputs == o.outputs
    }
}

/// Input basis: axial modes times boundary hats supported in `f`.
pub fn input_basis(ctx: &FiberContext, f: &FaceSet) -> Vec<(i64, usize)> {
    let pos = f.interior_node_positions(&ctx.mesh);
    ctx.modes().flat_map(|k| pos.iter().map(move |&p| (k, p))).collect()
}

pub fn output_basis(ctx: &FiberContext, g: &FaceSet) -> Vec<(i64, usize)> {
    let pos = g.touched_node_positions(&ctx.mesh);
    ctx.modes().flat_map(|k| pos.iter().map(move |&p| (k, p))).collect()
}

const COLUMN_BATCH: usize = 64;

pub fn assemble_partial_dn(v: &PotentialField, ctx: &FiberContext, f: &FaceSet, g: &FaceSet) -> Result<PartialDNMap> {
    let solver = FiberSolver::new(v, ctx)?;
    assemble_with_solver(&solver, v, f, g)
}

pub fn assemble_with_solver(solver: &FiberSolver, v: &PotentialField, f: &FaceSet, g: &FaceSet) -> Result<PartialDNMap> {
    let ctx = &solver.ctx;
    let mesh = &*ctx.mesh;
    let inputs = input_basis(ctx, f);
    let outputs = output_basis(ctx, g);
    if inputs.is_empty() || outputs.is_empty() {
        return invalid("input or output face carries no boundary basis functions");
    }
    let mut matrix = Mat::<C64>::zeros(outputs.len(), inputs.len());
    for chunk0 in (0..inputs.len()).step_by(COLUMN_BATCH) {
        let chunk = &inputs[chunk0..(chunk0 + COLUMN_BATCH).min(inputs.len())];
        let data: Vec<DirichletData> = chunk
            .iter()
            .map(|&(k, p)| {
                let mut d = DirichletData::zeros(ctx.kmax, mesh.n_boundary());
                d.mode_mut(k)[p] = ONE;
                d
            })
            .collect();
        let sols = solver.solve_many(&data, None)?;
        for (c, u) in sols.iter().enumerate() {
            let q = solver.flux(u, None);
            for (r, &(k, p)) in outputs.iter().enumerate() {
                matrix[(r, chunk0 + c)] = q.mode(k)[p];
            }
        }
    }
    let gram = harmonic_gram(ctx, &inputs)?;
    let out_weight = output_weight(mesh, g, &outputs);
    let meta = DnMeta {
        theta: ctx.theta,
        kmax: ctx.kmax,
        mesh_hash: mesh.hash(),
        potential_hash: v.hash(),
        input_edges: f.edges.clone(),
        output_edges: g.edges.clone(),
        inputs,
        outputs,
        norms: NORM_CONVENTION.into(),
    };
    Ok(PartialDNMap { meta, matrix, gram, out_weight })
}

fn output_weight(mesh: &CrossSectionMesh, g: &FaceSet, outputs: &[(i64, usize)]) -> Mat<C64> {
    let bm = fem::boundary_mass(mesh, g.edges.iter().copied());
    let n = outputs.len();
    let mut w = Mat::<C64>::zeros(n, n);
    let mut index = std::collections::HashMap::new();
    for (r, o) in outputs.iter().enumerate() {
        index.insert(*o, r);
    }
    for (r, &(k, p)) in outputs.iter().enumerate() {
        for (q, val) in bm.row(p) {
            if let Some(&c) = index.get(&(k, q)) {
                w[(r, c)] = val;
            }
        }
    }
    w
}

/// Inputs above which the norm falls back to power iteration.
pub const DENSE_EIG_LIMIT: usize = 2000;

/// `sup ||(L1 - L2) g||_{L2(G)} / ||g||` over the discrete input space.
pub fn dn_difference_norm(a: &PartialDNMap, b: &PartialDNMap) -> Result<f64> {
    if !a.meta.compatible(&b.meta) {
        return invalid("DN maps have different fibers, meshes or faces");
    }
    operator_norm(&(&a.matrix - &b.matrix), &a.out_weight, &a.gram)
}

/// `sup ||D c||_W / ||c||_gram` for an output quadrature `W` and input Gram matrix.
pub fn operator_norm(d: &Mat<C64>, out_weight: &Mat<C64>, gram: &Mat<C64>) -> Result<f64> {
    if d.norm_max() == 0.0 {
        return Ok(0.0);
    }
    let normal = d.adjoint() * out_weight * d;
    let lam = if d.ncols() > DENSE_EIG_LIMIT {
        generalized_power_iteration(&normal, gram)?
    } else {
        max_generalized_eig(&normal, gram)?
    };
    Ok(lam.max(0.0).sqrt())
}

fn generalized_power_iteration(a: &Mat<C64>, b: &Mat<C64>) -> Result<f64> {
    use faer::linalg::solvers::Solve;
    let llt = b.llt(faer::Side::Lower).map_err(|_| Error::Solver("Gram matrix is not positive definite".into()))?;
    let n = a.nrows();
    let mut x = Mat::<C64>::from_fn(n, 1, |i, _| C64::new(1.0 + (i % 7) as f64 * 0.1, 0.0));
    let mut lam = 0.0;
    for _ in 0..2000 {
        let y = llt.solve(a * &x);
        let bx = b * &y;
        let nrm = (y.adjoint() * &bx)[(0, 0)].re.sqrt();
        x = y * faer::Scale(C64::new(1.0 / nrm, 0.0));
        let new = (x.adjoint() * a * &x)[(0, 0)].re;
        if (new - lam).abs() <= 1e-12 * new.abs() {
            return Ok(new);
        }
        lam = new;
    }
    Ok(lam)
}

/// Largest fiber norm over a theta-grid, and the maximizing theta.
pub fn dn_sup_over_fibers(
    v1: &PotentialField,
    v2: &PotentialField,
    mesh: std::sync::Arc<CrossSectionMesh>,
    kmax: usize,
    thetas: &[f64],
    part: &BoundaryPartition,
) -> Result<(f64, f64)> {
    if thetas.is_empty() {
        return invalid("empty theta-grid");
    }
    let mut best = (f64::NEG_INFINITY, thetas[0]);
    for &th in thetas {
        let ctx = FiberContext::new(th, kmax, mesh.clone())?;
        let a = assemble_partial_dn(v1, &ctx, &part.f, &part.g)?;
        let b = assemble_partial_dn(v2, &ctx, &part.f, &part.g)?;
        let gamma = dn_difference_norm(&a, &b)?;
        if gamma > best.0 {
            best = (gamma, th);
        }
    }
    Ok(best)
}

impl PartialDNMap {
    pub const MAGIC: &'static [u8; 8] = b"PCALDNMP";

    /// Binary container: magic, three matrices (rows, cols, column-major re/im pairs).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        for m in [&self.matrix, &self.gram, &self.out_weight] {
            w.write_all(&(m.nrows() as u64).to_le_bytes())?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for j in 0..m.ncols() {
                for i in 0..m.nrows() {
                    w.write_all(&m[(i, j)].re.to_le_bytes())?;
                    w.write_all(&m[(i, j)].im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, meta: DnMeta) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a DN map container".into()));
        }
        let mut read_mat = || -> Result<Mat<C64>> {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            let rows = u64::from_le_bytes(b8) as usize;
            r.read_exact(&mut b8)?;
            let cols = u64::from_le_bytes(b8) as usize;
            let mut m = Mat::<C64>::zeros(rows, cols);
            for j in 0..cols {
                for i in 0..rows {
                    r.read_exact(&mut b8)?;
                    let re = f64::from_le_bytes(b8);
                    r.read_exact(&mut b8)?;
                    m[(i, j)] = C64::new(re, f64::from_le_bytes(b8));
                }
            }
            Ok(m)
        };
        let matrix = read_mat()?;
        let gram = read_mat()?;
        let out_weight = read_mat()?;
        if matrix.ncols() != meta.inputs.len() || matrix.nrows() != meta.outputs.len() {
            return Err(Error::Format("DN container does not match its metadata".into()));
        }
        Ok(PartialDNMap { meta, matrix, gram, out_weight })
    }

    /// Norm of an input coefficient vector in the Gram metric.
    pub fn input_norm(&self, c: &[C64]) -> f64 {
        let x = Mat::<C64>::from_fn(c.len(), 1, |i, _| c[i]);
        (x.adjoint() * &self.gram * &x)[(0, 0)].re.max(0.0).sqrt()
    }
}

/// Columns `sin(j pi (r + 1) / (n + 1))`, `j = 1..=nf`, per axial mode, where `r` ranks the
/// `n` boundary positions of `list` along their arc. Rows follow `list`. Used to compare
/// discretized operators on smooth data instead of hat functions.
pub fn smooth_face_basis(mesh: &CrossSectionMesh, kmax: usize, list: &[(i64, usize)], nf: usize) -> Mat<C64> {
    let nb = mesh.n_boundary();
    let mut pos: Vec<usize> = list.iter().map(|x| x.1).collect();
    pos.sort_unstable();
    pos.dedup();
    let n = pos.len();
    let mut start = 0;
    for i in 0..n {
        if (pos[(i + 1) % n] + nb - pos[i]) % nb > 1 {
            start = (i + 1) % n;
        }
    }
    let rank: std::collections::HashMap<usize, usize> = (0..n).map(|r| (pos[(start + r) % n], r)).collect();
    let k0 = kmax as i64;
    Mat::from_fn(list.len(), nf * (2 * kmax + 1), |r, c| {
        let (k, p) = list[r];
        if k != (c / nf) as i64 - k0 {
            return ZERO;
        }
        let j = (c % nf + 1) as f64;
        C64::new((j * PI * (rank[&p] + 1) as f64 / (n + 1) as f64).sin(), 0.0)
    })
}

/// Dirichlet datum of a single input basis column.
pub fn basis_datum(ctx: &FiberContext, input: (i64, usize)) -> DirichletData {
    let mut d = DirichletData::zeros(ctx.kmax, ctx.mesh.n_boundary());
    d.mode_mut(input.0)[input.1] = ONE;
    d
}

/// Trace of `e^{zeta' . x'}` placed in axial mode `k`.
pub fn exponential_trace(ctx: &FiberContext, k: i64, zeta_perp: [C64; 2]) -> DirichletData {
    let mesh = &*ctx.mesh;
    let mut d = DirichletData::zeros(ctx.kmax, mesh.n_boundary());
    for (p, &i) in mesh.boundary_nodes.iter().enumerate() {
        let x = mesh.vertices[i];
        d.mode_mut(k)[p] = (zeta_perp[0] * x[0] + zeta_perp[1] * x[1]).exp();
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, CrossSectionSpec};
    use std::sync::Arc;

    fn ctx(theta: f64, k: usize, h: f64) -> FiberContext {
        FiberContext::new(theta, k, Arc::new(build_mesh(&CrossSectionSpec::disk(1.0, h)).unwrap())).unwrap()
    }

    #[test]
    fn zero_problem_has_zero_solution() {
        let c = ctx(0.3, 1, 0.25);
        let v = PotentialField::zero(c.mesh.n_nodes());
        let g = DirichletData::zeros(1, c.mesh.n_boundary());
        let u = solve_fibered_bvp(&v, &c, &g, None).unwrap();
        assert!(u.modes.iter().flatten().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn exponential_is_harmonic() {
        let c = ctx(0.0, 1, 0.05);
        let v = PotentialField::zero(c.mesh.n_nodes());
        // zeta = (2 pi i, 2 pi, 0) has zeta . zeta = 0.
        let zp = [C64::new(2.0 * PI, 0.0), ZERO];
        let g = exponential_trace(&c, 1, zp);
        let u = solve_fibered_bvp(&v, &c, &g, None).unwrap();
        let exact: Vec<C64> = c.mesh.vertices.iter().map(|p| C64::new(2.0 * PI * p[0], 0.0).exp()).collect();
        let err: f64 = u.mode(1).iter().zip(&exact).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let scale = exact.iter().map(|x| x.norm()).fold(0.0, f64::max);
        assert!(err < 2e-2 * scale, "err {err} scale {scale}");
        assert!(u.mode(0).iter().all(|x| x.norm() < 1e-12));
    }

    #[test]
    fn potential_from_fn_is_real_and_bounded() {
        let m = build_mesh(&CrossSectionSpec::disk(1.0, 0.3)).unwrap();
        let v = PotentialField::from_fn(&m, 2, |x1, p| 0.5 + 0.3 * (2.0 * PI * x1).cos() * p[0]);
        v.validate(2.4).unwrap();
        assert!((v.mode(0).unwrap()[0].re - 0.5).abs() < 1e-12);
        let mut bad = v.clone();
        bad.modes[0][0] += C64::new(0.0, 1.0);
        assert!(bad.validate(2.4).is_err());
        let neg = PotentialField::constant(m.n_nodes(), -3.0);
        assert!(neg.validate(2.4).is_err());
    }

    #[test]
    fn dn_of_equal_potentials_differ_by_zero() {
        let c = ctx(0.5, 1, 0.3);
        let v = PotentialField::constant(c.mesh.n_nodes(), 1.0);
        let f = FaceSet::all(&c.mesh);
        let a = assemble_partial_dn(&v, &c, &f, &f).unwrap();
        let b = assemble_partial_dn(&v, &c, &f, &f).unwrap();
        assert_eq!(dn_difference_norm(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn gram_matches_direct_lift_norm() {
        let c = ctx(0.9, 1, 0.3);
        let f = FaceSet::all(&c.mesh);
        let v0 = PotentialField::zero(c.mesh.n_nodes());
        let map = assemble_partial_dn(&v0, &c, &f, &f).unwrap();
        let solver = FiberSolver::new(&v0, &c).unwrap();
        for col in [0usize, 5, map.meta.inputs.len() - 1] {
            let g = basis_datum(&c, map.meta.inputs[col]);
            let u = solver.solve(&g, None).unwrap();
            let direct = u.norm_sq(solver.mass());
            assert!((direct - map.gram[(col, col)].re).abs() < 1e-8 * direct);
        }
    }

    #[test]
    fn binary_round_trip() {
        let c = ctx(0.5, 1, 0.4);
        let v = PotentialField::constant(c.mesh.n_nodes(), 1.0);
        let f = FaceSet::all(&c.mesh);
        let a = assemble_partial_dn(&v, &c, &f, &f).unwrap();
        let mut buf = Vec::new();
        a.write_binary(&mut buf).unwrap();
        let b = PartialDNMap::read_binary(&buf[..], a.meta.clone()).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.gram, b.gram);
    }
}
