//! Conductivity equation `div(a grad u) = 0` on the waveguide, its Liouville reduction
//! `V_a = a^{-1/2} Lap a^{1/2}` to the Schrodinger form, and the H1 stability chain for
//! conductivity differences.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fem;
use crate::forward::{
    assemble_partial_dn, input_basis, operator_norm, output_basis, smooth_face_basis, BoundaryField, DirichletData, FiberSolver,
    PotentialField,
};
use crate::geometry::{BoundaryPartition, CrossSectionMesh, P2};
use crate::linalg::{Coo, Csr, C64, ONE, ZERO};
use crate::recon::{h_minus1_norm, stability_modulus, DualSpace};
use crate::spectral::{fiber_project, CellField, FiberContext, ModeExpansion};

/// Step of the central differences used for derivatives of `a` and `a^{1/2}`.
pub const FD_STEP: f64 = 1e-4;

/// Absolute tolerance of the boundary compatibility checks.
pub const COMPATIBILITY_TOL: f64 = 1e-10;

/// One additive piece of a conductivity preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Term {
    Constant { c: f64 },
    /// `c e^{k . x'}`.
    Exponential { c: f64, k: P2 },
    /// `amp (1 + axial cos(2 pi m x1)) (1 - |x' - center|^2 / rho^2)^3` on the disk of radius
    /// `rho`, zero outside. Centered on a disk cross-section of radius `rho` it vanishes to
    /// second order on the boundary.
    Bump { amp: f64, rho: f64, center: P2, axial: f64, m: i64 },
}

impl Term {
    pub fn value(&self, x1: f64, p: P2) -> f64 {
        match *self {
            Term::Constant { c } => c,
            Term::Exponential { c, k } => c * (k[0] * p[0] + k[1] * p[1]).exp(),
            Term::Bump { amp, rho, center, axial, m } => {
                let q = bump_q(rho, center, p);
                if q <= 0.0 {
                    0.0
                } else {
                    amp * (1.0 + axial * (2.0 * PI * m as f64 * x1).cos()) * q.powi(3)
                }
            }
        }
    }

    /// Exact gradient `(d1, d2, d3)`.
    pub fn gradient(&self, x1: f64, p: P2) -> [f64; 3] {
        match *self {
            Term::Constant { .. } => [0.0; 3],
            Term::Exponential { c, k } => {
                let e = c * (k[0] * p[0] + k[1] * p[1]).exp();
                [0.0, k[0] * e, k[1] * e]
            }
            Term::Bump { amp, rho, center, axial, m } => {
                let q = bump_q(rho, center, p);
                if q <= 0.0 {
                    return [0.0; 3];
                }
                let w = 2.0 * PI * m as f64;
                let ax = 1.0 + axial * (w * x1).cos();
                let dq = -6.0 * amp * ax * q * q / (rho * rho);
                [-amp * axial * w * (w * x1).sin() * q.powi(3), dq * (p[0] - center[0]), dq * (p[1] - center[1])]
            }
        }
    }

    fn axial_order(&self) -> usize {
        match *self {
            Term::Bump { axial, m, .. } if axial != 0.0 => m.unsigned_abs() as usize,
            _ => 0,
        }
    }

    fn scaled(&self, s: f64) -> Term {
        match self.clone() {
            Term::Constant { c } => Term::Constant { c: c * s },
            Term::Exponential { c, k } => Term::Exponential { c: c * s, k },
            Term::Bump { amp, rho, center, axial, m } => Term::Bump { amp: amp * s, rho, center, axial, m },
        }
    }
}

fn bump_q(rho: f64, center: P2, p: P2) -> f64 {
    let d = [p[0] - center[0], p[1] - center[1]];
    1.0 - (d[0] * d[0] + d[1] * d[1]) / (rho * rho)
}

/// Scalar periodic conductivity `a = sum of terms` with floor `a*` and bounds `M+-`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConductivityField {
    pub terms: Vec<Term>,
    pub a_star: f64,
    pub m_plus: f64,
    pub m_minus: f64,
}

/// Value, gradient and Hessian at a point.
#[derive(Clone, Copy, Debug)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

impl Jet {
    pub fn laplacian(&self) -> f64 {
        self.hess[0][0] + self.hess[1][1] + self.hess[2][2]
    }
}

impl ConductivityField {
    pub fn new(terms: Vec<Term>, a_star: f64, m_plus: f64, m_minus: f64) -> Result<Self> {
        if terms.is_empty() {
            return invalid("conductivity needs at least one term");
        }
        if !(a_star > 0.0 && a_star.is_finite()) {
            return invalid(format!("floor a* must be positive, got {a_star}"));
        }
        if !(m_plus >= 0.0 && m_minus >= 0.0 && m_plus.is_finite() && m_minus.is_finite()) {
            return invalid("bounds M+ and M- must be finite and nonnegative");
        }
        for t in &terms {
            if let Term::Bump { rho, .. } = t {
                if !(*rho > 0.0) {
                    return invalid("bump radius must be positive");
                }
            }
        }
        Ok(ConductivityField { terms, a_star, m_plus, m_minus })
    }

    pub fn constant(c: f64, m_plus: f64, m_minus: f64) -> Result<Self> {
        Self::new(vec![Term::Constant { c }], c, m_plus, m_minus)
    }

    /// `self` plus `s` times each extra term; floor and bounds are kept.
    pub fn perturbed(&self, extra: &[Term], s: f64) -> ConductivityField {
        let mut out = self.clone();
        out.terms.extend(extra.iter().map(|t| t.scaled(s)));
        out
    }

    pub fn value(&self, x1: f64, p: P2) -> f64 {
        self.terms.iter().map(|t| t.value(x1, p)).sum()
    }

    pub fn sqrt_value(&self, x1: f64, p: P2) -> f64 {
        self.value(x1, p).sqrt()
    }

    pub fn gradient(&self, x1: f64, p: P2) -> [f64; 3] {
        let mut g = [0.0; 3];
        for t in &self.terms {
            let d = t.gradient(x1, p);
            for i in 0..3 {
                g[i] += d[i];
            }
        }
        g
    }

    /// Largest axial frequency among the terms.
    pub fn axial_order(&self) -> usize {
        self.terms.iter().map(Term::axial_order).max().unwrap_or(0)
    }

    /// Central-difference jet of `a`.
    pub fn jet(&self, x1: f64, p: P2) -> Jet {
        fd_jet(|y| self.value(y[0], [y[1], y[2]]), [x1, p[0], p[1]])
    }

    /// `a^{-1/2} Lap a^{1/2}` by second differences of `a^{1/2}`.
    pub fn liouville_value(&self, x1: f64, p: P2) -> f64 {
        let g = |y: [f64; 3]| self.sqrt_value(y[0], [y[1], y[2]]);
        let x = [x1, p[0], p[1]];
        let g0 = g(x);
        let h = FD_STEP;
        let mut lap = 0.0;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            lap += (g(xp) - 2.0 * g0 + g(xm)) / (h * h);
        }
        lap / g0
    }

    /// `d_nu a^{1/2}` at a boundary point by one-sided second-order differences along `-nu`.
    pub fn normal_derivative_sqrt(&self, x1: f64, p: P2, nu: P2) -> f64 {
        let h = FD_STEP;
        let at = |s: f64| self.sqrt_value(x1, [p[0] - s * nu[0], p[1] - s * nu[1]]);
        (3.0 * at(0.0) - 4.0 * at(h) + at(2.0 * h)) / (2.0 * h)
    }

    /// Factors of the boundary relation on the whole boundary loop.
    pub fn boundary_factors(&self, mesh: &CrossSectionMesh, mmax: usize) -> BoundaryFactors {
        let at = |pos: usize| mesh.vertices[mesh.boundary_nodes[pos]];
        BoundaryFactors {
            sqrt_a: BoundaryMultiplier::from_fn(mesh, mmax, |x1, pos| self.sqrt_value(x1, at(pos))),
            inv_sqrt_a: BoundaryMultiplier::from_fn(mesh, mmax, |x1, pos| 1.0 / self.sqrt_value(x1, at(pos))),
            flux_correction: BoundaryMultiplier::from_fn(mesh, mmax, |x1, pos| {
                self.sqrt_value(x1, at(pos)) * self.normal_derivative_sqrt(x1, at(pos), mesh.node_normal(pos))
            }),
        }
    }
}

fn fd_jet(f: impl Fn([f64; 3]) -> f64, x: [f64; 3]) -> Jet {
    let h = FD_STEP;
    let f0 = f(x);
    let shift = |d: &[(usize, f64)]| {
        let mut y = x;
        for &(i, s) in d {
            y[i] += s * h;
        }
        f(y)
    };
    let mut grad = [0.0; 3];
    let mut hess = [[0.0; 3]; 3];
    for i in 0..3 {
        let (p, m) = (shift(&[(i, 1.0)]), shift(&[(i, -1.0)]));
        grad[i] = (p - m) / (2.0 * h);
        hess[i][i] = (p - 2.0 * f0 + m) / (h * h);
        for j in 0..i {
            let v = (shift(&[(i, 1.0), (j, 1.0)]) - shift(&[(i, 1.0), (j, -1.0)]) - shift(&[(i, -1.0), (j, 1.0)])
                + shift(&[(i, -1.0), (j, -1.0)]))
                / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    Jet { value: f0, grad, hess }
}

/// Axial sample count used for sup-norm checks of `a`.
fn axial_samples(mmax: usize) -> usize {
    (4 * mmax + 4).max(8)
}

/// Multiplication by a periodic boundary function, as a convolution over axial modes.
#[derive(Clone, Debug)]
pub struct BoundaryMultiplier {
    pub mmax: usize,
    /// Slot `m + mmax`, position along the boundary loop.
    pub modes: Vec<Vec<C64>>,
}

impl BoundaryMultiplier {
    pub fn from_fn(mesh: &CrossSectionMesh, mmax: usize, f: impl Fn(f64, usize) -> f64) -> Self {
        let n = axial_samples(mmax);
        let nb = mesh.n_boundary();
        let samples: Vec<Vec<f64>> = (0..n).map(|j| (0..nb).map(|p| f(j as f64 / n as f64, p)).collect()).collect();
        let mut modes = vec![vec![ZERO; nb]; 2 * mmax + 1];
        for (s, m) in modes.iter_mut().enumerate() {
            let mm = s as f64 - mmax as f64;
            for (j, row) in samples.iter().enumerate() {
                let ph = C64::from_polar(1.0 / n as f64, -2.0 * PI * mm * j as f64 / n as f64);
                for (a, v) in m.iter_mut().zip(row) {
                    *a += ph * v;
                }
            }
        }
        BoundaryMultiplier { mmax, modes }
    }

    /// `(c f)_k = sum_m c_m f_{k-m}`, truncated to the modes of `f`.
    pub fn apply(&self, f: &BoundaryField) -> BoundaryField {
        let k0 = f.kmax as i64;
        let m0 = self.mmax as i64;
        let nb = f.values[0].len();
        let mut out = BoundaryField::zeros(f.kmax, nb);
        for k in -k0..=k0 {
            let dst = out.mode_mut(k);
            for m in -m0..=m0 {
                let j = k - m;
                if j.abs() > k0 {
                    continue;
                }
                let c = &self.modes[(m + m0) as usize];
                for ((d, cv), fv) in dst.iter_mut().zip(c).zip(f.mode(j)) {
                    *d += cv * fv;
                }
            }
        }
        out
    }

    /// Coefficient of mode `m` at boundary position `p`.
    pub fn coefficient(&self, m: i64, p: usize) -> C64 {
        if m.unsigned_abs() as usize > self.mmax {
            ZERO
        } else {
            self.modes[(m + self.mmax as i64) as usize][p]
        }
    }
}

/// Boundary multipliers `a^{1/2}`, `a^{-1/2}` and `a^{1/2} d_nu a^{1/2}`.
#[derive(Clone, Debug)]
pub struct BoundaryFactors {
    pub sqrt_a: BoundaryMultiplier,
    pub inv_sqrt_a: BoundaryMultiplier,
    pub flux_correction: BoundaryMultiplier,
}

/// Liouville potential with its bounds evaluated on the samples.
#[derive(Clone, Debug)]
pub struct LiouvillePotential {
    pub potential: PotentialField,
    pub v_sup: f64,
    pub v_neg: f64,
    pub admissible: bool,
    pub violations: Vec<String>,
}

/// `V_a` on the mesh nodes with axial modes `|m| <= mmax`; bound violations are flagged.
pub fn liouville_potential(a: &ConductivityField, mesh: &CrossSectionMesh, mmax: usize) -> Result<LiouvillePotential> {
    let n = axial_samples(mmax);
    let mut v_sup: f64 = 0.0;
    let mut v_lo = f64::INFINITY;
    for j in 0..n {
        let x1 = j as f64 / n as f64;
        for &p in &mesh.vertices {
            let av = a.value(x1, p);
            if !(av > 0.0) {
                return invalid(format!("conductivity is not positive at x1 = {x1}, x' = {p:?}"));
            }
            let v = a.liouville_value(x1, p);
            v_sup = v_sup.max(v.abs());
            v_lo = v_lo.min(v);
        }
    }
    let v_neg = (-v_lo).max(0.0);
    let potential = PotentialField::from_fn(mesh, mmax, |x1, p| a.liouville_value(x1, p));
    let mut violations = Vec::new();
    if v_sup > a.m_plus {
        violations.push(format!("sup |V_a| = {v_sup:.6e} exceeds M+ = {}", a.m_plus));
    }
    if v_neg > a.m_minus {
        violations.push(format!("negative part of V_a = {v_neg:.6e} exceeds M- = {}", a.m_minus));
    }
    Ok(LiouvillePotential { potential, v_sup, v_neg, admissible: violations.is_empty(), violations })
}

/// Per-condition admissibility of a conductivity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    /// Always true: periodicity is built into the representation.
    pub periodic: bool,
    pub min_a: f64,
    pub floor: bool,
    /// `max(sup |a|, sup |grad a|)`.
    pub w1_norm: f64,
    pub w1_bound: bool,
    /// `max(w1_norm, sup |Lap a|, sup |d_i d_j a|)`.
    pub w2_norm: f64,
    pub lap_sup: f64,
    pub v_sup: f64,
    pub v_neg: f64,
    /// `sup |V_a| <= M+` and negative part `<= M-`.
    pub potential_bounds: bool,
    pub below_poincare: bool,
    /// `w1^2 + 2 a* sup|Lap a| <= 4 M- a*^2`.
    pub smallness_w1: bool,
    /// `w2 <= 4 M- / ((4 M- + 1)^{1/2} + 1) a*`.
    pub smallness_w2: bool,
    pub admissible: bool,
}

/// Sample-based admissibility report; never fails.
pub fn admissibility_check(a: &ConductivityField, mesh: &CrossSectionMesh, mmax: usize, c_omega: f64) -> AdmissibilityReport {
    let n = axial_samples(mmax);
    let mut min_a = f64::INFINITY;
    let (mut sup_a, mut sup_grad, mut sup_lap, mut sup_hess) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for j in 0..n {
        let x1 = j as f64 / n as f64;
        for &p in &mesh.vertices {
            let jet = a.jet(x1, p);
            min_a = min_a.min(jet.value);
            sup_a = sup_a.max(jet.value.abs());
            sup_grad = sup_grad.max(jet.grad.iter().map(|g| g * g).sum::<f64>().sqrt());
            sup_lap = sup_lap.max(jet.laplacian().abs());
            sup_hess = sup_hess.max(jet.hess.iter().flatten().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    let w1_norm = sup_a.max(sup_grad);
    let w2_norm = w1_norm.max(sup_lap).max(sup_hess);
    let floor = min_a >= a.a_star;
    let (v_sup, v_neg, potential_bounds) = match liouville_potential(a, mesh, mmax) {
        Ok(l) => (l.v_sup, l.v_neg, l.admissible),
        Err(_) => (f64::NAN, f64::NAN, false),
    };
    let s = a.a_star;
    let m = a.m_minus;
    let smallness_w1 = w1_norm * w1_norm + 2.0 * s * sup_lap <= 4.0 * m * s * s;
    let smallness_w2 = w2_norm <= 4.0 * m / ((4.0 * m + 1.0).sqrt() + 1.0) * s;
    let w1_bound = w1_norm <= a.m_plus;
    let below_poincare = a.m_minus < c_omega;
    AdmissibilityReport {
        periodic: true,
        min_a,
        floor,
        w1_norm,
        w1_bound,
        w2_norm,
        lap_sup: sup_lap,
        v_sup,
        v_neg,
        potential_bounds,
        below_poincare,
        smallness_w1,
        smallness_w2,
        admissible: floor && w1_bound && potential_bounds && below_poincare,
    }
}

/// `Sigma_a f = a^{1/2} L_{V_a} (a^{1/2} f) - a^{1/2} (d_nu a^{1/2}) f` on the whole boundary,
/// with `solver` built for `V_a`.
pub fn sigma_from_lambda(factors: &BoundaryFactors, solver: &FiberSolver, f: &DirichletData) -> Result<BoundaryField> {
    let q = solver.dn_apply(&factors.sqrt_a.apply(f))?;
    Ok(factors.sqrt_a.apply(&q).sub(&factors.flux_correction.apply(f)))
}

/// Per axial mode `m` of `a`: stiffness `int a_m grad phi_i . grad phi_j` and mass
/// `int a_m phi_i phi_j`, with `a` itself evaluated at the seven-point rule.
fn coefficient_matrices(a: &ConductivityField, mesh: &CrossSectionMesh, mmax: usize) -> Vec<Option<(Csr, Csr)>> {
    let n = axial_samples(mmax);
    let nm = 2 * mmax + 1;
    let phases: Vec<Vec<C64>> = (0..nm)
        .map(|s| {
            let m = s as f64 - mmax as f64;
            (0..n).map(|j| C64::from_polar(1.0 / n as f64, -2.0 * PI * m * j as f64 / n as f64)).collect()
        })
        .collect();
    let nn = mesh.n_nodes();
    let mut stiff: Vec<Coo> = (0..nm).map(|_| Coo::with_capacity(nn, nn, 9 * mesh.triangles.len())).collect();
    let mut mass: Vec<Coo> = (0..nm).map(|_| Coo::with_capacity(nn, nn, 9 * mesh.triangles.len())).collect();
    let mut nonzero = vec![false; nm];
    let mut samples = vec![0.0; n];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (g, area) = fem::p1_gradients(mesh, t);
        let p: Vec<P2> = tri.iter().map(|&i| mesh.vertices[i]).collect();
        let mut mean = vec![ZERO; nm];
        let mut mom = vec![[[ZERO; 3]; 3]; nm];
        for (l, w) in fem::TRI_QUAD7 {
            let x = [
                l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
            ];
            for (j, v) in samples.iter_mut().enumerate() {
                *v = a.value(j as f64 / n as f64, x);
            }
            for s in 0..nm {
                let am: C64 = phases[s].iter().zip(&samples).map(|(ph, v)| ph * v).sum();
                let wa = am * (w * area);
                mean[s] += wa;
                for i in 0..3 {
                    for k in 0..3 {
                        mom[s][i][k] += wa * (l[i] * l[k]);
                    }
                }
            }
        }
        for s in 0..nm {
            if mean[s].norm() < 1e-15 * area && mom[s].iter().flatten().all(|v| v.norm() < 1e-15 * area) {
                continue;
            }
            nonzero[s] = true;
            for i in 0..3 {
                for k in 0..3 {
                    stiff[s].push(tri[i], tri[k], mean[s] * (g[i][0] * g[k][0] + g[i][1] * g[k][1]));
                    mass[s].push(tri[i], tri[k], mom[s][i][k]);
                }
            }
        }
    }
    stiff
        .into_iter()
        .zip(mass)
        .zip(nonzero)
        .map(|((s, m), nz)| if nz { Some((s.build(), m.build())) } else { None })
        .collect()
}

/// Fiber solver of the divergence-form equation; its flux is the conormal derivative `a d_nu u`.
pub fn divergence_solver(a: &ConductivityField, ctx: &FiberContext, mmax: usize) -> Result<FiberSolver> {
    let mesh = &*ctx.mesh;
    let n = mesh.n_nodes();
    let blocks = coefficient_matrices(a, mesh, mmax);
    let m0 = mmax as i64;
    let nm = ctx.n_modes();
    let k0 = ctx.kmax as i64;
    let mut coo = Coo::new(nm * n, nm * n);
    for k in -k0..=k0 {
        let row0 = ((k + k0) as usize) * n;
        for m in -m0..=m0 {
            let j = k - m;
            if j.abs() > k0 {
                continue;
            }
            let Some((s, ms)) = &blocks[(m + m0) as usize] else { continue };
            let col0 = ((j + k0) as usize) * n;
            let bb = C64::new(ctx.beta(k) * ctx.beta(j), 0.0);
            for i in 0..n {
                for (c, x) in s.row(i) {
                    coo.push(row0 + i, col0 + c, x);
                }
                for (c, x) in ms.row(i) {
                    coo.push(row0 + i, col0 + c, x * bb);
                }
            }
        }
    }
    FiberSolver::from_matrix(ctx, coo.build())
}

/// Checks `a1 = a2` on the boundary and `d_nu a1 = d_nu a2` on `F` intersect `G`.
pub fn check_compatibility(
    a1: &ConductivityField,
    a2: &ConductivityField,
    mesh: &CrossSectionMesh,
    part: &BoundaryPartition,
) -> Result<()> {
    let n = axial_samples(a1.axial_order().max(a2.axial_order()));
    let f_pos: std::collections::HashSet<usize> = part.f.touched_node_positions(mesh).into_iter().collect();
    let both: Vec<usize> = part.g.touched_node_positions(mesh).into_iter().filter(|p| f_pos.contains(p)).collect();
    for j in 0..n {
        let x1 = j as f64 / n as f64;
        for (pos, &node) in mesh.boundary_nodes.iter().enumerate() {
            let p = mesh.vertices[node];
            let d = (a1.value(x1, p) - a2.value(x1, p)).abs();
            if d > COMPATIBILITY_TOL {
                return invalid(format!(
                    "boundary trace compatibility fails: |a1 - a2| = {d:.3e} at boundary position {pos}"
                ));
            }
        }
        for &pos in &both {
            let p = mesh.vertices[mesh.boundary_nodes[pos]];
            let nu = mesh.node_normal(pos);
            let (g1, g2) = (a1.gradient(x1, p), a2.gradient(x1, p));
            let d = ((g1[1] - g2[1]) * nu[0] + (g1[2] - g2[2]) * nu[1]).abs();
            if d > COMPATIBILITY_TOL {
                return invalid(format!(
                    "normal derivative compatibility fails on F and G: difference {d:.3e} at boundary position {pos}"
                ));
            }
        }
    }
    Ok(())
}

/// `Sigma_{a1} - Sigma_{a2}` on one fiber, built from the Schrodinger DN maps.
#[derive(Clone, Debug)]
pub struct SigmaDifference {
    /// Rows: `output_basis(G)`; columns: inputs `a1^{-1/2} (mode, hat)` over `input_basis(F)`.
    pub matrix: Mat<C64>,
    pub lambda_matrix: Mat<C64>,
    pub norm: f64,
    pub lambda_norm: f64,
    /// `||L1 - L2|| <= a*^{-1/2} ||S1 - S2||`.
    pub weighted_bound_holds: bool,
    pub inputs: Vec<(i64, usize)>,
    pub outputs: Vec<(i64, usize)>,
    pub out_weight: Mat<C64>,
}

impl SigmaDifference {
    /// `P_out^H W M P_in` on the smooth profiles of `smooth_face_basis`.
    pub fn smooth_forms(&self, mesh: &CrossSectionMesh, kmax: usize, m: &Mat<C64>, nf: usize) -> Mat<C64> {
        let pin = smooth_face_basis(mesh, kmax, &self.inputs, nf);
        let pout = smooth_face_basis(mesh, kmax, &self.outputs, nf);
        pout.adjoint() * &self.out_weight * m * &pin
    }
}

/// Columns are indexed by `a1^{1/2} f` in the hat basis, so the input norm is the Gram norm
/// of `a1^{1/2} f`.
pub fn sigma_difference(
    a1: &ConductivityField,
    a2: &ConductivityField,
    ctx: &FiberContext,
    part: &BoundaryPartition,
    mmax: usize,
) -> Result<SigmaDifference> {
    let mesh = &*ctx.mesh;
    check_compatibility(a1, a2, mesh, part)?;
    let v1 = liouville_potential(a1, mesh, mmax)?.potential;
    let v2 = liouville_potential(a2, mesh, mmax)?.potential;
    let l1 = assemble_partial_dn(&v1, ctx, &part.f, &part.g)?;
    let l2 = assemble_partial_dn(&v2, ctx, &part.f, &part.g)?;
    let d = &l1.matrix - &l2.matrix;
    let sqrt_a = a1.boundary_factors(mesh, mmax).sqrt_a;
    let outputs = l1.meta.outputs.clone();
    let index: HashMap<(i64, usize), usize> = outputs.iter().enumerate().map(|(r, o)| (*o, r)).collect();
    let m0 = sqrt_a.mmax as i64;
    let mut s = Mat::<C64>::zeros(d.nrows(), d.ncols());
    for (r, &(k, p)) in outputs.iter().enumerate() {
        for m in -m0..=m0 {
            let Some(&src) = index.get(&(k - m, p)) else { continue };
            let c = sqrt_a.coefficient(m, p);
            if c == ZERO {
                continue;
            }
            for col in 0..d.ncols() {
                s[(r, col)] += c * d[(src, col)];
            }
        }
    }
    let norm = operator_norm(&s, &l1.out_weight, &l1.gram)?;
    let lambda_norm = operator_norm(&d, &l1.out_weight, &l1.gram)?;
    let weighted_bound_holds = lambda_norm <= norm / a1.a_star.sqrt() * (1.0 + 1e-9) + 1e-14;
    Ok(SigmaDifference {
        matrix: s,
        lambda_matrix: d,
        norm,
        lambda_norm,
        weighted_bound_holds,
        inputs: l1.meta.inputs.clone(),
        outputs,
        out_weight: l1.out_weight,
    })
}

/// `Sigma_{a1} - Sigma_{a2}` from two divergence-form solves, same basis as `sigma_difference`.
pub fn sigma_difference_direct(
    a1: &ConductivityField,
    a2: &ConductivityField,
    ctx: &FiberContext,
    part: &BoundaryPartition,
    mmax: usize,
) -> Result<Mat<C64>> {
    let mesh = &*ctx.mesh;
    let inputs = input_basis(ctx, &part.f);
    let outputs = output_basis(ctx, &part.g);
    let inv = a1.boundary_factors(mesh, mmax).inv_sqrt_a;
    let data: Vec<DirichletData> = inputs
        .iter()
        .map(|&(k, p)| {
            let mut e = DirichletData::zeros(ctx.kmax, mesh.n_boundary());
            e.mode_mut(k)[p] = ONE;
            inv.apply(&e)
        })
        .collect();
    let s1 = divergence_solver(a1, ctx, mmax)?;
    let s2 = divergence_solver(a2, ctx, mmax)?;
    let u1 = s1.solve_many(&data, None)?;
    let u2 = s2.solve_many(&data, None)?;
    let mut m = Mat::<C64>::zeros(outputs.len(), inputs.len());
    for c in 0..inputs.len() {
        let q = s1.flux(&u1[c], None).sub(&s2.flux(&u2[c], None));
        for (r, &(k, p)) in outputs.iter().enumerate() {
            m[(r, c)] = q.mode(k)[p];
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConductivityConfig {
    pub kmax: usize,
    pub thetas: Vec<f64>,
    /// Axial modes kept for `a`, `V_a` and the boundary factors.
    pub mmax: usize,
    /// Axial modes of the periodic `alpha` problem.
    pub alpha_kmax: usize,
    pub n1: usize,
    pub gamma_star: f64,
    pub c_omega: f64,
}

/// `alpha = a1^{1/2} - a2^{1/2}` computed directly and from its elliptic equation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaCheck {
    pub direct_h1: f64,
    pub solved_h1: f64,
    /// `||direct - solved||_{H1} / ||direct||_{H1}`, zero when both vanish.
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConductivityReport {
    pub theta: f64,
    pub sigma_norm: f64,
    pub lambda_norm: f64,
    pub weighted_bound_holds: bool,
    pub alpha: AlphaCheck,
    /// `||a1 - a2||_{H1}` over the cell.
    pub diff_h1: f64,
    /// `2 a*^{-1/2} M+ ||alpha||_{H1}`.
    pub chain_bound: f64,
    pub chain_holds: bool,
    /// `||V1 - V2||` in the dual of the periodic space vanishing on the lateral boundary.
    pub dual_v: f64,
    /// `||alpha||_{H1} / dual_v`.
    pub alpha_ratio: f64,
    /// `Phi(a*^{-1/2} sigma_norm)`.
    pub phi: f64,
}

/// `sum_k e_k^H (S + (1 + beta_k^2) M) e_k`.
fn h1_norm(mesh: &CrossSectionMesh, e: &ModeExpansion) -> f64 {
    let stiff = fem::stiffness(mesh);
    let mass = fem::mass(mesh);
    let k0 = e.kmax as i64;
    let mut total = 0.0;
    for k in -k0..=k0 {
        let b = crate::spectral::beta(e.theta, k);
        let u = e.mode(k);
        total += stiff.form(u, u).re + (1.0 + b * b) * mass.form(u, u).re;
    }
    total.max(0.0).sqrt()
}

fn periodic_context(mesh: &Arc<CrossSectionMesh>, kmax: usize) -> Result<FiberContext> {
    FiberContext::new(0.0, kmax, mesh.clone())
}

fn project_fn(ctx: &FiberContext, n1: usize, f: impl Fn(f64, P2) -> f64) -> Result<ModeExpansion> {
    let mesh = &*ctx.mesh;
    let cell = CellField::from_fn(n1, mesh.n_nodes(), |x1, i| C64::new(f(x1, mesh.vertices[i]), 0.0));
    fiber_project(&cell, ctx)
}

/// Direct `alpha` against the periodic solve of `(-Lap + V1) alpha = -a2^{1/2}(V1 - V2)`,
/// `alpha = 0` on the lateral boundary.
pub fn alpha_check(
    a1: &ConductivityField,
    a2: &ConductivityField,
    mesh: &Arc<CrossSectionMesh>,
    cfg: &ConductivityConfig,
) -> Result<(AlphaCheck, ModeExpansion)> {
    let ctx = periodic_context(mesh, cfg.alpha_kmax)?;
    let direct = project_fn(&ctx, cfg.n1, |x1, p| a1.sqrt_value(x1, p) - a2.sqrt_value(x1, p))?;
    let source = project_fn(&ctx, cfg.n1, |x1, p| {
        -a2.sqrt_value(x1, p) * (a1.liouville_value(x1, p) - a2.liouville_value(x1, p))
    })?;
    let v1 = liouville_potential(a1, mesh, cfg.mmax)?.potential;
    let solver = FiberSolver::new(&v1, &ctx)?;
    let solved = solver.solve(&DirichletData::zeros(ctx.kmax, mesh.n_boundary()), Some(&source))?;
    let diff = ModeExpansion::from_flat(
        0.0,
        ctx.kmax,
        mesh.n_nodes(),
        &direct.to_flat().iter().zip(solved.to_flat()).map(|(a, b)| a - b).collect::<Vec<_>>(),
    );
    let direct_h1 = h1_norm(mesh, &direct);
    let solved_h1 = h1_norm(mesh, &solved);
    let err = h1_norm(mesh, &diff);
    let rel_err = if direct_h1 == 0.0 { err } else { err / direct_h1 };
    Ok((AlphaCheck { direct_h1, solved_h1, rel_err }, direct))
}

/// Full stability chain for one compatible admissible pair.
pub fn conductivity_stability(
    a1: &ConductivityField,
    a2: &ConductivityField,
    mesh: Arc<CrossSectionMesh>,
    part: &BoundaryPartition,
    cfg: &ConductivityConfig,
) -> Result<ConductivityReport> {
    stability_modulus(0.0, cfg.gamma_star)?;
    if cfg.thetas.is_empty() {
        return invalid("empty theta-grid");
    }
    for (name, a) in [("a1", a1), ("a2", a2)] {
        let r = admissibility_check(a, &mesh, cfg.mmax, cfg.c_omega);
        if !r.admissible {
            return invalid(format!("{name} is not admissible: {r:?}"));
        }
    }
    check_compatibility(a1, a2, &mesh, part)?;
    let mut best: Option<(f64, SigmaDifference)> = None;
    for &th in &cfg.thetas {
        let ctx = FiberContext::new(th, cfg.kmax, mesh.clone())?;
        let sd = sigma_difference(a1, a2, &ctx, part, cfg.mmax)?;
        if best.as_ref().map_or(true, |(_, b)| sd.norm > b.norm) {
            best = Some((th, sd));
        }
    }
    let (theta, sd) = best.unwrap();
    let (alpha, _) = alpha_check(a1, a2, &mesh, cfg)?;
    let ctx0 = periodic_context(&mesh, cfg.alpha_kmax)?;
    let diff = project_fn(&ctx0, cfg.n1, |x1, p| a1.value(x1, p) - a2.value(x1, p))?;
    let diff_h1 = h1_norm(&mesh, &diff);
    let m_plus = a1.m_plus.max(a2.m_plus);
    let a_star = a1.a_star.min(a2.a_star);
    let chain_bound = 2.0 / a_star.sqrt() * m_plus * alpha.direct_h1;
    let dv = CellField::from_fn(cfg.n1, mesh.n_nodes(), |x1, i| {
        let p = mesh.vertices[i];
        C64::new(a1.liouville_value(x1, p) - a2.liouville_value(x1, p), 0.0)
    });
    let dual_v = h_minus1_norm(&mesh, &dv, DualSpace::Periodic)?;
    let alpha_ratio = if dual_v == 0.0 { 0.0 } else { alpha.direct_h1 / dual_v };
    let phi = stability_modulus(sd.norm / a1.a_star.sqrt(), cfg.gamma_star)?;
    Ok(ConductivityReport {
        theta,
        sigma_norm: sd.norm,
        lambda_norm: sd.lambda_norm,
        weighted_bound_holds: sd.weighted_bound_holds,
        alpha,
        diff_h1,
        chain_bound,
        chain_holds: diff_h1 <= chain_bound * (1.0 + 1e-9) + 1e-14,
        dual_v,
        alpha_ratio,
        phi,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderRow {
    pub s: f64,
    pub report: ConductivityReport,
    /// `diff_h1 / phi`.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderReport {
    pub rows: Vec<LadderRow>,
    /// Smallest `C` with `||a1 - a2||_{H1} <= C Phi` on every row.
    pub fitted_c: f64,
    /// Largest over smallest positive ratio.
    pub spread: f64,
}

/// `a2(s) = a1 + s * perturbation` along `scales`.
pub fn conductivity_ladder(
    a1: &ConductivityField,
    perturbation: &[Term],
    scales: &[f64],
    mesh: Arc<CrossSectionMesh>,
    part: &BoundaryPartition,
    cfg: &ConductivityConfig,
) -> Result<LadderReport> {
    let mut rows = Vec::new();
    for &s in scales {
        let a2 = a1.perturbed(perturbation, s);
        let report = conductivity_stability(a1, &a2, mesh.clone(), part, cfg)?;
        let ratio = if report.phi == 0.0 { 0.0 } else { report.diff_h1 / report.phi };
        rows.push(LadderRow { s, report, ratio });
    }
    let positive: Vec<f64> = rows.iter().filter(|r| r.report.phi > 0.0).map(|r| r.ratio).collect();
    if positive.is_empty() {
        return Err(Error::Assertion("no ladder member has a positive modulus".into()));
    }
    let fitted_c = positive.iter().copied().fold(0.0, f64::max);
    let spread = fitted_c / positive.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LadderReport { rows, fitted_c, spread })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, CrossSectionSpec};

    fn disk(h: f64) -> Arc<CrossSectionMesh> {
        Arc::new(build_mesh(&CrossSectionSpec::disk(0.5, h)).unwrap())
    }

    #[test]
    fn bump_gradient_matches_differences() {
        let t = Term::Bump { amp: 0.7, rho: 0.5, center: [0.1, -0.05], axial: 0.3, m: 1 };
        let a = ConductivityField::new(vec![Term::Constant { c: 1.0 }, t], 1.0, 10.0, 1.0).unwrap();
        let (x1, p) = (0.3, [0.05, 0.12]);
        let g = a.gradient(x1, p);
        let j = a.jet(x1, p);
        for i in 0..3 {
            assert!((g[i] - j.grad[i]).abs() < 1e-6, "{i}: {} vs {}", g[i], j.grad[i]);
        }
    }

    #[test]
    fn multiplier_of_constant_scales() {
        let mesh = disk(0.2);
        let m = BoundaryMultiplier::from_fn(&mesh, 1, |_, _| 3.0);
        let mut f = BoundaryField::zeros(1, mesh.n_boundary());
        f.mode_mut(-1)[0] = C64::new(1.0, 2.0);
        let g = m.apply(&f);
        assert!((g.mode(-1)[0] - C64::new(3.0, 6.0)).norm() < 1e-12);
        assert!(g.mode(0).iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn axial_multiplier_shifts_modes() {
        let mesh = disk(0.2);
        let m = BoundaryMultiplier::from_fn(&mesh, 1, |x1, _| (2.0 * PI * x1).cos());
        let mut f = BoundaryField::zeros(2, mesh.n_boundary());
        f.mode_mut(0)[3] = ONE;
        let g = m.apply(&f);
        assert!((g.mode(1)[3] - 0.5).norm() < 1e-12);
        assert!((g.mode(-1)[3] - 0.5).norm() < 1e-12);
        assert!(g.mode(0)[3].norm() < 1e-12);
    }

    #[test]
    fn floor_violation_is_reported() {
        let mesh = disk(0.1);
        let a = ConductivityField::new(
            vec![Term::Constant { c: 1.0 }, Term::Bump { amp: -0.2, rho: 0.5, center: [0.0, 0.0], axial: 0.0, m: 0 }],
            1.0,
            10.0,
            5.0,
        )
        .unwrap();
        let r = admissibility_check(&a, &mesh, 0, 20.0);
        assert!(!r.floor);
        assert!(!r.admissible);
        assert!(r.min_a < 1.0);
    }

    #[test]
    fn incompatible_traces_are_rejected() {
        let mesh = disk(0.1);
        let part = BoundaryPartition::full(&mesh, [1.0, 0.0]).unwrap();
        let a1 = ConductivityField::constant(1.0, 2.0, 1.0).unwrap();
        let a2 = ConductivityField::constant(1.5, 2.0, 1.0).unwrap();
        let e = check_compatibility(&a1, &a2, &mesh, &part).unwrap_err().to_string();
        assert!(e.contains("boundary trace"), "{e}");
        let a3 = ConductivityField::new(
            vec![Term::Constant { c: 1.0 }, Term::Bump { amp: 0.1, rho: 0.6, center: [0.0, 0.0], axial: 0.0, m: 0 }],
            1.0,
            2.0,
            1.0,
        )
        .unwrap();
        let a4 = ConductivityField::new(
            vec![Term::Constant { c: 1.0 + 0.1 * (1.0f64 - 0.25 / 0.36).powi(3) }],
            1.0,
            2.0,
            1.0,
        )
        .unwrap();
        let e = check_compatibility(&a3, &a4, &mesh, &part).unwrap_err().to_string();
        assert!(e.contains("normal derivative"), "{e}");
    }
}
