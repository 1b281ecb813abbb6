//! Complex geometric optics solutions `u = e^{zeta . x}(1 + v)` on the cell.
//!
//! Remainders are computed in the conjugated variable: with `zeta . zeta = 0`,
//! `(-Lap + V)(e^{zeta . x} w) = e^{zeta . x}(-Lap w - 2 zeta . grad w + V w)`.
//! A 1-periodic remainder `w = sum_j w_j(x') e^{2 pi i j x1}` then decouples into
//! cross-section problems per `j`, coupled only through the modes of `V`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fem;
use crate::forward::{DirichletData, PotentialField};
use crate::geometry::{CrossSectionMesh, Shape, P2};
use crate::linalg::{check_residual, norm2, Coo, Csr, SparseLu, C64, I, ZERO};
use crate::spectral::{FiberContext, ModeExpansion};

use std::f64::consts::PI;

pub type C3 = [C64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CGOParams {
    pub k: i64,
    pub eta: P2,
    pub xi: P2,
    pub r: f64,
    pub theta: f64,
    pub ell: [f64; 3],
    pub tau: f64,
    pub zeta1: C3,
    pub zeta2: C3,
}

/// Unit vector orthogonal to `eta`: the +90 degree rotation, flipped toward `xi0` if given.
pub fn xi_from_eta(eta: P2, xi0: Option<P2>) -> P2 {
    let n = eta[0].hypot(eta[1]);
    let xi = [-eta[1] / n, eta[0] / n];
    match xi0 {
        Some(x0) if (xi[0] + x0[0]).hypot(xi[1] + x0[1]) < (xi[0] - x0[0]).hypot(xi[1] - x0[1]) => [-xi[0], -xi[1]],
        _ => xi,
    }
}

/// Offset of `ell_1` above `theta` in units of `2 pi`: `[r] + 1` for even `k`, `[r] + 3/2` for odd.
fn ell_shift(k: i64, r: f64) -> f64 {
    r.floor() + if k.rem_euclid(2) == 0 { 1.0 } else { 1.5 }
}

pub fn make_cgo_params(k: i64, eta: P2, r: f64, theta: f64, xi0: Option<P2>) -> Result<CGOParams> {
    let ne2 = eta[0] * eta[0] + eta[1] * eta[1];
    if !(ne2 > 0.0) || !ne2.is_finite() {
        return invalid("eta must be a nonzero finite vector");
    }
    if !(r > 0.0 && r.is_finite()) {
        return invalid(format!("r must be positive, got {r}"));
    }
    if !(0.0..2.0 * PI).contains(&theta) {
        return invalid(format!("theta must lie in [0, 2 pi), got {theta}"));
    }
    let xi = xi_from_eta(eta, xi0);
    let l1 = theta + 2.0 * PI * ell_shift(k, r);
    let c = -2.0 * PI * k as f64 / ne2;
    let ell = [l1, l1 * c * eta[0], l1 * c * eta[1]];
    let ell2 = ell.iter().map(|v| v * v).sum::<f64>();
    let pk = PI * k as f64;
    let tau = (ne2 / 4.0 + pk * pk + ell2).sqrt();
    let zeta1 = [
        I * (pk + ell[0]),
        C64::new(-tau * xi[0], eta[0] / 2.0 + ell[1]),
        C64::new(-tau * xi[1], eta[1] / 2.0 + ell[2]),
    ];
    let zeta2 = [
        I * (-pk + ell[0]),
        C64::new(tau * xi[0], -eta[0] / 2.0 + ell[1]),
        C64::new(tau * xi[1], -eta[1] / 2.0 + ell[2]),
    ];
    let p = CGOParams { k, eta, xi, r, theta, ell, tau, zeta1, zeta2 };
    p.check_invariants()?;
    Ok(p)
}

/// Parameters with `k`, `eta` fixed and `tau` equal to `target`, obtained by solving for
/// `ell_1 = theta + 2 pi ([r] + shift)` and taking `r = [r] + 1/2`.
pub fn params_for_tau(k: i64, eta: P2, target: f64, xi0: Option<P2>) -> Result<CGOParams> {
    let ne2 = eta[0] * eta[0] + eta[1] * eta[1];
    if !(ne2 > 0.0) {
        return invalid("eta must be nonzero");
    }
    let pk = PI * k as f64;
    let rest = target * target - ne2 / 4.0 - pk * pk;
    let factor = 1.0 + 4.0 * pk * pk / ne2;
    if rest <= 0.0 {
        return invalid(format!("tau = {target} is below the minimum for this (k, eta)"));
    }
    let l1 = (rest / factor).sqrt();
    let shift = if k.rem_euclid(2) == 0 { 1.0 } else { 1.5 };
    let n = (l1 / (2.0 * PI) - shift).floor();
    if n < 0.0 {
        return invalid(format!("tau = {target} is too small to reach with r > 0"));
    }
    let theta = (l1 - 2.0 * PI * (n + shift)).clamp(0.0, 2.0 * PI * (1.0 - 1e-15));
    make_cgo_params(k, eta, n + 0.5, theta, xi0)
}

fn cdot(a: &C3, b: &C3) -> C64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Index `m` with `zeta_1 = i (theta + 2 pi m)`, if the first component is of that form.
pub fn axial_mode(zeta: &C3, theta: f64) -> Option<i64> {
    let m = (zeta[0].im - theta) / (2.0 * PI);
    let mr = m.round();
    ((m - mr).abs() < 1e-9 && zeta[0].re.abs() <= 1e-12 * zeta[0].norm().max(1.0)).then_some(mr as i64)
}

impl CGOParams {
    /// Every algebraic identity of the construction, at relative tolerance `1e-12`.
    pub fn check_invariants(&self) -> Result<()> {
        let tol = 1e-12;
        let fail = |what: &str, err: f64| Err(Error::Assertion(format!("CGO invariant {what} violated by {err:.3e}")));
        let kv = [2.0 * PI * self.k as f64, self.eta[0], self.eta[1]];
        let scale = self.tau * self.tau + 1.0;
        let e = (self.ell[0] * kv[0] + self.ell[1] * kv[1] + self.ell[2] * kv[2]).abs();
        if e > tol * scale {
            return fail("ell . (2 pi k, eta) = 0", e);
        }
        let e = (self.ell[1] * self.xi[0] + self.ell[2] * self.xi[1]).abs();
        if e > tol * scale {
            return fail("ell' . xi = 0", e);
        }
        let ne2 = self.eta[0].powi(2) + self.eta[1].powi(2);
        let t2 = ne2 / 4.0 + (PI * self.k as f64).powi(2) + self.ell.iter().map(|v| v * v).sum::<f64>();
        let e = (self.tau * self.tau - t2).abs();
        if e > tol * scale {
            return fail("tau^2 identity", e);
        }
        if !(2.0 * PI * self.r < self.tau) {
            return fail("2 pi r < tau", 2.0 * PI * self.r - self.tau);
        }
        let knorm = (kv[0] * kv[0] + ne2).sqrt();
        let upper = knorm / 2.0 + 4.0 * PI * (self.r + 1.0) * (1.0 + kv[0].abs() / ne2.sqrt());
        if self.tau > upper * (1.0 + tol) {
            return fail("upper tau bound", self.tau - upper);
        }
        for (name, z) in [("zeta1", &self.zeta1), ("zeta2", &self.zeta2)] {
            let re = [z[0].re, z[1].re, z[2].re];
            let im = [z[0].im, z[1].im, z[2].im];
            let nr = re.iter().map(|v| v * v).sum::<f64>();
            let ni = im.iter().map(|v| v * v).sum::<f64>();
            if (nr - ni).abs() > tol * scale {
                return fail(&format!("|Re {name}| = |Im {name}|"), (nr - ni).abs());
            }
            let d = (re[0] * im[0] + re[1] * im[1] + re[2] * im[2]).abs();
            if d > tol * scale {
                return fail(&format!("Re {name} . Im {name} = 0"), d);
            }
            if axial_mode(z, self.theta).is_none() {
                return fail(&format!("{name}_1 in i(theta + 2 pi Z)"), z[0].re.abs());
            }
        }
        for j in 0..3 {
            let want = I * kv[j];
            let e = (self.zeta1[j] + self.zeta2[j].conj() - want).norm();
            if e > tol * (self.tau + 1.0) {
                return fail("zeta1 + conj(zeta2) = i(2 pi k, eta)", e);
            }
        }
        Ok(())
    }

    /// `zeta . zeta`, zero up to rounding.
    pub fn square(&self, which: CgoKind) -> C64 {
        let z = self.zeta(which);
        cdot(z, z)
    }

    pub fn zeta(&self, which: CgoKind) -> &C3 {
        match which {
            CgoKind::Smooth => &self.zeta1,
            CgoKind::Vanishing => &self.zeta2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CgoKind {
    Smooth,
    Vanishing,
}

/// Solver knobs; the tau floor is a configuration value.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CgoConfig {
    pub tau_floor: f64,
    /// Periodic modes `|j| <= jmax` of the remainder; `None` means twice the potential bandwidth.
    pub jmax: Option<usize>,
}

impl Default for CgoConfig {
    fn default() -> Self {
        CgoConfig { tau_floor: 20.0, jmax: None }
    }
}

#[derive(Clone, Debug)]
pub struct CGOSolution {
    pub params: CGOParams,
    pub kind: CgoKind,
    /// Periodic remainder modes, slot `j + jmax`, nodal on the mesh.
    pub remainder: ModeExpansion,
    /// Relative residual of the discrete constraints.
    pub residual: f64,
    /// Largest `|u| e^{-tau xi . x'}` on the constrained boundary nodes where the cutoff is 1.
    pub trace_defect: f64,
}

/// Exponential factor `e^{zeta' . x'}` at every node.
fn transverse_phase(mesh: &CrossSectionMesh, z: &C3) -> Vec<C64> {
    mesh.vertices.iter().map(|p| (z[1] * p[0] + z[2] * p[1]).exp()).collect()
}

struct Conjugated {
    jmax: usize,
    n: usize,
    op: Csr,
    rhs: Vec<C64>,
}

/// Block operator of `-Lap - 2 zeta . grad + V` on periodic modes and its right-hand side `-V`.
fn conjugated_operator(mesh: &CrossSectionMesh, v: &PotentialField, z: &C3, jmax: usize) -> Conjugated {
    let n = mesh.n_nodes();
    let nj = 2 * jmax + 1;
    let stiff = fem::stiffness(mesh);
    let mass = fem::mass(mesh);
    let conv = fem::convection(mesh, [z[1], z[2]]);
    let b = z[0].im;
    let m0 = v.mmax as i64;
    let wm: Vec<Option<Csr>> = (-m0..=m0)
        .map(|m| {
            let f = v.mode(m).unwrap();
            (!f.iter().all(|x| *x == ZERO)).then(|| fem::weighted_mass(mesh, f))
        })
        .collect();
    let mut coo = Coo::with_capacity(nj * n, nj * n, nj * stiff.nnz() * 4);
    let mut rhs = vec![ZERO; nj * n];
    let j0 = jmax as i64;
    for j in -j0..=j0 {
        let r0 = ((j + j0) as usize) * n;
        let c = (2.0 * PI * j as f64).powi(2) + 4.0 * PI * b * j as f64;
        for i in 0..n {
            for (col, s) in stiff.row(i) {
                coo.push(r0 + i, r0 + col, s);
            }
            for (col, s) in mass.row(i) {
                coo.push(r0 + i, r0 + col, s * c);
            }
            for (col, s) in conv.row(i) {
                coo.push(r0 + i, r0 + col, s * -2.0);
            }
        }
        for m in -m0..=m0 {
            let jj = j - m;
            if jj.abs() > j0 {
                continue;
            }
            if let Some(w) = &wm[(m + m0) as usize] {
                let c0 = ((jj + j0) as usize) * n;
                for i in 0..n {
                    for (col, s) in w.row(i) {
                        coo.push(r0 + i, c0 + col, s);
                    }
                }
            }
        }
        if let Some(vj) = v.mode(j) {
            let mv = mass.matvec(vj);
            for i in 0..n {
                rhs[r0 + i] = -mv[i];
            }
        }
    }
    Conjugated { jmax, n, op: coo.build(), rhs }
}

/// Minimize `sum_j ||w_j||^2` subject to `B w = b` through the Hermitian saddle-point system.
fn min_norm_solve(mass_blocks: &Csr, b_rows: &Csr, b: &[C64]) -> Result<(Vec<C64>, f64)> {
    let nu = mass_blocks.nrows;
    let nc = b_rows.nrows;
    if nc >= nu {
        return Err(Error::Solver(format!(
            "constraint set is over-determined ({nc} constraints for {nu} unknowns); refine the mesh or raise K"
        )));
    }
    // Scale the mass block to the size of the constraint rows; the minimizer is unchanged.
    let s = b_rows.max_abs() / mass_blocks.max_abs().max(1e-300);
    let mut coo = Coo::with_capacity(nu + nc, nu + nc, mass_blocks.nnz() + 2 * b_rows.nnz());
    for i in 0..nu {
        for (j, v) in mass_blocks.row(i) {
            coo.push(i, j, v * s);
        }
    }
    for i in 0..nc {
        for (j, v) in b_rows.row(i) {
            coo.push(nu + i, j, v);
            coo.push(j, nu + i, v.conj());
        }
    }
    let kkt = coo.build();
    let mut rhs = vec![ZERO; nu + nc];
    rhs[nu..].copy_from_slice(b);
    let lu = SparseLu::new(&kkt)?;
    let x = lu.solve(&rhs);
    check_residual(&kkt, &x, &rhs, "CGO saddle-point system")
        .map_err(|e| Error::Solver(format!("{e}; the constraint set may be infeasible, refine the mesh")))?;
    let w = x[..nu].to_vec();
    let r = b_rows.matvec(&w);
    let res = norm2(&r.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>()) / norm2(b).max(1e-300);
    Ok((w, res))
}

fn block_mass(mesh: &CrossSectionMesh, nj: usize) -> Csr {
    let m = fem::mass(mesh);
    let n = mesh.n_nodes();
    let mut coo = Coo::with_capacity(nj * n, nj * n, nj * m.nnz());
    for b in 0..nj {
        for i in 0..n {
            for (j, v) in m.row(i) {
                coo.push(b * n + i, b * n + j, v);
            }
        }
    }
    coo.build()
}

fn jmax_for(v: &PotentialField, cfg: &CgoConfig) -> usize {
    cfg.jmax.unwrap_or(2 * v.mmax)
}

fn check_floor(p: &CGOParams, cfg: &CgoConfig) -> Result<()> {
    if p.tau < cfg.tau_floor {
        return invalid(format!("tau = {:.4} is below the configured floor {}", p.tau, cfg.tau_floor));
    }
    Ok(())
}

/// Periodic remainder for `zeta_1` with free lateral trace: the minimal-`L2` solution of the
/// interior equations.
pub fn solve_cgo_smooth(mesh: &CrossSectionMesh, v: &PotentialField, p: &CGOParams, cfg: &CgoConfig) -> Result<CGOSolution> {
    check_floor(p, cfg)?;
    let jmax = jmax_for(v, cfg);
    let nj = 2 * jmax + 1;
    let n = mesh.n_nodes();
    if v.is_zero() {
        return Ok(CGOSolution {
            params: p.clone(),
            kind: CgoKind::Smooth,
            remainder: ModeExpansion::zeros(0.0, jmax, n),
            residual: 0.0,
            trace_defect: 0.0,
        });
    }
    let sys = conjugated_operator(mesh, v, &p.zeta1, jmax);
    let rows: Vec<usize> = (0..nj).flat_map(|b| mesh.interior_nodes().into_iter().map(move |i| b * n + i)).collect();
    let all: Vec<usize> = (0..nj * n).collect();
    let b_rows = sys.op.select(&rows, &all);
    let b: Vec<C64> = rows.iter().map(|&r| sys.rhs[r]).collect();
    let (w, residual) = min_norm_solve(&block_mass(mesh, nj), &b_rows, &b)?;
    Ok(CGOSolution {
        params: p.clone(),
        kind: CgoKind::Smooth,
        remainder: ModeExpansion::from_flat(0.0, sys.jmax, sys.n, &w),
        residual,
        trace_defect: 0.0,
    })
}

/// Quintic smoothstep, `0` below `0` and `1` above `1`, `C^2`.
pub fn smoothstep5(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Cutoff on boundary positions: `1` where some adjacent edge has `-xi . nu > eps/2`,
/// `0` where every adjacent edge has `-xi . nu <= eps/3`, quintic in between.
pub fn boundary_cutoff(mesh: &CrossSectionMesh, xi: P2, eps: f64) -> Vec<f64> {
    (0..mesh.n_boundary())
        .map(|p| {
            let (a, b) = mesh.node_edges(p);
            let t = [a, b]
                .iter()
                .map(|&e| {
                    let nu = mesh.boundary_edges[e].normal;
                    -(xi[0] * nu[0] + xi[1] * nu[1])
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if t > eps / 2.0 {
                1.0
            } else {
                smoothstep5((t - eps / 3.0) / (eps / 6.0))
            }
        })
        .collect()
}

/// Remainder for `zeta_2` whose CGO solution vanishes on the face `-xi . nu > eps/2`:
/// minimal `L2` norm of `w` (the Carleman-weighted norm of `e^{zeta_2 x} w`) subject to the
/// interior equations and `w = -psi` on the boundary nodes where the cutoff is positive.
pub fn solve_cgo_vanishing(
    mesh: &CrossSectionMesh,
    v: &PotentialField,
    p: &CGOParams,
    eps: f64,
    cfg: &CgoConfig,
) -> Result<CGOSolution> {
    check_floor(p, cfg)?;
    if !(eps > 0.0) {
        return invalid("epsilon must be positive");
    }
    // |e^{zeta_2 . x}| = e^{tau xi . x'}: the real part of zeta_2 is (0, tau xi).
    let z = &p.zeta2;
    let e = z[0].re.abs() + (z[1].re - p.tau * p.xi[0]).abs() + (z[2].re - p.tau * p.xi[1]).abs();
    if e > 1e-12 * p.tau {
        return Err(Error::Assertion(format!("phase identity for zeta_2 fails by {e:.3e}")));
    }
    let jmax = jmax_for(v, cfg);
    let nj = 2 * jmax + 1;
    let n = mesh.n_nodes();
    let sys = conjugated_operator(mesh, v, z, jmax);
    let psi = boundary_cutoff(mesh, p.xi, eps);
    let constrained: Vec<usize> = (0..mesh.n_boundary()).filter(|&q| psi[q] > 0.0).collect();
    let mut rows: Vec<usize> = (0..nj).flat_map(|b| mesh.interior_nodes().into_iter().map(move |i| b * n + i)).collect();
    let all: Vec<usize> = (0..nj * n).collect();
    let interior_rows = sys.op.select(&rows, &all);
    let mut b: Vec<C64> = rows.iter().map(|&r| sys.rhs[r]).collect();
    let mut coo = Coo::with_capacity(rows.len() + nj * constrained.len(), nj * n, interior_rows.nnz() + nj * constrained.len());
    for i in 0..interior_rows.nrows {
        for (j, v) in interior_rows.row(i) {
            coo.push(i, j, v);
        }
    }
    let scale = interior_rows.max_abs();
    let j0 = jmax as i64;
    let mut r = interior_rows.nrows;
    for jb in -j0..=j0 {
        let off = ((jb + j0) as usize) * n;
        for &q in &constrained {
            coo.push(r, off + mesh.boundary_nodes[q], C64::new(scale, 0.0));
            b.push(C64::new(if jb == 0 { -psi[q] * scale } else { 0.0 }, 0.0));
            rows.push(off + mesh.boundary_nodes[q]);
            r += 1;
        }
    }
    let b_rows = coo.build();
    let (w, residual) = min_norm_solve(&block_mass(mesh, nj), &b_rows, &b)?;
    let remainder = ModeExpansion::from_flat(0.0, jmax, n, &w);
    let mut trace_defect: f64 = 0.0;
    for &q in constrained.iter().filter(|&&q| psi[q] >= 1.0) {
        let node = mesh.boundary_nodes[q];
        for jb in -j0..=j0 {
            let one = if jb == 0 { 1.0 } else { 0.0 };
            trace_defect = trace_defect.max((remainder.mode(jb)[node] + one).norm());
        }
    }
    Ok(CGOSolution { params: p.clone(), kind: CgoKind::Vanishing, remainder, residual, trace_defect })
}

impl CGOSolution {
    pub fn zeta(&self) -> &C3 {
        self.params.zeta(self.kind)
    }

    /// `||v||_{L2}` over the cell.
    pub fn remainder_norm(&self, mass: &Csr) -> f64 {
        self.remainder.norm_sq(mass).sqrt()
    }

    /// Expansion of `u = e^{zeta . x}(1 + w)` in the fiber modes of `ctx`; errors if the
    /// remainder reaches outside `|k| <= K`.
    pub fn fiber_expansion(&self, ctx: &FiberContext) -> Result<ModeExpansion> {
        let z = self.zeta();
        let m = axial_mode(z, ctx.theta)
            .ok_or_else(|| Error::Validation("CGO phase is not quasi-periodic for this fiber".into()))?;
        let jmax = self.remainder.kmax as i64;
        if (m - jmax).abs() > ctx.kmax as i64 || (m + jmax).abs() > ctx.kmax as i64 {
            return invalid(format!(
                "CGO modes {}..={} do not fit in |k| <= {}",
                m - jmax,
                m + jmax,
                ctx.kmax
            ));
        }
        let mesh = &*ctx.mesh;
        let ph = transverse_phase(mesh, z);
        let mut out = ModeExpansion::zeros(ctx.theta, ctx.kmax, mesh.n_nodes());
        for j in -jmax..=jmax {
            let w = self.remainder.mode(j);
            let o = out.mode_mut(m + j);
            for i in 0..mesh.n_nodes() {
                let one = if j == 0 { 1.0 } else { 0.0 };
                o[i] = ph[i] * (w[i] + one);
            }
        }
        Ok(out)
    }

    pub fn boundary_trace(&self, ctx: &FiberContext) -> Result<DirichletData> {
        Ok(DirichletData::trace(&ctx.mesh, &self.fiber_expansion(ctx)?))
    }
}

/// Analytic zero-trace test field `w = e^{i beta_j x1} p(x') b(x')` with `p` a complex
/// quadratic and `b` a defining function of the cross-section (or an interior bump).
#[derive(Clone, Debug)]
pub struct TestField {
    pub j: i64,
    /// Coefficients of `1, x, y, x^2, xy, y^2`.
    pub poly: [C64; 6],
    pub defining: Defining,
}

#[derive(Clone, Debug)]
pub enum Defining {
    Disk { radius: f64 },
    Ellipse { a: f64, b: f64 },
    /// Product of inward edge distances of a convex polygon.
    Polygon { vertices: Vec<P2> },
    /// `(1 - |x|^2 / rho^2)^3` inside `|x| < rho`.
    Bump { rho: f64 },
}

impl Defining {
    pub fn for_shape(shape: &Shape) -> Result<Self> {
        Ok(match shape {
            Shape::Disk { radius } => Defining::Disk { radius: *radius },
            Shape::Ellipse { a, b } => Defining::Ellipse { a: *a, b: *b },
            Shape::Polygon { .. } => {
                let v = shape.ccw_vertices().unwrap();
                let n = v.len();
                for i in 0..n {
                    let (a, b, c) = (v[i], v[(i + 1) % n], v[(i + 2) % n]);
                    if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) <= 0.0 {
                        return invalid("defining function needs a convex polygon");
                    }
                }
                Defining::Polygon { vertices: v }
            }
        })
    }

    /// Value, gradient and Laplacian.
    fn eval(&self, x: P2) -> (f64, P2, f64) {
        match self {
            Defining::Disk { radius } => {
                let r2 = radius * radius;
                (1.0 - (x[0] * x[0] + x[1] * x[1]) / r2, [-2.0 * x[0] / r2, -2.0 * x[1] / r2], -4.0 / r2)
            }
            Defining::Ellipse { a, b } => {
                let (a2, b2) = (a * a, b * b);
                (1.0 - x[0] * x[0] / a2 - x[1] * x[1] / b2, [-2.0 * x[0] / a2, -2.0 * x[1] / b2], -2.0 / a2 - 2.0 / b2)
            }
            Defining::Bump { rho } => {
                let s = (x[0] * x[0] + x[1] * x[1]) / (rho * rho);
                if s >= 1.0 {
                    return (0.0, [0.0, 0.0], 0.0);
                }
                let gs = [2.0 * x[0] / (rho * rho), 2.0 * x[1] / (rho * rho)];
                let om = 1.0 - s;
                (
                    om.powi(3),
                    [-3.0 * om * om * gs[0], -3.0 * om * om * gs[1]],
                    6.0 * om * (gs[0] * gs[0] + gs[1] * gs[1]) - 3.0 * om * om * 4.0 / (rho * rho),
                )
            }
            Defining::Polygon { vertices } => {
                let n = vertices.len();
                let mut d = Vec::with_capacity(n);
                let mut g = Vec::with_capacity(n);
                for i in 0..n {
                    let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                    let l = ex.hypot(ey);
                    // inward normal of a counter-clockwise edge
                    let nin = [-ey / l, ex / l];
                    d.push(nin[0] * (x[0] - a[0]) + nin[1] * (x[1] - a[1]));
                    g.push(nin);
                }
                let prod_except = |skip: &[usize]| -> f64 {
                    (0..n).filter(|i| !skip.contains(i)).map(|i| d[i]).product()
                };
                let val = prod_except(&[]);
                let mut grad = [0.0, 0.0];
                for e in 0..n {
                    let p = prod_except(&[e]);
                    grad[0] += g[e][0] * p;
                    grad[1] += g[e][1] * p;
                }
                let mut lap = 0.0;
                for e in 0..n {
                    for f in 0..n {
                        if e != f {
                            lap += (g[e][0] * g[f][0] + g[e][1] * g[f][1]) * prod_except(&[e, f]);
                        }
                    }
                }
                (val, grad, lap)
            }
        }
    }
}

impl TestField {
    /// `(q, grad q, Lap' q)` for the transverse factor `q = p b`.
    fn transverse(&self, x: P2) -> (C64, [C64; 2], C64) {
        let c = &self.poly;
        let p = c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[0] * x[0] + c[4] * x[0] * x[1] + c[5] * x[1] * x[1];
        let gp = [c[1] + c[3] * 2.0 * x[0] + c[4] * x[1], c[2] + c[4] * x[0] + c[5] * 2.0 * x[1]];
        let lp = c[3] * 2.0 + c[5] * 2.0;
        let (b, gb, lb) = self.defining.eval(x);
        let q = p * b;
        let gq = [gp[0] * b + p * gb[0], gp[1] * b + p * gb[1]];
        let lq = lp * b + (gp[0] * gb[0] + gp[1] * gb[1]) * 2.0 + p * lb;
        (q, gq, lq)
    }

    pub fn scaled(&self, a: C64) -> TestField {
        TestField { j: self.j, poly: self.poly.map(|c| c * a), defining: self.defining.clone() }
    }
}

/// One row of the empirical Carleman table.
#[derive(Clone, Debug, Serialize)]
pub struct CarlemanRow {
    pub tau: f64,
    pub min_ratio: f64,
    pub ratios: Vec<f64>,
}

/// Boundary quadrature points of the exact curve: (point, outward normal, weight).
pub fn boundary_quadrature(shape: &Shape, n: usize) -> Vec<(P2, P2, f64)> {
    let gauss = fem::LINE_GAUSS3;
    let mut out = Vec::with_capacity(3 * n);
    match shape {
        Shape::Disk { .. } | Shape::Ellipse { .. } => {
            let (a, b) = match shape {
                Shape::Disk { radius } => (*radius, *radius),
                Shape::Ellipse { a, b } => (*a, *b),
                _ => unreachable!(),
            };
            let dt = 2.0 * PI / n as f64;
            for s in 0..n {
                for (g, w) in gauss {
                    let t = (s as f64 + g) * dt;
                    let p = [a * t.cos(), b * t.sin()];
                    let tan = [-a * t.sin(), b * t.cos()];
                    let sp = tan[0].hypot(tan[1]);
                    out.push((p, [tan[1] / sp, -tan[0] / sp], w * sp * dt));
                }
            }
        }
        Shape::Polygon { .. } => {
            let v = shape.ccw_vertices().unwrap();
            let per_edge = (n / v.len()).max(1);
            for i in 0..v.len() {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                let l = ex.hypot(ey);
                let nu = [ey / l, -ex / l];
                for s in 0..per_edge {
                    for (g, w) in gauss {
                        let t = (s as f64 + g) / per_edge as f64;
                        out.push(([a[0] + t * ex, a[1] + t * ey], nu, w * l / per_edge as f64));
                    }
                }
            }
        }
    }
    out
}

/// Ratio of the two sides of the Carleman inequality (constant stripped) for analytic fields:
/// `[||e^{-tau xi.x'} (-Lap+V) w||^2 + tau ||e^{..}|xi.nu|^{1/2} d_nu w||^2_{xi.nu<0}]
///  / [||e^{..} w||^2 + tau ||e^{..}(xi.nu)^{1/2} d_nu w||^2_{xi.nu>0}]`.
pub fn carleman_ratio(
    mesh: &CrossSectionMesh,
    shape: &Shape,
    v: &PotentialField,
    xi: P2,
    theta: f64,
    tau: f64,
    w: &TestField,
) -> Result<f64> {
    let beta = theta + 2.0 * PI * w.j as f64;
    let bq = boundary_quadrature(shape, 512);
    let trace = bq.iter().map(|(p, _, _)| w.transverse(*p).0.norm()).fold(0.0, f64::max);
    let size = mesh.vertices.iter().map(|p| w.transverse(*p).0.norm()).fold(0.0, f64::max);
    if trace > 1e-10 * size.max(1e-300) {
        return invalid("test field does not vanish on the boundary");
    }
    let n1 = (4 * v.mmax + 4).max(8);
    // Shift the exponent so the largest weight is 1.
    let wmin = mesh
        .vertices
        .iter()
        .chain(bq.iter().map(|(p, _, _)| p))
        .map(|p| xi[0] * p[0] + xi[1] * p[1])
        .fold(f64::INFINITY, f64::min);
    let weight = |x: P2| (-2.0 * tau * (xi[0] * x[0] + xi[1] * x[1] - wmin)).exp();
    // re: weighted |(-Lap+V)w|^2, im: weighted |w|^2; |e^{i beta x1}| = 1 so only V depends on x1.
    let sums = fem::integrate(mesh, |x, t, l| {
        let (q, _, lq) = w.transverse(x);
        let wt = weight(x);
        let tri = mesh.triangles[t];
        let mut acc = 0.0;
        for s in 0..n1 {
            let x1 = s as f64 / n1 as f64;
            let vv: f64 = (0..3).map(|c| v.eval(x1, tri[c]) * l[c]).sum();
            acc += (q * beta * beta - lq + q * vv).norm_sqr() / n1 as f64;
        }
        C64::new(wt * acc, wt * q.norm_sqr())
    });
    let mut num = sums.re;
    let mut den = sums.im;
    for (p, nu, wq) in &bq {
        let (_, gq, _) = w.transverse(*p);
        let dn = (gq[0] * nu[0] + gq[1] * nu[1]).norm_sqr();
        let xn = xi[0] * nu[0] + xi[1] * nu[1];
        let term = tau * weight(*p) * xn.abs() * dn * wq;
        if xn < 0.0 {
            num += term;
        } else {
            den += term;
        }
    }
    if !(den > 0.0) {
        return invalid("test field is identically zero");
    }
    Ok(num / den)
}

/// Minimum ratio per tau over a set of test fields.
pub fn carleman_empirical(
    mesh_for_tau: &dyn Fn(f64) -> Result<CrossSectionMesh>,
    shape: &Shape,
    v_for_mesh: &dyn Fn(&CrossSectionMesh) -> PotentialField,
    xi: P2,
    theta: f64,
    taus: &[f64],
    fields: &[TestField],
) -> Result<Vec<CarlemanRow>> {
    taus.iter()
        .map(|&tau| {
            let mesh = mesh_for_tau(tau)?;
            let v = v_for_mesh(&mesh);
            let ratios = fields
                .iter()
                .map(|w| carleman_ratio(&mesh, shape, &v, xi, theta, tau, w))
                .collect::<Result<Vec<_>>>()?;
            let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(CarlemanRow { tau, min_ratio, ratios })
        })
        .collect()
}
