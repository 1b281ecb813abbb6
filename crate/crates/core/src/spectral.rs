//! Quasi-periodic Fourier machinery in the axial variable.
//!
//! A cell field is `v(x1, x')` on `(0,1) x omega`; the axial basis is
//! `phi_k(x1) = exp(i beta_k x1)` with `beta_k = theta + 2 pi k`, orthonormal in `L2(0,1)`.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::fem;
use crate::geometry::CrossSectionMesh;
use crate::linalg::{Csr, SparseLu, C64, I, ZERO};

use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct FiberContext {
    pub theta: f64,
    /// Modes run over `-kmax..=kmax`.
    pub kmax: usize,
    pub mesh: Arc<CrossSectionMesh>,
}

impl FiberContext {
    pub fn new(theta: f64, kmax: usize, mesh: Arc<CrossSectionMesh>) -> Result<Self> {
        if !(0.0..2.0 * PI).contains(&theta) {
            return invalid(format!("theta must lie in [0, 2 pi), got {theta}"));
        }
        if kmax < 1 {
            return invalid("mode truncation K must be at least 1");
        }
        Ok(FiberContext { theta, kmax, mesh })
    }

    pub fn n_modes(&self) -> usize {
        2 * self.kmax + 1
    }

    pub fn modes(&self) -> impl Iterator<Item = i64> {
        let k = self.kmax as i64;
        -k..=k
    }

    pub fn beta(&self, k: i64) -> f64 {
        beta(self.theta, k)
    }

    /// Minimal x1-grid (number of intervals) for this truncation.
    pub fn min_grid(&self) -> usize {
        4 * self.kmax + 4
    }
}

#[inline]
pub fn beta(theta: f64, k: i64) -> f64 {
    theta + 2.0 * PI * k as f64
}

/// Per-mode nodal cross-section fields, slot `k + kmax`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeExpansion {
    pub theta: f64,
    pub kmax: usize,
    pub modes: Vec<Vec<C64>>,
}

impl ModeExpansion {
    pub fn zeros(theta: f64, kmax: usize, n_nodes: usize) -> Self {
        ModeExpansion { theta, kmax, modes: vec![vec![ZERO; n_nodes]; 2 * kmax + 1] }
    }

    pub fn n_nodes(&self) -> usize {
        self.modes.first().map_or(0, |m| m.len())
    }

    pub fn mode(&self, k: i64) -> &[C64] {
        &self.modes[(k + self.kmax as i64) as usize]
    }

    pub fn mode_mut(&mut self, k: i64) -> &mut Vec<C64> {
        let s = (k + self.kmax as i64) as usize;
        &mut self.modes[s]
    }

    pub fn has_mode(&self, k: i64) -> bool {
        k.unsigned_abs() as usize <= self.kmax
    }

    /// `sum_k ||v_k||^2` in `L2(omega)`, which is the cell `L2` norm squared.
    pub fn norm_sq(&self, mass: &Csr) -> f64 {
        self.modes.iter().map(|m| mass.form(m, m).re).sum()
    }

    /// Flat vector, mode-major.
    pub fn to_flat(&self) -> Vec<C64> {
        self.modes.concat()
    }

    pub fn from_flat(theta: f64, kmax: usize, n_nodes: usize, flat: &[C64]) -> Self {
        ModeExpansion { theta, kmax, modes: flat.chunks(n_nodes).map(|c| c.to_vec()).collect() }
    }

    /// Value at `(x1, node)`.
    pub fn eval(&self, x1: f64, node: usize) -> C64 {
        let k0 = self.kmax as i64;
        (-k0..=k0)
            .map(|k| self.mode(k)[node] * C64::from_polar(1.0, beta(self.theta, k) * x1))
            .sum()
    }

    pub const MAGIC: &'static [u8; 8] = b"PCALMODE";
    pub const VERSION: u32 = 1;

    /// Binary array file: magic, version, theta, K, node count, 64-byte mesh hash,
    /// then little-endian (re, im) pairs mode-major.
    pub fn write_binary<W: Write>(&self, mut w: W, mesh_hash: &str) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&self.theta.to_le_bytes())?;
        w.write_all(&(self.kmax as u32).to_le_bytes())?;
        w.write_all(&(self.n_nodes() as u64).to_le_bytes())?;
        let mut hash = [b' '; 64];
        for (d, s) in hash.iter_mut().zip(mesh_hash.bytes()) {
            *d = s;
        }
        w.write_all(&hash)?;
        for m in &self.modes {
            for v in m {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Returns the expansion and the stored mesh hash.
    pub fn read_binary<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a mode expansion file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let ver = u32::from_le_bytes(b4);
        if ver != Self::VERSION {
            return Err(Error::Format(format!("unsupported mode file version {ver}")));
        }
        r.read_exact(&mut b8)?;
        let theta = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let kmax = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut hash = [0u8; 64];
        r.read_exact(&mut hash)?;
        let hash = String::from_utf8_lossy(&hash).trim().to_string();
        let mut modes = vec![vec![ZERO; n]; 2 * kmax + 1];
        for m in modes.iter_mut() {
            for v in m.iter_mut() {
                r.read_exact(&mut b8)?;
                let re = f64::from_le_bytes(b8);
                r.read_exact(&mut b8)?;
                *v = C64::new(re, f64::from_le_bytes(b8));
            }
        }
        Ok((ModeExpansion { theta, kmax, modes }, hash))
    }
}

/// Samples of a cell field at `x1 = j/n`, `j = 0..=n` (both end faces included).
#[derive(Clone, Debug, PartialEq)]
pub struct CellField {
    pub slices: Vec<Vec<C64>>,
}

impl CellField {
    pub fn from_fn(n: usize, n_nodes: usize, mut f: impl FnMut(f64, usize) -> C64) -> Self {
        CellField {
            slices: (0..=n)
                .map(|j| {
                    let x1 = j as f64 / n as f64;
                    (0..n_nodes).map(|i| f(x1, i)).collect()
                })
                .collect(),
        }
    }

    pub fn zeros(n: usize, n_nodes: usize) -> Self {
        CellField { slices: vec![vec![ZERO; n_nodes]; n + 1] }
    }

    /// Number of x1 intervals.
    pub fn intervals(&self) -> usize {
        self.slices.len() - 1
    }

    /// Trapezoid in x1 times the cross-section mass form.
    pub fn norm_sq(&self, mass: &Csr) -> f64 {
        let n = self.intervals();
        self.slices
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let w = if j == 0 || j == n { 0.5 } else { 1.0 } / n as f64;
                w * mass.form(s, s).re
            })
            .sum()
    }

    pub fn max_abs_diff(&self, other: &CellField) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).norm()))
            .fold(0.0, f64::max)
    }
}

/// Axial inner products with `phi_k`, trapezoid rule on the sample grid.
pub fn fiber_project(v: &CellField, ctx: &FiberContext) -> Result<ModeExpansion> {
    let n = v.intervals();
    if n < ctx.min_grid() {
        return invalid(format!("x1-grid of {n} intervals is too coarse for K = {} (need {})", ctx.kmax, ctx.min_grid()));
    }
    let nn = v.slices[0].len();
    let mut out = ModeExpansion::zeros(ctx.theta, ctx.kmax, nn);
    for k in ctx.modes() {
        let b = ctx.beta(k);
        let m = out.mode_mut(k);
        for (j, s) in v.slices.iter().enumerate() {
            let w = if j == 0 || j == n { 0.5 } else { 1.0 } / n as f64;
            let ph = C64::from_polar(w, -b * j as f64 / n as f64);
            for (a, x) in m.iter_mut().zip(s) {
                *a += ph * x;
            }
        }
    }
    Ok(out)
}

/// `v = sum_k v_k phi_k` sampled on an `n`-interval grid.
pub fn fiber_synthesize(e: &ModeExpansion, n: usize) -> CellField {
    let nn = e.n_nodes();
    let k0 = e.kmax as i64;
    let mut out = CellField::zeros(n, nn);
    for (j, s) in out.slices.iter_mut().enumerate() {
        let x1 = j as f64 / n as f64;
        for k in -k0..=k0 {
            let ph = C64::from_polar(1.0, beta(e.theta, k) * x1);
            for (a, x) in s.iter_mut().zip(e.mode(k)) {
                *a += ph * x;
            }
        }
    }
    out
}

/// Discrete `-Lap' + beta_k^2` acting mode-wise on fields vanishing on the boundary.
pub struct ModeOperator {
    interior: Vec<usize>,
    stiff: Csr,
    mass: Csr,
    mass_lu: SparseLu,
    n_nodes: usize,
}

impl ModeOperator {
    pub fn new(mesh: &CrossSectionMesh) -> Result<Self> {
        let interior = mesh.interior_nodes();
        let stiff = fem::stiffness(mesh).select(&interior, &interior);
        let mass = fem::mass(mesh).select(&interior, &interior);
        let mass_lu = SparseLu::new(&mass)?;
        Ok(ModeOperator { interior, stiff, mass, mass_lu, n_nodes: mesh.n_nodes() })
    }

    /// Output is the mass-matrix representation `M^{-1}(S + beta^2 M) v` on interior nodes.
    pub fn apply(&self, e: &ModeExpansion) -> ModeExpansion {
        let mut out = ModeExpansion::zeros(e.theta, e.kmax, self.n_nodes);
        let k0 = e.kmax as i64;
        for k in -k0..=k0 {
            let b2 = beta(e.theta, k).powi(2);
            let x: Vec<C64> = self.interior.iter().map(|&i| e.mode(k)[i]).collect();
            let sx = self.stiff.matvec(&x);
            let y = self.mass_lu.solve(&sx);
            let o = out.mode_mut(k);
            for (q, &i) in self.interior.iter().enumerate() {
                o[i] = y[q] + x[q] * b2;
            }
        }
        out
    }

    /// `L2(omega)` inner product of two nodal fields restricted to interior nodes.
    pub fn inner(&self, a: &[C64], b: &[C64]) -> C64 {
        let x: Vec<C64> = self.interior.iter().map(|&i| a[i]).collect();
        let y: Vec<C64> = self.interior.iter().map(|&i| b[i]).collect();
        self.mass.form(&x, &y)
    }
}

pub fn mode_operator_apply(e: &ModeExpansion, ctx: &FiberContext) -> Result<ModeExpansion> {
    Ok(ModeOperator::new(&ctx.mesh)?.apply(e))
}

#[derive(Clone, Copy, Debug)]
pub struct MembershipTol {
    /// Relative defect of `v(1) - e^{i theta} v(0)`.
    pub value: f64,
    /// Relative defect of the axial derivative traces.
    pub slope: f64,
    /// Relative dual-norm residual of the mode identity.
    pub mode: f64,
}

impl Default for MembershipTol {
    fn default() -> Self {
        MembershipTol { value: 1e-8, slope: 1e-2, mode: 3e-2 }
    }
}

#[derive(Clone, Debug)]
pub struct Membership {
    pub member: bool,
    pub value_defect: f64,
    pub slope_defect: f64,
    pub mode_residual: f64,
}

/// Decide membership of `(v, lap_v)` in the quasi-periodic Laplacian domain by two
/// independent tests: end-face traces, and the mode-wise identity
/// `(-Lap' + beta_k^2) v_k = -(Lap v)_k`. Disagreement is reported as an error.
pub fn quasi_periodic_membership(
    v: &CellField,
    lap_v: &CellField,
    ctx: &FiberContext,
    tol: MembershipTol,
) -> Result<Membership> {
    let mesh = &ctx.mesh;
    let n = v.intervals();
    if lap_v.intervals() != n || n < 4 {
        return invalid("v and its Laplacian must share an x1-grid with at least 4 intervals");
    }
    let mass = fem::mass(mesh);
    let vnorm = v.norm_sq(&mass).sqrt().max(1e-300);
    let ph = C64::from_polar(1.0, ctx.theta);
    let dx = 1.0 / n as f64;

    let diff: Vec<C64> = v.slices[n].iter().zip(&v.slices[0]).map(|(a, b)| a - ph * b).collect();
    let value_defect = mass.form(&diff, &diff).re.sqrt() / vnorm;

    // Second-order one-sided differences; their leading errors cancel for quasi-periodic v.
    let s = &v.slices;
    let d0: Vec<C64> = (0..s[0].len()).map(|i| (-3.0 * s[0][i] + 4.0 * s[1][i] - s[2][i]) / (2.0 * dx)).collect();
    let d1: Vec<C64> = (0..s[0].len()).map(|i| (3.0 * s[n][i] - 4.0 * s[n - 1][i] + s[n - 2][i]) / (2.0 * dx)).collect();
    let sdiff: Vec<C64> = d1.iter().zip(&d0).map(|(a, b)| a - ph * b).collect();
    let bmax = ctx.beta(ctx.kmax as i64).abs().max(ctx.beta(-(ctx.kmax as i64)).abs());
    let slope_defect = mass.form(&sdiff, &sdiff).re.sqrt() / (vnorm * bmax.max(1.0));

    // Mode identity, tested against interior hat functions and measured in the dual norm.
    let interior = mesh.interior_nodes();
    let stiff = fem::stiffness(mesh);
    let a_int = fem::add(&stiff.select(&interior, &interior), &mass.select(&interior, &interior), C64::new(1.0, 0.0));
    let lu = SparseLu::new(&a_int)?;
    let vk = fiber_project(v, ctx)?;
    let hk = fiber_project(lap_v, ctx)?;
    let dual = |r: &[C64]| -> f64 { crate::linalg::dot(r, &lu.solve(r)).re.max(0.0).sqrt() };
    let (mut res, mut scale) = (0.0, 0.0);
    for k in ctx.modes() {
        let b2 = ctx.beta(k).powi(2);
        let sv = stiff.matvec(vk.mode(k));
        let mv = mass.matvec(vk.mode(k));
        let mh = mass.matvec(hk.mode(k));
        let lhs: Vec<C64> = interior.iter().map(|&i| sv[i] + mv[i] * b2).collect();
        let rhs: Vec<C64> = interior.iter().map(|&i| -mh[i]).collect();
        let r: Vec<C64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        res += dual(&r).powi(2);
        scale += dual(&lhs).powi(2) + dual(&rhs).powi(2);
    }
    let mode_residual = res.sqrt() / scale.sqrt().max(1e-300);

    let by_trace = value_defect <= tol.value && slope_defect <= tol.slope;
    let by_mode = mode_residual <= tol.mode;
    if by_trace != by_mode {
        return Err(Error::Validation(format!(
            "inconsistent field/Laplacian pair: trace test {by_trace} (value {value_defect:.2e}, slope {slope_defect:.2e}), mode test {by_mode} (residual {mode_residual:.2e})"
        )));
    }
    Ok(Membership { member: by_trace, value_defect, slope_defect, mode_residual })
}

/// Floquet-Bloch-Gel'fand transform of finitely many translates:
/// `(U f)_theta = sum_n e^{-i n theta} f_n`, where `slices[j]` holds `f_{n0 + j}`.
pub fn fbg_forward(slices: &[CellField], n0: i64, thetas: &[f64]) -> Vec<CellField> {
    if slices.is_empty() {
        return Vec::new();
    }
    let shape = (slices[0].intervals(), slices[0].slices[0].len());
    thetas
        .iter()
        .map(|&th| {
            let mut out = CellField::zeros(shape.0, shape.1);
            for (j, f) in slices.iter().enumerate() {
                let ph = C64::from_polar(1.0, -(n0 + j as i64) as f64 * th);
                for (o, s) in out.slices.iter_mut().zip(&f.slices) {
                    for (a, x) in o.iter_mut().zip(s) {
                        *a += ph * x;
                    }
                }
            }
            out
        })
        .collect()
}

/// Uniform grid of `n` quasi-momenta on `[0, 2 pi)`.
pub fn theta_grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect()
}

/// Mean over a uniform theta-grid of `||(U f)_theta||^2`; equals `sum_n ||f_n||^2`
/// when the grid has at least as many points as there are slices.
pub fn fbg_energy(transformed: &[CellField], mass: &Csr) -> f64 {
    transformed.iter().map(|f| f.norm_sq(mass)).sum::<f64>() / transformed.len() as f64
}

/// `exp(i beta x1)` helper used by callers building analytic fields.
#[inline]
pub fn axial_phase(beta: f64, x1: f64) -> C64 {
    (I * beta * x1).exp()
}
