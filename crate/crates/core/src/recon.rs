//! Recovery of potential differences from boundary data: the boundary pairing of CGO
//! solutions, Fourier-coefficient estimates, sector-limited reconstruction, the dual norm of
//! the cell and stability experiments.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cgo::{
    make_cgo_params, params_for_tau, solve_cgo_smooth, solve_cgo_vanishing, xi_from_eta, CGOParams, CGOSolution,
    CgoConfig, CgoKind,
};
use crate::error::{invalid, Error, Result};
use crate::fem;
use crate::forward::{dn_sup_over_fibers, BoundaryField, FiberSolver, PotentialField};
use crate::geometry::{epsilon_faces, BoundaryPartition, CrossSectionMesh, P2};
use crate::linalg::{SparseLu, C64, ZERO};
use crate::spectral::{CellField, FiberContext};

/// `e^{-e}`: the log-log branch of the modulus is below 1 only for smaller thresholds.
pub const GAMMA_STAR_MAX: f64 = 0.065_988_035_845_312_54;

/// Default threshold between the linear and log-log branches of the modulus.
pub const DEFAULT_GAMMA_STAR: f64 = 1e-8;

/// `0` at `0`, `(ln|ln g|)^{-1}` on `(0, g*)`, `g` on `[g*, inf)`.
pub fn stability_modulus(gamma: f64, gamma_star: f64) -> Result<f64> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return invalid(format!("gamma must be finite and nonnegative, got {gamma}"));
    }
    if !(gamma_star > 0.0 && gamma_star < GAMMA_STAR_MAX) {
        return invalid(format!("gamma* must lie in (0, e^-e), got {gamma_star}"));
    }
    Ok(if gamma == 0.0 {
        0.0
    } else if gamma < gamma_star {
        1.0 / gamma.ln().abs().ln()
    } else {
        gamma
    })
}

/// Two potentials on a waveguide cross-section, the source of simulated boundary data.
#[derive(Clone, Debug)]
pub struct DnSimulation {
    pub v1: PotentialField,
    pub v2: PotentialField,
    pub mesh: Arc<CrossSectionMesh>,
    /// Lower bound on the fiber truncation; raised per frequency when the CGO modes need it.
    pub kmax: usize,
    pub part: BoundaryPartition,
    /// DN difference norm, if known; enters the exponential budget term.
    pub gamma: Option<f64>,
}

/// Factorized forward problems of both potentials on one fiber.
pub struct FiberPair {
    pub ctx: FiberContext,
    pub s1: FiberSolver,
    pub s2: FiberSolver,
}

impl DnSimulation {
    pub fn fiber(&self, theta: f64, kmax: usize) -> Result<FiberPair> {
        let ctx = FiberContext::new(theta, kmax.max(self.kmax), self.mesh.clone())?;
        let s1 = FiberSolver::new(&self.v1, &ctx)?;
        let s2 = FiberSolver::new(&self.v2, &ctx)?;
        Ok(FiberPair { ctx, s1, s2 })
    }

    pub fn c_omega(&self) -> f64 {
        self.mesh.max_radius()
    }
}

impl FiberPair {
    /// `(L2 - L1) f` on the whole boundary.
    pub fn difference_apply(&self, f: &BoundaryField) -> Result<BoundaryField> {
        Ok(self.s2.dn_apply(f)?.sub(&self.s1.dn_apply(f)?))
    }
}

/// Error budget of one estimate: the two terms of the `1/tau + e^{C' tau} gamma^2` law kept apart.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Budget {
    pub inv_tau: f64,
    /// `e^{2 c_omega tau} gamma^2`; `NaN` when gamma is unknown.
    pub exp_gamma: f64,
    /// Measured `||e^{-tau xi.x'} d_nu u||^2` over the observed face.
    pub weighted_flux: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Pairing {
    /// `int_{xi.nu <= eps} [(L2 - L1) f] conj(u1)`.
    pub observed: C64,
    /// The same integral over the rest of the boundary; only available in simulation.
    pub unobserved: C64,
    pub budget: Budget,
}

/// Zero-trace check for `f`: values outside the input face must be negligible, then are cleared.
fn restrict_to_face(f: &mut BoundaryField, mesh: &CrossSectionMesh, part: &BoundaryPartition) -> Result<()> {
    let mut allowed = vec![false; mesh.n_boundary()];
    for p in part.f.interior_node_positions(mesh) {
        allowed[p] = true;
    }
    let scale = f.values.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max);
    let mut outside: f64 = 0.0;
    for m in f.values.iter_mut() {
        for (p, v) in m.iter_mut().enumerate() {
            if !allowed[p] {
                outside = outside.max(v.norm());
                *v = ZERO;
            }
        }
    }
    if outside > 1e-8 * scale {
        return invalid(format!(
            "CGO trace is {:.3e} (relative) outside the input face; the face does not contain the support",
            outside / scale.max(1e-300)
        ));
    }
    Ok(())
}

/// Boundary pairing of the vanishing solution `u2` (for `V2`) with the smooth solution `u1`
/// (for `V1`) through the DN difference, split into the observed part over `xi.nu <= eps`
/// and the rest.
pub fn pairing_from_boundary(
    pair: &FiberPair,
    part: &BoundaryPartition,
    u2: &CGOSolution,
    u1: &CGOSolution,
    eps: f64,
    gamma: Option<f64>,
) -> Result<Pairing> {
    if u2.kind != CgoKind::Vanishing || u1.kind != CgoKind::Smooth {
        return invalid("pairing needs a vanishing solution for V2 and a smooth solution for V1");
    }
    let mesh = &*pair.ctx.mesh;
    let xi = u2.params.xi;
    let (plus, minus) = epsilon_faces(mesh, xi, eps)?;
    if let Some(e) = minus.edges.iter().find(|e| !part.g.contains(**e)) {
        return invalid(format!("boundary edge {e} with xi.nu <= eps is not in the output face"));
    }
    let mut f = u2.boundary_trace(&pair.ctx)?;
    restrict_to_face(&mut f, mesh, part)?;
    let q = pair.difference_apply(&f)?;
    let b = u1.boundary_trace(&pair.ctx)?;
    let m_minus = fem::boundary_mass(mesh, minus.edges.iter().copied());
    let m_plus = fem::boundary_mass(mesh, plus.edges.iter().copied());
    let observed = q.pairing(&b, &m_minus);
    let unobserved = q.pairing(&b, &m_plus);
    let tau = u2.params.tau;
    let mut weighted = q.clone();
    for m in weighted.values.iter_mut() {
        for (p, v) in m.iter_mut().enumerate() {
            let x = mesh.vertices[mesh.boundary_nodes[p]];
            *v *= (-tau * (xi[0] * x[0] + xi[1] * x[1])).exp();
        }
    }
    let c_omega = mesh.max_radius();
    let budget = Budget {
        inv_tau: 1.0 / tau,
        exp_gamma: gamma.map_or(f64::NAN, |g| (2.0 * c_omega * tau).exp() * g * g),
        weighted_flux: weighted.norm_sq(&m_minus),
    };
    Ok(Pairing { observed, unobserved, budget })
}

/// Estimate of `int (V2 - V1) e^{-i(2 pi k x1 + eta.x')}` at one frequency.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrequencySample {
    pub k: i64,
    pub eta: P2,
    pub tau: f64,
    pub r: f64,
    pub theta: f64,
    pub xi: P2,
    pub estimate: C64,
    /// Simulation-only remainder of the Green identity over the unobserved boundary.
    pub unobserved: C64,
    pub budget: Budget,
}

/// Whether `eta` is reachable from the probe: its orthogonal direction lies within `eps` of `xi0`.
pub fn sector_contains(xi0: P2, eps: f64, eta: P2) -> bool {
    if eta[0] == 0.0 && eta[1] == 0.0 {
        return false;
    }
    let xi = xi_from_eta(eta, Some(xi0));
    (xi[0] - xi0[0]).hypot(xi[1] - xi0[1]) <= eps
}

/// Fiber truncation that holds both CGO expansions.
fn needed_kmax(p: &CGOParams, j1: usize, j2: usize) -> Result<usize> {
    let m1 = crate::cgo::axial_mode(&p.zeta1, p.theta).ok_or_else(|| Error::Assertion("zeta_1 axial mode".into()))?;
    let m2 = crate::cgo::axial_mode(&p.zeta2, p.theta).ok_or_else(|| Error::Assertion("zeta_2 axial mode".into()))?;
    Ok(((m1.abs() + j1 as i64).max(m2.abs() + j2 as i64)) as usize)
}

pub fn estimate_from_params(sim: &DnSimulation, p: &CGOParams, eps: f64, cfg: &CgoConfig) -> Result<FrequencySample> {
    let xi0 = sim.part.xi0;
    if (p.xi[0] - xi0[0]).hypot(p.xi[1] - xi0[1]) > eps {
        return invalid(format!(
            "frequency eta = ({:.4}, {:.4}) is outside the accessible sector of probe xi0 = ({:.4}, {:.4}) with eps = {eps}",
            p.eta[0], p.eta[1], xi0[0], xi0[1]
        ));
    }
    let mesh = &*sim.mesh;
    let u1 = solve_cgo_smooth(mesh, &sim.v1, p, cfg)?;
    let u2 = solve_cgo_vanishing(mesh, &sim.v2, p, eps, cfg)?;
    let kmax = needed_kmax(p, u1.remainder.kmax, u2.remainder.kmax)?;
    let pair = sim.fiber(p.theta, kmax)?;
    let pr = pairing_from_boundary(&pair, &sim.part, &u2, &u1, eps, sim.gamma)?;
    Ok(FrequencySample {
        k: p.k,
        eta: p.eta,
        tau: p.tau,
        r: p.r,
        theta: p.theta,
        xi: p.xi,
        estimate: pr.observed,
        unobserved: pr.unobserved,
        budget: pr.budget,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_fourier_coefficient(
    sim: &DnSimulation,
    k: i64,
    eta: P2,
    r: f64,
    theta: f64,
    eps: f64,
    cfg: &CgoConfig,
) -> Result<FrequencySample> {
    let p = make_cgo_params(k, eta, r, theta, Some(sim.part.xi0))?;
    estimate_from_params(sim, &p, eps, cfg)
}

/// Estimate with the CGO parameters tuned so that `tau` equals `tau`.
pub fn estimate_at_tau(sim: &DnSimulation, k: i64, eta: P2, tau: f64, eps: f64, cfg: &CgoConfig) -> Result<FrequencySample> {
    let p = params_for_tau(k, eta, tau, Some(sim.part.xi0))?;
    estimate_from_params(sim, &p, eps, cfg)
}

/// `tau(gamma) = max(floor, ceil(ln ln(1/gamma) / c))`, raised to the smallest value the
/// parameter family reaches for the frequency.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TauPolicy {
    pub floor: f64,
    pub c_hat: f64,
}

impl TauPolicy {
    pub fn tau(&self, gamma: f64) -> f64 {
        let t = if gamma > 0.0 && gamma < (-1.0f64).exp() { ((1.0 / gamma).ln().ln() / self.c_hat).ceil() } else { 0.0 };
        t.max(self.floor)
    }

    pub fn tau_for(&self, gamma: f64, k: i64, eta: P2) -> f64 {
        self.tau(gamma).max(min_reachable_tau(k, eta) * (1.0 + 1e-12))
    }
}

/// Smallest `tau` produced by the parameter family at `(k, eta)` (`r -> 0`, `theta = 0`).
pub fn min_reachable_tau(k: i64, eta: P2) -> f64 {
    let ne2 = eta[0] * eta[0] + eta[1] * eta[1];
    let pk = PI * k as f64;
    let shift = if k.rem_euclid(2) == 0 { 1.0 } else { 1.5 };
    let l1 = 2.0 * PI * shift;
    (ne2 / 4.0 + pk * pk + l1 * l1 * (1.0 + 4.0 * pk * pk / ne2)).sqrt()
}

/// Rectangular lattice of `eta` with spacing `step` inside `|eta| <= eta_max`, for each `k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub ks: Vec<i64>,
    pub step: f64,
    pub eta_max: f64,
}

impl FrequencyGrid {
    /// Lattice points ordered by `(k, eta)`; `eta = 0` included.
    pub fn points(&self) -> Vec<(i64, P2)> {
        let n = (self.eta_max / self.step).floor() as i64;
        let mut out = Vec::new();
        let mut ks = self.ks.clone();
        ks.sort_unstable();
        ks.dedup();
        for &k in &ks {
            for a in -n..=n {
                for b in -n..=n {
                    let eta = [a as f64 * self.step, b as f64 * self.step];
                    if eta[0].hypot(eta[1]) <= self.eta_max + 1e-12 {
                        out.push((k, eta));
                    }
                }
            }
        }
        out
    }

    pub fn cell_area(&self) -> f64 {
        self.step * self.step
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Coverage {
    pub sampled: Vec<(i64, P2)>,
    pub gaps: Vec<(i64, P2)>,
    /// Area of the unreached part of the grid, per `k`, summed.
    pub gap_measure: f64,
}

/// Grid points reachable by at least one probe `(xi0, eps)`.
pub fn coverage(grid: &FrequencyGrid, probes: &[(P2, f64)]) -> Coverage {
    let (mut sampled, mut gaps) = (Vec::new(), Vec::new());
    for (k, eta) in grid.points() {
        if probes.iter().any(|&(x0, e)| sector_contains(x0, e, eta)) {
            sampled.push((k, eta));
        } else {
            gaps.push((k, eta));
        }
    }
    let gap_measure = gaps.len() as f64 * grid.cell_area();
    Coverage { sampled, gaps, gap_measure }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// `W ~ V2 - V1` sampled on the cell.
    pub field: CellField,
    pub samples: Vec<FrequencySample>,
    pub coverage: Coverage,
}

/// Truncated inverse Fourier series `sum c(k, eta) e^{i(2 pi k x1 + eta.x')} |cell| / (2 pi)^2`.
pub fn synthesize(mesh: &CrossSectionMesh, samples: &[(i64, P2, C64)], cell_area: f64, n1: usize) -> CellField {
    let w = cell_area / (4.0 * PI * PI);
    CellField::from_fn(n1, mesh.n_nodes(), |x1, i| {
        let x = mesh.vertices[i];
        samples
            .iter()
            .map(|&(k, eta, c)| c * C64::from_polar(w, 2.0 * PI * k as f64 * x1 + eta[0] * x[0] + eta[1] * x[1]))
            .sum()
    })
}

/// Reconstruction from one simulation per probe; each grid point is estimated by the first
/// probe whose sector contains it, at the tau given by the policy.
pub fn reconstruct_difference(
    sims: &[DnSimulation],
    grid: &FrequencyGrid,
    policy: &TauPolicy,
    cfg: &CgoConfig,
    n1: usize,
) -> Result<Reconstruction> {
    if sims.is_empty() {
        return invalid("no probes configured");
    }
    let probes: Vec<(P2, f64)> = sims.iter().map(|s| (s.part.xi0, s.part.eps)).collect();
    let cov = coverage(grid, &probes);
    if cov.sampled.is_empty() {
        return invalid("no grid frequency lies in an accessible sector");
    }
    let mut samples = Vec::with_capacity(cov.sampled.len());
    for &(k, eta) in &cov.sampled {
        let sim = sims.iter().find(|s| sector_contains(s.part.xi0, s.part.eps, eta)).unwrap();
        let tau = policy.tau_for(sim.gamma.unwrap_or(0.0), k, eta).max(cfg.tau_floor);
        samples.push(estimate_at_tau(sim, k, eta, tau, sim.part.eps, cfg)?);
    }
    let coeffs: Vec<(i64, P2, C64)> = samples.iter().map(|s| (s.k, s.eta, s.estimate)).collect();
    let field = synthesize(&sims[0].mesh, &coeffs, grid.cell_area(), n1);
    Ok(Reconstruction { field, samples, coverage: cov })
}

/// Boundary conditions of the test space of the dual norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DualSpace {
    /// Zero trace on the lateral boundary and both end faces.
    Dirichlet,
    /// Zero lateral trace, periodic in `x1`.
    Periodic,
}

/// `sup |<W, phi>| / ||phi||_{H1}` through the Riesz map of `-Lap + 1`, diagonal in a sine
/// (or Fourier) series in `x1`.
pub fn h_minus1_norm(mesh: &CrossSectionMesh, w: &CellField, space: DualSpace) -> Result<f64> {
    let n = w.intervals();
    if n < 2 {
        return invalid("cell field needs at least two x1 intervals");
    }
    let interior = mesh.interior_nodes();
    let stiff = fem::stiffness(mesh);
    let mass = fem::mass(mesh);
    let s_ii = stiff.select(&interior, &interior);
    let m_ii = mass.select(&interior, &interior);
    let all: Vec<usize> = (0..mesh.n_nodes()).collect();
    let m_ia = mass.select(&interior, &all);
    let nn = mesh.n_nodes();
    // (axial eigenvalue, coefficient slice, weight of |coefficient|^2 in the L2 norm)
    let mut terms: Vec<(f64, Vec<C64>, f64)> = Vec::new();
    match space {
        DualSpace::Dirichlet => {
            for m in 1..n {
                let mut c = vec![ZERO; nn];
                for j in 1..n {
                    let s = (PI * (m * j) as f64 / n as f64).sin() * 2.0 / n as f64;
                    for (a, x) in c.iter_mut().zip(&w.slices[j]) {
                        *a += x * s;
                    }
                }
                terms.push(((PI * m as f64).powi(2), c, 0.5));
            }
        }
        DualSpace::Periodic => {
            let half = n as i64 / 2;
            for m in -half..=half - i64::from(n % 2 == 0) {
                let mut c = vec![ZERO; nn];
                for j in 0..n {
                    let ph = C64::from_polar(1.0 / n as f64, -2.0 * PI * (m * j as i64) as f64 / n as f64);
                    for (a, x) in c.iter_mut().zip(&w.slices[j]) {
                        *a += x * ph;
                    }
                }
                terms.push(((2.0 * PI * m as f64).powi(2), c, 1.0));
            }
        }
    }
    let mut total = 0.0;
    for (lam, c, weight) in terms {
        if c.iter().all(|x| *x == ZERO) {
            continue;
        }
        let a = fem::add(&s_ii, &m_ii, C64::new(1.0 + lam, 0.0));
        let rhs = m_ia.matvec(&c);
        let phi = SparseLu::new(&a)?.solve(&rhs);
        total += weight * rhs.iter().zip(&phi).map(|(r, p)| (r.conj() * p).re).sum::<f64>();
    }
    Ok(total.max(0.0).sqrt())
}

/// Samples of a potential on an `n`-interval axial grid.
pub fn potential_samples(v: &PotentialField, n: usize) -> CellField {
    CellField::from_fn(n, v.n_nodes(), |x1, i| C64::new(v.eval(x1, i), 0.0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub kmax: usize,
    pub thetas: Vec<f64>,
    pub gamma_star: f64,
    /// Admissibility bound on the negative part of the potentials.
    pub c_omega: f64,
    pub n1: usize,
    pub space: DualSpace,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityRow {
    pub s: f64,
    pub gamma: f64,
    pub theta: f64,
    pub delta: f64,
    pub phi: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub skipped: Vec<(f64, String)>,
    /// Smallest `C` with `delta <= C Phi(gamma)` on every row.
    pub fitted_c: f64,
    /// Largest over smallest positive ratio.
    pub spread: f64,
    pub gamma_monotone: bool,
    pub delta_monotone: bool,
    pub config: StabilityConfig,
}

/// `V2(s) = V1 + s W` along the ladder `scales`.
pub fn run_stability_experiment(
    v1: &PotentialField,
    w: &PotentialField,
    scales: &[f64],
    mesh: Arc<CrossSectionMesh>,
    part: &BoundaryPartition,
    cfg: &StabilityConfig,
) -> Result<StabilityReport> {
    stability_modulus(0.0, cfg.gamma_star)?;
    v1.validate(cfg.c_omega)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let base = h_minus1_norm(&mesh, &potential_samples(w, cfg.n1), cfg.space)?;
    for &s in scales {
        let v2 = v1.add_scaled(w, s);
        if let Err(e) = v2.validate(cfg.c_omega) {
            skipped.push((s, e.to_string()));
            continue;
        }
        let (gamma, theta) = if s == 0.0 {
            (0.0, cfg.thetas.first().copied().unwrap_or(0.0))
        } else {
            dn_sup_over_fibers(v1, &v2, mesh.clone(), cfg.kmax, &cfg.thetas, part)?
        };
        let delta = if s == 0.0 { 0.0 } else { h_minus1_norm(&mesh, &potential_samples(&v2.add_scaled(v1, -1.0), cfg.n1), cfg.space)? };
        debug_assert!((delta - s.abs() * base).abs() <= 1e-6 * delta.max(1e-300) || s == 0.0);
        let phi = stability_modulus(gamma, cfg.gamma_star)?;
        let ratio = if phi == 0.0 { 0.0 } else { delta / phi };
        rows.push(StabilityRow { s, gamma, theta, delta, phi, ratio });
    }
    let positive: Vec<f64> = rows.iter().filter(|r| r.phi > 0.0).map(|r| r.ratio).collect();
    let fitted_c = positive.iter().copied().fold(0.0, f64::max);
    let min = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = if positive.is_empty() { 1.0 } else { fitted_c / min };
    let mut order: Vec<&StabilityRow> = rows.iter().collect();
    order.sort_by(|a, b| a.s.abs().total_cmp(&b.s.abs()));
    let gamma_monotone = order.windows(2).all(|p| p[1].gamma >= p[0].gamma * (1.0 - 1e-9));
    let delta_monotone = order.windows(2).all(|p| p[1].delta >= p[0].delta * (1.0 - 1e-9));
    Ok(StabilityReport { rows, skipped, fitted_c, spread, gamma_monotone, delta_monotone, config: cfg.clone() })
}

/// `||W||^2` of a cell field weighted for comparisons in the cross-section mass.
pub fn cell_l2(mesh: &CrossSectionMesh, w: &CellField) -> f64 {
    w.norm_sq(&fem::mass(mesh)).sqrt()
}
