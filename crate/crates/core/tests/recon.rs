use std::f64::consts::PI;
use std::sync::Arc;

use pcal::cgo::*;
use pcal::forward::PotentialField;
use pcal::geometry::{build_mesh, CrossSectionSpec, PointLocator};
use pcal::linalg::C64;
use pcal::oracle::{bump, bump_fourier, volume_pairing_oracle};
use pcal::recon::*;
use pcal::spectral::{FiberContext, ModeExpansion};
use pcal::{BoundaryPartition, CrossSectionMesh, Error};

const RHO: f64 = 0.3;
const AMP: f64 = 0.5;
const ETA: [f64; 2] = [0.0, 2.0 * PI];

fn small_disk(h: f64, hb: f64) -> Arc<CrossSectionMesh> {
    Arc::new(build_mesh(&CrossSectionSpec::disk(0.5, h).with_boundary_h(hb)).unwrap())
}

fn bump_potential(mesh: &CrossSectionMesh, amp: f64) -> PotentialField {
    PotentialField::from_fn(mesh, 1, move |x1, p| amp * (2.0 * PI * x1).cos() * bump(RHO, p))
}

fn simulation(mesh: &Arc<CrossSectionMesh>, v1: PotentialField, v2: PotentialField) -> DnSimulation {
    let part = BoundaryPartition::arcs(mesh, [1.0, 0.0], 0.75 * PI).unwrap();
    DnSimulation { v1, v2, mesh: mesh.clone(), kmax: 1, part, gamma: None }
}

fn cfg() -> CgoConfig {
    CgoConfig { tau_floor: 10.0, jmax: None }
}

fn tau_min() -> f64 {
    min_reachable_tau(1, ETA) * (1.0 + 1e-12)
}

#[test]
fn equal_potentials_give_zero_estimate() {
    let mesh = small_disk(0.05, 0.02);
    let v = bump_potential(&mesh, AMP);
    let sim = simulation(&mesh, v.clone(), v);
    let s = estimate_at_tau(&sim, 1, ETA, tau_min(), sim.part.eps, &cfg()).unwrap();
    assert!(s.estimate.norm() < 1e-6 * AMP, "{}", s.estimate);
}

#[test]
fn coefficient_matches_bump_transform_on_a_coarse_mesh() {
    let mesh = small_disk(0.05, 0.02);
    let sim = simulation(&mesh, PotentialField::zero(mesh.n_nodes()), bump_potential(&mesh, AMP));
    let s = estimate_at_tau(&sim, 1, ETA, tau_min(), sim.part.eps, &cfg()).unwrap();
    let want = 0.5 * AMP * bump_fourier(RHO, ETA);
    assert!((s.estimate - want).norm() < 0.15 * want, "{} vs {want}", s.estimate);
    assert!((s.budget.inv_tau - 1.0 / s.tau).abs() < 1e-15);
    assert!(s.budget.exp_gamma.is_nan());
}

#[test]
fn swapping_the_potentials_flips_the_sign() {
    let mesh = small_disk(0.05, 0.02);
    let z = PotentialField::zero(mesh.n_nodes());
    let b = bump_potential(&mesh, AMP);
    let a = estimate_at_tau(&simulation(&mesh, z.clone(), b.clone()), 1, ETA, tau_min(), 0.25, &cfg()).unwrap();
    let c = estimate_at_tau(&simulation(&mesh, b, z), 1, ETA, tau_min(), 0.25, &cfg()).unwrap();
    assert!((a.estimate + c.estimate).norm() < 0.1 * a.estimate.norm(), "{} vs {}", a.estimate, c.estimate);
}

#[test]
fn frequency_outside_the_sector_is_rejected() {
    let mesh = small_disk(0.1, 0.05);
    let z = PotentialField::zero(mesh.n_nodes());
    let sim = simulation(&mesh, z.clone(), z);
    let err = estimate_fourier_coefficient(&sim, 1, [2.0 * PI, 0.0], 0.5, 0.1, 0.25, &cfg()).unwrap_err();
    match err {
        Error::Validation(m) => assert!(m.contains("sector"), "{m}"),
        e => panic!("{e}"),
    }
}

fn evaluator<'a>(mesh: &'a CrossSectionMesh, loc: &'a PointLocator<'a>, u: &'a ModeExpansion) -> impl Fn(f64, [f64; 2]) -> C64 + 'a {
    move |x1, p| match loc.locate(p) {
        Some((t, l)) => (0..3).map(|q| u.eval(x1, mesh.triangles[t][q]) * l[q]).sum(),
        None => C64::new(0.0, 0.0),
    }
}

/// Observed plus unobserved boundary parts reproduce the volume integral of `V u2 conj(u1)`.
#[test]
fn boundary_pairing_matches_volume_integral() {
    let mesh = small_disk(0.0125, 0.005);
    let v2 = bump_potential(&mesh, AMP);
    let sim = simulation(&mesh, PotentialField::zero(mesh.n_nodes()), v2.clone());
    let p = params_for_tau(1, ETA, tau_min(), Some([1.0, 0.0])).unwrap();
    let eps = sim.part.eps;
    let u1 = solve_cgo_smooth(&mesh, &sim.v1, &p, &cfg()).unwrap();
    let u2 = solve_cgo_vanishing(&mesh, &v2, &p, eps, &cfg()).unwrap();
    let pair = sim.fiber(p.theta, 3).unwrap();
    let pr = pairing_from_boundary(&pair, &sim.part, &u2, &u1, eps, None).unwrap();
    let ctx = FiberContext::new(p.theta, 3, mesh.clone()).unwrap();
    let e1 = u1.fiber_expansion(&ctx).unwrap();
    let e2 = u2.fiber_expansion(&ctx).unwrap();
    let loc = PointLocator::new(&mesh);
    let vol = volume_pairing_oracle(
        &mesh,
        32,
        |x1, x| AMP * (2.0 * PI * x1).cos() * bump(RHO, x),
        evaluator(&mesh, &loc, &e2),
        evaluator(&mesh, &loc, &e1),
    );
    let total = pr.observed + pr.unobserved;
    assert!((total - vol).norm() < 0.01 * vol.norm(), "boundary {total} volume {vol}");
}

#[test]
fn reconstruction_reproduces_the_truncated_difference() {
    let mesh = small_disk(0.05, 0.02);
    let sim = simulation(&mesh, PotentialField::zero(mesh.n_nodes()), bump_potential(&mesh, AMP));
    let grid = FrequencyGrid { ks: vec![-1, 1], step: 2.0 * PI, eta_max: 2.0 * PI };
    let policy = TauPolicy { floor: 10.0, c_hat: 2.0 * mesh.max_radius() };
    let rec = reconstruct_difference(std::slice::from_ref(&sim), &grid, &policy, &cfg(), 16).unwrap();
    assert_eq!(rec.samples.len(), 4);
    assert_eq!(rec.coverage.gaps.len(), 6);
    let exact: Vec<(i64, [f64; 2], C64)> =
        rec.samples.iter().map(|s| (s.k, s.eta, C64::new(0.5 * AMP * bump_fourier(RHO, s.eta), 0.0))).collect();
    let truth = synthesize(&mesh, &exact, grid.cell_area(), 16);
    let diff = pcal::spectral::CellField {
        slices: rec.field.slices.iter().zip(&truth.slices).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect(),
    };
    let err = cell_l2(&mesh, &diff);
    let budget: f64 = rec.samples.iter().zip(&exact).map(|(s, e)| (s.estimate - e.2).norm()).sum::<f64>()
        * grid.cell_area()
        / (4.0 * PI * PI)
        * mesh.area().sqrt();
    assert!(err <= budget * (1.0 + 1e-9), "{err} > {budget}");
    let none = reconstruct_difference(&[sim], &FrequencyGrid { ks: vec![0], step: 1.0, eta_max: 0.5 }, &policy, &cfg(), 16);
    assert!(none.is_err());
}

#[test]
fn stability_ladder_on_a_coarse_mesh() {
    let mesh = small_disk(0.12, 0.06);
    let v1 = PotentialField::constant(mesh.n_nodes(), 1.0);
    let w = PotentialField::from_fn(&mesh, 1, |x1, p| (2.0 * PI * x1).cos() * bump(0.4, p) + 0.5 * bump(0.3, p));
    let part = BoundaryPartition::arcs(&mesh, [1.0, 0.0], 0.75 * PI).unwrap();
    let cfg = StabilityConfig {
        kmax: 1,
        thetas: vec![0.5, 2.0],
        gamma_star: DEFAULT_GAMMA_STAR,
        c_omega: 5.0,
        n1: 16,
        space: DualSpace::Dirichlet,
    };
    let scales = [0.0, 0.0625, 0.125, 0.25];
    let rep = run_stability_experiment(&v1, &w, &scales, mesh.clone(), &part, &cfg).unwrap();
    assert_eq!(rep.rows.len(), 4);
    assert_eq!(rep.rows[0].gamma, 0.0);
    assert_eq!(rep.rows[0].ratio, 0.0);
    assert!(rep.gamma_monotone && rep.delta_monotone);
    assert!(rep.rows.iter().all(|r| r.delta <= rep.fitted_c * r.phi * (1.0 + 1e-12)));
    assert!(rep.spread < 10.0, "{}", rep.spread);
    let d = rep.rows[1].delta / 0.0625;
    assert!((rep.rows[3].delta / 0.25 - d).abs() < 1e-9 * d);
    let bad = run_stability_experiment(&v1, &w, &[-100.0], mesh, &part, &cfg).unwrap();
    assert_eq!(bad.skipped.len(), 1);
}
