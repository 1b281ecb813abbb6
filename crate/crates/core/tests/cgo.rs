use std::f64::consts::PI;
use std::sync::Arc;

use pcal::cgo::*;
use pcal::forward::{solve_fibered_bvp, PotentialField};
use pcal::geometry::{build_mesh, CrossSectionSpec, Shape};
use pcal::linalg::C64;
use pcal::spectral::FiberContext;
use pcal::{fem, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn generated_parameters_satisfy_every_identity(
        k in -6i64..=6,
        e0 in -20.0f64..20.0,
        e1 in -20.0f64..20.0,
        r in 0.01f64..8.0,
        theta in 0.0f64..(2.0 * PI),
    ) {
        prop_assume!(e0.hypot(e1) > 1e-3);
        let p = make_cgo_params(k, [e0, e1], r, theta, Some([1.0, 0.0])).unwrap();
        prop_assert!(p.check_invariants().is_ok());
        prop_assert!(p.square(CgoKind::Smooth).norm() <= 1e-11 * p.tau * p.tau);
        prop_assert!(p.square(CgoKind::Vanishing).norm() <= 1e-11 * p.tau * p.tau);
        let m1 = axial_mode(&p.zeta1, theta).unwrap();
        let m2 = axial_mode(&p.zeta2, theta).unwrap();
        prop_assert_eq!(m1 - m2, k);
        prop_assert!(p.xi[0] >= -1e-12 || p.xi[0] * p.xi[0] < 1.0);
        prop_assert!((p.xi[0] * e0 + p.xi[1] * e1).abs() < 1e-12 * e0.hypot(e1));
    }

    #[test]
    fn carleman_ratio_is_scale_invariant(a_re in -3.0f64..3.0, a_im in -3.0f64..3.0, seed in 0u64..50) {
        prop_assume!(a_re.hypot(a_im) > 1e-2);
        let mesh = coarse_disk();
        let v = PotentialField::constant(mesh.n_nodes(), 1.0);
        let w = random_field(&mut ChaCha8Rng::seed_from_u64(seed), Defining::Disk { radius: 1.0 });
        let shape = Shape::Disk { radius: 1.0 };
        let r0 = carleman_ratio(&mesh, &shape, &v, [1.0, 0.0], 0.3, 30.0, &w).unwrap();
        let r1 = carleman_ratio(&mesh, &shape, &v, [1.0, 0.0], 0.3, 30.0, &w.scaled(C64::new(a_re, a_im))).unwrap();
        prop_assert!((r0 - r1).abs() <= 1e-12 * r0);
    }
}

fn coarse_disk() -> pcal::CrossSectionMesh {
    build_mesh(&CrossSectionSpec::disk(1.0, 0.2).with_boundary_h(0.05)).unwrap()
}

fn random_field(rng: &mut ChaCha8Rng, defining: Defining) -> TestField {
    TestField {
        j: rng.gen_range(-1..=1),
        poly: std::array::from_fn(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
        defining,
    }
}

#[test]
fn interior_bump_has_finite_interior_quotient() {
    let mesh = coarse_disk();
    let v = PotentialField::constant(mesh.n_nodes(), 1.0);
    let shape = Shape::Disk { radius: 1.0 };
    let w = random_field(&mut ChaCha8Rng::seed_from_u64(3), Defining::Bump { rho: 0.6 });
    let r = carleman_ratio(&mesh, &shape, &v, [1.0, 0.0], 0.3, 30.0, &w).unwrap();
    assert!(r.is_finite() && r > 0.0);
}

#[test]
fn nonvanishing_field_is_rejected() {
    let mesh = coarse_disk();
    let v = PotentialField::constant(mesh.n_nodes(), 1.0);
    let shape = Shape::Disk { radius: 1.0 };
    let w = random_field(&mut ChaCha8Rng::seed_from_u64(3), Defining::Disk { radius: 0.9 });
    let err = carleman_ratio(&mesh, &shape, &v, [1.0, 0.0], 0.3, 30.0, &w).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn polygon_defining_function_vanishes_on_the_boundary() {
    let shape = Shape::Polygon { vertices: vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]] };
    let mesh = build_mesh(&CrossSectionSpec { shape: shape.clone(), h: 0.1, boundary_h: None, layer: None }).unwrap();
    let v = PotentialField::constant(mesh.n_nodes(), 1.0);
    let w = random_field(&mut ChaCha8Rng::seed_from_u64(9), Defining::for_shape(&shape).unwrap());
    let r = carleman_ratio(&mesh, &shape, &v, [0.6, 0.8], 1.0, 20.0, &w).unwrap();
    assert!(r.is_finite() && r > 0.0);
}

/// `u = e^{zeta . x}(1 + w)` with `V = 1` agrees with the fibered solve that takes its own trace.
#[test]
fn cgo_solutions_solve_the_fibered_problem() {
    let mesh = Arc::new(build_mesh(&CrossSectionSpec::disk(1.0, 0.05)).unwrap());
    let v = PotentialField::constant(mesh.n_nodes(), 1.0);
    let p = params_for_tau(0, [0.0, 2.0 * PI], 8.0, Some([1.0, 0.0])).unwrap();
    let cfg = CgoConfig { tau_floor: 5.0, jmax: None };
    let ctx = FiberContext::new(p.theta, 2, mesh.clone()).unwrap();
    for sol in [
        solve_cgo_smooth(&mesh, &v, &p, &cfg).unwrap(),
        solve_cgo_vanishing(&mesh, &v, &p, 0.3, &cfg).unwrap(),
    ] {
        assert!(sol.residual < 1e-10, "{:?} residual {}", sol.kind, sol.residual);
        let u = sol.fiber_expansion(&ctx).unwrap();
        let g = sol.boundary_trace(&ctx).unwrap();
        let w = solve_fibered_bvp(&v, &ctx, &g, None).unwrap();
        let m = fem::mass(&mesh);
        let diff = pcal::spectral::ModeExpansion {
            theta: u.theta,
            kmax: u.kmax,
            modes: u.modes.iter().zip(&w.modes).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect(),
        };
        let rel = (diff.norm_sq(&m) / u.norm_sq(&m)).sqrt();
        assert!(rel < 0.02, "{:?}: relative difference {rel}", sol.kind);
    }
}

#[test]
fn cgo_phase_is_quasi_periodic() {
    let mesh = Arc::new(build_mesh(&CrossSectionSpec::disk(1.0, 0.2)).unwrap());
    let v = PotentialField::constant(mesh.n_nodes(), 1.0);
    let p = params_for_tau(0, [0.0, 2.0 * PI], 25.0, None).unwrap();
    let ctx = FiberContext::new(p.theta, 4, mesh.clone()).unwrap();
    let sol = solve_cgo_smooth(&mesh, &v, &p, &CgoConfig::default()).unwrap();
    let u = sol.fiber_expansion(&ctx).unwrap();
    let phase = C64::from_polar(1.0, p.theta);
    for i in 0..mesh.n_nodes() {
        let a = u.eval(1.0, i);
        let b = phase * u.eval(0.0, i);
        assert!((a - b).norm() <= 1e-8 * (1.0 + b.norm()));
    }
    let small = FiberContext::new(p.theta, 0, mesh.clone());
    if let Ok(c) = small {
        assert!(sol.fiber_expansion(&c).is_err());
    }
}
