use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcal::fem;
use pcal::geometry::{build_mesh, CrossSectionSpec};
use pcal::linalg::C64;
use pcal::spectral::*;
use pcal::CrossSectionMesh;

fn mesh(h: f64) -> Arc<CrossSectionMesh> {
    Arc::new(build_mesh(&CrossSectionSpec::disk(1.0, h)).unwrap())
}

fn random_expansion(rng: &mut ChaCha8Rng, theta: f64, kmax: usize, n: usize) -> ModeExpansion {
    let mut e = ModeExpansion::zeros(theta, kmax, n);
    for m in e.modes.iter_mut() {
        for v in m.iter_mut() {
            *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
    }
    e
}

/// `int_0^1 int_omega |v|^2` with Gauss-Legendre in x1 and the seven-point rule on the
/// P1 interpolant of each mode.
fn quadrature_norm_sq(mesh: &CrossSectionMesh, e: &ModeExpansion) -> f64 {
    let (nodes, weights) = gauss_legendre(24);
    let mut total = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        let x1 = 0.5 * (x + 1.0);
        let slice: Vec<C64> = (0..mesh.n_nodes()).map(|i| e.eval(x1, i)).collect();
        let s = fem::integrate(mesh, |_, t, l| {
            let v = fem::interp(mesh, t, l, &slice);
            C64::new(v.norm_sqr(), 0.0)
        });
        total += 0.5 * w * s.re;
    }
    total
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (mut q0, mut q1) = (1.0, x);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * x * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let dq = n as f64 * (x * q1 - q0) / (x * x - 1.0);
                xs.push(x);
                ws.push(2.0 / ((1.0 - x * x) * dq * dq));
                break;
            }
        }
    }
    (xs, ws)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthesis_round_trip_is_exact(theta in 0.0..2.0 * PI, kmax in 1usize..4, extra in 0usize..6, seed in any::<u64>()) {
        let m = mesh(0.35);
        let ctx = FiberContext::new(theta, kmax, m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_expansion(&mut rng, theta, kmax, m.n_nodes());
        let back = fiber_project(&fiber_synthesize(&e, ctx.min_grid() + extra), &ctx).unwrap();
        let err = back.modes.iter().flatten().zip(e.modes.iter().flatten()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12, "{}", err);
    }

    #[test]
    fn parseval_matches_direct_quadrature(theta in 0.0..2.0 * PI, kmax in 1usize..3, seed in any::<u64>()) {
        let m = mesh(0.35);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_expansion(&mut rng, theta, kmax, m.n_nodes());
        let mass = fem::mass(&m);
        let modes = e.norm_sq(&mass);
        let direct = quadrature_norm_sq(&m, &e);
        prop_assert!((modes - direct).abs() < 1e-10 * direct, "{} vs {}", modes, direct);
    }

    #[test]
    fn basis_is_orthonormal(theta in 0.0..2.0 * PI, j in -3i64..=3) {
        let m = mesh(0.6);
        let ctx = FiberContext::new(theta, 3, m.clone()).unwrap();
        let v = CellField::from_fn(ctx.min_grid(), m.n_nodes(), |x1, _| axial_phase(beta(theta, j), x1));
        let e = fiber_project(&v, &ctx).unwrap();
        for k in ctx.modes() {
            let want = if k == j { 1.0 } else { 0.0 };
            prop_assert!(e.mode(k).iter().all(|c| (c - want).norm() < 1e-12));
        }
    }
}

#[test]
fn fbg_is_unitary_on_random_slices() {
    let m = mesh(0.3);
    let mass = fem::mass(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let slices: Vec<CellField> = (0..5)
        .map(|_| CellField::from_fn(8, m.n_nodes(), |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
        .collect();
    let direct: f64 = slices.iter().map(|s| s.norm_sq(&mass)).sum();
    let u = fbg_forward(&slices, -2, &theta_grid(256));
    let e = fbg_energy(&u, &mass);
    assert!((e - direct).abs() < 1e-10 * direct, "{e} vs {direct}");
}

#[test]
fn fbg_of_two_equal_slices() {
    let g = CellField::from_fn(4, 5, |x1, i| C64::new(x1, i as f64));
    let th = [0.3, 1.7];
    let u = fbg_forward(&[g.clone(), g.clone()], 0, &th);
    for (t, f) in th.iter().zip(&u) {
        let factor = C64::new(1.0, 0.0) + C64::from_polar(1.0, -t);
        for (a, b) in f.slices.iter().flatten().zip(g.slices.iter().flatten()) {
            assert!((a - factor * b).norm() < 1e-14);
        }
    }
}

fn bump(rho: f64, p: [f64; 2]) -> (f64, f64) {
    let r2 = p[0] * p[0] + p[1] * p[1];
    let q = 1.0 - r2 / (rho * rho);
    if q <= 0.0 {
        return (0.0, 0.0);
    }
    (q.powi(3), -12.0 * q * q / (rho * rho) + 24.0 * q * r2 / rho.powi(4))
}

/// `v = sum_k c_k phi_k psi_k + d x1 psi_0` and its exact Laplacian.
fn field(m: &CrossSectionMesh, theta: f64, n: usize, coef: &[(i64, C64, f64)], drift: f64) -> (CellField, CellField) {
    let v = CellField::from_fn(n, m.n_nodes(), |x1, i| {
        let p = m.vertices[i];
        let mut s = C64::new(drift * x1 * bump(0.7, p).0, 0.0);
        for &(k, c, rho) in coef {
            s += c * axial_phase(beta(theta, k), x1) * bump(rho, p).0;
        }
        s
    });
    let lap = CellField::from_fn(n, m.n_nodes(), |x1, i| {
        let p = m.vertices[i];
        let mut s = C64::new(drift * x1 * bump(0.7, p).1, 0.0);
        for &(k, c, rho) in coef {
            let (b, lb) = bump(rho, p);
            s += c * axial_phase(beta(theta, k), x1) * (lb - beta(theta, k).powi(2) * b);
        }
        s
    });
    (v, lap)
}

#[test]
fn membership_examples() {
    let m = mesh(0.1);
    let tol = MembershipTol::default();
    let ctx = FiberContext::new(0.8, 2, m.clone()).unwrap();
    let (v, l) = field(&m, 0.8, 64, &[(0, C64::new(1.0, 0.0), 0.7)], 0.0);
    assert!(quasi_periodic_membership(&v, &l, &ctx, tol).unwrap().member);
    let (v, l) = field(&m, 0.8, 64, &[(2, C64::new(0.5, -1.0), 0.6)], 0.0);
    assert!(quasi_periodic_membership(&v, &l, &ctx, tol).unwrap().member);
    let ctx0 = FiberContext::new(0.0, 2, m.clone()).unwrap();
    let (v, l) = field(&m, 0.0, 64, &[], 1.0);
    let r = quasi_periodic_membership(&v, &l, &ctx0, tol).unwrap();
    assert!(!r.member);
    assert!(r.value_defect > 0.5, "{r:?}");
}

#[test]
fn membership_tests_agree_on_random_fields() {
    let m = mesh(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut verdicts = [0usize; 2];
    for _ in 0..50 {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let ctx = FiberContext::new(theta, 2, m.clone()).unwrap();
        let coef: Vec<(i64, C64, f64)> = (0..3)
            .map(|_| (rng.gen_range(-1..=1), C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)), rng.gen_range(0.5..0.9)))
            .collect();
        let drift = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.5..1.0) };
        let (v, l) = field(&m, theta, 64, &coef, drift);
        let r = quasi_periodic_membership(&v, &l, &ctx, MembershipTol::default()).unwrap();
        assert_eq!(r.member, drift == 0.0, "{r:?}");
        verdicts[usize::from(r.member)] += 1;
    }
    assert!(verdicts[0] > 5 && verdicts[1] > 5, "{verdicts:?}");
}
