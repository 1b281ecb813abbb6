use std::f64::consts::PI;
use std::sync::Arc;

use pcal::forward::*;
use pcal::geometry::{build_mesh, CrossSectionSpec, FaceSet, PointLocator};
use pcal::linalg::C64;
use pcal::oracle::{disk_dn_analytic, fd_solve, DenseGrid};
use pcal::spectral::FiberContext;
use pcal::{fem, BoundaryPartition};
use pcal::spectral::theta_grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn disk_ctx(theta: f64, k: usize, h: f64) -> FiberContext {
    FiberContext::new(theta, k, Arc::new(build_mesh(&CrossSectionSpec::disk(1.0, h)).unwrap())).unwrap()
}

#[test]
fn constant_potential_disk_matches_bessel_quotient() {
    let ctx = disk_ctx(0.5, 1, 0.04);
    let mesh = &ctx.mesh;
    let c = 1.0;
    let v = PotentialField::constant(mesh.n_nodes(), c);
    let solver = FiberSolver::new(&v, &ctx).unwrap();
    let bm = fem::boundary_mass(mesh, 0..mesh.n_boundary());
    for m in 0..=4u32 {
        let mut g = DirichletData::zeros(1, mesh.n_boundary());
        for (p, &i) in mesh.boundary_nodes.iter().enumerate() {
            let x = mesh.vertices[i];
            g.mode_mut(0)[p] = C64::new((m as f64 * x[1].atan2(x[0])).cos(), 0.0);
        }
        let q = solver.dn_apply(&g).unwrap();
        let est = q.pairing(&g, &bm).re / g.norm_sq(&bm);
        let exact = disk_dn_analytic(c, 1.0, ctx.beta(0), m);
        assert!((est - exact).abs() < 0.01 * exact.abs(), "m={m}: {est} vs {exact}");
    }
}

#[test]
fn fem_matches_finite_difference_oracle() {
    let mesh = Arc::new(build_mesh(&CrossSectionSpec::square(1.0, 1.0 / 24.0)).unwrap());
    let theta = 0.8;
    let ctx = FiberContext::new(theta, 3, mesh.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2 {
        let a: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        let vf = move |x1: f64, p: [f64; 2]| 1.0 + a[0] * (2.0 * PI * x1).cos() * p[0] + a[1] * (2.0 * PI * x1).sin() + a[2] * p[1] * p[1];
        let gc: [C64; 3] = std::array::from_fn(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let gf = move |x1: f64, p: [f64; 2]| {
            gc[0] * C64::from_polar(1.0, theta * x1) * (1.0 + p[0])
                + gc[1] * C64::from_polar(1.0, (theta + 2.0 * PI) * x1) * p[1]
                + gc[2] * C64::from_polar(1.0, (theta - 2.0 * PI) * x1) * p[0] * p[1]
        };
        let v = PotentialField::from_fn(&mesh, 1, vf);
        let mut g = DirichletData::zeros(3, mesh.n_boundary());
        for (p, &i) in mesh.boundary_nodes.iter().enumerate() {
            let x = mesh.vertices[i];
            g.mode_mut(0)[p] = gc[0] * (1.0 + x[0]);
            g.mode_mut(1)[p] = gc[1] * x[1];
            g.mode_mut(-1)[p] = gc[2] * x[0] * x[1];
        }
        let u = solve_fibered_bvp(&v, &ctx, &g, None).unwrap();
        let grid = DenseGrid::new(24, 24, 0.5).unwrap();
        let fd = fd_solve(&grid, theta, vf, gf, |_, _| C64::new(0.0, 0.0)).unwrap();
        let loc = PointLocator::new(&mesh);
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..grid.n1 {
            for aa in 0..=grid.n {
                for bb in 0..=grid.n {
                    let (x1, p) = grid.point(j, aa, bb);
                    let Some((t, l)) = loc.locate(p) else { continue };
                    let tri = mesh.triangles[t];
                    let val: C64 = (0..3).map(|q| u.eval(x1, tri[q]) * l[q]).sum();
                    let o = fd[grid.index(j, aa, bb)];
                    num += (val - o).norm_sqr();
                    den += o.norm_sqr();
                }
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.02, "relative L2 difference {rel}");
    }
}

fn random_data(ctx: &FiberContext, face: &FaceSet, rng: &mut ChaCha8Rng) -> DirichletData {
    let mut d = DirichletData::zeros(ctx.kmax, ctx.mesh.n_boundary());
    for k in ctx.modes() {
        for p in face.interior_node_positions(&ctx.mesh) {
            d.mode_mut(k)[p] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
    }
    d
}

fn bumpy_potential(mesh: &pcal::CrossSectionMesh, c: f64) -> PotentialField {
    PotentialField::from_fn(mesh, 1, move |x1, p| c + 0.5 * (2.0 * PI * x1).cos() * (1.0 - p[0] * p[0] - p[1] * p[1]))
}

#[test]
fn dn_form_is_hermitian_for_real_potential() {
    let ctx = disk_ctx(1.1, 2, 0.15);
    let all = FaceSet::all(&ctx.mesh);
    let v = bumpy_potential(&ctx.mesh, 0.7);
    let solver = FiberSolver::new(&v, &ctx).unwrap();
    let bm = fem::boundary_mass(&ctx.mesh, 0..ctx.mesh.n_boundary());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_data(&ctx, &all, &mut rng);
    let g = random_data(&ctx, &all, &mut rng);
    let lf = solver.dn_apply(&f).unwrap();
    let lg = solver.dn_apply(&g).unwrap();
    let a = lf.pairing(&g, &bm);
    let b = f.pairing(&lg, &bm);
    assert!((a - b).norm() < 1e-8 * a.norm(), "{a} vs {b}");
}

#[test]
fn dn_map_is_linear() {
    let ctx = disk_ctx(0.2, 1, 0.2);
    let all = FaceSet::all(&ctx.mesh);
    let v = bumpy_potential(&ctx.mesh, 0.3);
    let solver = FiberSolver::new(&v, &ctx).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_data(&ctx, &all, &mut rng);
    let g = random_data(&ctx, &all, &mut rng);
    let (al, be) = (C64::new(0.3, -1.2), C64::new(2.0, 0.5));
    let mut comb = f.clone();
    for (c, (x, y)) in comb.values.iter_mut().zip(f.values.iter().zip(&g.values)) {
        for (o, (p, q)) in c.iter_mut().zip(x.iter().zip(y)) {
            *o = al * p + be * q;
        }
    }
    let (lf, lg, lc) = (solver.dn_apply(&f).unwrap(), solver.dn_apply(&g).unwrap(), solver.dn_apply(&comb).unwrap());
    for s in 0..lc.values.len() {
        for p in 0..lc.values[s].len() {
            let want = al * lf.values[s][p] + be * lg.values[s][p];
            assert!((lc.values[s][p] - want).norm() < 1e-9 * (1.0 + want.norm()));
        }
    }
}

#[test]
fn dn_difference_is_first_order_in_the_perturbation() {
    let ctx = disk_ctx(0.4, 1, 0.2);
    let part = BoundaryPartition::arcs(&ctx.mesh, [1.0, 0.0], 0.75 * PI).unwrap();
    let v1 = PotentialField::constant(ctx.mesh.n_nodes(), 0.5);
    let w = bumpy_potential(&ctx.mesh, 0.0);
    let base = assemble_partial_dn(&v1, &ctx, &part.f, &part.g).unwrap();
    let ratio = |s: f64| {
        let m = assemble_partial_dn(&v1.add_scaled(&w, s), &ctx, &part.f, &part.g).unwrap();
        dn_difference_norm(&base, &m).unwrap() / s
    };
    let (r3, r2) = (ratio(1e-3), ratio(1e-2));
    assert!((r3 - r2).abs() < 0.1 * r3, "{r3} {r2}");
    let m = assemble_partial_dn(&v1.add_scaled(&w, 0.1), &ctx, &part.f, &part.g).unwrap();
    assert_eq!(dn_difference_norm(&base, &m).unwrap(), dn_difference_norm(&m, &base).unwrap());
}

#[test]
fn metadata_mismatch_is_rejected() {
    let a_ctx = disk_ctx(0.4, 1, 0.3);
    let b_ctx = FiberContext::new(0.5, 1, a_ctx.mesh.clone()).unwrap();
    let all = FaceSet::all(&a_ctx.mesh);
    let v = PotentialField::zero(a_ctx.mesh.n_nodes());
    let a = assemble_partial_dn(&v, &a_ctx, &all, &all).unwrap();
    let b = assemble_partial_dn(&v, &b_ctx, &all, &all).unwrap();
    assert!(dn_difference_norm(&a, &b).is_err());
}

#[test]
fn truncation_and_theta_behaviour() {
    let mesh = Arc::new(build_mesh(&CrossSectionSpec::disk(1.0, 0.25)).unwrap());
    let part = BoundaryPartition::arcs(&mesh, [1.0, 0.0], 0.75 * PI).unwrap();
    let v1 = PotentialField::constant(mesh.n_nodes(), 0.2);
    let v2 = PotentialField::from_fn(&mesh, 0, |_, p| 0.2 + 0.5 * (1.0 - p[0] * p[0] - p[1] * p[1]));
    let g = |th: f64, k: usize| {
        let ctx = FiberContext::new(th, k, mesh.clone()).unwrap();
        let a = assemble_partial_dn(&v1, &ctx, &part.f, &part.g).unwrap();
        let b = assemble_partial_dn(&v2, &ctx, &part.f, &part.g).unwrap();
        dn_difference_norm(&a, &b).unwrap()
    };
    let (k1, k2) = (g(0.3, 1), g(0.3, 2));
    assert!(k2 >= k1 * (1.0 - 1e-9), "{k1} {k2}");
    let coarse = dn_sup_over_fibers(&v1, &v2, mesh.clone(), 1, &theta_grid(8), &part).unwrap();
    let fine = dn_sup_over_fibers(&v1, &v2, mesh.clone(), 1, &theta_grid(16), &part).unwrap();
    assert!((fine.0 - coarse.0).abs() < 0.05 * fine.0, "{coarse:?} {fine:?}");
    // Real potentials give conjugate fibers at theta and 2 pi - theta.
    let vals: Vec<f64> = theta_grid(8).iter().map(|&t| g(t, 1)).collect();
    for j in 1..8 {
        assert!((vals[j] - vals[8 - j]).abs() < 1e-8 * vals[j], "{vals:?}");
    }
}
