use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcal::cgo::{make_cgo_params, params_for_tau, solve_cgo_smooth, solve_cgo_vanishing, CgoConfig};
use pcal::conductivity::{
    admissibility_check, check_compatibility, conductivity_ladder, sigma_difference, ConductivityConfig, ConductivityField,
};
use pcal::fem;
use pcal::forward::{assemble_partial_dn, dn_difference_norm, DirichletData, FiberSolver, PotentialField};
use pcal::geometry::{build_mesh, dirichlet_ground_state, poincare_constant};
use pcal::linalg::C64;
use pcal::oracle;
use pcal::recon::{
    cell_l2, min_reachable_tau, reconstruct_difference, run_stability_experiment, DnSimulation, FrequencyGrid,
    StabilityConfig, TauPolicy,
};
use pcal::spectral::FiberContext;
use pcal::{BoundaryPartition, CrossSectionMesh};

use crate::config::{potential, ConductivitySection, ExperimentConfig};
use crate::report::{cell, Report, Table};
use crate::{Failure, Runtime};

struct Setup {
    mesh: Arc<CrossSectionMesh>,
    part: BoundaryPartition,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, Failure> {
    let mesh = Arc::new(build_mesh(&cfg.cross_section)?);
    let part = match cfg.faces.half_width {
        Some(w) => BoundaryPartition::arcs(&mesh, cfg.faces.xi0, w)?,
        None => BoundaryPartition::full(&mesh, cfg.faces.xi0)?,
    };
    Ok(Setup { mesh, part })
}

fn report(name: &str, cfg: &ExperimentConfig, rt: &Runtime, s: Option<&Setup>) -> Report {
    let mut r = Report::new(name, &rt.hash, cfg.seed, rt.workers);
    r.mesh_hash = s.map(|s| s.mesh.hash());
    r
}

/// Potential from presets, checked for admissibility against the mesh's Poincare constant.
fn admissible(mesh: &CrossSectionMesh, terms: &[crate::config::PotentialTerm], key: &str, c_omega: f64) -> Result<PotentialField, Failure> {
    let v = potential(mesh, terms);
    v.validate(c_omega).map_err(|e| Failure::validation(format!("{key}: {e}")))?;
    Ok(v)
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

pub fn mesh(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let s = setup(cfg)?;
    let mut r = report("mesh", cfg, rt, Some(&s));
    let path = rt.out.join("mesh.txt");
    let f = File::create(&path).map_err(|e| Failure::io(&path, e))?;
    s.mesh.write_text(BufWriter::new(f))?;
    r.artifacts.push("mesh.txt".into());
    let m = &s.mesh;
    r.output("nodes", m.n_nodes())?;
    r.output("triangles", m.triangles.len())?;
    r.output("boundary_nodes", m.n_boundary())?;
    r.output("area", m.area())?;
    r.output("perimeter", m.perimeter())?;
    r.output("max_edge", m.max_edge())?;
    r.output("input_edges", s.part.f.len())?;
    r.output("output_edges", s.part.g.len())?;
    r.output("eps", s.part.eps)?;
    r.write(&rt.out, "mesh")?;
    Ok(r)
}

pub fn eig(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let s = setup(cfg)?;
    let mut r = report("eig", cfg, rt, Some(&s));
    let g = dirichlet_ground_state(&s.mesh)?;
    r.output("lambda1", g.lambda)?;
    r.output("residual", g.residual)?;
    r.fit("c_omega", g.lambda.sqrt());
    r.write(&rt.out, "eig")?;
    Ok(r)
}

pub fn forward(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let s = setup(cfg)?;
    let mut r = report("forward", cfg, rt, Some(&s));
    let c_omega = poincare_constant(&s.mesh)?;
    let v1 = admissible(&s.mesh, &cfg.potentials.v1, "potentials.v1", c_omega)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = Table::new(&["theta", "k", "position", "x", "y", "flux_re", "flux_im"]);
    let mass = fem::mass(&s.mesh);
    let mut norms = Vec::new();
    let inputs = s.part.f.interior_node_positions(&s.mesh);
    let outputs = s.part.g.touched_node_positions(&s.mesh);
    for &theta in &cfg.fiber.thetas {
        let ctx = FiberContext::new(theta, cfg.fiber.kmax, s.mesh.clone())?;
        let solver = FiberSolver::new(&v1, &ctx)?;
        let mut g = DirichletData::zeros(ctx.kmax, s.mesh.n_boundary());
        for k in ctx.modes() {
            for &p in &inputs {
                g.mode_mut(k)[p] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        let u = solver.solve(&g, None)?;
        let flux = solver.flux(&u, None);
        for k in ctx.modes() {
            for &p in &outputs {
                let x = s.mesh.vertices[s.mesh.boundary_nodes[p]];
                let q = flux.mode(k)[p];
                table.row(vec![cell(theta), k.to_string(), p.to_string(), cell(x[0]), cell(x[1]), cell(q.re), cell(q.im)]);
            }
        }
        norms.push(serde_json::json!({ "theta": theta, "solution_l2": u.norm_sq(&mass).sqrt() }));
    }
    r.output("fibers", norms)?;
    table.write(&rt.out, "forward_flux.csv", &mut r)?;
    r.write(&rt.out, "forward")?;
    Ok(r)
}

pub fn dnmap(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let s = setup(cfg)?;
    let mut r = report("dnmap", cfg, rt, Some(&s));
    let c_omega = poincare_constant(&s.mesh)?;
    let v1 = admissible(&s.mesh, &cfg.potentials.v1, "potentials.v1", c_omega)?;
    let v2 = if cfg.potentials.v2.is_empty() {
        None
    } else {
        Some(admissible(&s.mesh, &cfg.potentials.v2, "potentials.v2", c_omega)?)
    };
    let mut table = Table::new(&["theta", "inputs", "outputs", "gamma"]);
    let mut sup: f64 = 0.0;
    for (i, &theta) in cfg.fiber.thetas.iter().enumerate() {
        let ctx = FiberContext::new(theta, cfg.fiber.kmax, s.mesh.clone())?;
        let a = assemble_partial_dn(&v1, &ctx, &s.part.f, &s.part.g)?;
        let name = format!("dnmap_v1_theta{i}.bin");
        let path = rt.out.join(&name);
        a.write_binary(BufWriter::new(File::create(&path).map_err(|e| Failure::io(&path, e))?))?;
        r.artifacts.push(name);
        let gamma = match &v2 {
            Some(v2) => dn_difference_norm(&a, &assemble_partial_dn(v2, &ctx, &s.part.f, &s.part.g)?)?,
            None => f64::NAN,
        };
        sup = sup.max(gamma);
        table.row(vec![cell(theta), a.meta.inputs.len().to_string(), a.meta.outputs.len().to_string(), cell(gamma)]);
    }
    r.output("norm_convention", pcal::forward::NORM_CONVENTION)?;
    if v2.is_some() {
        r.fit("gamma_sup", sup);
    }
    table.write(&rt.out, "dnmap.csv", &mut r)?;
    r.write(&rt.out, "dnmap")?;
    Ok(r)
}

pub fn cgo(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let c = cfg.cgo.as_ref().ok_or_else(|| Failure::validation("cgo: section required by this command"))?;
    let s = setup(cfg)?;
    let mut r = report("cgo", cfg, rt, Some(&s));
    let c_omega = poincare_constant(&s.mesh)?;
    let v = admissible(&s.mesh, &cfg.potentials.v1, "potentials.v1", c_omega)?;
    let xi0 = Some(cfg.faces.xi0);
    let params = if c.taus.is_empty() {
        vec![make_cgo_params(c.k, c.eta, c.r, c.theta, xi0)?]
    } else {
        c.taus.iter().map(|&t| params_for_tau(c.k, c.eta, t, xi0)).collect::<pcal::Result<Vec<_>>>()?
    };
    let solver_cfg = CgoConfig { tau_floor: c.tau_floor, jmax: c.jmax };
    let mass = fem::mass(&s.mesh);
    let mut table = Table::new(&[
        "tau",
        "r",
        "theta",
        "smooth_norm",
        "smooth_residual",
        "vanishing_norm",
        "vanishing_residual",
        "trace_defect",
    ]);
    let (mut taus, mut sm, mut va) = (Vec::new(), Vec::new(), Vec::new());
    let mut invariants = true;
    for p in &params {
        invariants &= p.check_invariants().is_ok();
        let a = solve_cgo_smooth(&s.mesh, &v, p, &solver_cfg)?;
        let b = solve_cgo_vanishing(&s.mesh, &v, p, c.eps, &solver_cfg)?;
        let (na, nb) = (a.remainder_norm(&mass), b.remainder_norm(&mass));
        table.row(vec![
            cell(p.tau),
            cell(p.r),
            cell(p.theta),
            cell(na),
            cell(a.residual),
            cell(nb),
            cell(b.residual),
            cell(b.trace_defect),
        ]);
        taus.push(p.tau);
        sm.push(na);
        va.push(nb);
    }
    r.output("params", &params)?;
    r.check("parameter_invariants", invariants, "algebraic identities of every parameter set");
    if taus.len() >= 2 && sm.iter().chain(&va).all(|v| *v > 0.0) {
        r.fit("smooth_slope", slope(&taus, &sm));
        r.fit("vanishing_slope", slope(&taus, &va));
    }
    table.write(&rt.out, "cgo.csv", &mut r)?;
    r.write(&rt.out, "cgo")?;
    Ok(r)
}

pub fn recover(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let rc = cfg.recover.as_ref().ok_or_else(|| Failure::validation("recover: section required by this command"))?;
    let s = setup(cfg)?;
    let mut r = report("recover", cfg, rt, Some(&s));
    let c_omega = poincare_constant(&s.mesh)?;
    let v1 = admissible(&s.mesh, &cfg.potentials.v1, "potentials.v1", c_omega)?;
    let v2 = admissible(&s.mesh, &cfg.potentials.v2, "potentials.v2", c_omega)?;
    let sim = DnSimulation { v1, v2, mesh: s.mesh.clone(), kmax: cfg.fiber.kmax, part: s.part.clone(), gamma: rc.gamma };
    let grid = FrequencyGrid { ks: rc.ks.clone(), step: rc.step, eta_max: rc.eta_max };
    let policy = TauPolicy { floor: rc.tau_floor, c_hat: rc.c_hat.unwrap_or(2.0 * s.mesh.max_radius()) };
    let solver_cfg = CgoConfig { tau_floor: rc.tau_floor, jmax: None };
    let rec = reconstruct_difference(&[sim], &grid, &policy, &solver_cfg, rc.n1)?;
    let mut table = Table::new(&["k", "eta0", "eta1", "tau", "estimate_re", "estimate_im", "unobserved_re", "unobserved_im"]);
    for x in &rec.samples {
        table.row(vec![
            x.k.to_string(),
            cell(x.eta[0]),
            cell(x.eta[1]),
            cell(x.tau),
            cell(x.estimate.re),
            cell(x.estimate.im),
            cell(x.unobserved.re),
            cell(x.unobserved.im),
        ]);
    }
    r.output("sampled", rec.coverage.sampled.len())?;
    r.output("gaps", rec.coverage.gaps.len())?;
    r.output("gap_measure", rec.coverage.gap_measure)?;
    r.output("reconstruction_l2", cell_l2(&s.mesh, &rec.field))?;
    r.output("sign_convention", "estimates approximate the Fourier coefficients of V2 - V1")?;
    table.write(&rt.out, "recover.csv", &mut r)?;
    r.write(&rt.out, "recover")?;
    Ok(r)
}

pub fn stability(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let st = cfg.stability.as_ref().ok_or_else(|| Failure::validation("stability: section required by this command"))?;
    let s = setup(cfg)?;
    let mut r = report("stability", cfg, rt, Some(&s));
    let c_omega = poincare_constant(&s.mesh)?;
    let v1 = admissible(&s.mesh, &cfg.potentials.v1, "potentials.v1", c_omega)?;
    let w = potential(&s.mesh, &cfg.potentials.perturbation);
    let scfg = StabilityConfig {
        kmax: cfg.fiber.kmax,
        thetas: cfg.fiber.thetas.clone(),
        gamma_star: st.gamma_star,
        c_omega,
        n1: st.n1,
        space: st.space,
    };
    let rep = run_stability_experiment(&v1, &w, &st.scales, s.mesh.clone(), &s.part, &scfg)?;
    let mut table = Table::new(&["s", "gamma", "theta", "delta", "phi", "ratio"]);
    for x in &rep.rows {
        table.row(vec![cell(x.s), cell(x.gamma), cell(x.theta), cell(x.delta), cell(x.phi), cell(x.ratio)]);
    }
    r.output("skipped", &rep.skipped)?;
    r.fit("c", rep.fitted_c);
    r.fit("spread", rep.spread);
    r.check("gamma_monotone", rep.gamma_monotone, "gamma nondecreasing in |s|");
    r.check("delta_monotone", rep.delta_monotone, "delta nondecreasing in |s|");
    r.check(
        "spread",
        rep.spread <= cfg.tolerances.max_spread,
        format!("ratio spread {} against {}", rep.spread, cfg.tolerances.max_spread),
    );
    table.write(&rt.out, "stability.csv", &mut r)?;
    r.write(&rt.out, "stability")?;
    Ok(r)
}

struct CondSetup {
    s: Setup,
    section: ConductivitySection,
    a1: ConductivityField,
    a2: ConductivityField,
    cc: ConductivityConfig,
}

fn cond_setup(cfg: &ExperimentConfig) -> Result<CondSetup, Failure> {
    let section =
        cfg.conductivity.clone().ok_or_else(|| Failure::validation("conductivity: section required by this command"))?;
    let s = setup(cfg)?;
    let a1 = section.a1()?;
    let a2 = a1.perturbed(&section.perturbation, section.s);
    let cc = ConductivityConfig {
        kmax: cfg.fiber.kmax,
        thetas: cfg.fiber.thetas.clone(),
        mmax: section.mmax,
        alpha_kmax: section.alpha_kmax,
        n1: section.n1,
        gamma_star: section.gamma_star,
        c_omega: poincare_constant(&s.mesh)?,
    };
    Ok(CondSetup { s, section, a1, a2, cc })
}

pub fn conductivity_check(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let c = cond_setup(cfg)?;
    let mut r = report("conductivity-check", cfg, rt, Some(&c.s));
    for (name, a) in [("a1", &c.a1), ("a2", &c.a2)] {
        let adm = admissibility_check(a, &c.s.mesh, c.cc.mmax, c.cc.c_omega);
        r.check(&format!("{name}_admissible"), adm.admissible, format!("V- = {:.6}, C_omega = {:.6}", adm.v_neg, c.cc.c_omega));
        r.output(name, adm)?;
    }
    match check_compatibility(&c.a1, &c.a2, &c.s.mesh, &c.s.part) {
        Ok(()) => r.check("compatibility", true, "traces and normal derivatives agree"),
        Err(e) => r.check("compatibility", false, e.to_string()),
    }
    r.write(&rt.out, "conductivity-check")?;
    Ok(r)
}

pub fn conductivity_sigma(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let c = cond_setup(cfg)?;
    let mut r = report("conductivity-sigma", cfg, rt, Some(&c.s));
    let mut table = Table::new(&["theta", "sigma_norm", "lambda_norm", "weighted_bound_holds"]);
    let mut all = true;
    for &theta in &c.cc.thetas {
        let ctx = FiberContext::new(theta, c.cc.kmax, c.s.mesh.clone())?;
        let sd = sigma_difference(&c.a1, &c.a2, &ctx, &c.s.part, c.cc.mmax)?;
        all &= sd.weighted_bound_holds;
        table.row(vec![cell(theta), cell(sd.norm), cell(sd.lambda_norm), sd.weighted_bound_holds.to_string()]);
    }
    r.output("s", c.section.s)?;
    r.check("weighted_bound", all, "potential-side norm bounded by the conductivity-side norm on every fiber");
    table.write(&rt.out, "conductivity_sigma.csv", &mut r)?;
    r.write(&rt.out, "conductivity-sigma")?;
    Ok(r)
}

pub fn conductivity_stability(cfg: &ExperimentConfig, rt: &Runtime) -> Result<Report, Failure> {
    let c = cond_setup(cfg)?;
    if c.section.scales.is_empty() {
        return Err(Failure::validation("conductivity.scales: required by the conductivity ladder"));
    }
    let mut r = report("conductivity-stability", cfg, rt, Some(&c.s));
    let lad = conductivity_ladder(&c.a1, &c.section.perturbation, &c.section.scales, c.s.mesh.clone(), &c.s.part, &c.cc)?;
    let mut table = Table::new(&[
        "s",
        "theta",
        "sigma_norm",
        "lambda_norm",
        "diff_h1",
        "alpha_h1",
        "alpha_rel_err",
        "dual_v",
        "alpha_ratio",
        "phi",
        "ratio",
    ]);
    let (mut chain, mut bound) = (true, true);
    for row in &lad.rows {
        let q = &row.report;
        chain &= q.chain_holds;
        bound &= q.weighted_bound_holds;
        table.row(vec![
            cell(row.s),
            cell(q.theta),
            cell(q.sigma_norm),
            cell(q.lambda_norm),
            cell(q.diff_h1),
            cell(q.alpha.direct_h1),
            cell(q.alpha.rel_err),
            cell(q.dual_v),
            cell(q.alpha_ratio),
            cell(q.phi),
            cell(row.ratio),
        ]);
    }
    r.fit("c", lad.fitted_c);
    r.fit("spread", lad.spread);
    r.check("chain", chain, "H1 difference bounded through the square-root difference");
    r.check("weighted_bound", bound, "potential-side norm bounded by the conductivity-side norm");
    r.check(
        "spread",
        lad.spread <= cfg.tolerances.max_spread,
        format!("ratio spread {} against {}", lad.spread, cfg.tolerances.max_spread),
    );
    table.write(&rt.out, "conductivity_stability.csv", &mut r)?;
    r.write(&rt.out, "conductivity-stability")?;
    Ok(r)
}

/// Reference values used by the test suite, from closed forms and the independent oracles.
pub fn oracle(cfg: Option<&ExperimentConfig>, rt: &Runtime) -> Result<Report, Failure> {
    let mut r = Report::new("oracle", &rt.hash, cfg.map_or(0, |c| c.seed), rt.workers);
    let mut table = Table::new(&["quantity", "parameters", "value"]);
    table.row(vec!["poincare_disk_exact".into(), "radius=1".into(), cell(oracle::DISK_J01)]);
    table.row(vec!["poincare_disk_oracle".into(), "radius=1 n=400".into(), cell(oracle::disk_poincare_oracle(1.0, 400)?)]);
    table.row(vec!["poincare_square_exact".into(), "side=1".into(), cell(oracle::square_exact(1.0))]);
    table.row(vec!["poincare_square_oracle".into(), "side=1 n=20".into(), cell(oracle::square_poincare_oracle(1.0, 20)?)]);
    for c in [0.0, 1.0] {
        for m in 0..=4u32 {
            table.row(vec![
                "disk_dn_eigenvalue".into(),
                format!("c={c} radius=1 beta=0.5 m={m}"),
                cell(oracle::disk_dn_analytic(c, 1.0, 0.5, m)),
            ]);
        }
    }
    for (rho, eta) in [(0.3, [0.0, 2.0 * PI]), (0.3, [2.0 * PI, 2.0 * PI]), (0.5, [0.0, 2.0 * PI])] {
        table.row(vec![
            "bump_fourier".into(),
            format!("rho={rho} eta=({:.6} {:.6})", eta[0], eta[1]),
            cell(oracle::bump_fourier(rho, eta)),
        ]);
    }
    table.row(vec!["min_reachable_tau".into(), "k=1 eta=(0 2pi)".into(), cell(min_reachable_tau(1, [0.0, 2.0 * PI]))]);
    r.output("rows", table.len())?;
    table.write(&rt.out, "oracle_table.csv", &mut r)?;
    r.write(&rt.out, "oracle")?;
    Ok(r)
}
