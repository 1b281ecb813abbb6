//! Brute-force reference computations used to check the main solvers.
//!
//! Nothing here touches the finite element assembly: grids, stencils and quadrature
//! are written out directly.

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{invalid, Error, Result};
use crate::geometry::{CrossSectionMesh, P2};
use crate::linalg::C64;

use std::f64::consts::PI;

/// Uniform grid over `[0,1) x [-half, half]^2`; the square cross-section is the box itself.
#[derive(Clone, Debug)]
pub struct DenseGrid {
    /// Axial points `x1 = j / n1`, `j < n1`.
    pub n1: usize,
    /// Intervals per transverse side.
    pub n: usize,
    pub half: f64,
}

impl DenseGrid {
    pub fn new(n1: usize, n: usize, half: f64) -> Result<Self> {
        if n1 < 3 || n < 2 || half <= 0.0 {
            return invalid("grid needs n1 >= 3, n >= 2 and a positive box");
        }
        Ok(DenseGrid { n1, n, half })
    }

    pub fn h(&self) -> f64 {
        2.0 * self.half / self.n as f64
    }

    pub fn point(&self, j: usize, a: usize, b: usize) -> (f64, P2) {
        let h = self.h();
        (j as f64 / self.n1 as f64, [-self.half + a as f64 * h, -self.half + b as f64 * h])
    }

    pub fn index(&self, j: usize, a: usize, b: usize) -> usize {
        (j * (self.n + 1) + a) * (self.n + 1) + b
    }

    pub fn len(&self) -> usize {
        self.n1 * (self.n + 1) * (self.n + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn on_boundary(&self, a: usize, b: usize) -> bool {
        a == 0 || b == 0 || a == self.n || b == self.n
    }
}

/// Seven-point finite differences for `(-Lap + V) u = f` with `u = g` on the lateral
/// boundary and `u(x1 + 1) = e^{i theta} u(x1)`. Returns values at every grid point.
pub fn fd_solve(
    grid: &DenseGrid,
    theta: f64,
    v: impl Fn(f64, P2) -> f64,
    g: impl Fn(f64, P2) -> C64,
    f: impl Fn(f64, P2) -> C64,
) -> Result<Vec<C64>> {
    let n = grid.n;
    let n1 = grid.n1;
    let h = grid.h();
    let hx = 1.0 / n1 as f64;
    let m = n - 1;
    let unk = |j: usize, a: usize, b: usize| (j * m + (a - 1)) * m + (b - 1);
    let nu = n1 * m * m;
    let mut trip = Vec::with_capacity(7 * nu);
    let mut rhs = vec![C64::new(0.0, 0.0); nu];
    let wrap = C64::from_polar(1.0, theta);
    for j in 0..n1 {
        for a in 1..n {
            for b in 1..n {
                let row = unk(j, a, b);
                let (x1, xp) = grid.point(j, a, b);
                let diag = 2.0 / (hx * hx) + 4.0 / (h * h) + v(x1, xp);
                trip.push(Triplet::new(row, row, C64::new(diag, 0.0)));
                rhs[row] += f(x1, xp);
                // axial neighbours with the quasi-periodic wrap
                let (jp, cp) = if j + 1 == n1 { (0, wrap) } else { (j + 1, C64::new(1.0, 0.0)) };
                let (jm, cm) = if j == 0 { (n1 - 1, wrap.conj()) } else { (j - 1, C64::new(1.0, 0.0)) };
                trip.push(Triplet::new(row, unk(jp, a, b), -cp / (hx * hx)));
                trip.push(Triplet::new(row, unk(jm, a, b), -cm / (hx * hx)));
                for (da, db) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (na, nb) = ((a as i64 + da) as usize, (b as i64 + db) as usize);
                    if grid.on_boundary(na, nb) {
                        let (y1, yp) = grid.point(j, na, nb);
                        rhs[row] += g(y1, yp) / (h * h);
                    } else {
                        trip.push(Triplet::new(row, unk(j, na, nb), C64::new(-1.0 / (h * h), 0.0)));
                    }
                }
            }
        }
    }
    let mat = SparseColMat::<usize, C64>::try_new_from_triplets(nu, nu, &trip)
        .map_err(|e| Error::Solver(format!("oracle assembly: {e:?}")))?;
    let lu = mat.sp_lu().map_err(|e| Error::Solver(format!("oracle LU: {e:?}")))?;
    let mut x = Mat::<C64>::from_fn(nu, 1, |i, _| rhs[i]);
    use faer::linalg::solvers::SolveCore;
    lu.solve_in_place_with_conj(faer::Conj::No, x.as_mut());
    let mut out = vec![C64::new(0.0, 0.0); grid.len()];
    for j in 0..n1 {
        for a in 0..=n {
            for b in 0..=n {
                let (x1, xp) = grid.point(j, a, b);
                out[grid.index(j, a, b)] = if grid.on_boundary(a, b) { g(x1, xp) } else { x[(unk(j, a, b), 0)] };
            }
        }
    }
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Solver("oracle system is singular".into()));
    }
    Ok(out)
}

/// Modified Bessel function `I_m(x)` by its power series.
pub fn bessel_i(m: u32, x: f64) -> f64 {
    let mut term = (x / 2.0).powi(m as i32) / (1..=m).map(|j| j as f64).product::<f64>();
    let mut sum = term;
    let q = x * x / 4.0;
    for j in 1..400 {
        term *= q / (j as f64 * (j + m as usize) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Bessel function `J_m(x)` by its power series (adequate for moderate `x`).
pub fn bessel_j(m: u32, x: f64) -> f64 {
    let mut term = (x / 2.0).powi(m as i32) / (1..=m).map(|j| j as f64).product::<f64>();
    let mut sum = term;
    let q = -x * x / 4.0;
    for j in 1..400 {
        term *= q / (j as f64 * (j + m as usize) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

/// Interior bump `(1 - |x|^2 / rho^2)^3` on `|x| < rho`.
pub fn bump(rho: f64, x: P2) -> f64 {
    let s = (x[0] * x[0] + x[1] * x[1]) / (rho * rho);
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - s).powi(3)
    }
}

/// `int bump(x) e^{-i eta . x} dx = 2 pi * 48 rho^2 J_4(|eta| rho) / (|eta| rho)^4` (real, radial).
pub fn bump_fourier(rho: f64, eta: P2) -> f64 {
    let z = eta[0].hypot(eta[1]) * rho;
    if z < 1e-6 {
        return PI * rho * rho / 4.0;
    }
    2.0 * PI * 48.0 * rho * rho * bessel_j(4, z) / z.powi(4)
}

/// `a^{-1/2} Lap a^{1/2} = Lap a / (2a) - |grad a|^2 / (4a^2)` in closed form for
/// `a = c + amp (1 - |x|^2/rho^2)^3`.
pub fn liouville_radial_bump(c: f64, amp: f64, rho: f64, x: P2) -> f64 {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let q = 1.0 - r2 / (rho * rho);
    if q <= 0.0 {
        return 0.0;
    }
    let a = c + amp * q.powi(3);
    let lap = -12.0 * amp * q * q / (rho * rho) + 24.0 * amp * q * r2 / rho.powi(4);
    let grad2 = 36.0 * amp * amp * q.powi(4) * r2 / rho.powi(4);
    lap / (2.0 * a) - grad2 / (4.0 * a * a)
}

/// DN eigenvalue of `-Lap + c` on the disk for data `e^{i beta x1} e^{i m phi}`:
/// `kappa I_m'(kappa R) / I_m(kappa R)` with `kappa^2 = c + beta^2`.
pub fn disk_dn_analytic(c: f64, radius: f64, beta: f64, m: u32) -> f64 {
    let k2 = c + beta * beta;
    if k2.abs() < 1e-14 {
        return m as f64 / radius;
    }
    let (f, df): (fn(u32, f64) -> f64, bool) = if k2 > 0.0 { (bessel_i, true) } else { (bessel_j, false) };
    let kappa = k2.abs().sqrt();
    let x = kappa * radius;
    let lower = if m == 0 { f(1, x) } else { f(m - 1, x) };
    let upper = f(m + 1, x);
    // I_m' = (I_{m-1} + I_{m+1}) / 2 and J_m' = (J_{m-1} - J_{m+1}) / 2; I_{-1} = I_1, J_{-1} = -J_1.
    let deriv = if df {
        (lower + upper) / 2.0
    } else if m == 0 {
        -upper
    } else {
        (lower - upper) / 2.0
    };
    kappa * deriv / f(m, x)
}

/// `int_cell V u2 conj(u1)` by a six-point triangle rule and an axial midpoint rule.
pub fn volume_pairing_oracle(
    mesh: &CrossSectionMesh,
    n1: usize,
    v: impl Fn(f64, P2) -> f64,
    u2: impl Fn(f64, P2) -> C64,
    u1: impl Fn(f64, P2) -> C64,
) -> C64 {
    // Degree-4 rule (Strang-Fix), barycentric coordinates and weights.
    const Q: [([f64; 3], f64); 6] = [
        ([0.816847572980459, 0.091576213509771, 0.091576213509771], 0.109951743655322),
        ([0.091576213509771, 0.816847572980459, 0.091576213509771], 0.109951743655322),
        ([0.091576213509771, 0.091576213509771, 0.816847572980459], 0.109951743655322),
        ([0.108103018168070, 0.445948490915965, 0.445948490915965], 0.223381589678011),
        ([0.445948490915965, 0.108103018168070, 0.445948490915965], 0.223381589678011),
        ([0.445948490915965, 0.445948490915965, 0.108103018168070], 0.223381589678011),
    ];
    let mut total = C64::new(0.0, 0.0);
    for tri in &mesh.triangles {
        let p = [mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]];
        let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])).abs();
        for (l, w) in Q {
            let x = [
                l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
            ];
            for j in 0..n1 {
                let x1 = (j as f64 + 0.5) / n1 as f64;
                total += u2(x1, x) * u1(x1, x).conj() * (v(x1, x) * w * area / n1 as f64);
            }
        }
    }
    total
}

/// `sqrt` of the lowest Dirichlet eigenvalue of the disk, from a radial finite-difference
/// eigenproblem on `n` and `2n` cells, Richardson-extrapolated.
pub fn disk_poincare_oracle(radius: f64, n: usize) -> Result<f64> {
    let coarse = radial_ground(radius, n)?;
    let fine = radial_ground(radius, 2 * n)?;
    Ok(((4.0 * fine - coarse) / 3.0).sqrt())
}

fn radial_ground(radius: f64, n: usize) -> Result<f64> {
    let d = radius / n as f64;
    let r = |i: f64| (i + 0.5) * d;
    // Symmetrized form D^{-1/2} T D^{-1/2}, cell-centred, ghost value -u_{n-1} at r = R.
    let a = Mat::<f64>::from_fn(n, n, |i, j| {
        let (ri, rp, rm) = (r(i as f64), (i as f64 + 1.0) * d, i as f64 * d);
        let s = 1.0 / (d * d);
        if i == j {
            let mut v = rm + rp;
            if i == n - 1 {
                v += rp;
            }
            v * s / ri
        } else if j == i + 1 {
            -rp * s / (ri * r(j as f64)).sqrt()
        } else if i == j + 1 {
            -rm * s / (ri * r(j as f64)).sqrt()
        } else {
            0.0
        }
    });
    lowest(&a)
}

/// Same for the square of side `side`: five-point stencil on `n` and `2n` intervals.
pub fn square_poincare_oracle(side: f64, n: usize) -> Result<f64> {
    let coarse = square_ground(side, n)?;
    let fine = square_ground(side, 2 * n)?;
    Ok(((4.0 * fine - coarse) / 3.0).sqrt())
}

fn square_ground(side: f64, n: usize) -> Result<f64> {
    let m = n - 1;
    let h = side / n as f64;
    let s = 1.0 / (h * h);
    let a = Mat::<f64>::from_fn(m * m, m * m, |p, q| {
        let (pa, pb) = (p / m, p % m);
        let (qa, qb) = (q / m, q % m);
        if p == q {
            4.0 * s
        } else if (pa == qa && pb.abs_diff(qb) == 1) || (pb == qb && pa.abs_diff(qa) == 1) {
            -s
        } else {
            0.0
        }
    });
    lowest(&a)
}

fn lowest(a: &Mat<f64>) -> Result<f64> {
    let ev = a
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Solver(format!("oracle eigensolver: {e:?}")))?;
    Ok(ev.iter().copied().fold(f64::INFINITY, f64::min))
}

/// First Dirichlet eigenvalue of the unit-radius disk, `j_{0,1}^2`.
pub const DISK_J01: f64 = 2.404_825_557_695_773;

/// `sqrt(2) pi`, the Poincare constant of the unit square.
pub fn square_exact(side: f64) -> f64 {
    (2.0f64).sqrt() * PI / side
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_values() {
        assert!((bessel_i(0, 1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i(1, 2.0) - 1.590_636_854_637_329).abs() < 1e-13);
        assert!(bessel_j(0, DISK_J01).abs() < 1e-12);
    }

    #[test]
    fn dn_harmonic_limits() {
        assert!((disk_dn_analytic(0.0, 1.0, 0.0, 1) - 1.0).abs() < 1e-14);
        assert!((disk_dn_analytic(0.0, 1.0, 0.0, 3) - 3.0).abs() < 1e-14);
        // small kappa approaches m / R
        assert!((disk_dn_analytic(1e-8, 1.0, 0.0, 2) - 2.0).abs() < 1e-6);
        let i0p = bessel_i(1, 1.0) / bessel_i(0, 1.0);
        assert!((disk_dn_analytic(1.0, 1.0, 0.0, 0) - i0p).abs() < 1e-14);
    }

    #[test]
    fn poincare_oracles() {
        let d = disk_poincare_oracle(1.0, 200).unwrap();
        assert!((d - DISK_J01).abs() < 1e-5, "{d}");
        let s = square_poincare_oracle(1.0, 16).unwrap();
        assert!((s - square_exact(1.0)).abs() < 1e-4, "{s}");
    }

    #[test]
    fn fd_harmonic_phase_is_second_order() {
        // zeta = (i 2 pi, 2 pi, 0): e^{zeta . x} is harmonic and 1-periodic.
        let exact = |x1: f64, p: P2| C64::new(2.0 * PI * p[0], 2.0 * PI * x1).exp();
        let err = |n: usize| {
            let g = DenseGrid::new(2 * n, n, 0.5).unwrap();
            let u = fd_solve(&g, 0.0, |_, _| 0.0, exact, |_, _| C64::new(0.0, 0.0)).unwrap();
            let mut e: f64 = 0.0;
            for j in 0..g.n1 {
                for a in 0..=n {
                    for b in 0..=n {
                        let (x1, p) = g.point(j, a, b);
                        e = e.max((u[g.index(j, a, b)] - exact(x1, p)).norm());
                    }
                }
            }
            e
        };
        let (e1, e2) = (err(8), err(16));
        assert!(e2 < e1 / 3.0, "{e1} {e2}");
    }

    #[test]
    fn bump_transform_matches_polar_quadrature() {
        let rho = 0.3;
        for eta in [[0.0, 0.0], [0.0, 2.0 * PI], [3.0, -4.0], [9.0, 1.0]] {
            let (nr, na) = (400, 256);
            let mut sum = C64::new(0.0, 0.0);
            for i in 0..nr {
                let r = (i as f64 + 0.5) * rho / nr as f64;
                for j in 0..na {
                    let a = 2.0 * PI * j as f64 / na as f64;
                    let x = [r * a.cos(), r * a.sin()];
                    let w = bump(rho, x) * r * (rho / nr as f64) * (2.0 * PI / na as f64);
                    sum += C64::from_polar(w, -(eta[0] * x[0] + eta[1] * x[1]));
                }
            }
            let want = bump_fourier(rho, eta);
            assert!((sum - want).norm() < 1e-5 * bump_fourier(rho, [0.0, 0.0]), "{eta:?}: {sum} vs {want}");
        }
    }
}
