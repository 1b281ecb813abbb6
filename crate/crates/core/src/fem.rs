//! P1 finite element assembly on the cross-section.

use crate::geometry::{CrossSectionMesh, P2};
use crate::linalg::{Coo, Csr, C64, ZERO};

/// Gradients of the three barycentric functions and the triangle area.
#[inline]
pub fn p1_gradients(mesh: &CrossSectionMesh, t: usize) -> ([P2; 3], f64) {
    let tri = mesh.triangles[t];
    let (a, b, c) = (mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]);
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let g = [
        [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
        [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
        [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
    ];
    (g, det / 2.0)
}

/// Stiffness matrix of the cross-section Laplacian over all nodes.
pub fn stiffness(mesh: &CrossSectionMesh) -> Csr {
    let n = mesh.n_nodes();
    let mut coo = Coo::with_capacity(n, n, 9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (g, area) = p1_gradients(mesh, t);
        for i in 0..3 {
            for j in 0..3 {
                let v = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                coo.push(tri[i], tri[j], C64::new(v, 0.0));
            }
        }
    }
    coo.build()
}

/// Consistent mass matrix.
pub fn mass(mesh: &CrossSectionMesh) -> Csr {
    let n = mesh.n_nodes();
    let mut coo = Coo::with_capacity(n, n, 9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(t);
        for i in 0..3 {
            for j in 0..3 {
                let v = if i == j { area / 6.0 } else { area / 12.0 };
                coo.push(tri[i], tri[j], C64::new(v, 0.0));
            }
        }
    }
    coo.build()
}

/// Mass matrix weighted by a nodal P1 coefficient `w`: entries `int w phi_i phi_j`,
/// integrated exactly.
pub fn weighted_mass(mesh: &CrossSectionMesh, w: &[C64]) -> Csr {
    let n = mesh.n_nodes();
    let mut coo = Coo::with_capacity(n, n, 9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(t);
        let wl = [w[tri[0]], w[tri[1]], w[tri[2]]];
        if wl.iter().all(|v| *v == ZERO) {
            continue;
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut v = ZERO;
                for l in 0..3 {
                    let c = if i == j {
                        if l == i { area / 10.0 } else { area / 30.0 }
                    } else if l == i || l == j {
                        area / 30.0
                    } else {
                        area / 60.0
                    };
                    v += wl[l] * c;
                }
                coo.push(tri[i], tri[j], v);
            }
        }
    }
    coo.build()
}

/// Convection matrix with entries `int (c . grad phi_j) phi_i`.
pub fn convection(mesh: &CrossSectionMesh, c: [C64; 2]) -> Csr {
    let n = mesh.n_nodes();
    let mut coo = Coo::with_capacity(n, n, 9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (g, area) = p1_gradients(mesh, t);
        for j in 0..3 {
            let v = (c[0] * g[j][0] + c[1] * g[j][1]) * (area / 3.0);
            for i in 0..3 {
                coo.push(tri[i], tri[j], v);
            }
        }
    }
    coo.build()
}

/// Boundary mass matrix indexed by boundary loop positions, restricted to the listed edges.
pub fn boundary_mass(mesh: &CrossSectionMesh, edges: impl IntoIterator<Item = usize>) -> Csr {
    let nb = mesh.n_boundary();
    let mut coo = Coo::new(nb, nb);
    for e in edges {
        let (a, b) = (e, (e + 1) % nb);
        let l = mesh.boundary_edges[e].length;
        coo.push(a, a, C64::new(l / 3.0, 0.0));
        coo.push(b, b, C64::new(l / 3.0, 0.0));
        coo.push(a, b, C64::new(l / 6.0, 0.0));
        coo.push(b, a, C64::new(l / 6.0, 0.0));
    }
    coo.build()
}

/// `A + s B` for matrices of equal shape.
pub fn add(a: &Csr, b: &Csr, s: C64) -> Csr {
    let mut coo = Coo::with_capacity(a.nrows, a.ncols, a.nnz() + b.nnz());
    for i in 0..a.nrows {
        for (j, v) in a.row(i) {
            coo.push(i, j, v);
        }
        for (j, v) in b.row(i) {
            coo.push(i, j, v * s);
        }
    }
    coo.build()
}

/// Degree-5 seven-point rule on the reference triangle: (barycentric, weight summing to 1).
pub const TRI_QUAD7: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059715871789770;
    const B1: f64 = 0.470142064105115;
    const A2: f64 = 0.797426985353087;
    const B2: f64 = 0.101286507323456;
    const W0: f64 = 0.225;
    const W1: f64 = 0.132394152788506;
    const W2: f64 = 0.125939180544827;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], W0),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// Three-point Gauss rule on [0,1]: (abscissa, weight).
pub const LINE_GAUSS3: [(f64, f64); 3] = [
    (0.112701665379258, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887298334620742, 5.0 / 18.0),
];

/// Integrate `f(x)` over the mesh with the seven-point rule on each triangle.
pub fn integrate<F: FnMut(P2, usize, [f64; 3]) -> C64>(mesh: &CrossSectionMesh, mut f: F) -> C64 {
    let mut total = ZERO;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(t);
        let p: Vec<P2> = tri.iter().map(|&i| mesh.vertices[i]).collect();
        for (l, w) in TRI_QUAD7 {
            let x = [
                l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
            ];
            total += f(x, t, l) * (w * area);
        }
    }
    total
}

/// Value of the P1 interpolant of nodal data at barycentric point `l` of triangle `t`.
#[inline]
pub fn interp(mesh: &CrossSectionMesh, t: usize, l: [f64; 3], u: &[C64]) -> C64 {
    let tri = mesh.triangles[t];
    u[tri[0]] * l[0] + u[tri[1]] * l[1] + u[tri[2]] * l[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, CrossSectionSpec};
    use crate::linalg::ONE;

    #[test]
    fn mass_total_is_area_and_stiffness_kills_constants() {
        let m = build_mesh(&CrossSectionSpec::disk(1.0, 0.2)).unwrap();
        let ones = vec![ONE; m.n_nodes()];
        let mm = mass(&m);
        assert!((mm.form(&ones, &ones).re - m.area()).abs() < 1e-12);
        let s = stiffness(&m);
        assert!(s.matvec(&ones).iter().all(|v| v.norm() < 1e-12));
        let wm = weighted_mass(&m, &ones);
        assert!((wm.form(&ones, &ones).re - m.area()).abs() < 1e-12);
    }

    #[test]
    fn weighted_mass_cubic_exactness() {
        // int x * x over the square (-1/2,1/2)^2 = 1/12, exact for P1 data.
        let m = build_mesh(&CrossSectionSpec::square(1.0, 0.1)).unwrap();
        let x: Vec<C64> = m.vertices.iter().map(|p| C64::new(p[0], 0.0)).collect();
        let ones = vec![ONE; m.n_nodes()];
        let wm = weighted_mass(&m, &x);
        assert!((wm.form(&x, &ones).re - 1.0 / 12.0).abs() < 1e-12);
        let mm = mass(&m);
        assert!((mm.form(&x, &x).re - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn convection_on_linear_field() {
        let m = build_mesh(&CrossSectionSpec::square(1.0, 0.1)).unwrap();
        let x: Vec<C64> = m.vertices.iter().map(|p| C64::new(p[0], 0.0)).collect();
        let ones = vec![ONE; m.n_nodes()];
        let c = convection(&m, [ONE * 2.0, ONE]);
        assert!((c.form(&ones, &x).re - 2.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_mass_is_perimeter() {
        let m = build_mesh(&CrossSectionSpec::disk(1.0, 0.2)).unwrap();
        let bm = boundary_mass(&m, 0..m.n_boundary());
        let ones = vec![ONE; m.n_boundary()];
        assert!((bm.form(&ones, &ones).re - m.perimeter()).abs() < 1e-12);
    }

    #[test]
    fn quadrature_is_exact_for_quintics() {
        let m = build_mesh(&CrossSectionSpec::square(1.0, 0.25)).unwrap();
        let v = integrate(&m, |p, _, _| C64::new(p[0].powi(4) * p[1].powi(0) + p[0] * p[1].powi(4), 0.0));
        assert!((v.re - 1.0 / 80.0).abs() < 1e-12);
    }
}
