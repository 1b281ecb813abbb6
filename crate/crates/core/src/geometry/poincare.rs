use super::CrossSectionMesh;
use crate::error::{Error, Result};
use crate::fem;
use crate::linalg::{dot, SparseLu, C64};

/// Lowest Dirichlet eigenpair of the discrete cross-section Laplacian.
#[derive(Clone, Debug)]
pub struct GroundState {
    pub lambda: f64,
    /// Nodal eigenfunction over all nodes (zero on the boundary), unit L2 norm.
    pub mode: Vec<C64>,
    pub residual: f64,
}

/// Inverse iteration on the P1 pencil (stiffness, mass) restricted to interior nodes.
pub fn dirichlet_ground_state(mesh: &CrossSectionMesh) -> Result<GroundState> {
    let interior = mesh.interior_nodes();
    if interior.is_empty() {
        return Err(Error::Solver("mesh has no interior nodes".into()));
    }
    let s = fem::stiffness(mesh).select(&interior, &interior);
    let m = fem::mass(mesh).select(&interior, &interior);
    let lu = SparseLu::new(&s)?;
    let mut x = vec![C64::new(1.0, 0.0); interior.len()];
    let mut lambda = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for _ in 0..500 {
        let y = lu.solve(&m.matvec(&x));
        let my = m.matvec(&y);
        let nrm = dot(&y, &my).re.sqrt();
        x = y.iter().map(|v| v / nrm).collect();
        let sx = s.matvec(&x);
        let mx = m.matvec(&x);
        let new = dot(&x, &sx).re;
        residual = sx
            .iter()
            .zip(&mx)
            .map(|(a, b)| (a - b * new).norm_sqr())
            .sum::<f64>()
            .sqrt()
            / new.max(1e-300);
        let done = (new - lambda).abs() <= 1e-13 * new && residual < 1e-8;
        lambda = new;
        if done {
            let mut mode = vec![C64::new(0.0, 0.0); mesh.n_nodes()];
            for (k, &i) in interior.iter().enumerate() {
                mode[i] = x[k];
            }
            return Ok(GroundState { lambda, mode, residual });
        }
    }
    Err(Error::Solver(format!("inverse iteration did not converge, residual {residual:.3e}")))
}

/// Square root of the lowest discrete Dirichlet eigenvalue.
pub fn poincare_constant(mesh: &CrossSectionMesh) -> Result<f64> {
    Ok(dirichlet_ground_state(mesh)?.lambda.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, CrossSectionSpec};

    #[test]
    fn disk_radius_scaling() {
        let c1 = poincare_constant(&build_mesh(&CrossSectionSpec::disk(1.0, 0.08)).unwrap()).unwrap();
        let c2 = poincare_constant(&build_mesh(&CrossSectionSpec::disk(2.0, 0.16)).unwrap()).unwrap();
        assert!((c1 / c2 - 2.0).abs() < 0.02);
    }

    #[test]
    fn refinement_is_stable() {
        let a = poincare_constant(&build_mesh(&CrossSectionSpec::disk(1.0, 0.1)).unwrap()).unwrap();
        let b = poincare_constant(&build_mesh(&CrossSectionSpec::disk(1.0, 0.05)).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-2);
    }
}
