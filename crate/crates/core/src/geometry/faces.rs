use serde::{Deserialize, Serialize};

use super::{CrossSectionMesh, P2};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceTag {
    Plus,
    Minus,
}

/// A set of boundary edges (indices into `mesh.boundary_edges`), sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceSet {
    pub edges: Vec<usize>,
    pub tag: FaceTag,
    pub xi: P2,
    pub eps: f64,
}

/// Membership is decided with this slack so that edges whose normal is
/// orthogonal to the direction land in both non-strict sets.
const DOT_TOL: f64 = 1e-12;

fn check_unit(xi: P2) -> Result<()> {
    let n = xi[0].hypot(xi[1]);
    if !((n - 1.0).abs() <= 1e-10) {
        return invalid(format!("direction must be a unit vector, |xi| = {n}"));
    }
    Ok(())
}

#[inline]
fn dot(a: P2, b: P2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl FaceSet {
    pub fn contains(&self, edge: usize) -> bool {
        self.edges.binary_search(&edge).is_ok()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Arbitrary edge set, e.g. an input or output face chosen by the user.
    pub fn from_edges(mut edges: Vec<usize>, tag: FaceTag, xi: P2) -> Self {
        edges.sort_unstable();
        edges.dedup();
        FaceSet { edges, tag, xi, eps: 0.0 }
    }

    /// Edges whose midpoint polar angle lies within `half_width` of `center`.
    pub fn arc(mesh: &CrossSectionMesh, center: f64, half_width: f64) -> Self {
        let edges = mesh
            .boundary_edges
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                let a = e.midpoint[1].atan2(e.midpoint[0]);
                let d = (a - center + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                    - std::f64::consts::PI;
                d.abs() <= half_width
            })
            .map(|(k, _)| k)
            .collect();
        FaceSet::from_edges(edges, FaceTag::Plus, [center.cos(), center.sin()])
    }

    pub fn all(mesh: &CrossSectionMesh) -> Self {
        FaceSet::from_edges((0..mesh.boundary_edges.len()).collect(), FaceTag::Plus, [1.0, 0.0])
    }

    /// Total length of the member edges.
    pub fn measure(&self, mesh: &CrossSectionMesh) -> f64 {
        self.edges.iter().map(|&e| mesh.boundary_edges[e].length).sum()
    }

    /// Boundary node positions whose two adjacent edges are both members.
    pub fn interior_node_positions(&self, mesh: &CrossSectionMesh) -> Vec<usize> {
        (0..mesh.n_boundary())
            .filter(|&p| {
                let (a, b) = mesh.node_edges(p);
                self.contains(a) && self.contains(b)
            })
            .collect()
    }

    /// Boundary node positions touching at least one member edge.
    pub fn touched_node_positions(&self, mesh: &CrossSectionMesh) -> Vec<usize> {
        (0..mesh.n_boundary())
            .filter(|&p| {
                let (a, b) = mesh.node_edges(p);
                self.contains(a) || self.contains(b)
            })
            .collect()
    }
}

/// Shadowed (`xi.nu >= 0`) and illuminated (`xi.nu <= 0`) faces for a probe direction.
pub fn face_partition(mesh: &CrossSectionMesh, xi0: P2) -> Result<(FaceSet, FaceSet)> {
    check_unit(xi0)?;
    let (mut plus, mut minus) = (Vec::new(), Vec::new());
    for (k, e) in mesh.boundary_edges.iter().enumerate() {
        let d = dot(xi0, e.normal);
        if d >= -DOT_TOL {
            plus.push(k);
        }
        if d <= DOT_TOL {
            minus.push(k);
        }
    }
    Ok((
        FaceSet { edges: plus, tag: FaceTag::Plus, xi: xi0, eps: 0.0 },
        FaceSet { edges: minus, tag: FaceTag::Minus, xi: xi0, eps: 0.0 },
    ))
}

/// Strict split at threshold `eps`: plus has `xi.nu > eps`, minus has `xi.nu <= eps`.
/// For `eps >= 1` the plus set is empty.
pub fn epsilon_faces(mesh: &CrossSectionMesh, xi: P2, eps: f64) -> Result<(FaceSet, FaceSet)> {
    check_unit(xi)?;
    if !(eps > 0.0) {
        return invalid(format!("epsilon must be positive, got {eps}"));
    }
    let (mut plus, mut minus) = (Vec::new(), Vec::new());
    for (k, e) in mesh.boundary_edges.iter().enumerate() {
        if dot(xi, e.normal) > eps {
            plus.push(k);
        } else {
            minus.push(k);
        }
    }
    Ok((
        FaceSet { edges: plus, tag: FaceTag::Plus, xi, eps },
        FaceSet { edges: minus, tag: FaceTag::Minus, xi, eps },
    ))
}

/// Unit directions within distance `eps` of `xi0`, evenly spaced in angle.
pub(crate) fn direction_ball(xi0: P2, eps: f64, n: usize) -> Vec<P2> {
    let phi_max = 2.0 * (eps.min(2.0) / 2.0).asin();
    let base = xi0[1].atan2(xi0[0]);
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { -phi_max + 2.0 * phi_max * i as f64 / (n - 1) as f64 };
            [(base + t).cos(), (base + t).sin()]
        })
        .collect()
}

fn inclusions_hold(mesh: &CrossSectionMesh, f: &FaceSet, g: &FaceSet, xi: P2, eps: f64) -> bool {
    mesh.boundary_edges.iter().enumerate().all(|(k, e)| {
        let d = dot(xi, e.normal);
        // edge in the eps-minus face of -xi must be in F; of xi must be in G
        (-d > eps || f.contains(k)) && (d > eps || g.contains(k))
    })
}

pub const EPS_CANDIDATES: usize = 14;
pub const XI_GRID: usize = 64;

/// Largest `eps` in {1/2, 1/4, ..., 2^-14} for which the partial-data inclusions hold
/// over a 64-direction grid in the `eps`-ball around `xi0`.
pub fn choose_epsilon(mesh: &CrossSectionMesh, f: &FaceSet, g: &FaceSet, xi0: P2) -> Result<f64> {
    check_unit(xi0)?;
    for k in 0..mesh.boundary_edges.len() {
        if !f.contains(k) && !g.contains(k) {
            return invalid("input and output faces must cover the whole boundary");
        }
    }
    for j in 1..=EPS_CANDIDATES {
        let eps = 0.5f64.powi(j as i32);
        if direction_ball(xi0, eps, XI_GRID).into_iter().all(|xi| inclusions_hold(mesh, f, g, xi, eps)) {
            return Ok(eps);
        }
    }
    Err(Error::Validation("faces too small for probe direction".into()))
}

/// Input face F', output face G', probe direction and an admissible epsilon.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryPartition {
    pub f: FaceSet,
    pub g: FaceSet,
    pub xi0: P2,
    pub eps: f64,
}

impl BoundaryPartition {
    pub fn new(mesh: &CrossSectionMesh, f: FaceSet, g: FaceSet, xi0: P2) -> Result<Self> {
        let eps = choose_epsilon(mesh, &f, &g, xi0)?;
        if !f.edges.iter().any(|e| g.contains(*e)) {
            return invalid("input and output faces must overlap");
        }
        Ok(BoundaryPartition { f, g, xi0, eps })
    }

    /// Whole boundary as both input and output.
    pub fn full(mesh: &CrossSectionMesh, xi0: P2) -> Result<Self> {
        Self::new(mesh, FaceSet::all(mesh), FaceSet::all(mesh), xi0)
    }

    /// Arcs of half-width `half_width` centered on the shadowed and illuminated sides of `xi0`.
    pub fn arcs(mesh: &CrossSectionMesh, xi0: P2, half_width: f64) -> Result<Self> {
        let a = xi0[1].atan2(xi0[0]);
        let f = FaceSet::arc(mesh, a, half_width);
        let g = FaceSet::arc(mesh, a + std::f64::consts::PI, half_width);
        Self::new(mesh, f, g, xi0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, CrossSectionSpec};
    use std::f64::consts::PI;

    fn disk() -> CrossSectionMesh {
        build_mesh(&CrossSectionSpec::disk(1.0, 0.1)).unwrap()
    }

    fn edge_near(m: &CrossSectionMesh, p: P2) -> usize {
        (0..m.boundary_edges.len())
            .min_by(|&a, &b| {
                let da = (m.boundary_edges[a].midpoint[0] - p[0]).hypot(m.boundary_edges[a].midpoint[1] - p[1]);
                let db = (m.boundary_edges[b].midpoint[0] - p[0]).hypot(m.boundary_edges[b].midpoint[1] - p[1]);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
    }

    #[test]
    fn partition_sides() {
        let m = disk();
        let (plus, minus) = face_partition(&m, [1.0, 0.0]).unwrap();
        assert!(plus.contains(edge_near(&m, [1.0, 0.0])));
        assert!(minus.contains(edge_near(&m, [-1.0, 0.0])));
        assert!(!plus.contains(edge_near(&m, [-1.0, 0.0])));
        assert!(face_partition(&m, [1.0, 1.0]).is_err());
    }

    #[test]
    fn equator_edge_in_both() {
        // Square: the top edge has normal (0,1), orthogonal to (1,0).
        let m = build_mesh(&CrossSectionSpec::square(1.0, 0.2)).unwrap();
        let (plus, minus) = face_partition(&m, [1.0, 0.0]).unwrap();
        let k = edge_near(&m, [0.1, 0.5]);
        assert!(plus.contains(k) && minus.contains(k));
    }

    #[test]
    fn eps_half_arc() {
        // Oracle: cos(angle) > 1/2 <=> |angle| < pi/3.
        let m = disk();
        let (plus, minus) = epsilon_faces(&m, [1.0, 0.0], 0.5).unwrap();
        for (k, e) in m.boundary_edges.iter().enumerate() {
            let a = e.midpoint[1].atan2(e.midpoint[0]).abs();
            if a < PI / 3.0 - 0.06 {
                assert!(plus.contains(k));
            }
            if a > PI / 3.0 + 0.06 {
                assert!(minus.contains(k) && !plus.contains(k));
            }
        }
    }

    #[test]
    fn eps_near_one_is_narrow() {
        let m = build_mesh(&CrossSectionSpec::disk(1.0, 0.01)).unwrap();
        let (plus, _) = epsilon_faces(&m, [1.0, 0.0], 0.999).unwrap();
        let max_angle = plus
            .edges
            .iter()
            .map(|&k| m.boundary_edges[k].midpoint[1].atan2(m.boundary_edges[k].midpoint[0]).abs())
            .fold(0.0, f64::max);
        assert!(max_angle <= 0.999f64.acos() + 0.01);
        assert!(max_angle >= 0.999f64.acos() - 0.01);
        let (plus1, _) = epsilon_faces(&m, [1.0, 0.0], 1.0).unwrap();
        assert!(plus1.is_empty());
    }

    #[test]
    fn choose_epsilon_cases() {
        let m = disk();
        let f = FaceSet::arc(&m, 0.0, 3.0 * PI / 4.0);
        let g = FaceSet::arc(&m, PI, 3.0 * PI / 4.0);
        let eps = choose_epsilon(&m, &f, &g, [1.0, 0.0]).unwrap();
        assert!(eps >= 0.05);
        for xi in direction_ball([1.0, 0.0], eps, 64) {
            assert!(inclusions_hold(&m, &f, &g, xi, eps));
        }
        let all = FaceSet::all(&m);
        assert_eq!(choose_epsilon(&m, &all, &all, [1.0, 0.0]).unwrap(), 0.5);
        let (plus, _) = face_partition(&m, [1.0, 0.0]).unwrap();
        let gsmall = FaceSet::from_edges(
            (0..m.boundary_edges.len()).filter(|k| !plus.contains(*k) || m.boundary_edges[*k].normal[0] < 0.5).collect(),
            FaceTag::Minus,
            [1.0, 0.0],
        );
        // Without margin only epsilons below the normal sampling of the mesh can pass.
        let r = choose_epsilon(&m, &plus, &gsmall, [1.0, 0.0]);
        assert!(r.is_err() || r.unwrap() < 0.1);
    }
}
