//! Cross-section domains, triangulation, boundary faces and the Poincare constant.

mod faces;
mod mesh;
mod poincare;

pub use faces::{choose_epsilon, epsilon_faces, face_partition, BoundaryPartition, FaceSet, FaceTag};
pub use mesh::{build_mesh, BoundaryEdge, CrossSectionMesh, PointLocator};
pub use poincare::{dirichlet_ground_state, poincare_constant, GroundState};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type P2 = [f64; 2];

/// Shape of the cross-section, in dimensionless lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disk { radius: f64 },
    Ellipse { a: f64, b: f64 },
    /// Vertices in either orientation; they are reoriented counter-clockwise.
    Polygon { vertices: Vec<P2> },
}

/// Geometric refinement toward the boundary: offsets start at `first` and grow by `ratio`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLayer {
    pub first: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionSpec {
    pub shape: Shape,
    /// Interior mesh size.
    pub h: f64,
    /// Boundary spacing; defaults to `h`.
    #[serde(default)]
    pub boundary_h: Option<f64>,
    #[serde(default)]
    pub layer: Option<BoundaryLayer>,
}

impl CrossSectionSpec {
    pub fn disk(radius: f64, h: f64) -> Self {
        CrossSectionSpec { shape: Shape::Disk { radius }, h, boundary_h: None, layer: None }
    }

    pub fn square(side: f64, h: f64) -> Self {
        let s = side / 2.0;
        CrossSectionSpec {
            shape: Shape::Polygon { vertices: vec![[-s, -s], [s, -s], [s, s], [-s, s]] },
            h,
            boundary_h: None,
            layer: None,
        }
    }

    pub fn with_boundary_h(mut self, hb: f64) -> Self {
        self.boundary_h = Some(hb);
        self
    }

    pub fn with_layer(mut self, first: f64, ratio: f64) -> Self {
        self.layer = Some(BoundaryLayer { first, ratio });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return invalid(format!("mesh size h must be positive, got {}", self.h));
        }
        if let Some(hb) = self.boundary_h {
            if !(hb > 0.0 && hb.is_finite()) {
                return invalid(format!("boundary_h must be positive, got {hb}"));
            }
        }
        if let Some(l) = self.layer {
            if !(l.first > 0.0 && l.ratio > 1.0) {
                return invalid("boundary layer needs first > 0 and ratio > 1");
            }
        }
        match &self.shape {
            Shape::Disk { radius } => {
                if !(*radius > 0.0) {
                    return invalid("disk radius must be positive");
                }
            }
            Shape::Ellipse { a, b } => {
                if !(*a > 0.0 && *b > 0.0) {
                    return invalid("ellipse semi-axes must be positive");
                }
            }
            Shape::Polygon { vertices } => validate_polygon(vertices)?,
        }
        if !self.shape.contains([0.0, 0.0]) {
            return invalid("cross-section must contain the origin");
        }
        Ok(())
    }
}

impl Shape {
    pub fn contains(&self, p: P2) -> bool {
        match self {
            Shape::Disk { radius } => p[0] * p[0] + p[1] * p[1] < radius * radius,
            Shape::Ellipse { a, b } => (p[0] / a).powi(2) + (p[1] / b).powi(2) < 1.0,
            Shape::Polygon { vertices } => point_in_polygon(vertices, p),
        }
    }

    /// Counter-clockwise polygon vertices (polygon shapes only).
    pub(crate) fn ccw_vertices(&self) -> Option<Vec<P2>> {
        match self {
            Shape::Polygon { vertices } => {
                let mut v = vertices.clone();
                if signed_area(&v) < 0.0 {
                    v.reverse();
                }
                Some(v)
            }
            _ => None,
        }
    }

    /// Largest distance from the origin to the boundary.
    pub fn max_radius(&self) -> f64 {
        match self {
            Shape::Disk { radius } => *radius,
            Shape::Ellipse { a, b } => a.max(*b),
            Shape::Polygon { vertices } => {
                vertices.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max)
            }
        }
    }

    /// Counter-clockwise boundary samples with spacing close to `hb`, and a flag
    /// marking polygon corners.
    pub(crate) fn boundary_samples(&self, hb: f64) -> (Vec<P2>, Vec<bool>) {
        match self {
            Shape::Disk { radius } => {
                let n = ((2.0 * std::f64::consts::PI * radius / hb).ceil() as usize).max(12);
                let pts = (0..n)
                    .map(|i| {
                        let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                        [radius * t.cos(), radius * t.sin()]
                    })
                    .collect();
                (pts, vec![false; n])
            }
            Shape::Ellipse { a, b } => {
                // Equalize arclength using a fine parameter table.
                let m = 4096;
                let mut s = vec![0.0; m + 1];
                let pt = |t: f64| [a * t.cos(), b * t.sin()];
                for i in 0..m {
                    let t0 = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
                    let t1 = 2.0 * std::f64::consts::PI * (i + 1) as f64 / m as f64;
                    let (p, q) = (pt(t0), pt(t1));
                    s[i + 1] = s[i] + (q[0] - p[0]).hypot(q[1] - p[1]);
                }
                let total = s[m];
                let n = ((total / hb).ceil() as usize).max(12);
                let mut pts = Vec::with_capacity(n);
                let mut j = 0;
                for i in 0..n {
                    let target = total * i as f64 / n as f64;
                    while s[j + 1] < target {
                        j += 1;
                    }
                    let frac = (target - s[j]) / (s[j + 1] - s[j]);
                    let t = 2.0 * std::f64::consts::PI * (j as f64 + frac) / m as f64;
                    pts.push(pt(t));
                }
                (pts, vec![false; n])
            }
            Shape::Polygon { .. } => {
                let v = self.ccw_vertices().unwrap();
                let mut pts = Vec::new();
                let mut corner = Vec::new();
                for i in 0..v.len() {
                    let (p, q) = (v[i], v[(i + 1) % v.len()]);
                    let len = (q[0] - p[0]).hypot(q[1] - p[1]);
                    let n = ((len / hb).ceil() as usize).max(1);
                    for j in 0..n {
                        let t = j as f64 / n as f64;
                        pts.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
                        corner.push(j == 0);
                    }
                }
                (pts, corner)
            }
        }
    }
}

pub(crate) fn signed_area(v: &[P2]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (p, q) = (v[i], v[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        / 2.0
}

pub(crate) fn point_in_polygon(v: &[P2], p: P2) -> bool {
    let n = v.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segments_cross(a: P2, b: P2, c: P2, d: P2) -> bool {
    let orient = |p: P2, q: P2, r: P2| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

fn validate_polygon(v: &[P2]) -> Result<()> {
    if v.len() < 3 {
        return invalid("polygon needs at least 3 vertices");
    }
    if v.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return invalid("polygon has non-finite vertices");
    }
    if signed_area(v).abs() < 1e-14 {
        return invalid("polygon is degenerate (zero area)");
    }
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if (b[0] - a[0]).hypot(b[1] - a[1]) < 1e-14 {
            return invalid("polygon has repeated vertices");
        }
        for j in i + 1..n {
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            if segments_cross(a, b, v[j], v[(j + 1) % n]) {
                return invalid("polygon edges intersect");
            }
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn dist_to_segment(p: P2, a: P2, b: P2) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0);
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_polygon_without_origin() {
        let s = CrossSectionSpec {
            shape: Shape::Polygon { vertices: vec![[1.0, 1.0], [2.0, 1.0], [2.0, 2.0], [1.0, 2.0]] },
            h: 0.2,
            boundary_h: None,
            layer: None,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_bowtie() {
        let s = CrossSectionSpec {
            shape: Shape::Polygon { vertices: vec![[-1.0, -1.0], [1.0, 1.0], [1.0, -1.0], [-1.0, 1.0]] },
            h: 0.2,
            boundary_h: None,
            layer: None,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn clockwise_square_is_accepted() {
        let s = CrossSectionSpec {
            shape: Shape::Polygon { vertices: vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [1.0, -1.0]] },
            h: 0.2,
            boundary_h: None,
            layer: None,
        };
        s.validate().unwrap();
        assert!(signed_area(&s.shape.ccw_vertices().unwrap()) > 0.0);
    }
}
