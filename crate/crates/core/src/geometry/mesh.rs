use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use super::{dist_to_segment, CrossSectionSpec, P2};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryEdge {
    /// Mesh node indices, ordered counter-clockwise along the boundary.
    pub nodes: [usize; 2],
    pub midpoint: P2,
    pub length: f64,
    /// Outward unit normal.
    pub normal: P2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossSectionMesh {
    pub vertices: Vec<P2>,
    pub triangles: Vec<[usize; 3]>,
    /// Boundary edges in loop order; edge `e` joins `boundary_nodes[e]` and `boundary_nodes[e+1]`.
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Boundary node indices in loop order.
    pub boundary_nodes: Vec<usize>,
    /// Position of each node in `boundary_nodes`, if it lies on the boundary.
    pub boundary_pos: Vec<Option<usize>>,
}

pub fn build_mesh(spec: &CrossSectionSpec) -> Result<CrossSectionMesh> {
    spec.validate()?;
    let hb = spec.boundary_h.unwrap_or(spec.h);
    let (bpts, corner) = spec.shape.boundary_samples(hb);
    let nb = bpts.len();
    let seg = |i: usize| (bpts[i], bpts[(i + 1) % nb]);
    let dist_boundary = |p: P2| {
        (0..nb)
            .map(|i| {
                let (a, b) = seg(i);
                dist_to_segment(p, a, b)
            })
            .fold(f64::INFINITY, f64::min)
    };

    let mut extra: Vec<P2> = Vec::new();
    let mut layer_thickness = 0.0;
    if let Some(layer) = spec.layer {
        // Offsets grow geometrically until they reach the tangential spacing.
        let mut offsets = Vec::new();
        let (mut d, mut step) = (layer.first, layer.first);
        while step < 0.7 * hb && d < 0.45 * spec.shape.max_radius() {
            offsets.push(d);
            step *= layer.ratio;
            d += step;
        }
        layer_thickness = offsets.last().copied().unwrap_or(0.0);
        for i in 0..nb {
            if corner[i] {
                continue;
            }
            let prev = bpts[(i + nb - 1) % nb];
            let next = bpts[(i + 1) % nb];
            let (tx, ty) = (next[0] - prev[0], next[1] - prev[1]);
            let tl = tx.hypot(ty);
            let inward = [-ty / tl, tx / tl];
            for (j, &off) in offsets.iter().enumerate() {
                let p = [bpts[i][0] + off * inward[0], bpts[i][1] + off * inward[1]];
                let spacing = if j == 0 { layer.first } else { off - offsets[j - 1] };
                if spec.shape.contains(p) && (dist_boundary(p) - off).abs() < 0.25 * spacing {
                    extra.push(p);
                }
            }
        }
    }

    // Interior lattice of equilateral triangles.
    let h = spec.h;
    let r = spec.shape.max_radius();
    let dy = h * 3f64.sqrt() / 2.0;
    let ny = (r / dy).ceil() as i64 + 1;
    let nx = (r / h).ceil() as i64 + 1;
    let clearance = if spec.layer.is_some() {
        layer_thickness + 0.6 * hb.max(h * 0.5)
    } else {
        0.6 * hb.max(h * 0.7)
    };
    for j in -ny..=ny {
        let shift = if j.rem_euclid(2) == 1 { h / 2.0 } else { 0.0 };
        for i in -nx..=nx {
            let p = [i as f64 * h + shift, j as f64 * dy];
            if spec.shape.contains(p) && dist_boundary(p) > clearance {
                extra.push(p);
            }
        }
    }

    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> = ConstrainedDelaunayTriangulation::new();
    let mut bh = Vec::with_capacity(nb);
    for p in &bpts {
        bh.push(cdt.insert(Point2::new(p[0], p[1])).map_err(|e| Error::Validation(format!("mesh insertion: {e:?}")))?);
    }
    for p in &extra {
        cdt.insert(Point2::new(p[0], p[1])).map_err(|e| Error::Validation(format!("mesh insertion: {e:?}")))?;
    }
    for i in 0..nb {
        cdt.add_constraint(bh[i], bh[(i + 1) % nb]);
    }

    let poly = bpts.clone();
    let mut used = vec![usize::MAX; cdt.num_vertices()];
    let mut vertices = Vec::new();
    // Boundary nodes get the first indices so they stay in loop order.
    for h in &bh {
        let idx = h.index();
        if used[idx] != usize::MAX {
            return Err(Error::Validation("boundary samples collapsed; refine h".into()));
        }
        used[idx] = vertices.len();
        vertices.push(bpts[vertices.len()]);
    }
    let mut triangles = Vec::new();
    for face in cdt.inner_faces() {
        let vs = face.vertices();
        let pos: Vec<P2> = vs.iter().map(|v| [v.position().x, v.position().y]).collect();
        let c = [(pos[0][0] + pos[1][0] + pos[2][0]) / 3.0, (pos[0][1] + pos[1][1] + pos[2][1]) / 3.0];
        if !super::point_in_polygon(&poly, c) {
            continue;
        }
        let mut tri = [0usize; 3];
        for k in 0..3 {
            let idx = vs[k].fix().index();
            if used[idx] == usize::MAX {
                used[idx] = vertices.len();
                vertices.push(pos[k]);
            }
            tri[k] = used[idx];
        }
        if tri_area(&vertices, tri) < 0.0 {
            tri.swap(1, 2);
        }
        triangles.push(tri);
    }

    let boundary_nodes: Vec<usize> = (0..nb).collect();
    let mesh = CrossSectionMesh::from_parts(vertices, triangles, boundary_nodes)?;
    Ok(mesh)
}

pub(crate) fn tri_area(v: &[P2], t: [usize; 3]) -> f64 {
    let (a, b, c) = (v[t[0]], v[t[1]], v[t[2]]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl CrossSectionMesh {
    /// Assemble boundary data from a counter-clockwise boundary loop and check invariants.
    pub fn from_parts(vertices: Vec<P2>, triangles: Vec<[usize; 3]>, boundary_nodes: Vec<usize>) -> Result<Self> {
        let nb = boundary_nodes.len();
        if nb < 3 {
            return Err(Error::Validation("boundary loop too short".into()));
        }
        let mut boundary_pos = vec![None; vertices.len()];
        for (k, &n) in boundary_nodes.iter().enumerate() {
            if boundary_pos[n].is_some() {
                return Err(Error::Validation("boundary loop visits a node twice".into()));
            }
            boundary_pos[n] = Some(k);
        }
        let boundary_edges = (0..nb)
            .map(|k| {
                let (i, j) = (boundary_nodes[k], boundary_nodes[(k + 1) % nb]);
                let (p, q) = (vertices[i], vertices[j]);
                let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                let len = dx.hypot(dy);
                BoundaryEdge {
                    nodes: [i, j],
                    midpoint: [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0],
                    length: len,
                    normal: [dy / len, -dx / len],
                }
            })
            .collect();
        let mesh = CrossSectionMesh { vertices, triangles, boundary_edges, boundary_nodes, boundary_pos };
        mesh.check()?;
        Ok(mesh)
    }

    pub fn check(&self) -> Result<()> {
        for (k, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= self.vertices.len()) {
                return Err(Error::Validation(format!("triangle {k} references a missing vertex")));
            }
            if tri_area(&self.vertices, *t) <= 0.0 {
                return Err(Error::Validation(format!("triangle {k} has non-positive area")));
            }
        }
        for e in &self.boundary_edges {
            let n = e.normal[0].hypot(e.normal[1]);
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::Validation("boundary normal is not unit length".into()));
            }
        }
        // Every boundary loop edge must be an edge of exactly one triangle.
        let mut count = std::collections::HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        for e in &self.boundary_edges {
            let [a, b] = e.nodes;
            if count.get(&(a.min(b), a.max(b))) != Some(&1) {
                return Err(Error::Validation("boundary edges do not form the mesh boundary".into()));
            }
        }
        let boundary_count = count.values().filter(|&&c| c == 1).count();
        if boundary_count != self.boundary_edges.len() {
            return Err(Error::Validation("mesh boundary is not a single closed loop".into()));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary_nodes.len()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_pos[node].is_some()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| !self.is_boundary(i)).collect()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| tri_area(&self.vertices, *t)).sum()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        tri_area(&self.vertices, self.triangles[t])
    }

    pub fn perimeter(&self) -> f64 {
        self.boundary_edges.iter().map(|e| e.length).sum()
    }

    /// Largest edge length over all triangles.
    pub fn max_edge(&self) -> f64 {
        let v = &self.vertices;
        self.triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| (t[k], t[(k + 1) % 3])))
            .map(|(a, b)| (v[a][0] - v[b][0]).hypot(v[a][1] - v[b][1]))
            .fold(0.0, f64::max)
    }

    /// Largest |x'| over the vertices.
    pub fn max_radius(&self) -> f64 {
        self.vertices.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max)
    }

    /// Outward unit normal at a boundary node (average of the adjacent edge normals).
    pub fn node_normal(&self, pos: usize) -> P2 {
        let nb = self.n_boundary();
        let (a, b) = (&self.boundary_edges[(pos + nb - 1) % nb], &self.boundary_edges[pos]);
        let n = [a.normal[0] + b.normal[0], a.normal[1] + b.normal[1]];
        let l = n[0].hypot(n[1]);
        [n[0] / l, n[1] / l]
    }

    /// Edges adjacent to a boundary node position: (previous, next).
    pub fn node_edges(&self, pos: usize) -> (usize, usize) {
        let nb = self.n_boundary();
        ((pos + nb - 1) % nb, pos)
    }

    /// Content hash over coordinates and connectivity.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.vertices {
            h.update(p[0].to_le_bytes());
            h.update(p[1].to_le_bytes());
        }
        for t in &self.triangles {
            for &i in t {
                h.update((i as u64).to_le_bytes());
            }
        }
        for &b in &self.boundary_nodes {
            h.update((b as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub const TEXT_VERSION: u32 = 1;

    /// Plain-text export: header, node block, element block, boundary-edge block.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "pcal-mesh {}", Self::TEXT_VERSION)?;
        writeln!(w, "nodes {}", self.vertices.len())?;
        for p in &self.vertices {
            writeln!(w, "{:.17e} {:.17e}", p[0], p[1])?;
        }
        writeln!(w, "elements {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(w, "boundary_edges {}", self.boundary_edges.len())?;
        for e in &self.boundary_edges {
            writeln!(
                w,
                "{} {} {:.17e} {:.17e} {:.17e}",
                e.nodes[0], e.nodes[1], e.length, e.normal[0], e.normal[1]
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format("unexpected end of mesh file".into()))?
                .map_err(Error::from)
        };
        let bad = |what: &str| Error::Format(format!("malformed mesh file: {what}"));
        let header = next()?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some("pcal-mesh") {
            return Err(bad("header"));
        }
        let ver: u32 = hp.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("version"))?;
        if ver != Self::TEXT_VERSION {
            return Err(Error::Format(format!("unsupported mesh version {ver}")));
        }
        let count = |line: String, key: &str| -> Result<usize> {
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(bad(key));
            }
            it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(key))
        };
        let nv = count(next()?, "nodes")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let l = next()?;
            let v: Vec<f64> = l.split_whitespace().map(|s| s.parse().map_err(|_| bad("node"))).collect::<Result<_>>()?;
            if v.len() != 2 {
                return Err(bad("node"));
            }
            vertices.push([v[0], v[1]]);
        }
        let nt = count(next()?, "elements")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let l = next()?;
            let v: Vec<usize> = l.split_whitespace().map(|s| s.parse().map_err(|_| bad("element"))).collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(bad("element"));
            }
            triangles.push([v[0], v[1], v[2]]);
        }
        let ne = count(next()?, "boundary_edges")?;
        let mut loop_nodes = Vec::with_capacity(ne);
        for _ in 0..ne {
            let l = next()?;
            let first = l.split_whitespace().next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("edge"))?;
            loop_nodes.push(first);
        }
        Self::from_parts(vertices, triangles, loop_nodes)
    }
}

/// Bucketed point location for evaluating P1 fields at arbitrary points.
pub struct PointLocator<'a> {
    mesh: &'a CrossSectionMesh,
    origin: P2,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> PointLocator<'a> {
    pub fn new(mesh: &'a CrossSectionMesh) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &mesh.vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let n = (mesh.triangles.len() as f64).sqrt().ceil().max(1.0);
        let cell = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / n).max(1e-12);
        let nx = ((hi[0] - lo[0]) / cell).floor() as usize + 1;
        let ny = ((hi[1] - lo[1]) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        for (k, t) in mesh.triangles.iter().enumerate() {
            let (mut a, mut b) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for &i in t {
                for d in 0..2 {
                    a[d] = a[d].min(mesh.vertices[i][d]);
                    b[d] = b[d].max(mesh.vertices[i][d]);
                }
            }
            let i0 = ((a[0] - lo[0]) / cell).floor() as usize;
            let i1 = (((b[0] - lo[0]) / cell).floor() as usize).min(nx - 1);
            let j0 = ((a[1] - lo[1]) / cell).floor() as usize;
            let j1 = (((b[1] - lo[1]) / cell).floor() as usize).min(ny - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(k);
                }
            }
        }
        PointLocator { mesh, origin: lo, cell, nx, ny, buckets }
    }

    /// Triangle index and barycentric coordinates of `p`, with a small tolerance
    /// so points on the boundary polyline are found.
    pub fn locate(&self, p: P2) -> Option<(usize, [f64; 3])> {
        let fi = ((p[0] - self.origin[0]) / self.cell).floor();
        let fj = ((p[1] - self.origin[1]) / self.cell).floor();
        if fi < 0.0 || fj < 0.0 || fi as usize >= self.nx || fj as usize >= self.ny {
            return None;
        }
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &k in &self.buckets[fj as usize * self.nx + fi as usize] {
            let l = barycentric(self.mesh, k, p);
            let m = l[0].min(l[1]).min(l[2]);
            if best.as_ref().map_or(true, |b| m > b.2) {
                best = Some((k, l, m));
            }
        }
        best.filter(|b| b.2 > -1e-9).map(|b| (b.0, b.1))
    }
}

pub(crate) fn barycentric(mesh: &CrossSectionMesh, k: usize, p: P2) -> [f64; 3] {
    let t = mesh.triangles[k];
    let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    [1.0 - l1 - l2, l1, l2]
}
