//! Triangulation of the study domain, P1 finite-element matrices and the
//! barycentric projector from mesh nodes to arbitrary points.

mod delaunay;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::Station;
use crate::error::{Error, Result};
use crate::sparse::{CscMatrix, SymCsc};
use delaunay::{orient, Triangulation};

/// Safety cap on refinement.
const MAX_NODES: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    /// Counter-clockwise node triples.
    triangles: Vec<[usize; 3]>,
    boundary_nodes: BTreeSet<usize>,
}

/// Meshing controls. `max_edge = f64::INFINITY` disables refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub buffer_fraction: f64,
    pub max_edge: f64,
}

impl MeshConfig {
    /// Defaults: buffer 20% of the domain diameter, edges up to diameter / 40.
    pub fn for_points(points: &[[f64; 2]]) -> Self {
        MeshConfig {
            buffer_fraction: 0.2,
            max_edge: diameter(points) / 40.0,
        }
    }
}

impl Mesh {
    /// Validates a node/triangle list; clockwise triangles are reoriented.
    pub fn from_parts(nodes: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Mesh> {
        let mut tris = Vec::with_capacity(triangles.len());
        for (k, t) in triangles.into_iter().enumerate() {
            if t.iter().any(|&i| i >= nodes.len()) {
                return Err(Error::InvalidValue(format!("triangle {k} references a missing node")));
            }
            let o = orient(nodes[t[0]], nodes[t[1]], nodes[t[2]]);
            if o == 0.0 {
                return Err(Error::DegenerateGeometry(format!("triangle {k} has zero area")));
            }
            tris.push(if o > 0.0 { t } else { [t[0], t[2], t[1]] });
        }
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &tris {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((e, _)) = edge_count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::DegenerateGeometry(format!(
                "edge ({}, {}) shared by more than two triangles",
                e.0, e.1
            )));
        }
        let boundary_nodes = edge_count
            .iter()
            .filter(|(_, &c)| c == 1)
            .flat_map(|(e, _)| [e.0, e.1])
            .collect();
        Ok(Mesh {
            nodes,
            triangles: tris,
            boundary_nodes,
        })
    }

    /// Structured mesh of `[x0, x1] × [y0, y1]` with `nx × ny` cells, each
    /// split along its lower-left to upper-right diagonal.
    pub fn regular_grid(x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> Mesh {
        assert!(nx > 0 && ny > 0 && x1 > x0 && y1 > y0);
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([
                    x0 + (x1 - x0) * i as f64 / nx as f64,
                    y0 + (y1 - y0) * j as f64 / ny as f64,
                ]);
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        Mesh::from_parts(nodes, triangles).expect("regular grid is valid")
    }

    /// Near-equilateral mesh of `[x0, x1] × [y0, y1]` with edges close to
    /// `edge`. Alternate rows are shifted by half a step; their ends carry
    /// extra nodes so the rectangle's sides stay straight.
    pub fn triangular_lattice(x0: f64, x1: f64, y0: f64, y1: f64, edge: f64) -> Mesh {
        assert!(edge > 0.0 && x1 > x0 && y1 > y0);
        let nx = ((x1 - x0) / edge).round().max(1.0) as usize;
        let ny = ((y1 - y0) / (edge * 3f64.sqrt() / 2.0)).round().max(1.0) as usize;
        let dx = (x1 - x0) / nx as f64;
        let mut nodes = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::with_capacity(ny + 1);
        for j in 0..=ny {
            let y = y0 + (y1 - y0) * j as f64 / ny as f64;
            let mut xs: Vec<f64> = if j % 2 == 0 {
                (0..=nx).map(|i| x0 + dx * i as f64).collect()
            } else {
                (0..nx).map(|i| x0 + dx * (i as f64 + 0.5)).collect()
            };
            if j % 2 == 1 {
                xs.insert(0, x0);
                xs.push(x1);
            }
            rows.push(
                xs.into_iter()
                    .map(|x| {
                        nodes.push([x, y]);
                        nodes.len() - 1
                    })
                    .collect(),
            );
        }
        let mut triangles = Vec::new();
        for j in 0..ny {
            let (lo, up) = (&rows[j], &rows[j + 1]);
            let (mut a, mut b) = (0, 0);
            while a + 1 < lo.len() || b + 1 < up.len() {
                let advance_lower =
                    b + 1 == up.len() || (a + 1 < lo.len() && nodes[lo[a + 1]][0] <= nodes[up[b + 1]][0]);
                if advance_lower {
                    triangles.push([lo[a], lo[a + 1], up[b]]);
                    a += 1;
                } else {
                    triangles.push([lo[a], up[b + 1], up[b]]);
                    b += 1;
                }
            }
        }
        Mesh::from_parts(nodes, triangles).expect("lattice is valid")
    }

    /// Mesh around station locations; see [`build_mesh`].
    pub fn from_stations(stations: &[Station], config: &MeshConfig) -> Result<Mesh> {
        let pts: Vec<[f64; 2]> = stations.iter().map(Station::location).collect();
        build_mesh(&pts, config.buffer_fraction, config.max_edge)
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_nodes(&self) -> &BTreeSet<usize> {
        &self.boundary_nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Unique undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                out.insert((a.min(b), a.max(b)));
            }
        }
        out
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges()
            .iter()
            .map(|&(a, b)| dist(self.nodes[a], self.nodes[b]))
            .fold(0.0, f64::max)
    }

    /// Containing triangle (lowest index on ties) and barycentric weights.
    /// Linear scan over triangles.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        for (k, t) in self.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|i| self.nodes[i]);
            if p[0] < a[0].min(b[0]).min(c[0])
                || p[0] > a[0].max(b[0]).max(c[0])
                || p[1] < a[1].min(b[1]).min(c[1])
                || p[1] > a[1].max(b[1]).max(c[1])
            {
                continue;
            }
            let wa = orient(p, b, c);
            let wb = orient(a, p, c);
            let wc = orient(a, b, p);
            if wa >= 0.0 && wb >= 0.0 && wc >= 0.0 {
                let s = wa + wb + wc;
                return Some((k, [wa / s, wb / s, wc / s]));
            }
        }
        None
    }

    /// Barycentric projector onto `points`; fails on the first point outside.
    pub fn project(&self, points: &[[f64; 2]]) -> Result<Projector> {
        let rows = points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                self.locate(p)
                    .map(|(t, w)| self.weights_row(t, w))
                    .ok_or(Error::PointOutsideMesh {
                        index: i,
                        x: p[0],
                        y: p[1],
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Projector {
            n_nodes: self.n_nodes(),
            rows,
        })
    }

    /// Like [`Mesh::project`] but returns `None` rows for outside points.
    pub fn project_lenient(&self, points: &[[f64; 2]]) -> Vec<Option<Vec<(usize, f64)>>> {
        points
            .iter()
            .map(|&p| self.locate(p).map(|(t, w)| self.weights_row(t, w)))
            .collect()
    }

    fn weights_row(&self, t: usize, w: [f64; 3]) -> Vec<(usize, f64)> {
        let tri = self.triangles[t];
        let mut row: Vec<(usize, f64)> = (0..3).filter(|&k| w[k] > 0.0).map(|k| (tri[k], w[k])).collect();
        row.sort_unstable_by_key(|e| e.0);
        row
    }

    /// Node table as CSV: `node,x,y,boundary`.
    pub fn write_nodes_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "node,x,y,boundary")?;
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                i,
                p[0],
                p[1],
                u8::from(self.boundary_nodes.contains(&i))
            )?;
        }
        Ok(())
    }

    /// Triangle table as CSV: `triangle,a,b,c`.
    pub fn write_triangles_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "triangle,a,b,c")?;
        for (k, t) in self.triangles.iter().enumerate() {
            writeln!(out, "{},{},{},{}", k, t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Convex hull in counter-clockwise order without collinear vertices.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Largest pairwise distance between points.
pub fn diameter(points: &[[f64; 2]]) -> f64 {
    let hull = convex_hull(points);
    let mut d: f64 = 0.0;
    for (i, &a) in hull.iter().enumerate() {
        for &b in &hull[i + 1..] {
            d = d.max(dist(a, b));
        }
    }
    d
}

/// Points on the outward offset of a convex polygon at distance `offset`,
/// spaced at most `spacing` apart along the curve (at least 8 points).
fn buffer_ring(hull: &[[f64; 2]], offset: f64, spacing: f64) -> Vec<[f64; 2]> {
    let n = hull.len();
    // pieces: straight offset edge i, then the arc around vertex i+1
    let normal = |i: usize| {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let len = dist(a, b);
        [(b[1] - a[1]) / len, -(b[0] - a[0]) / len]
    };
    let angle = |v: [f64; 2]| v[1].atan2(v[0]);
    let mut pieces = Vec::with_capacity(2 * n);
    for i in 0..n {
        let nrm = normal(i);
        let a = hull[i];
        let b = hull[(i + 1) % n];
        pieces.push(Piece::Segment(
            [a[0] + offset * nrm[0], a[1] + offset * nrm[1]],
            [b[0] + offset * nrm[0], b[1] + offset * nrm[1]],
        ));
        let next = normal((i + 1) % n);
        let start = angle(nrm);
        let mut sweep = angle(next) - start;
        while sweep < 0.0 {
            sweep += 2.0 * std::f64::consts::PI;
        }
        pieces.push(Piece::Arc {
            center: b,
            start,
            sweep,
        });
    }
    let lengths: Vec<f64> = pieces.iter().map(|p| p.length(offset)).collect();
    let total: f64 = lengths.iter().sum();
    let count = ((total / spacing).ceil() as usize).max(8);
    let step = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut piece = 0;
    let mut acc = 0.0;
    for k in 0..count {
        let s = k as f64 * step;
        while piece + 1 < pieces.len() && s > acc + lengths[piece] {
            acc += lengths[piece];
            piece += 1;
        }
        out.push(pieces[piece].at(s - acc, offset));
    }
    out
}

enum Piece {
    Segment([f64; 2], [f64; 2]),
    Arc { center: [f64; 2], start: f64, sweep: f64 },
}

impl Piece {
    fn length(&self, radius: f64) -> f64 {
        match self {
            Piece::Segment(a, b) => dist(*a, *b),
            Piece::Arc { sweep, .. } => radius * sweep,
        }
    }

    fn at(&self, s: f64, radius: f64) -> [f64; 2] {
        match self {
            Piece::Segment(a, b) => {
                let t = (s / dist(*a, *b)).clamp(0.0, 1.0);
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            }
            Piece::Arc { center, start, .. } => {
                let th = start + s / radius;
                [center[0] + radius * th.cos(), center[1] + radius * th.sin()]
            }
        }
    }
}

/// Delaunay mesh of `points` plus an outer buffer ring, refined by
/// longest-edge bisection until no edge exceeds `max_edge`.
///
/// The ring sits `buffer_fraction × diameter` outside the convex hull of the
/// points, with spacing `max_edge`. Duplicate points are merged.
pub fn build_mesh(points: &[[f64; 2]], buffer_fraction: f64, max_edge: f64) -> Result<Mesh> {
    if !(buffer_fraction >= 0.0) || !buffer_fraction.is_finite() {
        return Err(Error::InvalidValue(format!("buffer fraction {buffer_fraction}")));
    }
    if !(max_edge > 0.0) {
        return Err(Error::InvalidValue(format!("max edge {max_edge}")));
    }
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::NonFinite("mesh input point".into()));
    }
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::DegenerateGeometry(
            "need at least three non-collinear points".into(),
        ));
    }
    let diam = diameter(points);
    let offset = buffer_fraction * diam;

    let mut all: Vec<[f64; 2]> = Vec::new();
    if offset > 0.0 {
        let spacing = if max_edge.is_finite() { max_edge } else { f64::INFINITY };
        all.extend(buffer_ring(&hull, offset, spacing));
    }
    let mut seen = BTreeSet::new();
    for &p in points {
        if seen.insert((p[0].to_bits(), p[1].to_bits())) {
            all.push(p);
        }
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut tri = Triangulation::new(lo, hi);
    // stations first so their relative numbering is stable, then the ring
    let n_ring = all.len() - seen.len();
    for &p in all[n_ring..].iter().chain(&all[..n_ring]) {
        tri.insert(p);
    }

    if max_edge.is_finite() {
        loop {
            let mut split: BTreeSet<(usize, usize)> = BTreeSet::new();
            for t in tri.triangles() {
                if t.iter().any(|&i| i < 3) {
                    continue;
                }
                let mut best = (0.0, (0, 0));
                for e in 0..3 {
                    let (a, b) = (t[e], t[(e + 1) % 3]);
                    let len = dist(tri.point(a), tri.point(b));
                    if len > best.0 {
                        best = (len, (a.min(b), a.max(b)));
                    }
                }
                if best.0 > max_edge {
                    split.insert(best.1);
                }
            }
            if split.is_empty() {
                break;
            }
            for (a, b) in split {
                let (pa, pb) = (tri.point(a), tri.point(b));
                tri.insert([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            }
            let n_now = tri.triangles().count();
            if n_now > 2 * MAX_NODES {
                return Err(Error::InvalidValue(format!(
                    "max edge {max_edge} needs more than {MAX_NODES} nodes"
                )));
            }
        }
    }
    let (nodes, triangles) = tri.finish();
    Mesh::from_parts(nodes, triangles)
}

/// Lumped mass `C̃` (diagonal) and stiffness `G` of linear hat functions.
#[derive(Debug, Clone, PartialEq)]
pub struct FemMatrices {
    pub mass_lumped: Vec<f64>,
    pub stiffness: SymCsc,
}

/// Assembles `C̃_ii = Σ_{T∋i} |T|/3` and `G_ab = Σ_T |T| ∇φ_a·∇φ_b`.
pub fn assemble_fem(mesh: &Mesh) -> FemMatrices {
    let m = mesh.n_nodes();
    let mut mass = vec![0.0; m];
    let mut trip = Vec::with_capacity(9 * mesh.triangles.len());
    for (k, t) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(k);
        let p = t.map(|i| mesh.nodes[i]);
        // edge opposite vertex a, oriented consistently around the triangle
        let e = [0, 1, 2].map(|a| {
            let (u, v) = (p[(a + 1) % 3], p[(a + 2) % 3]);
            [v[0] - u[0], v[1] - u[1]]
        });
        for a in 0..3 {
            mass[t[a]] += area / 3.0;
            for b in 0..=a {
                let g = (e[a][0] * e[b][0] + e[a][1] * e[b][1]) / (4.0 * area);
                trip.push((t[a], t[b], g));
            }
        }
    }
    FemMatrices {
        mass_lumped: mass,
        stiffness: SymCsc::from_triplets(m, &trip),
    }
}

/// Sparse barycentric interpolation matrix `A` (points × nodes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    n_nodes: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Projector {
    pub fn from_rows(n_nodes: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        Projector { n_nodes, rows }
    }

    pub fn n_points(&self) -> usize {
        self.rows.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// `A f` for node values `f`.
    pub fn interpolate(&self, node_values: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * node_values[j]).sum())
            .collect()
    }

    pub fn to_csc(&self) -> CscMatrix {
        let trip: Vec<_> = self
            .rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, w)| (i, j, w)))
            .collect();
        CscMatrix::from_triplets(self.rows.len(), self.n_nodes, &trip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..60.0)])
            .collect()
    }

    /// Every triangle's circumcircle is empty of other nodes.
    fn is_delaunay(mesh: &Mesh) -> bool {
        mesh.triangles().iter().all(|t| {
            let [a, b, c] = t.map(|i| mesh.nodes()[i]);
            mesh.nodes().iter().enumerate().all(|(i, &p)| {
                t.contains(&i)
                    || robust::incircle(
                        robust::Coord { x: a[0], y: a[1] },
                        robust::Coord { x: b[0], y: b[1] },
                        robust::Coord { x: c[0], y: c[1] },
                        robust::Coord { x: p[0], y: p[1] },
                    ) <= 0.0
            })
        })
    }

    fn hull_area(points: &[[f64; 2]]) -> f64 {
        let h = convex_hull(points);
        let mut s = 0.0;
        for i in 0..h.len() {
            let (a, b) = (h[i], h[(i + 1) % h.len()]);
            s += a[0] * b[1] - b[0] * a[1];
        }
        0.5 * s
    }

    #[test]
    fn three_points_one_triangle() {
        let m = build_mesh(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.0, f64::INFINITY).unwrap();
        assert_eq!(m.n_nodes(), 3);
        assert_eq!(m.triangles().len(), 1);
        assert_eq!(m.boundary_nodes().len(), 3);
    }

    #[test]
    fn unit_square_two_delaunay_triangles() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let m = build_mesh(&pts, 0.0, f64::INFINITY).unwrap();
        assert_eq!(m.triangles().len(), 2);
        // the square is cocircular: both diagonals pass the empty-circle test
        assert!(is_delaunay(&m));
        assert_relative_eq!(m.total_area(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn collinear_input_is_degenerate() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(matches!(build_mesh(&pts, 0.1, 1.0), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn buffered_mesh_contains_stations_strictly_inside() {
        let pts = cloud(30, 1);
        let m = build_mesh(&pts, 0.2, 15.0).unwrap();
        let hull = convex_hull(m.nodes());
        for &p in &pts {
            for i in 0..hull.len() {
                assert!(orient(hull[i], hull[(i + 1) % hull.len()], p) > 0.0);
            }
        }
        assert!(m.max_edge_length() <= 15.0);
        assert_relative_eq!(m.total_area(), hull_area(m.nodes()), max_relative = 1e-9);
        assert!(is_delaunay(&m));
    }

    #[test]
    fn mesh_is_conforming() {
        let m = build_mesh(&cloud(25, 4), 0.1, 12.0).unwrap();
        // every interior edge is shared by exactly two triangles with opposite orientation
        let mut directed = BTreeSet::new();
        for t in m.triangles() {
            for e in 0..3 {
                assert!(directed.insert((t[e], t[(e + 1) % 3])));
            }
            assert!(orient(m.nodes()[t[0]], m.nodes()[t[1]], m.nodes()[t[2]]) > 0.0);
        }
        for &(a, b) in &directed {
            if !directed.contains(&(b, a)) {
                assert!(m.boundary_nodes().contains(&a) && m.boundary_nodes().contains(&b));
            }
        }
    }

    #[test]
    fn unit_right_triangle_element_matrices() {
        let m = Mesh::from_parts(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let fem = assemble_fem(&m);
        for c in &fem.mass_lumped {
            assert_relative_eq!(*c, 1.0 / 6.0, epsilon = 1e-15);
        }
        let g = fem.stiffness.to_dense();
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(g[(i, j)], expect[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn fem_row_sums_and_total_mass() {
        let m = build_mesh(&cloud(40, 2), 0.2, 10.0).unwrap();
        let fem = assemble_fem(&m);
        let ones = vec![1.0; m.n_nodes()];
        let g1 = fem.stiffness.mul_vec(&ones);
        let scale = fem.stiffness.diag().iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(g1.iter().all(|v| v.abs() <= 1e-10 * scale.max(1.0)));
        assert!(fem.mass_lumped.iter().all(|&c| c > 0.0));
        let total: f64 = fem.mass_lumped.iter().sum();
        assert_relative_eq!(total, m.total_area(), max_relative = 1e-12);
    }

    #[test]
    fn discrete_laplacian_of_quadratic() {
        // (G f)_i ≈ -∫ Δf φ_i = -2 C̃_ii for f = x² at interior nodes
        let m = Mesh::regular_grid(0.0, 1.0, 0.0, 1.0, 20, 20);
        let fem = assemble_fem(&m);
        let f: Vec<f64> = m.nodes().iter().map(|p| p[0] * p[0]).collect();
        let gf = fem.stiffness.mul_vec(&f);
        for i in 0..m.n_nodes() {
            if m.boundary_nodes().contains(&i) {
                continue;
            }
            let target = -2.0 * fem.mass_lumped[i];
            assert!(
                (gf[i] - target).abs() <= 0.05 * target.abs(),
                "node {i}: {} vs {}",
                gf[i],
                target
            );
        }
    }

    #[test]
    fn lattice_covers_rectangle() {
        let m = Mesh::triangular_lattice(0.0, 10.0, 0.0, 10.0, 0.25);
        assert_relative_eq!(m.total_area(), 100.0, max_relative = 1e-12);
        let edges = m.edges();
        let interior_edge_len: Vec<f64> = edges
            .iter()
            .filter(|(a, b)| !m.boundary_nodes().contains(a) && !m.boundary_nodes().contains(b))
            .map(|&(a, b)| dist(m.nodes()[a], m.nodes()[b]))
            .collect();
        for l in interior_edge_len {
            assert!((l - 0.25).abs() < 0.01, "{l}");
        }
    }

    #[test]
    fn projector_at_node_and_centroid() {
        let m = Mesh::regular_grid(0.0, 2.0, 0.0, 2.0, 2, 2);
        let node = m.nodes()[4];
        let a = m.project(&[node]).unwrap();
        assert_eq!(a.row(0), &[(4, 1.0)]);
        let t = m.triangles()[3];
        let c = t.map(|i| m.nodes()[i]);
        let centroid = [(c[0][0] + c[1][0] + c[2][0]) / 3.0, (c[0][1] + c[1][1] + c[2][1]) / 3.0];
        let a = m.project(&[centroid]).unwrap();
        assert_eq!(a.row(0).len(), 3);
        for &(_, w) in a.row(0) {
            assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn projector_outside_point_errors() {
        let m = Mesh::regular_grid(0.0, 1.0, 0.0, 1.0, 2, 2);
        assert!(matches!(
            m.project(&[[0.5, 0.5], [3.0, 0.5]]),
            Err(Error::PointOutsideMesh { index: 1, .. })
        ));
    }

    #[test]
    fn node_and_triangle_csv() {
        let m = Mesh::regular_grid(0.0, 1.0, 0.0, 1.0, 1, 1);
        let mut nodes = Vec::new();
        m.write_nodes_csv(&mut nodes).unwrap();
        let text = String::from_utf8(nodes).unwrap();
        assert!(text.starts_with("node,x,y,boundary\n0,0,0,1\n"));
        let mut tris = Vec::new();
        m.write_triangles_csv(&mut tris).unwrap();
        assert_eq!(String::from_utf8(tris).unwrap().lines().count(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn interpolation_is_exact_for_affine(
            seed in 0u64..1000,
            coef in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
        ) {
            let stations = cloud(20, seed);
            let m = build_mesh(&stations, 0.15, 20.0).unwrap();
            let f = |p: [f64; 2]| coef.0 + coef.1 * p[0] + coef.2 * p[1];
            let nodal: Vec<f64> = m.nodes().iter().map(|&p| f(p)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            // midpoints of station pairs lie inside the hull
            let pts: Vec<[f64; 2]> = (0..30)
                .map(|_| {
                    let a = stations[rng.random_range(0..20)];
                    let b = stations[rng.random_range(0..20)];
                    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
                })
                .collect();
            let a = m.project(&pts).unwrap();
            for (i, v) in a.interpolate(&nodal).iter().enumerate() {
                prop_assert!((v - f(pts[i])).abs() <= 1e-10 * (1.0 + f(pts[i]).abs()));
                let row = a.row(i);
                prop_assert!(row.len() <= 3);
                prop_assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|e| (0.0..=1.0).contains(&e.1)));
            }
        }

        #[test]
        fn coarser_edges_never_add_nodes(seed in 0u64..1000, base in 5.0f64..20.0) {
            let pts = cloud(15, seed);
            let fine = build_mesh(&pts, 0.1, base).unwrap();
            let coarse = build_mesh(&pts, 0.1, base * 1.5).unwrap();
            let coarsest = build_mesh(&pts, 0.1, f64::INFINITY).unwrap();
            prop_assert!(coarse.n_nodes() <= fine.n_nodes());
            prop_assert!(coarsest.n_nodes() <= coarse.n_nodes());
        }
    }
}
