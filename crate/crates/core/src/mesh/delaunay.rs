//! Incremental Bowyer–Watson Delaunay triangulation with exact predicates.

use std::collections::HashMap;

use robust::{incircle, orient2d, Coord};

fn coord(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Positive when `a, b, c` turn counter-clockwise.
pub(crate) fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    orient2d(coord(a), coord(b), coord(c))
}

#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [usize; 3],
    center: [f64; 2],
    r2: f64,
}

fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> ([f64; 2], f64) {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    let a2 = a[0] * a[0] + a[1] * a[1];
    let b2 = b[0] * b[0] + b[1] * b[1];
    let c2 = c[0] * c[0] + c[1] * c[1];
    let ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d;
    let uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d;
    let r2 = (a[0] - ux).powi(2) + (a[1] - uy).powi(2);
    ([ux, uy], r2)
}

/// Triangulation under construction. The first three points are the
/// vertices of an enclosing super-triangle and are stripped by [`finish`].
pub(crate) struct Triangulation {
    points: Vec<[f64; 2]>,
    tris: Vec<Tri>,
}

impl Triangulation {
    /// Starts from a super-triangle enclosing the box `[lo, hi]` with a wide margin.
    pub(crate) fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        let cx = 0.5 * (lo[0] + hi[0]);
        let cy = 0.5 * (lo[1] + hi[1]);
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        let r = 1e4 * span;
        let points = vec![[cx - 2.0 * r, cy - r], [cx + 2.0 * r, cy - r], [cx, cy + 2.0 * r]];
        let mut t = Triangulation {
            points,
            tris: Vec::new(),
        };
        t.push_tri([0, 1, 2]);
        t
    }

    fn push_tri(&mut self, v: [usize; 3]) {
        let (center, r2) = circumcircle(self.points[v[0]], self.points[v[1]], self.points[v[2]]);
        self.tris.push(Tri { v, center, r2 });
    }

    fn in_circle(&self, t: &Tri, p: [f64; 2]) -> bool {
        let d2 = (p[0] - t.center[0]).powi(2) + (p[1] - t.center[1]).powi(2);
        if d2.is_finite() && t.r2.is_finite() && d2 > t.r2 * (1.0 + 1e-8) {
            return false;
        }
        let [a, b, c] = t.v.map(|i| self.points[i]);
        incircle(coord(a), coord(b), coord(c), coord(p)) > 0.0
    }

    /// Inserts `p` and returns its index.
    pub(crate) fn insert(&mut self, p: [f64; 2]) -> usize {
        let idx = self.points.len();
        self.points.push(p);
        let mut bad = Vec::new();
        for (k, t) in self.tris.iter().enumerate() {
            if self.in_circle(t, p) {
                bad.push(k);
            }
        }
        let mut edges: HashMap<(usize, usize), (usize, usize, u8)> = HashMap::new();
        for &k in &bad {
            let v = self.tris[k].v;
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                edges.entry(key).or_insert((a, b, 0)).2 += 1;
            }
        }
        for &k in bad.iter().rev() {
            self.tris.swap_remove(k);
        }
        let mut boundary: Vec<(usize, usize)> = edges.values().filter(|e| e.2 == 1).map(|e| (e.0, e.1)).collect();
        boundary.sort_unstable();
        for (a, b) in boundary {
            self.push_tri([a, b, idx]);
        }
        idx
    }

    pub(crate) fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    pub(crate) fn triangles(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.tris.iter().map(|t| t.v)
    }

    /// Drops the super-triangle and any point left without a triangle
    /// (exact duplicates), renumbering the rest from zero.
    pub(crate) fn finish(self) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
        let kept: Vec<&Tri> = self.tris.iter().filter(|t| t.v.iter().all(|&i| i >= 3)).collect();
        let mut new_id = vec![usize::MAX; self.points.len()];
        for t in &kept {
            for &i in &t.v {
                new_id[i] = 0;
            }
        }
        let mut nodes = Vec::new();
        for (i, id) in new_id.iter_mut().enumerate() {
            if *id == 0 {
                *id = nodes.len();
                nodes.push(self.points[i]);
            }
        }
        let mut tris: Vec<[usize; 3]> = kept
            .iter()
            .map(|t| {
                let v = t.v.map(|i| new_id[i]);
                // canonical rotation: smallest index first, orientation kept
                let r = (0..3).min_by_key(|&k| v[k]).unwrap();
                [v[r], v[(r + 1) % 3], v[(r + 2) % 3]]
            })
            .collect();
        tris.sort_unstable();
        (nodes, tris)
    }
}
