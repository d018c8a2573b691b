//! Marching-cubes case table and polygonization of a single cell.
//!
//! Corner `i` of a cell sits at offset `CORNERS[i]`; bit `i` of the case index
//! is set when that corner is inside (value below the iso level). The table
//! is built once from per-face rules: on every face the crossing points are
//! joined so that inside corners are cut off, which makes neighbouring cells
//! agree on shared faces and the resulting surface crack-free.

use std::sync::OnceLock;

pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

const FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 2, 6, 7],
    [0, 3, 7, 4],
    [1, 2, 6, 5],
];

/// Triangles of one case as edge-index triples, wound so that normals point
/// towards the outside (high values).
pub type CaseTriangles = Vec<[u8; 3]>;

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("face corners are cube-adjacent")
}

fn corner_pos(i: usize) -> [f64; 3] {
    CORNERS[i].map(|c| c as f64)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Face corner cycles ordered counter-clockwise seen from outside the cube.
fn outward_faces() -> [[usize; 4]; 6] {
    FACES.map(|mut f| {
        let [a, b, c] = [corner_pos(f[0]), corner_pos(f[1]), corner_pos(f[2])];
        let n = cross(sub(b, a), sub(c, b));
        let centre: [f64; 3] = f
            .iter()
            .map(|&i| corner_pos(i))
            .fold([0.0; 3], |s, p| [s[0] + p[0] / 4.0, s[1] + p[1] / 4.0, s[2] + p[2] / 4.0]);
        if dot(n, sub(centre, [0.5; 3])) < 0.0 {
            f.reverse();
        }
        f
    })
}

fn build_case(case: usize, faces: &[[usize; 4]; 6]) -> CaseTriangles {
    let inside = |c: usize| case & (1 << c) != 0;
    // next[e] = edge the boundary curve moves to after edge e
    let mut next = [usize::MAX; 12];
    for f in faces {
        let mut entries = Vec::new();
        let mut exits = Vec::new();
        for k in 0..4 {
            let (a, b) = (f[k], f[(k + 1) % 4]);
            if inside(a) != inside(b) {
                let e = edge_between(a, b);
                if inside(b) {
                    entries.push((k, e));
                } else {
                    exits.push((k, e));
                }
            }
        }
        // each exit closes the inside run that began at the latest entry before it
        for &(kx, ex) in &exits {
            let &(_, en) = entries
                .iter()
                .filter(|(ke, _)| *ke < kx)
                .next_back()
                .or_else(|| entries.last())
                .expect("every exit has an entry");
            next[ex] = en;
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            lp.push(e as u8);
            e = next[e];
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0], lp[i + 1], lp[i]]);
        }
    }
    tris
}

pub fn case_table() -> &'static [CaseTriangles; 256] {
    static TABLE: OnceLock<[CaseTriangles; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = outward_faces();
        std::array::from_fn(|c| build_case(c, &faces))
    })
}

/// Case index of a cell from its corner values.
pub fn cell_case(values: &[f64; 8], iso: f64) -> usize {
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < iso)
        .fold(0, |acc, (i, _)| acc | (1 << i))
}

/// Interpolation parameter of the iso crossing along an edge, kept away from
/// the endpoints so distinct edges never yield coincident vertices.
pub fn edge_t(fa: f64, fb: f64, iso: f64) -> f64 {
    let t = (iso - fa) / (fb - fa);
    t.clamp(1e-3, 1.0 - 1e-3)
}
