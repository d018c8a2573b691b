use std::collections::HashMap;

use crate::model::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub triangles: Vec<[u32; 3]>,
}

/// Edge-incidence summary of a mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    /// Edges used by exactly one triangle.
    pub boundary_edges: usize,
    /// Edges used by more than two triangles.
    pub nonmanifold_edges: usize,
    /// Edges traversed twice in the same direction (inconsistent winding).
    pub misoriented_edges: usize,
}

impl Topology {
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices as i64 - self.edges as i64 + self.faces as i64
    }

    /// Every edge shared by exactly two consistently wound triangles.
    pub fn is_closed_manifold(&self) -> bool {
        self.faces > 0 && self.boundary_edges == 0 && self.nonmanifold_edges == 0 && self.misoriented_edges == 0
    }
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn topology(&self) -> Topology {
        let mut edges: HashMap<(u32, u32), (u32, i32)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = edges.entry((a.min(b), a.max(b))).or_default();
                e.0 += 1;
                e.1 += if a < b { 1 } else { -1 };
            }
        }
        let mut used = vec![false; self.vertices.len()];
        self.triangles.iter().flatten().for_each(|&i| used[i as usize] = true);
        Topology {
            vertices: used.iter().filter(|u| **u).count(),
            edges: edges.len(),
            faces: self.triangles.len(),
            boundary_edges: edges.values().filter(|e| e.0 == 1).count(),
            nonmanifold_edges: edges.values().filter(|e| e.0 > 2).count(),
            misoriented_edges: edges.values().filter(|e| e.0 == 2 && e.1 != 0).count(),
        }
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Check that all indices are in range and every triangle has positive area.
    pub fn is_valid(&self) -> bool {
        let n = self.vertices.len() as u32;
        let colors_ok = self.colors.as_ref().is_none_or(|c| c.len() == self.vertices.len());
        colors_ok
            && self
                .triangles
                .iter()
                .all(|t| t.iter().all(|&i| i < n) && self.triangle_area(t) > 0.0)
    }
}
