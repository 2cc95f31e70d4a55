use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm3, Vec3};

/// Version tag of the built-in model; bump when its geometry changes.
pub const DEFAULT_MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Body,
    Panel,
    Boom,
}

/// Wireframe target in body coordinates (meters).
///
/// Each edge carries a shading normal; `None` means the edge is drawn at
/// full brightness regardless of the light direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteModel3D {
    pub vertices: Vec<Vec3>,
    pub edges: Vec<(usize, usize)>,
    pub parts: Vec<Part>,
    pub normals: Vec<Option<Vec3>>,
}

impl SatelliteModel3D {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.edges.iter().any(|&(a, b)| a >= n || b >= n || a == b) {
            return Err(Error::InvalidConfig("edge references an invalid vertex".into()));
        }
        if self.parts.len() != self.edges.len() || self.normals.len() != self.edges.len() {
            return Err(Error::InvalidConfig("per-edge attribute count mismatch".into()));
        }
        if self.bounding_radius() > 3.0 {
            return Err(Error::InvalidConfig("model exceeds the 3 m bounding sphere".into()));
        }
        Ok(())
    }

    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| norm3(*v)).fold(0.0, f64::max)
    }

    fn push_vertex(&mut self, v: Vec3) -> usize {
        self.vertices.push(v);
        self.vertices.len() - 1
    }

    fn push_edge(&mut self, a: usize, b: usize, part: Part, normal: Option<Vec3>) {
        self.edges.push((a, b));
        self.parts.push(part);
        self.normals.push(normal.map(|n| {
            let l = norm3(n);
            [n[0] / l, n[1] / l, n[2] / l]
        }));
    }
}

impl Default for SatelliteModel3D {
    /// 1 m cube body centered at the origin, a 2 m x 1 m panel on the +y side
    /// in the z = 0 plane with a cell grid, and a 0.5 m boom along +z ending
    /// in a small cross.
    fn default() -> Self {
        let mut m = SatelliteModel3D {
            vertices: Vec::new(),
            edges: Vec::new(),
            parts: Vec::new(),
            normals: Vec::new(),
        };
        let h = 0.5;
        let mut cube = [0usize; 8];
        for (i, c) in cube.iter_mut().enumerate() {
            let s = |bit: usize| if i >> bit & 1 == 1 { h } else { -h };
            *c = m.push_vertex([s(0), s(1), s(2)]);
        }
        // an edge of the cube is shaded by the mean of its two face normals
        for i in 0..8usize {
            for bit in 0..3 {
                let j = i | 1 << bit;
                if j == i {
                    continue;
                }
                let p = m.vertices[cube[i]];
                let mut n = [0.0; 3];
                for (axis, nv) in n.iter_mut().enumerate() {
                    if axis != bit {
                        *nv = p[axis].signum();
                    }
                }
                m.push_edge(cube[i], cube[j], Part::Body, Some(n));
            }
        }

        let (x0, x1) = (-0.5, 0.5);
        let (y0, y1) = (0.5, 2.5);
        let up = Some([0.0, 0.0, 1.0]);
        for k in 0..=4 {
            let y = y0 + 0.5 * k as f64;
            let a = m.push_vertex([x0, y, 0.0]);
            let b = m.push_vertex([x1, y, 0.0]);
            m.push_edge(a, b, Part::Panel, up);
        }
        for x in [x0, 0.0, x1] {
            let a = m.push_vertex([x, y0, 0.0]);
            let b = m.push_vertex([x, y1, 0.0]);
            m.push_edge(a, b, Part::Panel, up);
        }

        let base = m.push_vertex([0.0, 0.0, h]);
        let tip = m.push_vertex([0.0, 0.0, h + 0.5]);
        m.push_edge(base, tip, Part::Boom, None);
        let c0 = m.push_vertex([-0.15, 0.0, h + 0.5]);
        let c1 = m.push_vertex([0.15, 0.0, h + 0.5]);
        m.push_edge(c0, c1, Part::Boom, None);
        let c2 = m.push_vertex([0.0, 0.25, h + 0.5]);
        m.push_edge(tip, c2, Part::Boom, None);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_valid_and_asymmetric() {
        let m = SatelliteModel3D::default();
        m.validate().unwrap();
        assert_eq!(m.parts.iter().filter(|p| **p == Part::Body).count(), 12);
        assert!(m.bounding_radius() <= 3.0);
        // no proper rotation by 180 degrees about a body axis maps the vertex set onto itself
        let key = |v: &Vec3| v.map(|c| (c * 1000.0).round() as i64);
        let set: std::collections::BTreeSet<_> = m.vertices.iter().map(key).collect();
        for flip in [[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
            let rotated: std::collections::BTreeSet<_> = m
                .vertices
                .iter()
                .map(|v| key(&[v[0] * flip[0], v[1] * flip[1], v[2] * flip[2]]))
                .collect();
            assert_ne!(rotated, set);
        }
    }
}
