use crate::error::{Error, Result};

/// Triangle mesh: the optimizable scene geometry.
///
/// Positions are stored in double precision since they are the parameters
/// updated by the optimizer; colors and texture coordinates are plain `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub positions: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub vertex_colors: Option<Vec<[f32; 3]>>,
    pub uvs: Option<Vec<[f32; 2]>>,
}

impl Mesh {
    /// Builds a mesh and checks its invariants.
    pub fn new(positions: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Mesh {
            positions,
            triangles,
            vertex_colors: None,
            uvs: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_vertex_colors(mut self, colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.len() != self.positions.len() {
            return Err(Error::shape(
                format!("{} vertex colors", self.positions.len()),
                colors.len(),
            ));
        }
        self.vertex_colors = Some(colors);
        Ok(self)
    }

    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} repeats a vertex index: {tri:?}"
                )));
            }
        }
        if let Some(p) = self.positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {p} is not finite")));
        }
        if let Some(c) = &self.vertex_colors {
            if c.len() != n {
                return Err(Error::InvalidMesh(format!("{} colors for {n} vertices", c.len())));
            }
        }
        if let Some(uv) = &self.uvs {
            if uv.len() != n {
                return Err(Error::InvalidMesh(format!("{} uvs for {n} vertices", uv.len())));
            }
        }
        Ok(())
    }

    /// Appends `other`, offsetting its indices. Colors are kept only when both
    /// meshes carry them.
    pub fn append(&mut self, other: &Mesh) {
        let offset = self.positions.len() as u32;
        self.positions.extend_from_slice(&other.positions);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]),
        );
        self.vertex_colors = match (self.vertex_colors.take(), &other.vertex_colors) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
        self.uvs = match (self.uvs.take(), &other.uvs) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
    }

    pub fn translate(&mut self, offset: [f64; 3]) {
        for p in &mut self.positions {
            for k in 0..3 {
                p[k] += offset[k];
            }
        }
    }

    /// Flips the winding of every triangle.
    pub fn flip_winding(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    /// Vertex adjacency derived from triangle edges, sorted and deduplicated.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nbrs = vec![Vec::new(); self.positions.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let a = t[k];
                let b = t[(k + 1) % 3];
                nbrs[a as usize].push(b);
                nbrs[b as usize].push(a);
            }
        }
        for n in &mut nbrs {
            n.sort_unstable();
            n.dedup();
        }
        nbrs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_index() {
        let err = Mesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 3]]).unwrap_err();
        assert!(err.to_string().contains("references vertex 3"));
    }

    #[test]
    fn rejects_repeated_index() {
        assert!(Mesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn append_offsets_indices() {
        let a = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let mut m = a.clone();
        m.append(&a);
        assert_eq!(m.triangles[1], [3, 4, 5]);
        m.validate().unwrap();
    }
}
