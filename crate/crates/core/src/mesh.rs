//! Triangle meshes: validation, area-weighted centroid and view normalization.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::geom::{self, Vec3};
use crate::{Error, Result};

/// Indexed triangle soup.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    label: Option<u32>,
}

impl TriangleMesh {
    /// Builds a mesh, checking index ranges, finiteness and that at least one
    /// face has positive area.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>, label: Option<u32>) -> Result<Self> {
        if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} has a non-finite coordinate")));
        }
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx as usize >= vertices.len() {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {idx} but the mesh has {} vertices",
                        vertices.len()
                    )));
                }
            }
        }
        let mesh = Self { vertices, faces, label };
        if !(0..mesh.faces.len()).any(|f| mesh.face_area(f) > 0.0) {
            return Err(Error::DegenerateMesh("no face has positive area"));
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized face normal (length = twice the area).
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(face);
        geom::cross(geom::sub(b, a), geom::sub(c, a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * geom::norm(self.face_cross(face))
    }

    pub fn face_center(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(face);
        geom::scale(geom::add(geom::add(a, b), c), 1.0 / 3.0)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted mean of face centers. Zero-area faces contribute nothing.
    pub fn centroid(&self) -> Result<Vec3> {
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let area = self.face_area(f);
            if area > 0.0 {
                acc = geom::add(acc, geom::scale(self.face_center(f), area));
                total += area;
            }
        }
        if total <= 0.0 {
            return Err(Error::DegenerateMesh("total surface area is zero"));
        }
        Ok(geom::scale(acc, 1.0 / total))
    }

    /// Translates the centroid to the origin and scales uniformly so the
    /// farthest vertex sits at distance 1.
    pub fn fit_to_view(&self) -> Result<Self> {
        let c = self.centroid()?;
        let max_norm = self
            .vertices
            .iter()
            .map(|&v| geom::norm(geom::sub(v, c)))
            .fold(0.0, f64::max);
        if !(max_norm > 1e-12) {
            return Err(Error::DegenerateMesh("all vertices coincide"));
        }
        let s = 1.0 / max_norm;
        let vertices = self.vertices.iter().map(|&v| geom::scale(geom::sub(v, c), s)).collect();
        Ok(Self { vertices, faces: self.faces.clone(), label: self.label })
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
            label: self.label,
        }
    }

    /// Per-vertex normals averaged from area-weighted adjacent face normals.
    /// Isolated vertices get a zero normal.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = alloc::vec![[0.0; 3]; self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            let n = self.face_cross(f);
            for &i in face {
                normals[i as usize] = geom::add(normals[i as usize], n);
            }
        }
        for n in normals.iter_mut() {
            *n = geom::normalize(*n).unwrap_or([0.0; 3]);
        }
        normals
    }

    pub fn max_vertex_norm(&self) -> f64 {
        self.vertices.iter().map(|&v| geom::norm(v)).fold(0.0, Float::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Ordered collection of meshes sharing one split tag.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDataset {
    meshes: Vec<TriangleMesh>,
    split: Split,
}

impl MeshDataset {
    pub fn new(meshes: Vec<TriangleMesh>, split: Split) -> Self {
        Self { meshes, split }
    }

    pub fn meshes(&self) -> &[TriangleMesh] {
        &self.meshes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.meshes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meshes.is_empty()
    }
}
