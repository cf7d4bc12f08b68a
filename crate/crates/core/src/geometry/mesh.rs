use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{GeometryError, Result};
use crate::Vec3;

/// Signed volume of the tetrahedron `(a, b, c, d)`.
pub fn tet_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

/// Boundary triangles of a tetrahedral mesh with outward orientation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurfaceMesh {
    pub faces: Vec<[usize; 3]>,
    /// Sorted list of mesh vertices that lie on the surface.
    pub vertices: Vec<usize>,
    /// Surface faces incident to each mesh vertex (empty for interior vertices).
    pub vertex_faces: Vec<Vec<usize>>,
}

impl SurfaceMesh {
    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn corners(&self, face: usize, positions: &[Vec3]) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [positions[a], positions[b], positions[c]]
    }

    pub fn centroid(&self, face: usize, positions: &[Vec3]) -> Vec3 {
        let [a, b, c] = self.corners(face, positions);
        (a + b + c) / 3.0
    }

    /// Area-weighted normal (`0.5 * (b - a) x (c - a)`).
    pub fn area_normal(&self, face: usize, positions: &[Vec3]) -> Vec3 {
        let [a, b, c] = self.corners(face, positions);
        0.5 * (b - a).cross(&(c - a))
    }

    pub fn area(&self, face: usize, positions: &[Vec3]) -> f64 {
        self.area_normal(face, positions).norm()
    }

    /// Looks up a face by its vertex triple, in any rotation or winding.
    pub fn find_face(&self, tri: [usize; 3]) -> Option<usize> {
        let mut key = tri;
        key.sort_unstable();
        self.vertex_faces[tri[0]].iter().copied().find(|&f| {
            let mut k = self.faces[f];
            k.sort_unstable();
            k == key
        })
    }

    /// Per-vertex area-weighted normals, zero for interior vertices.
    pub fn vertex_normals(&self, positions: &[Vec3]) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); positions.len()];
        for (f, tri) in self.faces.iter().enumerate() {
            let n = self.area_normal(f, positions);
            for &v in tri {
                normals[v] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    /// Extracts the boundary faces of `tets` (faces referenced exactly once),
    /// oriented with outward normals given positively oriented tets.
    pub fn extract(vertex_count: usize, tets: &[[usize; 4]]) -> Result<Self> {
        let mut counts: BTreeMap<[usize; 3], (usize, [usize; 3])> = BTreeMap::new();
        for &[a, b, c, d] in tets {
            for tri in [[a, c, b], [a, b, d], [a, d, c], [b, c, d]] {
                let mut key = tri;
                key.sort_unstable();
                counts.entry(key).or_insert((0, tri)).0 += 1;
            }
        }
        let mut faces = Vec::new();
        for (key, (count, tri)) in counts {
            match count {
                1 => faces.push(tri),
                2 => {}
                _ => {
                    return Err(GeometryError::NonManifold(format!(
                        "face {key:?} shared by {count} tetrahedra"
                    )))
                }
            }
        }
        // Directed edges must pair up exactly once in each direction.
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &faces {
            for i in 0..3 {
                *directed.entry((tri[i], tri[(i + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &n) in &directed {
            if n != 1 || directed.get(&(b, a)) != Some(&1) {
                return Err(GeometryError::NonManifold(format!(
                    "edge ({a}, {b}) is not shared by exactly two consistently oriented faces"
                )));
            }
        }
        let mut vertex_faces = vec![Vec::new(); vertex_count];
        for (f, tri) in faces.iter().enumerate() {
            for &v in tri {
                vertex_faces[v].push(f);
            }
        }
        let vertices = (0..vertex_count)
            .filter(|&v| !vertex_faces[v].is_empty())
            .collect();
        Ok(Self {
            faces,
            vertices,
            vertex_faces,
        })
    }
}

/// A tetrahedral mesh with its extracted surface.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TetMesh {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub surface: SurfaceMesh,
    /// Vertices flagged as fixed (e.g. a base layer glued to the table).
    pub fixed: Vec<usize>,
    /// Surface faces flagged as the marked target region.
    pub marked: Vec<usize>,
}

impl TetMesh {
    /// Builds a mesh, validating positive volumes and a closed surface.
    pub fn new(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>) -> Result<Self> {
        for (i, tet) in tets.iter().enumerate() {
            if let Some(&v) = tet.iter().find(|&&v| v >= vertices.len()) {
                return Err(GeometryError::BadIndex { index: i, vertex: v });
            }
            let volume = tet_volume(
                &vertices[tet[0]],
                &vertices[tet[1]],
                &vertices[tet[2]],
                &vertices[tet[3]],
            );
            if !(volume > 0.0) {
                return Err(GeometryError::DegenerateTet { index: i, volume });
            }
        }
        let surface = SurfaceMesh::extract(vertices.len(), &tets)?;
        Ok(Self {
            vertices,
            tets,
            surface,
            fixed: Vec::new(),
            marked: Vec::new(),
        })
    }

    pub fn with_fixed(mut self, mut fixed: Vec<usize>) -> Result<Self> {
        fixed.sort_unstable();
        fixed.dedup();
        if let Some(&v) = fixed.iter().find(|&&v| v >= self.vertices.len()) {
            return Err(GeometryError::BadIndex { index: usize::MAX, vertex: v });
        }
        self.fixed = fixed;
        Ok(self)
    }

    /// Flags marked faces given as vertex triples.
    pub fn with_marked_triples(mut self, triples: &[[usize; 3]]) -> Result<Self> {
        let mut marked = Vec::with_capacity(triples.len());
        for &t in triples {
            if t.iter().any(|&v| v >= self.vertices.len()) {
                return Err(GeometryError::UnknownMarkedFace(t[0], t[1], t[2]));
            }
            let f = self
                .surface
                .find_face(t)
                .ok_or(GeometryError::UnknownMarkedFace(t[0], t[1], t[2]))?;
            marked.push(f);
        }
        marked.sort_unstable();
        marked.dedup();
        self.marked = marked;
        Ok(self)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn total_volume(&self) -> f64 {
        self.tets
            .iter()
            .map(|t| {
                tet_volume(
                    &self.vertices[t[0]],
                    &self.vertices[t[1]],
                    &self.vertices[t[2]],
                    &self.vertices[t[3]],
                )
            })
            .sum()
    }

    /// Unique undirected tet edges, sorted.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut edges = Vec::with_capacity(self.tets.len() * 6);
        for t in &self.tets {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let (a, b) = (t[i].min(t[j]), t[i].max(t[j]));
                    edges.push([a, b]);
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn rest_state(&self) -> ParticleState {
        ParticleState::new(self.vertices.clone())
    }
}

/// Current particle positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub positions: Vec<Vec3>,
    pub step: usize,
}

impl ParticleState {
    pub fn new(positions: Vec<Vec3>) -> Self {
        Self { positions, step: 0 }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn translated(&self, delta: &Vec3) -> Self {
        Self {
            positions: self.positions.iter().map(|p| p + delta).collect(),
            step: self.step,
        }
    }

    /// Largest per-particle displacement between two states.
    pub fn max_distance(&self, other: &ParticleState) -> f64 {
        self.positions
            .iter()
            .zip(&other.positions)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}
