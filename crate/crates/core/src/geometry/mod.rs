//! Tetrahedral and surface meshes, material-bound surface points, ray casting
//! and procedural phantom generation.

mod anchor;
mod io;
mod kdtree;
mod mesh;
mod phantom;
mod ray;

pub use anchor::{bind_material_point, closest_point_on_triangle, eval_anchor, MaterialAnchor};
pub use io::{load_tet_mesh, parse_tet_mesh, write_tet_mesh, MESH_FORMAT_HEADER};
pub use kdtree::KdTree;
pub use mesh::{tet_volume, ParticleState, SurfaceMesh, TetMesh};
pub use phantom::{gen_wedge_phantom, PhantomResolution, PhantomSize, WedgePhantom};
pub use ray::{ray_triangle_intersect, Bvh, Ray, RayHit, TriangleHit};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mesh parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tetrahedron {index} is degenerate or inverted (volume {volume:e})")]
    DegenerateTet { index: usize, volume: f64 },
    #[error("tetrahedron {index} references missing vertex {vertex}")]
    BadIndex { index: usize, vertex: usize },
    #[error("surface is not a closed manifold: {0}")]
    NonManifold(String),
    #[error("point is {distance:e} m from the surface (tolerance {tolerance:e} m)")]
    OffSurface { distance: f64, tolerance: f64 },
    #[error("invalid phantom parameters: {0}")]
    InvalidPhantom(String),
    #[error("marked face ({0}, {1}, {2}) is not a surface face")]
    UnknownMarkedFace(usize, usize, usize),
}

pub type Result<T> = std::result::Result<T, GeometryError>;
