//! Triangle meshes, per-face frames, Jacobian fields and the Poisson solve
//! that turns a Jacobian field back into vertex positions.

mod jacobian;
mod obj;
mod poisson;
pub mod shapes;
mod sparse;

use std::collections::HashMap;

use nalgebra::{Matrix2, Point3, Vector3};

use crate::error::{Error, Result};

pub use jacobian::{identity_mask_assign, jacobians_of_map, JacobianField};
pub use obj::{load_mesh, parse_obj, save_mesh, write_obj};
pub use poisson::{poisson_solve, poisson_solve_adjoint, Anchor, GradientOperator};
pub use sparse::{SkylineCholesky, SymmetricRows};

/// Faces whose area falls below this fraction of the squared bounding-box
/// diagonal are rejected.
pub const DEGENERATE_AREA_RATIO: f64 = 1e-12;

/// Per-corner texture coordinates, kept exactly as read so they survive
/// deformation untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    pub coords: Vec<[f64; 2]>,
    /// One texture-coordinate index per face corner.
    pub corners: Vec<[usize; 3]>,
}

/// Local differential frame of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceFrame {
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Orthonormal tangent basis; `tangent[0]` is `e1` normalized.
    pub tangent: [Vector3<f64>; 2],
    /// Inverse of the 2×2 matrix of edge coordinates in the tangent basis.
    pub local_inv: Matrix2<f64>,
}

impl FaceFrame {
    fn from_corners(p0: &Point3<f64>, p1: &Point3<f64>, p2: &Point3<f64>) -> Option<Self> {
        let e1 = p1 - p0;
        let e2 = p2 - p0;
        let cross = e1.cross(&e2);
        let norm = cross.norm();
        let len1 = e1.norm();
        if !(norm > 0.0 && len1 > 0.0) || !norm.is_finite() {
            return None;
        }
        let normal = cross / norm;
        let b1 = e1 / len1;
        let b2 = normal.cross(&b1);
        let local = Matrix2::new(b1.dot(&e1), b1.dot(&e2), b2.dot(&e1), b2.dot(&e2));
        let local_inv = local.try_inverse()?;
        Some(FaceFrame {
            e1,
            e2,
            normal,
            tangent: [b1, b2],
            local_inv,
        })
    }
}

/// An immutable triangle mesh with cached areas and frames.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    uv: Option<UvMap>,
    face_areas: Vec<f64>,
    face_frames: Vec<FaceFrame>,
    /// For each undirected edge (sorted vertex pair), the faces using it.
    edge_faces: HashMap<(usize, usize), Vec<usize>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>, uv: Option<UvMap>) -> Result<Self> {
        let count = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            for &index in face {
                if index >= count {
                    return Err(Error::IndexOutOfRange { face: f, index, count });
                }
            }
        }
        if let Some(uv) = &uv {
            crate::error::check_len("uv corner triples", faces.len(), uv.corners.len())?;
            for (f, c) in uv.corners.iter().enumerate() {
                for &index in c {
                    if index >= uv.coords.len() {
                        return Err(Error::IndexOutOfRange {
                            face: f,
                            index,
                            count: uv.coords.len(),
                        });
                    }
                }
            }
        }
        let diag = bbox_diagonal(&vertices);
        let min_area = DEGENERATE_AREA_RATIO * diag * diag;
        let mut face_areas = Vec::with_capacity(faces.len());
        let mut face_frames = Vec::with_capacity(faces.len());
        for (f, &[a, b, c]) in faces.iter().enumerate() {
            let area = triangle_area(&vertices[a], &vertices[b], &vertices[c]);
            if !(area > min_area) {
                return Err(Error::DegenerateFace { face: f, area });
            }
            let frame = FaceFrame::from_corners(&vertices[a], &vertices[b], &vertices[c])
                .ok_or(Error::DegenerateFace { face: f, area })?;
            face_areas.push(area);
            face_frames.push(frame);
        }
        let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (f, face) in faces.iter().enumerate() {
            for k in 0..3 {
                edge_faces
                    .entry(edge_key(face[k], face[(k + 1) % 3]))
                    .or_default()
                    .push(f);
            }
        }
        Ok(Mesh {
            vertices,
            faces,
            uv,
            face_areas,
            face_frames,
            edge_faces,
        })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn uv(&self) -> Option<&UvMap> {
        self.uv.as_ref()
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn face_frames(&self) -> &[FaceFrame] {
        &self.face_frames
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Faces sharing the undirected edge `(a, b)`.
    pub fn edge_faces(&self, a: usize, b: usize) -> &[usize] {
        self.edge_faces
            .get(&edge_key(a, b))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn centroid(&self) -> Point3<f64> {
        centroid(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.vertices)
    }

    /// Vertex closest to the vertex centroid; the default Poisson anchor.
    pub fn vertex_nearest_centroid(&self) -> usize {
        let c = self.centroid();
        nearest_vertex(&self.vertices, &c)
    }

    /// Same topology and UVs, new positions.
    pub fn with_vertices(&self, vertices: Vec<Point3<f64>>) -> Result<Mesh> {
        crate::error::check_len("vertices", self.vertices.len(), vertices.len())?;
        Mesh::new(vertices, self.faces.clone(), self.uv.clone())
    }

    /// Connected components over face adjacency, as sorted vertex lists.
    /// Vertices referenced by no face form singleton components.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &[a, b, c] in &self.faces {
            for (u, v) in [(a, b), (b, c)] {
                let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
                if ru != rv {
                    parent[ru.max(rv)] = ru.min(rv);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for v in 0..n {
            let r = find(&mut parent, v);
            groups.entry(r).or_default().push(v);
        }
        groups.into_values().collect()
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

pub fn triangle_area(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

pub fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    if points.is_empty() {
        return Point3::origin();
    }
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len() as f64)
}

pub fn bbox_diagonal(points: &[Point3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = points[0].coords;
    let mut hi = points[0].coords;
    for p in points {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    (hi - lo).norm()
}

pub fn nearest_vertex(points: &[Point3<f64>], target: &Point3<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - target).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Largest per-vertex displacement between two embeddings of the same mesh.
pub fn max_displacement(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max)
}
