//! Procedural primitive meshes used for tests, the bundled dataset, and as
//! default sources.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Mesh, UvMap};

/// The primitive classes the dataset generator can render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Box,
    Cone,
    Ellipsoid,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Sphere, Primitive::Box, Primitive::Cone, Primitive::Ellipsoid];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cone => "cone",
            Primitive::Ellipsoid => "ellipsoid",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Canonical instance, centered at the origin with unit-ish extent.
    pub fn mesh(self) -> Mesh {
        match self {
            Primitive::Sphere => uv_sphere(1.0, 25, 11),
            Primitive::Box => cuboid(Vector3::new(0.6, 1.2, 0.6), 4),
            Primitive::Cone => cone(1.0, 2.0, 24, 4),
            Primitive::Ellipsoid => ellipsoid(Vector3::new(1.3, 0.7, 0.7), 25, 11),
        }
    }
}

/// Unit-edge regular tetrahedron.
pub fn regular_tetrahedron() -> Mesh {
    let s = 1.0 / (2.0 * 2f64.sqrt());
    let v = vec![
        Point3::new(s, s, s),
        Point3::new(s, -s, -s),
        Point3::new(-s, s, -s),
        Point3::new(-s, -s, s),
    ];
    oriented(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], None)
}

/// Regular octahedron with vertices on the coordinate axes (8 faces).
pub fn octahedron(radius: f64) -> Mesh {
    let r = radius;
    let v = vec![
        Point3::new(r, 0.0, 0.0),
        Point3::new(-r, 0.0, 0.0),
        Point3::new(0.0, r, 0.0),
        Point3::new(0.0, -r, 0.0),
        Point3::new(0.0, 0.0, r),
        Point3::new(0.0, 0.0, -r),
    ];
    let f = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    oriented(v, f, None)
}

pub fn icosphere(radius: f64, subdivisions: usize) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vector3<f64>>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let points = v.into_iter().map(|p| Point3::from(p * radius)).collect();
    oriented(points, faces, None)
}

/// Latitude/longitude sphere with a seamed UV map. `rings` counts latitude
/// bands (poles included as single vertices); faces = 2·segments·(rings−1).
pub fn uv_sphere(radius: f64, segments: usize, rings: usize) -> Mesh {
    ellipsoid(Vector3::new(radius, radius, radius), segments, rings)
}

pub fn ellipsoid(radii: Vector3<f64>, segments: usize, rings: usize) -> Mesh {
    assert!(segments >= 3 && rings >= 2);
    let mut v = Vec::new();
    v.push(Point3::new(0.0, radii.y, 0.0));
    for i in 1..rings {
        let theta = std::f64::consts::PI * i as f64 / rings as f64;
        for j in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            v.push(Point3::new(
                radii.x * theta.sin() * phi.cos(),
                radii.y * theta.cos(),
                radii.z * theta.sin() * phi.sin(),
            ));
        }
    }
    v.push(Point3::new(0.0, -radii.y, 0.0));
    let south = v.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * segments + (j % segments);

    // texture grid with a duplicated seam column
    let mut coords = Vec::new();
    for i in 0..=rings {
        for j in 0..=segments {
            coords.push([j as f64 / segments as f64, 1.0 - i as f64 / rings as f64]);
        }
    }
    let tex = |i: usize, j: usize| i * (segments + 1) + j;

    let mut faces = Vec::new();
    let mut uv = Vec::new();
    for j in 0..segments {
        faces.push([0, ring(1, j + 1), ring(1, j)]);
        uv.push([tex(0, j), tex(1, j + 1), tex(1, j)]);
    }
    for i in 1..rings - 1 {
        for j in 0..segments {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, b, d]);
            uv.push([tex(i, j), tex(i, j + 1), tex(i + 1, j + 1)]);
            faces.push([a, d, c]);
            uv.push([tex(i, j), tex(i + 1, j + 1), tex(i + 1, j)]);
        }
    }
    for j in 0..segments {
        faces.push([south, ring(rings - 1, j), ring(rings - 1, j + 1)]);
        uv.push([tex(rings, j), tex(rings - 1, j), tex(rings - 1, j + 1)]);
    }
    oriented(v, faces, Some(UvMap { coords, corners: uv }))
}

/// Axis-aligned box with each side split into `n × n` quads.
pub fn cuboid(half_extents: Vector3<f64>, n: usize) -> Mesh {
    assert!(n >= 1);
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut v = Vec::new();
    let mut faces = Vec::new();
    let n = n as i64;
    let mut vid = |g: (i64, i64, i64), v: &mut Vec<Point3<f64>>| -> usize {
        *index.entry(g).or_insert_with(|| {
            let s = |k: i64, h: f64| h * (2.0 * k as f64 / n as f64 - 1.0);
            v.push(Point3::new(s(g.0, half_extents.x), s(g.1, half_extents.y), s(g.2, half_extents.z)));
            v.len() - 1
        })
    };
    for axis in 0..3 {
        for side in [0, n] {
            for a in 0..n {
                for b in 0..n {
                    let grid = |da: i64, db: i64| {
                        let mut g = [0i64; 3];
                        g[axis] = side;
                        g[(axis + 1) % 3] = a + da;
                        g[(axis + 2) % 3] = b + db;
                        (g[0], g[1], g[2])
                    };
                    let q = [grid(0, 0), grid(1, 0), grid(1, 1), grid(0, 1)].map(|g| vid(g, &mut v));
                    faces.push([q[0], q[1], q[2]]);
                    faces.push([q[0], q[2], q[3]]);
                }
            }
        }
    }
    oriented(v, faces, None)
}

/// Closed cone with apex up, centered on its bounding box.
pub fn cone(radius: f64, height: f64, segments: usize, rings: usize) -> Mesh {
    assert!(segments >= 3 && rings >= 1);
    let half = height / 2.0;
    let mut v = vec![Point3::new(0.0, half, 0.0)];
    // side rings from apex (exclusive) down to the base rim (inclusive)
    for i in 1..=rings {
        let s = i as f64 / rings as f64;
        for j in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            v.push(Point3::new(radius * s * phi.cos(), half - height * s, radius * s * phi.sin()));
        }
    }
    // base rings from the rim inward, then the center
    for i in 1..rings {
        let s = 1.0 - i as f64 / rings as f64;
        for j in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            v.push(Point3::new(radius * s * phi.cos(), -half, radius * s * phi.sin()));
        }
    }
    v.push(Point3::new(0.0, -half, 0.0));
    let center = v.len() - 1;
    // ring k in 1..=2·rings−1 walks apex→rim→center
    let ring = |k: usize, j: usize| 1 + (k - 1) * segments + (j % segments);
    let total_rings = 2 * rings - 1;
    let mut faces = Vec::new();
    for j in 0..segments {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for k in 1..total_rings {
        for j in 0..segments {
            let (a, b, c, d) = (ring(k, j), ring(k, j + 1), ring(k + 1, j), ring(k + 1, j + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for j in 0..segments {
        faces.push([center, ring(total_rings, j + 1), ring(total_rings, j)]);
    }
    oriented(v, faces, None)
}

/// Orients every face of a star-shaped (about its centroid) mesh outward.
fn oriented(v: Vec<Point3<f64>>, mut faces: Vec<[usize; 3]>, mut uv: Option<UvMap>) -> Mesh {
    let c = super::centroid(&v);
    for (f, face) in faces.iter_mut().enumerate() {
        let [a, b, d] = *face;
        let n = (v[b] - v[a]).cross(&(v[d] - v[a]));
        let mid = (v[a].coords + v[b].coords + v[d].coords) / 3.0 - c.coords;
        if n.dot(&mid) < 0.0 {
            face.swap(1, 2);
            if let Some(uv) = uv.as_mut() {
                uv.corners[f].swap(1, 2);
            }
        }
    }
    Mesh::new(v, faces, uv).expect("primitive meshes are well formed")
}
