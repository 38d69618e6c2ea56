//! Area-weighted Poisson solve: vertex positions whose per-face gradients
//! best match a target Jacobian field, plus its adjoint.
//!
//! Only the tangential 3×2 part `J_i·[b1 b2]` of each target enters the
//! objective. The system is solved for the displacement from the source
//! embedding, so the identity field maps to the source vertices exactly.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::sparse::{SkylineCholesky, SymmetricRows};
use super::{JacobianField, Mesh};
use crate::error::{check_len, Error, Result};

/// The pinned vertex that removes the translation null-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub vertex: usize,
    pub target: Point3<f64>,
}

/// Sparse per-face gradient operator with a cached factorization of the
/// anchored normal equations `GᵀM_A G`.
#[derive(Debug, Clone)]
pub struct GradientOperator {
    source: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    /// Per face and corner: weights of that corner's coordinate in the two
    /// tangential gradient components.
    coef: Vec<[[f64; 2]; 3]>,
    tangent: Vec<[Vector3<f64>; 2]>,
    areas: Vec<f64>,
    anchor: usize,
    /// Reduced (anchor-free) index of each vertex.
    reduced_index: Vec<Option<usize>>,
    /// Column of the full Laplacian at the anchor, restricted to free rows.
    anchor_column: Vec<(usize, f64)>,
    reduced: SymmetricRows,
    chol: SkylineCholesky,
}

impl GradientOperator {
    /// Operator anchored at the vertex nearest the centroid.
    pub fn new(mesh: &Mesh) -> Result<Self> {
        Self::with_anchor(mesh, mesh.vertex_nearest_centroid())
    }

    pub fn with_anchor(mesh: &Mesh, anchor: usize) -> Result<Self> {
        Self::with_area_scale(mesh, anchor, 1.0)
    }

    /// Builds the operator with every face area multiplied by `scale`.
    pub fn with_area_scale(mesh: &Mesh, anchor: usize, scale: f64) -> Result<Self> {
        let n = mesh.vertex_count();
        if anchor >= n {
            return Err(Error::InvalidArgument(format!(
                "anchor vertex {anchor} out of range ({n} vertices)"
            )));
        }
        let components = mesh.connected_components();
        if components.len() > 1 {
            return Err(Error::Disconnected {
                components: components.iter().map(|c| (c.len(), c[0])).collect(),
            });
        }

        let mut coef = Vec::with_capacity(mesh.face_count());
        let mut tangent = Vec::with_capacity(mesh.face_count());
        for frame in mesh.face_frames() {
            let inv = frame.local_inv;
            let c1 = [inv[(0, 0)], inv[(0, 1)]];
            let c2 = [inv[(1, 0)], inv[(1, 1)]];
            let c0 = [-c1[0] - c2[0], -c1[1] - c2[1]];
            coef.push([c0, c1, c2]);
            tangent.push(frame.tangent);
        }
        let areas: Vec<f64> = mesh.face_areas().iter().map(|a| a * scale).collect();

        let mut full: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
        for ((face, cf), &t) in mesh.faces().iter().zip(&coef).zip(&areas) {
            for a in 0..3 {
                for b in 0..3 {
                    let w = t * (cf[a][0] * cf[b][0] + cf[a][1] * cf[b][1]);
                    *full[face[a]].entry(face[b]).or_insert(0.0) += w;
                }
            }
        }

        let mut reduced_index = vec![None; n];
        let mut next = 0;
        for (v, slot) in reduced_index.iter_mut().enumerate() {
            if v != anchor {
                *slot = Some(next);
                next += 1;
            }
        }
        let mut rows = vec![Vec::new(); n - 1];
        let mut anchor_column = Vec::new();
        for (v, row) in full.iter().enumerate() {
            let Some(r) = reduced_index[v] else { continue };
            for (&c, &w) in row {
                match reduced_index[c] {
                    Some(rc) => rows[r].push((rc, w)),
                    None => anchor_column.push((r, w)),
                }
            }
        }
        let reduced = SymmetricRows { rows };
        let chol = SkylineCholesky::factor(&reduced)?;
        Ok(GradientOperator {
            source: mesh.vertices().to_vec(),
            faces: mesh.faces().to_vec(),
            coef,
            tangent,
            areas,
            anchor,
            reduced_index,
            anchor_column,
            reduced,
            chol,
        })
    }

    pub fn anchor_vertex(&self) -> usize {
        self.anchor
    }

    /// Anchor pinned at its source position.
    pub fn source_anchor(&self) -> Anchor {
        Anchor {
            vertex: self.anchor,
            target: self.source[self.anchor],
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.source.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Tangential gradient of a vertex embedding on every face, as 3×2
    /// blocks `[∇γ·b1, ∇γ·b2]`.
    pub fn apply(&self, vertices: &[Point3<f64>]) -> Vec<[Vector3<f64>; 2]> {
        self.faces
            .iter()
            .zip(&self.coef)
            .map(|(f, cf)| {
                let mut g = [Vector3::zeros(); 2];
                for k in 0..3 {
                    for (m, gm) in g.iter_mut().enumerate() {
                        *gm += vertices[f[k]].coords * cf[k][m];
                    }
                }
                g
            })
            .collect()
    }

    /// Solves and also returns the relative residual of the reduced system.
    pub fn solve_detailed(&self, field: &JacobianField, anchor_target: Point3<f64>) -> Result<(Vec<Point3<f64>>, f64)> {
        check_len("jacobian field faces", self.faces.len(), field.face_count())?;
        let n = self.source.len();
        let shift = anchor_target - self.source[self.anchor];
        let mut out = self.source.clone();
        let mut worst = 0.0f64;
        for c in 0..3 {
            let mut rhs = vec![0.0; n];
            for (((f, cf), (j, b)), &t) in self
                .faces
                .iter()
                .zip(&self.coef)
                .zip(field.per_face.iter().zip(&self.tangent))
                .zip(&self.areas)
            {
                let d = j - Matrix3::identity();
                let target = [(d * b[0])[c], (d * b[1])[c]];
                for k in 0..3 {
                    rhs[f[k]] += t * (cf[k][0] * target[0] + cf[k][1] * target[1]);
                }
            }
            let mut reduced_rhs: Vec<f64> = (0..n)
                .filter_map(|v| self.reduced_index[v].map(|_| rhs[v]))
                .collect();
            for &(r, w) in &self.anchor_column {
                reduced_rhs[r] -= w * shift[c];
            }
            let mut x = self.chol.solve(&reduced_rhs);
            let rhs_norm = norm(&reduced_rhs);
            let mut residual = self.residual(&x, &reduced_rhs);
            // one round of iterative refinement is plenty for these systems
            for _ in 0..2 {
                if rhs_norm == 0.0 || residual <= 1e-13 * rhs_norm {
                    break;
                }
                let r: Vec<f64> = self.reduced.mul(&x).iter().zip(&reduced_rhs).map(|(a, b)| b - a).collect();
                let dx = self.chol.solve(&r);
                for (xi, di) in x.iter_mut().zip(&dx) {
                    *xi += di;
                }
                residual = self.residual(&x, &reduced_rhs);
            }
            if rhs_norm > 0.0 {
                worst = worst.max(residual / rhs_norm);
            }
            for v in 0..n {
                let u = match self.reduced_index[v] {
                    Some(r) => x[r],
                    None => shift[c],
                };
                out[v][c] += u;
            }
        }
        Ok((out, worst))
    }

    fn residual(&self, x: &[f64], rhs: &[f64]) -> f64 {
        let ax = self.reduced.mul(x);
        ax.iter()
            .zip(rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient of a scalar of the solve output with respect to every `J_i`,
    /// given the upstream per-vertex gradient.
    pub fn adjoint(&self, upstream: &[Vector3<f64>]) -> Result<JacobianField> {
        check_len("upstream vertex gradients", self.source.len(), upstream.len())?;
        let n = self.source.len();
        let mut lambda = vec![Vector3::zeros(); n];
        for c in 0..3 {
            let g: Vec<f64> = (0..n)
                .filter_map(|v| self.reduced_index[v].map(|_| upstream[v][c]))
                .collect();
            let x = self.chol.solve(&g);
            for v in 0..n {
                if let Some(r) = self.reduced_index[v] {
                    lambda[v][c] = x[r];
                }
            }
        }
        let per_face = self
            .faces
            .iter()
            .zip(&self.coef)
            .zip(self.tangent.iter().zip(&self.areas))
            .map(|((f, cf), (b, &t))| {
                let mut m = Matrix3::zeros();
                for (mi, bm) in b.iter().enumerate() {
                    let mut gl = Vector3::zeros();
                    for k in 0..3 {
                        gl += lambda[f[k]] * cf[k][mi];
                    }
                    m += (gl * t) * bm.transpose();
                }
                m
            })
            .collect();
        Ok(JacobianField { per_face })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimizer of `Σ t_i ‖∇_i(γ) − J_i‖²` with the anchor vertex pinned.
pub fn poisson_solve(op: &GradientOperator, field: &JacobianField, anchor: Anchor) -> Result<Vec<Point3<f64>>> {
    if anchor.vertex != op.anchor {
        return Err(Error::AnchorMismatch {
            vertex: anchor.vertex,
            factorized: op.anchor,
        });
    }
    op.solve_detailed(field, anchor.target).map(|(v, _)| v)
}

pub fn poisson_solve_adjoint(op: &GradientOperator, upstream: &[Vector3<f64>]) -> Result<JacobianField> {
    op.adjoint(upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{jacobians_of_map, max_displacement, shapes};
    use nalgebra::{DMatrix, DVector};

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_field(faces: usize, seed: u64, amp: f64) -> JacobianField {
        let mut r = lcg(seed);
        JacobianField {
            per_face: (0..faces)
                .map(|_| Matrix3::identity() + Matrix3::from_fn(|_, _| amp * r()))
                .collect(),
        }
    }

    #[test]
    fn identity_field_reproduces_source_exactly() {
        let mesh = shapes::icosphere(1.0, 2);
        let op = GradientOperator::new(&mesh).unwrap();
        let out = poisson_solve(&op, &JacobianField::identity(mesh.face_count()), op.source_anchor()).unwrap();
        assert_eq!(out, mesh.vertices());
    }

    #[test]
    fn constant_field_gives_affine_image() {
        let mesh = shapes::icosphere(1.0, 2);
        let op = GradientOperator::with_anchor(&mesh, 0).unwrap();
        let a = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let field = JacobianField {
            per_face: vec![a; mesh.face_count()],
        };
        let (out, res) = op.solve_detailed(&field, mesh.vertices()[0]).unwrap();
        assert!(res < 1e-10);
        let p0 = mesh.vertices()[0];
        let expect: Vec<_> = mesh
            .vertices()
            .iter()
            .map(|p| p0 + a * (p - p0))
            .collect();
        assert!(max_displacement(&out, &expect) < 1e-8);
    }

    #[test]
    fn random_field_matches_dense_least_squares() {
        // Oracle: dense weighted least squares assembled row by row from the
        // per-face frame equations, solved with a dense Cholesky.
        let mesh = shapes::octahedron(1.0);
        let op = GradientOperator::with_anchor(&mesh, 2).unwrap();
        let field = random_field(mesh.face_count(), 11, 0.4);
        let target = Point3::new(0.1, 1.2, -0.3);
        let out = poisson_solve(&op, &field, Anchor { vertex: 2, target }).unwrap();

        let n = mesh.vertex_count();
        let mut ata = DMatrix::<f64>::zeros(n, n);
        let mut atb = DMatrix::<f64>::zeros(n, 3);
        for (f, frame) in mesh.face_frames().iter().enumerate() {
            let t = mesh.face_areas()[f];
            let [i0, i1, i2] = mesh.faces()[f];
            let tj = field.per_face[f] * nalgebra::Matrix3x2::from_columns(&frame.tangent);
            // gradient row coefficients from a direct 2×2 inversion
            let b = frame.tangent;
            let local = nalgebra::Matrix2::new(
                b[0].dot(&frame.e1),
                b[0].dot(&frame.e2),
                b[1].dot(&frame.e1),
                b[1].dot(&frame.e2),
            );
            let inv = local.try_inverse().unwrap();
            for m in 0..2 {
                let mut row = vec![0.0; n];
                row[i1] += inv[(0, m)];
                row[i2] += inv[(1, m)];
                row[i0] -= inv[(0, m)] + inv[(1, m)];
                for a in 0..n {
                    for c in 0..3 {
                        atb[(a, c)] += t * row[a] * tj[(c, m)];
                    }
                    for bb in 0..n {
                        ata[(a, bb)] += t * row[a] * row[bb];
                    }
                }
            }
        }
        let free: Vec<usize> = (0..n).filter(|&v| v != 2).collect();
        let mut k = DMatrix::<f64>::zeros(n - 1, n - 1);
        for (i, &a) in free.iter().enumerate() {
            for (j, &b) in free.iter().enumerate() {
                k[(i, j)] = ata[(a, b)];
            }
        }
        let chol = k.cholesky().unwrap();
        for c in 0..3 {
            let rhs = DVector::from_iterator(
                n - 1,
                free.iter().map(|&a| atb[(a, c)] - ata[(a, 2)] * target[c]),
            );
            let x = chol.solve(&rhs);
            for (i, &a) in free.iter().enumerate() {
                assert!((out[a][c] - x[i]).abs() < 1e-8, "vertex {a} coord {c}");
            }
            assert_eq!(out[2][c], target[c]);
        }
    }

    #[test]
    fn feasible_fields_are_fixed_points() {
        let mesh = shapes::uv_sphere(1.0, 10, 6);
        let op = GradientOperator::new(&mesh).unwrap();
        let mut r = lcg(3);
        let moved: Vec<_> = mesh
            .vertices()
            .iter()
            .map(|p| p + Vector3::new(0.1 * r(), 0.1 * r(), 0.1 * r()))
            .collect();
        let field = jacobians_of_map(&mesh, &moved).unwrap();
        let a = op.anchor_vertex();
        let out = poisson_solve(&op, &field, Anchor { vertex: a, target: moved[a] }).unwrap();
        assert!(max_displacement(&out, &moved) < 1e-8);
    }

    #[test]
    fn translation_and_area_scaling() {
        let mesh = shapes::icosphere(1.0, 1);
        let op = GradientOperator::with_anchor(&mesh, 5).unwrap();
        let op2 = GradientOperator::with_area_scale(&mesh, 5, 2.0).unwrap();
        let field = random_field(mesh.face_count(), 9, 0.3);
        let base = op.solve_detailed(&field, mesh.vertices()[5]).unwrap().0;
        let shift = Vector3::new(0.5, -2.0, 1.0);
        let moved = op.solve_detailed(&field, mesh.vertices()[5] + shift).unwrap().0;
        for (a, b) in base.iter().zip(&moved) {
            assert!(((b - a) - shift).norm() < 1e-12);
        }
        let doubled = op2.solve_detailed(&field, mesh.vertices()[5]).unwrap().0;
        assert!(max_displacement(&base, &doubled) < 1e-12);
    }

    #[test]
    fn adjoint_of_anchor_coordinate_is_zero_and_linear() {
        let mesh = shapes::icosphere(1.0, 1);
        let op = GradientOperator::new(&mesh).unwrap();
        let mut g = vec![Vector3::zeros(); mesh.vertex_count()];
        g[op.anchor_vertex()] = Vector3::x();
        let grad = op.adjoint(&g).unwrap();
        assert_eq!(grad, JacobianField::zeros(mesh.face_count()));
        let zero = op.adjoint(&vec![Vector3::zeros(); mesh.vertex_count()]).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn adjoint_consistency() {
        let mesh = shapes::icosphere(1.0, 1);
        let op = GradientOperator::new(&mesh).unwrap();
        let mut r = lcg(17);
        let g: Vec<_> = (0..mesh.vertex_count()).map(|_| Vector3::new(r(), r(), r())).collect();
        let delta = random_field(mesh.face_count(), 23, 1.0);
        let mut delta_only = delta.clone();
        for j in &mut delta_only.per_face {
            *j -= Matrix3::identity();
        }
        let adj = op.adjoint(&g).unwrap();
        let out = op.solve_detailed(&delta, op.source_anchor().target).unwrap().0;
        let forward: f64 = out
            .iter()
            .zip(mesh.vertices())
            .zip(&g)
            .map(|((o, s), gi)| (o - s).dot(gi))
            .sum();
        let lhs = adj.dot(&delta_only);
        assert!((lhs - forward).abs() < 1e-9 * (1.0 + forward.abs()), "{lhs} vs {forward}");
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        // f = Σ ‖γ*‖² on a 20-face mesh
        let mesh = shapes::icosphere(1.0, 0);
        assert_eq!(mesh.face_count(), 20);
        let op = GradientOperator::new(&mesh).unwrap();
        let field = random_field(20, 5, 0.2);
        let anchor = op.source_anchor().target;
        let f = |fld: &JacobianField| -> f64 {
            op.solve_detailed(fld, anchor)
                .unwrap()
                .0
                .iter()
                .map(|p| p.coords.norm_squared())
                .sum()
        };
        let out = op.solve_detailed(&field, anchor).unwrap().0;
        let upstream: Vec<_> = out.iter().map(|p| p.coords * 2.0).collect();
        let grad = op.adjoint(&upstream).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for face in 0..20 {
            for (r, c) in [(0, 0), (1, 2), (2, 1)] {
                let mut plus = field.clone();
                plus.per_face[face][(r, c)] += h;
                let mut minus = field.clone();
                minus.per_face[face][(r, c)] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grad.per_face[face][(r, c)];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-5, "face {face} ({r},{c}): fd {fd} an {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, 60);
    }

    #[test]
    fn disconnected_mesh_lists_components() {
        let a = shapes::regular_tetrahedron();
        let mut verts = a.vertices().to_vec();
        verts.extend(a.vertices().iter().map(|p| p + Vector3::new(3.0, 0.0, 0.0)));
        let mut faces = a.faces().to_vec();
        faces.extend(a.faces().iter().map(|f| [f[0] + 4, f[1] + 4, f[2] + 4]));
        let mesh = Mesh::new(verts, faces, None).unwrap();
        match GradientOperator::new(&mesh) {
            Err(Error::Disconnected { components }) => assert_eq!(components, vec![(4, 0), (4, 4)]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn anchor_mismatch_is_an_error() {
        let mesh = shapes::octahedron(1.0);
        let op = GradientOperator::with_anchor(&mesh, 0).unwrap();
        let err = poisson_solve(
            &op,
            &JacobianField::identity(8),
            Anchor { vertex: 1, target: Point3::origin() },
        )
        .unwrap_err();
        assert!(matches!(err, Error::AnchorMismatch { vertex: 1, factorized: 0 }));
    }
}
