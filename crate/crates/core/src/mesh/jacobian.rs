use nalgebra::{Matrix3, Point3};
use serde::{Deserialize, Serialize};

use super::Mesh;
use crate::error::{check_len, Error, Result};

/// One 3×3 matrix per face: the optimized deformation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianField {
    pub per_face: Vec<Matrix3<f64>>,
}

impl JacobianField {
    pub fn identity(face_count: usize) -> Self {
        JacobianField {
            per_face: vec![Matrix3::identity(); face_count],
        }
    }

    pub fn zeros(face_count: usize) -> Self {
        JacobianField {
            per_face: vec![Matrix3::zeros(); face_count],
        }
    }

    pub fn face_count(&self) -> usize {
        self.per_face.len()
    }

    pub fn is_finite(&self) -> bool {
        self.per_face.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Frobenius inner product summed over faces.
    pub fn dot(&self, other: &JacobianField) -> f64 {
        self.per_face
            .iter()
            .zip(&other.per_face)
            .map(|(a, b)| a.component_mul(b).sum())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add_assign(&mut self, other: &JacobianField) {
        for (a, b) in self.per_face.iter_mut().zip(&other.per_face) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.per_face {
            *a *= s;
        }
    }
}

/// Per-face Jacobians of the map from `source` to `deformed`.
///
/// Face `i` gets the matrix taking `[e1, e2, n]` to `[e1', e2', n']`, with
/// `n'` the unit normal of the deformed face, so the tangential 3×2 part is
/// the map gradient and the identity embedding yields `I` exactly.
pub fn jacobians_of_map(source: &Mesh, deformed: &[Point3<f64>]) -> Result<JacobianField> {
    check_len("deformed vertices", source.vertex_count(), deformed.len())?;
    let mut per_face = Vec::with_capacity(source.face_count());
    for (f, (&[a, b, c], frame)) in source.faces().iter().zip(source.face_frames()).enumerate() {
        let e1 = deformed[b] - deformed[a];
        let e2 = deformed[c] - deformed[a];
        let cross = e1.cross(&e2);
        let norm = cross.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateDeformedFace { face: f });
        }
        let src = Matrix3::from_columns(&[frame.e1, frame.e2, frame.normal]);
        let dst = Matrix3::from_columns(&[e1, e2, cross / norm]);
        let inv = src.try_inverse().ok_or(Error::DegenerateFace {
            face: f,
            area: source.face_areas()[f],
        })?;
        per_face.push(dst * inv);
    }
    Ok(JacobianField { per_face })
}

/// Sets `J_i = I` on every face whose three vertices all lie outside the mask.
pub fn identity_mask_assign(mesh: &Mesh, field: &JacobianField, vertex_mask: &[bool]) -> Result<JacobianField> {
    check_len("vertex mask", mesh.vertex_count(), vertex_mask.len())?;
    check_len("jacobian field faces", mesh.face_count(), field.face_count())?;
    let per_face = mesh
        .faces()
        .iter()
        .zip(&field.per_face)
        .map(|(f, j)| {
            if f.iter().all(|&v| !vertex_mask[v]) {
                Matrix3::identity()
            } else {
                *j
            }
        })
        .collect();
    Ok(JacobianField { per_face })
}
