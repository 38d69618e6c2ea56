//! Envelope (skyline) Cholesky factorization with reverse Cuthill–McKee
//! ordering. Mesh Laplacians have small bandwidth after RCM, so the envelope
//! stays compact and the factor is reused for every solve.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Symmetric sparse matrix stored as full rows of `(column, value)` pairs.
#[derive(Debug, Clone)]
pub struct SymmetricRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SymmetricRows {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// First stored column of each permuted row.
    first: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl SkylineCholesky {
    pub fn factor(matrix: &SymmetricRows) -> Result<Self> {
        let n = matrix.dim();
        let perm = reverse_cuthill_mckee(matrix);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; n];
        for (i, &old) in perm.iter().enumerate() {
            first[i] = matrix.rows[old]
                .iter()
                .map(|&(c, _)| inv[c])
                .filter(|&c| c <= i)
                .min()
                .unwrap_or(i);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            offsets.push(offsets[i] + (i - first[i] + 1));
        }
        let mut values = vec![0.0; offsets[n]];
        for (i, &old) in perm.iter().enumerate() {
            for &(c, v) in &matrix.rows[old] {
                let j = inv[c];
                if j <= i {
                    values[offsets[i] + j - first[i]] += v;
                }
            }
        }
        let mut chol = SkylineCholesky {
            perm,
            first,
            offsets,
            values,
        };
        chol.decompose()?;
        Ok(chol)
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Stored entries of the envelope.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.offsets[i] + j - self.first[i]]
    }

    fn decompose(&mut self) -> Result<()> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..i {
                let fj = self.first[j];
                let start = fi.max(fj);
                let mut s = self.at(i, j);
                let ri = self.offsets[i] - fi;
                let rj = self.offsets[j] - fj;
                for k in start..j {
                    s -= self.values[ri + k] * self.values[rj + k];
                }
                let djj = self.values[rj + j];
                self.values[ri + j] = s / djj;
            }
            let ri = self.offsets[i] - fi;
            let mut d = self.values[ri + i];
            for k in fi..i {
                d -= self.values[ri + k] * self.values[ri + k];
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: self.perm[i] });
            }
            self.values[ri + i] = d.sqrt();
        }
        Ok(())
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(rhs.len(), n);
        let mut z: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let ri = self.offsets[i] - fi;
            let mut s = z[i];
            for k in fi..i {
                s -= self.values[ri + k] * z[k];
            }
            z[i] = s / self.values[ri + i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let ri = self.offsets[i] - fi;
            let xi = z[i] / self.values[ri + i];
            z[i] = xi;
            for k in fi..i {
                z[k] -= self.values[ri + k] * xi;
            }
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = z[new];
        }
        out
    }
}

fn reverse_cuthill_mckee(matrix: &SymmetricRows) -> Vec<usize> {
    let n = matrix.dim();
    let degree: Vec<usize> = matrix.rows.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = matrix.rows[v]
                .iter()
                .map(|&(c, _)| c)
                .filter(|&c| !visited[c])
                .collect();
            nbrs.sort_by_key(|&c| (degree[c], c));
            nbrs.dedup();
            for c in nbrs {
                if !visited[c] {
                    visited[c] = true;
                    queue.push_back(c);
                }
            }
        }
    }
    order.reverse();
    order
}
