//! Symmetric block-tridiagonal matrices and their block Cholesky factors.
//!
//! Blocks are `d × d`, stored row-major in flat buffers so that the per-step
//! solves in the samplers never allocate.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Symmetric block-tridiagonal matrix. `upper[i]` holds block `(i, i+1)`;
/// block `(i+1, i)` is its transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTridiag {
    dim: usize,
    blocks: usize,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl BlockTridiag {
    pub fn zeros(blocks: usize, dim: usize) -> Self {
        let bb = dim * dim;
        Self {
            dim,
            blocks,
            diag: vec![0.0; blocks * bb],
            upper: vec![0.0; blocks.saturating_sub(1) * bb],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Side length of the full matrix.
    pub fn size(&self) -> usize {
        self.blocks * self.dim
    }

    pub fn diag_block(&self, i: usize) -> &[f64] {
        let bb = self.dim * self.dim;
        &self.diag[i * bb..(i + 1) * bb]
    }

    pub fn diag_block_mut(&mut self, i: usize) -> &mut [f64] {
        let bb = self.dim * self.dim;
        &mut self.diag[i * bb..(i + 1) * bb]
    }

    pub fn upper_block(&self, i: usize) -> &[f64] {
        let bb = self.dim * self.dim;
        &self.upper[i * bb..(i + 1) * bb]
    }

    pub fn upper_block_mut(&mut self, i: usize) -> &mut [f64] {
        let bb = self.dim * self.dim;
        &mut self.upper[i * bb..(i + 1) * bb]
    }

    /// Adds `block` (row-major) into diagonal block `i`.
    pub fn add_diag(&mut self, i: usize, block: &[f64]) {
        for (a, b) in self.diag_block_mut(i).iter_mut().zip(block) {
            *a += b;
        }
    }

    /// Adds `block` into off-diagonal block `(i, i+1)`.
    pub fn add_upper(&mut self, i: usize, block: &[f64]) {
        for (a, b) in self.upper_block_mut(i).iter_mut().zip(block) {
            *a += b;
        }
    }

    /// Principal sub-matrix on block rows `first..=last`.
    pub fn restrict(&self, first: usize, last: usize) -> Self {
        let bb = self.dim * self.dim;
        let blocks = last + 1 - first;
        Self {
            dim: self.dim,
            blocks,
            diag: self.diag[first * bb..(last + 1) * bb].to_vec(),
            upper: self.upper[first * bb..(first + blocks - 1) * bb].to_vec(),
        }
    }

    /// `alpha * I + beta * self`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        let mut out = self.clone();
        out.diag.iter_mut().for_each(|v| *v *= beta);
        out.upper.iter_mut().for_each(|v| *v *= beta);
        for i in 0..self.blocks {
            let blk = out.diag_block_mut(i);
            for r in 0..self.dim {
                blk[r * self.dim + r] += alpha;
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.shifted(0.0, s)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.dim, self.blocks), (other.dim, other.blocks));
        let mut out = self.clone();
        out.diag.iter_mut().zip(&other.diag).for_each(|(a, b)| *a -= b);
        out.upper.iter_mut().zip(&other.upper).for_each(|(a, b)| *a -= b);
        out
    }

    /// `out = self * x`.
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        debug_assert_eq!(x.len(), self.size());
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.blocks {
            let xi = &x[i * d..(i + 1) * d];
            gemv_add(self.diag_block(i), xi, &mut out[i * d..(i + 1) * d], d);
            if i + 1 < self.blocks {
                let u = self.upper_block(i);
                let xn = &x[(i + 1) * d..(i + 2) * d];
                gemv_add(u, xn, &mut out[i * d..(i + 1) * d], d);
                gemv_t_add(u, xi, &mut out[(i + 1) * d..(i + 2) * d], d);
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size()];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `xᵀ self x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let y = self.mul_vec(x);
        x.iter().zip(&y).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim;
        let n = self.size();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..self.blocks {
            let blk = self.diag_block(i);
            for r in 0..d {
                for c in 0..d {
                    m[(i * d + r, i * d + c)] = blk[r * d + c];
                }
            }
            if i + 1 < self.blocks {
                let u = self.upper_block(i);
                for r in 0..d {
                    for c in 0..d {
                        m[(i * d + r, (i + 1) * d + c)] = u[r * d + c];
                        m[((i + 1) * d + c, i * d + r)] = u[r * d + c];
                    }
                }
            }
        }
        m
    }

    /// Largest asymmetry inside the diagonal blocks (off-diagonal blocks are
    /// symmetric by construction).
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..self.blocks {
            let blk = self.diag_block(i);
            for r in 0..d {
                for c in 0..r {
                    worst = worst.max((blk[r * d + c] - blk[c * d + r]).abs());
                }
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.diag
            .iter()
            .chain(&self.upper)
            .fold(0.0f64, |a, b| a.max(b.abs()))
    }

    /// Block Cholesky factorization `self = L Lᵀ`.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        let d = self.dim;
        let bb = d * d;
        let mut diag_l = vec![0.0; self.blocks * bb];
        let mut sub = vec![0.0; self.blocks.saturating_sub(1) * bb];
        for i in 0..self.blocks {
            let mut s = DMatrix::from_row_slice(d, d, self.diag_block(i));
            if i > 0 {
                let c = DMatrix::from_row_slice(d, d, &sub[(i - 1) * bb..i * bb]);
                s -= &c * c.transpose();
            }
            let chol = s.cholesky().ok_or_else(|| {
                Error::NotPositiveDefinite(format!("non-positive pivot in block {i}"))
            })?;
            let l = chol.l();
            copy_row_major(&l, &mut diag_l[i * bb..(i + 1) * bb]);
            if i + 1 < self.blocks {
                // L_{i+1,i} = U_iᵀ L_iiᵀ⁻¹, i.e. (L_ii⁻¹ U_i)ᵀ.
                let u = DMatrix::from_row_slice(d, d, self.upper_block(i));
                let w = l
                    .solve_lower_triangular(&u)
                    .ok_or_else(|| Error::NotPositiveDefinite(format!("singular block {i}")))?;
                copy_row_major(&w.transpose(), &mut sub[i * bb..(i + 1) * bb]);
            }
        }
        Ok(CholeskyFactor {
            dim: d,
            blocks: self.blocks,
            diag_l,
            sub,
        })
    }
}

/// Lower block-bidiagonal factor of a [`BlockTridiag`].
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    dim: usize,
    blocks: usize,
    diag_l: Vec<f64>,
    sub: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.dim * self.blocks
    }

    /// Solves `L z = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let d = self.dim;
        let bb = d * d;
        for i in 0..self.blocks {
            if i > 0 {
                let (head, tail) = b.split_at_mut(i * d);
                let prev = &head[(i - 1) * d..];
                gemv_sub(&self.sub[(i - 1) * bb..i * bb], prev, &mut tail[..d], d);
            }
            forward_sub(&self.diag_l[i * bb..(i + 1) * bb], &mut b[i * d..(i + 1) * d], d);
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn solve_upper_in_place(&self, z: &mut [f64]) {
        let d = self.dim;
        let bb = d * d;
        for i in (0..self.blocks).rev() {
            if i + 1 < self.blocks {
                let (head, tail) = z.split_at_mut((i + 1) * d);
                let next = &tail[..d];
                gemv_t_sub(&self.sub[i * bb..(i + 1) * bb], next, &mut head[i * d..], d);
            }
            backward_sub_t(&self.diag_l[i * bb..(i + 1) * bb], &mut z[i * d..(i + 1) * d], d);
        }
    }

    /// Solves `L Lᵀ x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn to_dense_lower(&self) -> DMatrix<f64> {
        let d = self.dim;
        let bb = d * d;
        let n = self.size();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..self.blocks {
            for r in 0..d {
                for c in 0..d {
                    m[(i * d + r, i * d + c)] = self.diag_l[i * bb + r * d + c];
                    if i + 1 < self.blocks {
                        m[((i + 1) * d + r, i * d + c)] = self.sub[i * bb + r * d + c];
                    }
                }
            }
        }
        m
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        let d = self.dim;
        (0..self.blocks)
            .flat_map(|i| (0..d).map(move |r| (i, r)))
            .map(|(i, r)| 2.0 * self.diag_l[i * d * d + r * d + r].ln())
            .sum()
    }
}

fn copy_row_major(m: &DMatrix<f64>, out: &mut [f64]) {
    let d = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..d {
            out[r * d + c] = m[(r, c)];
        }
    }
}

#[inline]
pub(crate) fn gemv_add(a: &[f64], x: &[f64], y: &mut [f64], d: usize) {
    for r in 0..d {
        let row = &a[r * d..(r + 1) * d];
        y[r] += row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    }
}

#[inline]
fn gemv_sub(a: &[f64], x: &[f64], y: &mut [f64], d: usize) {
    for r in 0..d {
        let row = &a[r * d..(r + 1) * d];
        y[r] -= row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    }
}

#[inline]
pub(crate) fn gemv_t_add(a: &[f64], x: &[f64], y: &mut [f64], d: usize) {
    for r in 0..d {
        for c in 0..d {
            y[c] += a[r * d + c] * x[r];
        }
    }
}

#[inline]
fn gemv_t_sub(a: &[f64], x: &[f64], y: &mut [f64], d: usize) {
    for r in 0..d {
        for c in 0..d {
            y[c] -= a[r * d + c] * x[r];
        }
    }
}

#[inline]
fn forward_sub(l: &[f64], b: &mut [f64], d: usize) {
    for r in 0..d {
        let mut s = b[r];
        for c in 0..r {
            s -= l[r * d + c] * b[c];
        }
        b[r] = s / l[r * d + r];
    }
}

#[inline]
fn backward_sub_t(l: &[f64], b: &mut [f64], d: usize) {
    for r in (0..d).rev() {
        let mut s = b[r];
        for c in r + 1..d {
            s -= l[c * d + r] * b[c];
        }
        b[r] = s / l[r * d + r];
    }
}

/// Row-major flat copy of a dense matrix.
pub(crate) fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows() * m.ncols()];
    copy_row_major(m, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn random_spd(blocks: usize, d: usize, seed: u64) -> BlockTridiag {
        let mut rng = seeded_rng(seed);
        let mut m = BlockTridiag::zeros(blocks, d);
        for i in 0..blocks.saturating_sub(1) {
            let u: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.add_upper(i, &u);
        }
        // Diagonal dominance keeps it positive definite.
        let dense = m.to_dense();
        for i in 0..blocks {
            let mut blk = vec![0.0; d * d];
            for r in 0..d {
                let row = i * d + r;
                let off: f64 = (0..dense.ncols()).map(|c| dense[(row, c)].abs()).sum();
                blk[r * d + r] = off + 1.0 + rng.random::<f64>();
            }
            m.add_diag(i, &blk);
        }
        m
    }

    #[test]
    fn scalar_factor() {
        let mut m = BlockTridiag::zeros(1, 1);
        m.add_diag(0, &[4.0]);
        let f = m.cholesky().unwrap();
        assert_eq!(f.to_dense_lower()[(0, 0)], 2.0);
    }

    #[test]
    fn factor_reconstructs_and_solves() {
        for &(blocks, d) in &[(1, 1), (5, 1), (8, 2), (16, 3)] {
            let m = random_spd(blocks, d, 7 + blocks as u64);
            let f = m.cholesky().unwrap();
            let l = f.to_dense_lower();
            let dense = m.to_dense();
            let err = (&l * l.transpose() - &dense).norm() / dense.norm();
            assert!(err < 1e-12, "reconstruction error {err}");

            let b: Vec<f64> = (0..m.size()).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&b);
            let r = m.mul_vec(&x);
            let res: f64 = r.iter().zip(&b).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            assert!(res < 1e-10);
        }
    }

    #[test]
    fn mul_vec_matches_dense() {
        let m = random_spd(6, 2, 3);
        let x: Vec<f64> = (0..m.size()).map(|i| i as f64 - 3.0).collect();
        let y = m.mul_vec(&x);
        let yd = m.to_dense() * nalgebra::DVector::from_vec(x.clone());
        for (a, b) in y.iter().zip(yd.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let q = m.quadratic_form(&x);
        assert!((q - x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut m = BlockTridiag::zeros(2, 1);
        m.add_diag(0, &[1.0]);
        m.add_diag(1, &[1.0]);
        m.add_upper(0, &[2.0]);
        assert!(matches!(m.cholesky(), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn restrict_and_shift() {
        let m = random_spd(5, 2, 11);
        let r = m.restrict(1, 3);
        let dense = m.to_dense();
        let rd = r.to_dense();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(rd[(i, j)], dense[(i + 2, j + 2)]);
            }
        }
        let s = m.shifted(1.5, 2.0).to_dense();
        let expect = DMatrix::identity(10, 10) * 1.5 + &dense * 2.0;
        assert!((s - expect).norm() < 1e-12);
    }
}
