//! Small dense helpers and the block-tridiagonal solver behind the horizon
//! normal equations.

use nalgebra::{DMatrix, SMatrix, SVector};
use thiserror::Error;

pub type Matrix8 = SMatrix<f64, 8, 8>;
pub type Vector8 = SVector<f64, 8>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error(
        "normal equations singular at block {block} of {blocks} (min pivot eigenvalue {min_eigenvalue:.3e})"
    )]
    SingularBlock {
        block: usize,
        blocks: usize,
        min_eigenvalue: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize8(m: &Matrix8) -> Matrix8 {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Square-root information factor `W` of an SPD covariance, `WᵀW = Σ⁻¹`.
///
/// With `Σ = GGᵀ` (Cholesky), `W = G⁻¹`.
pub fn whitening_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = cov.nrows();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| LinalgError::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(cov),
        })?;
    let g = chol.l();
    Ok(g
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has a nonzero diagonal"))
}

pub fn whitening_factor8(cov: &Matrix8) -> Result<Matrix8, LinalgError> {
    let chol = cov
        .cholesky()
        .ok_or_else(|| LinalgError::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(&DMatrix::from_column_slice(8, 8, cov.as_slice())),
        })?;
    Ok(chol
        .l()
        .solve_lower_triangular(&Matrix8::identity())
        .expect("cholesky factor has a nonzero diagonal"))
}

/// Symmetric block-tridiagonal matrix with 8×8 blocks.
///
/// `upper[i]` is the block at (i, i+1); the (i+1, i) block is its transpose.
#[derive(Debug, Clone)]
pub struct BlockTridiagonal {
    pub diag: Vec<Matrix8>,
    pub upper: Vec<Matrix8>,
}

impl BlockTridiagonal {
    pub fn zeros(blocks: usize) -> Self {
        Self {
            diag: vec![Matrix8::zeros(); blocks],
            upper: vec![Matrix8::zeros(); blocks.saturating_sub(1)],
        }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.blocks();
        let mut m = DMatrix::zeros(8 * n, 8 * n);
        for (i, d) in self.diag.iter().enumerate() {
            m.view_mut((8 * i, 8 * i), (8, 8)).copy_from(d);
        }
        for (i, u) in self.upper.iter().enumerate() {
            m.view_mut((8 * i, 8 * (i + 1)), (8, 8)).copy_from(u);
            m.view_mut((8 * (i + 1), 8 * i), (8, 8))
                .copy_from(&u.transpose());
        }
        m
    }

    /// Block Cholesky factorization, O(n·8³).
    pub fn factor(&self) -> Result<BlockCholesky, LinalgError> {
        let n = self.blocks();
        let mut diag_l: Vec<Matrix8> = Vec::with_capacity(n);
        let mut sub_l: Vec<Matrix8> = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut s = self.diag[i];
            if i > 0 {
                let b: &Matrix8 = &sub_l[i - 1];
                s -= b * b.transpose();
            }
            let s = symmetrize8(&s);
            let chol = s.cholesky().ok_or_else(|| LinalgError::SingularBlock {
                block: i,
                blocks: n,
                min_eigenvalue: s.symmetric_eigenvalues().min(),
            })?;
            let l = chol.l();
            if i + 1 < n {
                // L_{i+1,i} = U_iᵀ L_ii⁻ᵀ  <=>  L_ii L_{i+1,i}ᵀ = U_i
                let x = l
                    .solve_lower_triangular(&self.upper[i])
                    .expect("positive diagonal");
                sub_l.push(x.transpose());
            }
            diag_l.push(l);
        }
        Ok(BlockCholesky { diag_l, sub_l })
    }
}

/// Lower block-bidiagonal Cholesky factor of a [`BlockTridiagonal`].
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    diag_l: Vec<Matrix8>,
    sub_l: Vec<Matrix8>,
}

impl BlockCholesky {
    pub fn solve(&self, rhs: &[Vector8]) -> Result<Vec<Vector8>, LinalgError> {
        let n = self.diag_l.len();
        if rhs.len() != n {
            return Err(LinalgError::Dimension {
                expected: n,
                got: rhs.len(),
            });
        }
        let mut z: Vec<Vector8> = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = rhs[i];
            if i > 0 {
                b -= self.sub_l[i - 1] * z[i - 1];
            }
            z.push(
                self.diag_l[i]
                    .solve_lower_triangular(&b)
                    .expect("positive diagonal"),
            );
        }
        let mut x = vec![Vector8::zeros(); n];
        for i in (0..n).rev() {
            let mut b = z[i];
            if i + 1 < n {
                b -= self.sub_l[i].transpose() * x[i + 1];
            }
            x[i] = self.diag_l[i]
                .tr_solve_lower_triangular(&b)
                .expect("positive diagonal");
        }
        Ok(x)
    }
}
