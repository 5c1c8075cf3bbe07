//! Centered Gram matrices and kernel-matrix validation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ApcError, Result};

/// Relative asymmetry accepted (and then symmetrized away) in user matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Smallest eigenvalue accepted relative to the largest.
pub const PSD_TOL: f64 = 1e-8;

/// Double-centered kernel matrix `G = H K H`, `H = I - 11^T / n`.
///
/// `G` is the quadratic form of both the empirical covariance (through `G^2`)
/// and the penalty (through `G`) in coefficient space.
#[derive(Debug, Clone)]
pub struct CenteredGram {
    g: DMatrix<f64>,
}

impl CenteredGram {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.g
    }

    pub fn is_zero(&self) -> bool {
        self.g.amax() == 0.0
    }
}

/// Centers a square symmetric kernel matrix: subtract row means and column
/// means, add back the grand mean.
pub fn center_gram(k: &DMatrix<f64>) -> Result<CenteredGram> {
    let (rows, cols) = k.shape();
    if rows != cols {
        return Err(ApcError::NotSquare { rows, cols });
    }
    let asym = max_asymmetry(k);
    if asym > SYMMETRY_TOL * k.amax().max(1.0) {
        return Err(ApcError::Asymmetric(asym));
    }
    let n = rows;
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut g = DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand);
    symmetrize(&mut g);
    Ok(CenteredGram { g })
}

/// Checks a user-supplied kernel matrix: square of size `n_expected`,
/// symmetric within [`SYMMETRY_TOL`] (then symmetrized), smallest eigenvalue
/// at least `-PSD_TOL` times the largest.
pub fn validate_kernel_matrix(mut k: DMatrix<f64>, n_expected: usize) -> Result<DMatrix<f64>> {
    let (rows, cols) = k.shape();
    if rows != cols {
        return Err(ApcError::NotSquare { rows, cols });
    }
    if rows != n_expected {
        return Err(ApcError::DimensionMismatch {
            expected: n_expected,
            found: rows,
        });
    }
    if let Some(pos) = k.iter().position(|v| !v.is_finite()) {
        return Err(ApcError::NonFinite(pos));
    }
    let asym = max_asymmetry(&k);
    if asym > SYMMETRY_TOL * k.amax().max(1.0) {
        return Err(ApcError::Asymmetric(asym));
    }
    symmetrize(&mut k);
    let eig = SymmetricEigen::new(k.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo < -PSD_TOL * hi.abs().max(f64::MIN_POSITIVE) {
        return Err(ApcError::NotPositiveSemidefinite(lo));
    }
    Ok(k)
}

fn max_asymmetry(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Truncated eigendecomposition of a centered Gram matrix.
///
/// Keeps eigenpairs with eigenvalue above `rel_floor` times the largest, in
/// descending order. Coefficient vectors of the form `U b` span everything a
/// Gram matrix can see; directions below the floor contribute nothing beyond
/// rounding noise.
#[derive(Debug, Clone)]
pub struct GramSpectrum {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    n: usize,
}

/// Default floor used by the iterative solver.
pub const SPECTRAL_FLOOR: f64 = 1e-14;

impl GramSpectrum {
    pub fn new(gram: &CenteredGram, rel_floor: f64) -> Self {
        let n = gram.n();
        let eig = SymmetricEigen::new(gram.matrix().clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let top = eig.eigenvalues[order[0]].max(0.0);
        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&i| top > 0.0 && eig.eigenvalues[i] > rel_floor * top)
            .collect();
        let values = DVector::from_iterator(kept.len(), kept.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, kept.len());
        for (c, &i) in kept.iter().enumerate() {
            vectors.set_column(c, &eig.eigenvectors.column(i));
        }
        Self { values, vectors, n }
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }
}
