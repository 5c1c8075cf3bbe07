//! Non-iterative solvers.
//!
//! [`solve_direct`] approximates the diagonal blocks `G_j^2 + n alpha_j G_j` of
//! the generalized eigenproblem by `(G_j + n alpha_j / 2 I)^2`. In the
//! coordinates `gamma_j = (G_j + n alpha_j / 2 I) beta_j` the problem becomes an
//! ordinary symmetric eigenproblem for the block matrix
//!
//! ```text
//! R = [ I        R_1 R_2  ... ]
//!     [ R_2 R_1  I        ... ]     R_j = G_j (G_j + n alpha_j / 2 I)^-1
//! ```
//!
//! [`solve_oracle_exact`] solves the exact problem on the subspace spanned by
//! the retained eigenvectors of each `G_j` (plus null-space columns for the
//! block variant), where the constraint form is positive definite.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{ApcError, Result};
use crate::gram::CenteredGram;
use crate::power::{ApcComponent, BlockCoef, Diagnostics, VariableBlock};

/// Relative eigenvalue cut used by the oracle unless told otherwise.
pub const ORACLE_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DirectSolution {
    /// Components from the smallest eigenvalue up.
    pub components: Vec<ApcComponent>,
    /// Every eigenvalue of the reduced matrix, ascending.
    pub spectrum: Vec<f64>,
    /// Retained rank per variable.
    pub rank_info: Vec<usize>,
    /// Set when no block carries any variation.
    pub degenerate: bool,
}

fn blocks_from_grams(gs: &[CenteredGram], alphas: &[f64]) -> Result<Vec<VariableBlock>> {
    if gs.len() != alphas.len() {
        return Err(ApcError::DimensionMismatch {
            expected: gs.len(),
            found: alphas.len(),
        });
    }
    if gs.len() < 2 {
        return Err(ApcError::InvalidArgument(format!(
            "need at least two variables, got {}",
            gs.len()
        )));
    }
    let n = gs[0].n();
    gs.iter()
        .zip(alphas)
        .map(|(g, &a)| {
            if g.n() != n {
                return Err(ApcError::DimensionMismatch {
                    expected: n,
                    found: g.n(),
                });
            }
            VariableBlock::from_gram(g.clone(), DMatrix::zeros(n, 0), a)
        })
        .collect()
}

fn sorted_eigen(m: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ApcError::Eigensolver("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| ApcError::Eigensolver("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(eig.eigenvectors.nrows(), order.len());
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

fn direct_diagnostics() -> Diagnostics {
    Diagnostics {
        converged: true,
        ..Default::default()
    }
}

/// Approximate direct solver on centered Gram matrices without null spaces.
pub fn solve_direct(gs: &[CenteredGram], alphas: &[f64], k: usize) -> Result<DirectSolution> {
    solve_direct_blocks(&blocks_from_grams(gs, alphas)?, k)
}

/// [`solve_direct`] on prepared blocks; blocks with a null space are rejected.
pub fn solve_direct_blocks(blocks: &[VariableBlock], k: usize) -> Result<DirectSolution> {
    if let Some(j) = blocks.iter().position(|b| b.null_dim() > 0) {
        return Err(ApcError::Unsupported(format!(
            "the direct solver does not handle null spaces (variable {})",
            j + 1
        )));
    }
    let p = blocks.len();
    let n = blocks[0].n();
    let nf = n as f64;

    // R_j = U diag(g / (g + c)) U^T with c = n alpha / 2
    let shrunk: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|b| {
            let s = b.spectrum();
            let c = nf * b.alpha() / 2.0;
            let w = s.values().map(|g| g / (g + c));
            let mut uw = s.vectors().clone();
            for (j, mut col) in uw.column_iter_mut().enumerate() {
                col *= w[j];
            }
            uw * s.vectors().transpose()
        })
        .collect();
    let rank_info: Vec<usize> = blocks.iter().map(|b| b.spectrum().rank()).collect();

    let mut r = DMatrix::identity(p * n, p * n);
    for i in 0..p {
        for j in (i + 1)..p {
            let off = &shrunk[i] * &shrunk[j];
            r.view_mut((i * n, j * n), (n, n)).copy_from(&off);
            r.view_mut((j * n, i * n), (n, n)).copy_from(&off.transpose());
        }
    }
    let (spectrum, vectors) = sorted_eigen(r)?;
    if rank_info.iter().all(|&r| r == 0) {
        return Ok(DirectSolution {
            components: Vec::new(),
            spectrum,
            rank_info,
            degenerate: true,
        });
    }

    let mut components = Vec::with_capacity(k);
    for col in 0..k.min(p * n) {
        let v = vectors.column(col);
        let coefs: Vec<BlockCoef> = blocks
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let gamma = v.rows(j * n, n).into_owned();
                let s = b.spectrum();
                let c = nf * b.alpha() / 2.0;
                let ut_g = s.vectors().transpose() * &gamma;
                let in_range = s.vectors() * &ut_g;
                let scaled = ut_g.zip_map(s.values(), |x, g| x / (g + c));
                let beta = s.vectors() * scaled + (gamma - in_range) / c;
                BlockCoef {
                    beta,
                    d: DVector::zeros(0),
                }
            })
            .collect();
        match ApcComponent::from_coefficients(blocks, coefs, direct_diagnostics()) {
            Ok(comp) => components.push(comp),
            // eigenvector living entirely outside every Gram range
            Err(ApcError::DegenerateStart) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(DirectSolution {
        components,
        spectrum,
        rank_info,
        degenerate: false,
    })
}

/// Exact reduced-space solver on centered Gram matrices without null spaces.
pub fn solve_oracle_exact(gs: &[CenteredGram], alphas: &[f64], k: usize, rank_tol: f64) -> Result<DirectSolution> {
    solve_oracle_blocks(&blocks_from_grams(gs, alphas)?, k, rank_tol)
}

/// Exact reduced-space solver on prepared blocks (null spaces allowed).
///
/// Block `j` is parametrized by `phi_j = U_j a_j + Q_j d_j`, where `U_j` holds
/// the eigenvectors of `G_j` with eigenvalue above `rank_tol` times the
/// largest. Then `beta_j = U_j diag(1/lambda) a_j` and the penalty is
/// `alpha_j a_j^T diag(1/lambda) a_j`; criterion and constraint are both
/// quadratic forms in `z = (a_1, d_1, ..., a_p, d_p)`.
pub fn solve_oracle_blocks(blocks: &[VariableBlock], k: usize, rank_tol: f64) -> Result<DirectSolution> {
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(ApcError::InvalidArgument(format!(
            "rank_tol must lie in (0, 1), got {rank_tol}"
        )));
    }
    let n = blocks[0].n();
    let nf = n as f64;

    struct Reduced {
        basis: DMatrix<f64>,
        inv_lambda: DVector<f64>,
        rank: usize,
    }
    let reduced: Vec<Reduced> = blocks
        .iter()
        .map(|b| {
            let eig = SymmetricEigen::new(b.gram().matrix().clone());
            let top = eig.eigenvalues.max();
            let keep: Vec<usize> = (0..n)
                .filter(|&i| top > 0.0 && eig.eigenvalues[i] > rank_tol * top)
                .collect();
            let q = b.null_dim();
            let mut basis = DMatrix::zeros(n, keep.len() + q);
            for (c, &i) in keep.iter().enumerate() {
                basis.set_column(c, &eig.eigenvectors.column(i));
            }
            for c in 0..q {
                basis.set_column(keep.len() + c, &b.null().column(c));
            }
            let inv_lambda = DVector::from_iterator(keep.len(), keep.iter().map(|&i| 1.0 / eig.eigenvalues[i]));
            Reduced {
                basis,
                inv_lambda,
                rank: keep.len(),
            }
        })
        .collect();
    let rank_info: Vec<usize> = reduced.iter().map(|r| r.rank).collect();
    let dims: Vec<usize> = reduced.iter().map(|r| r.basis.ncols()).collect();
    let total: usize = dims.iter().sum();
    if total == 0 {
        return Err(ApcError::DegenerateProblem(
            "every Gram matrix is zero and no null space is present".into(),
        ));
    }
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();

    let mut full = DMatrix::zeros(n, total);
    for (r, &o) in reduced.iter().zip(&offsets) {
        full.view_mut((0, o), (n, r.basis.ncols())).copy_from(&r.basis);
    }
    let mut a = full.transpose() * &full / nf;
    let mut bmat = DMatrix::zeros(total, total);
    for ((r, &o), blk) in reduced.iter().zip(&offsets).zip(blocks) {
        let m = r.basis.ncols();
        bmat.view_mut((o, o), (m, m)).copy_from(&a.view((o, o), (m, m)));
        for i in 0..r.rank {
            let pen = blk.alpha() * r.inv_lambda[i];
            a[(o + i, o + i)] += pen;
            bmat[(o + i, o + i)] += pen;
        }
    }

    // symmetric scaling before the Cholesky reduction
    let scale = bmat.diagonal().map(|v| v.sqrt().recip());
    let a_s = DMatrix::from_fn(total, total, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let mut b_s = DMatrix::from_fn(total, total, |i, j| bmat[(i, j)] * scale[i] * scale[j]);
    crate::gram::symmetrize(&mut b_s);
    let chol =
        Cholesky::new(b_s).ok_or_else(|| ApcError::Singular("constraint form is not positive definite".into()))?;
    let l = chol.l();
    let linv_a = l
        .solve_lower_triangular(&a_s)
        .ok_or_else(|| ApcError::Singular("triangular solve failed".into()))?;
    let mut c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| ApcError::Singular("triangular solve failed".into()))?;
    crate::gram::symmetrize(&mut c);
    let (spectrum, vectors) = sorted_eigen(c)?;

    let lt = l.transpose();
    let mut components = Vec::with_capacity(k);
    for col in 0..k.min(total) {
        let w = vectors.column(col).into_owned();
        let z = lt
            .solve_upper_triangular(&w)
            .ok_or_else(|| ApcError::Singular("triangular solve failed".into()))?
            .component_mul(&scale);
        let coefs: Vec<BlockCoef> = reduced
            .iter()
            .zip(&offsets)
            .map(|(r, &o)| {
                let a_j = z.rows(o, r.rank).component_mul(&r.inv_lambda);
                let beta = r.basis.columns(0, r.rank) * a_j;
                let d = z.rows(o + r.rank, r.basis.ncols() - r.rank).into_owned();
                BlockCoef { beta, d }
            })
            .collect();
        components.push(ApcComponent::from_coefficients(blocks, coefs, direct_diagnostics())?);
    }
    Ok(DirectSolution {
        components,
        spectrum,
        rank_info,
        degenerate: false,
    })
}
