//! Penalized regression in a kernel space with an unpenalized null space.
//!
//! For a centered Gram matrix `G`, a centered null-space design `Q` and a
//! response `y`, the fit minimizes
//!
//! ```text
//! (1/n) |y - (G c + Q d)|^2 + alpha c^T G c
//! ```
//!
//! whose solution is `d = (Q^T M^-1 Q)^-1 Q^T M^-1 y`, `c = M^-1 (y - Q d)` with
//! `M = G + n alpha I`. Responses are centered before solving; fitted values
//! are therefore centered too.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};
use crate::gram::{CenteredGram, GramSpectrum};
use crate::kernels::{self, KernelSpec, SobolevTable, UnitDomain};

/// Coefficients and fitted values of one penalized regression.
#[derive(Debug, Clone)]
pub struct SmootherFit {
    /// Coefficients on the centered kernel sections.
    pub c: DVector<f64>,
    /// Null-space coefficients.
    pub d: DVector<f64>,
    /// `G c + Q d`, centered.
    pub fitted: DVector<f64>,
    pub alpha: f64,
}

/// Hat matrix mapping a centered response onto centered fitted values.
#[derive(Debug, Clone)]
pub struct HatMatrix {
    pub s: DMatrix<f64>,
    pub alpha: f64,
}

/// Which trace defines degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfKind {
    /// `tr(S)`
    TrS,
    /// `tr(S^2)`
    TrS2,
    /// `tr(2S - S^2)`
    Tr2SminusS2,
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(ApcError::InvalidPenalty(alpha))
    }
}

/// Dense smoother with `M = G + n alpha I` factorized once; reusable across
/// responses.
pub struct PenalizedSmoother<'a> {
    gram: &'a CenteredGram,
    null: &'a DMatrix<f64>,
    alpha: f64,
    m_chol: Cholesky<f64, Dyn>,
    minv_q: DMatrix<f64>,
    qmq_chol: Option<Cholesky<f64, Dyn>>,
}

impl<'a> PenalizedSmoother<'a> {
    pub fn new(gram: &'a CenteredGram, null: &'a DMatrix<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let n = gram.n();
        if null.nrows() != n {
            return Err(ApcError::DimensionMismatch {
                expected: n,
                found: null.nrows(),
            });
        }
        let nf = n as f64;
        let mut m = gram.matrix().clone();
        for i in 0..n {
            m[(i, i)] += nf * alpha;
        }
        let m_chol = match Cholesky::new(m.clone()) {
            Some(ch) => ch,
            None => {
                let jitter = 1e-12 * m.trace() / nf;
                for i in 0..n {
                    m[(i, i)] += jitter;
                }
                Cholesky::new(m).ok_or_else(|| ApcError::Singular("G + n*alpha*I is not positive definite".into()))?
            }
        };
        let minv_q = m_chol.solve(null);
        let qmq_chol = if null.ncols() > 0 {
            let qmq = null.transpose() * &minv_q;
            Some(null_normal_factor(qmq)?)
        } else {
            None
        };
        Ok(Self {
            gram,
            null,
            alpha,
            m_chol,
            minv_q,
            qmq_chol,
        })
    }

    pub fn fit(&self, y: &DVector<f64>) -> Result<SmootherFit> {
        let n = self.gram.n();
        if y.len() != n {
            return Err(ApcError::DimensionMismatch {
                expected: n,
                found: y.len(),
            });
        }
        let mut yc = y.clone();
        let mean = yc.mean();
        yc.add_scalar_mut(-mean);

        let d = match &self.qmq_chol {
            Some(ch) => ch.solve(&(self.minv_q.transpose() * &yc)),
            None => DVector::zeros(0),
        };
        let resid = if d.is_empty() { yc } else { &yc - self.null * &d };
        let c = self.m_chol.solve(&resid);
        let fitted = self.gram.matrix() * &c + self.null * &d;
        Ok(SmootherFit {
            c,
            d,
            fitted,
            alpha: self.alpha,
        })
    }
}

/// Cholesky of `Q^T M^-1 Q`, rejecting (near-)collinear null-space columns.
fn null_normal_factor(qmq: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let eig = SymmetricEigen::new(qmq.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(ApcError::Singular(
            "null-space columns are collinear (Q^T M^-1 Q is singular)".into(),
        ));
    }
    Cholesky::new(qmq).ok_or_else(|| ApcError::Singular("Q^T M^-1 Q is not positive definite".into()))
}

/// One-shot penalized regression; see the module docs for the objective.
pub fn fit_penalized_regression(
    gram: &CenteredGram,
    null: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
) -> Result<SmootherFit> {
    PenalizedSmoother::new(gram, null, alpha)?.fit(y)
}

/// Builds the hat matrix column by column from fits on basis vectors.
pub fn hat_matrix(gram: &CenteredGram, null: &DMatrix<f64>, alpha: f64) -> Result<HatMatrix> {
    let smoother = PenalizedSmoother::new(gram, null, alpha)?;
    let n = gram.n();
    let mut s = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        let fit = smoother.fit(&e)?;
        s.set_column(j, &fit.fitted);
        e[j] = 0.0;
    }
    crate::gram::symmetrize(&mut s);
    Ok(HatMatrix { s, alpha })
}

pub fn degrees_of_freedom(hat: &HatMatrix, kind: DfKind) -> f64 {
    let s = &hat.s;
    let tr_s = s.trace();
    // tr(S^2) = sum of squared entries for symmetric S
    let tr_s2 = s.iter().map(|v| v * v).sum::<f64>();
    match kind {
        DfKind::TrS => tr_s,
        DfKind::TrS2 => tr_s2,
        DfKind::Tr2SminusS2 => 2.0 * tr_s - tr_s2,
    }
}

/// Evaluates a fitted transform
/// `phi(x) = sum_i beta_i (k(x_i, x) - mean_a k(x_a, x)) + sum_l d_l q_l(x)`
/// shifted so that its mean over the training points is zero.
pub fn evaluate_transform(
    spec: &KernelSpec,
    training_xs: &[f64],
    beta: &DVector<f64>,
    d: &DVector<f64>,
    x_new: f64,
) -> Result<f64> {
    Ok(TransformEvaluator::new(spec, training_xs, beta, d)?.eval(x_new))
}

/// Precomputes the training-side quantities of [`evaluate_transform`] for
/// repeated evaluation.
#[derive(Debug, Clone)]
pub struct TransformEvaluator {
    kernel: PointKernel,
    xs: Vec<f64>,
    beta: Vec<f64>,
    beta_sum: f64,
    d: Vec<f64>,
    offset: f64,
}

#[derive(Debug, Clone)]
enum PointKernel {
    Gaussian(f64),
    Sobolev { table: SobolevTable, domain: UnitDomain },
}

impl PointKernel {
    #[inline]
    fn eval_unit(&self, u: f64, v: f64) -> f64 {
        match self {
            PointKernel::Gaussian(h) => {
                let z = (u - v) / h;
                (-0.5 * z * z).exp()
            }
            PointKernel::Sobolev { table, .. } => table.eval(u, v),
        }
    }

    #[inline]
    fn to_unit(&self, x: f64) -> f64 {
        match self {
            PointKernel::Gaussian(_) => x,
            PointKernel::Sobolev { domain, .. } => domain.to_unit(x),
        }
    }
}

impl TransformEvaluator {
    pub fn new(spec: &KernelSpec, training_xs: &[f64], beta: &DVector<f64>, d: &DVector<f64>) -> Result<Self> {
        let n = training_xs.len();
        if beta.len() != n {
            return Err(ApcError::DimensionMismatch {
                expected: n,
                found: beta.len(),
            });
        }
        if d.len() != spec.null_space_dim() {
            return Err(ApcError::DimensionMismatch {
                expected: spec.null_space_dim(),
                found: d.len(),
            });
        }
        let kernel = match spec {
            KernelSpec::Gaussian { bandwidth } => PointKernel::Gaussian(*bandwidth),
            KernelSpec::Sobolev { order, domain } => PointKernel::Sobolev {
                table: SobolevTable::new(*order),
                domain: match domain {
                    Some(dm) => *dm,
                    None => UnitDomain::from_values(training_xs)?,
                },
            },
            KernelSpec::Precomputed { .. } => return Err(ApcError::OutOfSampleUnsupported),
        };
        let xs: Vec<f64> = training_xs.iter().map(|&x| kernel.to_unit(x)).collect();
        let mut ev = Self {
            kernel,
            xs,
            beta: beta.iter().copied().collect(),
            beta_sum: beta.sum(),
            d: d.iter().copied().collect(),
            offset: 0.0,
        };
        let raw_mean = ev.xs.iter().map(|&u| ev.raw_unit(u)).sum::<f64>() / n as f64;
        ev.offset = raw_mean;
        Ok(ev)
    }

    fn raw_unit(&self, u: f64) -> f64 {
        let n = self.xs.len() as f64;
        let mut weighted = 0.0;
        let mut mean_section = 0.0;
        for (&xi, &bi) in self.xs.iter().zip(&self.beta) {
            let k = self.kernel.eval_unit(xi, u);
            weighted += bi * k;
            mean_section += k;
        }
        let mut val = weighted - self.beta_sum * mean_section / n;
        if !self.d.is_empty() {
            let mono = kernels::null_space_monomials(self.d.len(), u);
            val += mono.iter().zip(&self.d).map(|(a, b)| a * b).sum::<f64>();
        }
        val
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.raw_unit(self.kernel.to_unit(x)) - self.offset
    }
}

/// Matrix form of [`evaluate_transform`]: `k_train` is the raw training
/// kernel matrix, `k_cross` holds kernel values between new points (rows) and
/// training points, `null_new` the training-centered null-space monomials at
/// the new points (see [`crate::kernels::cross_null_space`]).
pub fn transform_from_cross_kernel(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    beta: &DVector<f64>,
    null_new: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = k_train.nrows();
    if k_train.ncols() != n || k_cross.ncols() != n || beta.len() != n {
        return Err(ApcError::DimensionMismatch {
            expected: n,
            found: k_cross.ncols().min(beta.len()),
        });
    }
    if null_new.nrows() != k_cross.nrows() || null_new.ncols() != d.len() {
        return Err(ApcError::DimensionMismatch {
            expected: d.len(),
            found: null_new.ncols(),
        });
    }
    let nf = n as f64;
    let beta_sum = beta.sum();
    // training mean of the uncentered kernel part
    let kb = k_train.transpose() * beta;
    let offset = (kb.sum() - beta_sum * k_train.sum() / nf) / nf;
    let mut out = k_cross * beta;
    for (h, v) in out.iter_mut().enumerate() {
        *v -= beta_sum * k_cross.row(h).sum() / nf + offset;
    }
    if !d.is_empty() {
        out += null_new * d;
    }
    Ok(out)
}

/// Smoother expressed in the eigenbasis of a (truncated) Gram spectrum.
///
/// With `G ~ U diag(g) U^T`, coefficient vectors are carried as `c = U b`.
/// The fit depends on `y` only through `U^T y` and `Q^T y`, so each call costs
/// `O(n (r + q))` instead of a dense solve.
#[derive(Debug, Clone)]
pub struct SpectralSmoother {
    inv_shift: DVector<f64>,
    uq: DMatrix<f64>,
    nalpha: f64,
    qmq_chol: Option<Cholesky<f64, Dyn>>,
}

impl SpectralSmoother {
    pub fn new(spectrum: &GramSpectrum, null: &DMatrix<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let n = spectrum.n();
        if null.nrows() != n {
            return Err(ApcError::DimensionMismatch {
                expected: n,
                found: null.nrows(),
            });
        }
        let nalpha = n as f64 * alpha;
        let inv_shift = spectrum.values().map(|g| 1.0 / (g + nalpha));
        let uq = spectrum.vectors().transpose() * null;
        let qmq_chol = if null.ncols() > 0 {
            // Q^T M^-1 Q = W^T D W + (Q^T Q - W^T W) / (n alpha), W = U^T Q
            let wtw = uq.transpose() * &uq;
            let resid = null.transpose() * null - &wtw;
            let mut dw = uq.clone();
            for (i, mut row) in dw.row_iter_mut().enumerate() {
                row *= inv_shift[i];
            }
            let mut qmq = uq.transpose() * dw + resid / nalpha;
            crate::gram::symmetrize(&mut qmq);
            Some(null_normal_factor(qmq)?)
        } else {
            None
        };
        Ok(Self {
            inv_shift,
            uq,
            nalpha,
            qmq_chol,
        })
    }

    /// Fits given the projections `ut_y = U^T y` and `qt_y = Q^T y` of a
    /// centered response. Returns `(b, d)` with `c = U b`.
    pub fn fit_projected(&self, ut_y: &DVector<f64>, qt_y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = match &self.qmq_chol {
            Some(ch) => {
                let wt_y = self.uq.transpose() * ut_y;
                let scaled = ut_y.component_mul(&self.inv_shift);
                let rhs = self.uq.transpose() * scaled + (qt_y - wt_y) / self.nalpha;
                ch.solve(&rhs)
            }
            None => DVector::zeros(0),
        };
        let mut b = if d.is_empty() {
            ut_y.clone()
        } else {
            ut_y - &self.uq * &d
        };
        b.component_mul_assign(&self.inv_shift);
        (b, d)
    }
}
