//! Kernel definitions and the raw matrices built from them.
//!
//! Three kinds of kernel are supported: a Gaussian kernel with a bandwidth,
//! the order-`m` spline (Sobolev) kernel on `[0, 1]`, and user-supplied
//! precomputed kernel matrices. The Sobolev kernel here is the reproducing
//! kernel of the penalized part of the space only; its null space (polynomials
//! of degree `1..m-1`, constants excluded) is carried separately as a design
//! matrix, see [`null_space_basis`].

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};

/// Affine map of a training range onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitDomain {
    pub lower: f64,
    pub upper: f64,
}

impl UnitDomain {
    pub fn from_values(xs: &[f64]) -> Result<Self> {
        check_finite(xs)?;
        let lower = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(upper > lower) {
            return Err(ApcError::DegenerateKernel(
                "cannot rescale a constant variable onto [0, 1]".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    #[inline]
    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.lower) / (self.upper - self.lower)
    }
}

/// Per-variable kernel description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-(x - x')^2 / (2 h^2))`.
    Gaussian { bandwidth: f64 },
    /// Order-`m` spline kernel on `[0, 1]`. `domain` records the training
    /// min/max used to rescale raw values; `None` means values are already
    /// on the unit scale.
    Sobolev {
        order: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<UnitDomain>,
    },
    /// A user-supplied `n x n` kernel matrix.
    Precomputed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
        #[serde(skip)]
        matrix: Option<Arc<DMatrix<f64>>>,
    },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(ApcError::InvalidKernel(format!(
                "gaussian bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(KernelSpec::Gaussian { bandwidth })
    }

    pub fn sobolev(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(ApcError::InvalidKernel("sobolev order must be >= 1".into()));
        }
        if order > MAX_SOBOLEV_ORDER {
            return Err(ApcError::InvalidKernel(format!(
                "sobolev order {order} exceeds supported maximum {MAX_SOBOLEV_ORDER}"
            )));
        }
        Ok(KernelSpec::Sobolev { order, domain: None })
    }

    /// Wraps a precomputed matrix; the matrix must be square and symmetric and
    /// is validated as a kernel (see [`crate::gram::validate_kernel_matrix`]).
    pub fn precomputed(matrix: DMatrix<f64>, source: Option<String>) -> Result<Self> {
        let n = matrix.nrows();
        let checked = crate::gram::validate_kernel_matrix(matrix, n)?;
        Ok(KernelSpec::Precomputed {
            source,
            matrix: Some(Arc::new(checked)),
        })
    }

    /// Dimension of the unpenalized null space, constants excluded.
    pub fn null_space_dim(&self) -> usize {
        match self {
            KernelSpec::Sobolev { order, .. } => order - 1,
            _ => 0,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        !matches!(self, KernelSpec::Precomputed { .. })
    }

    pub fn precomputed_matrix(&self) -> Option<&Arc<DMatrix<f64>>> {
        match self {
            KernelSpec::Precomputed { matrix, .. } => matrix.as_ref(),
            _ => None,
        }
    }

    /// Returns a copy with the Sobolev rescaling fixed to the range of `xs`.
    /// Other kinds are returned unchanged.
    pub fn fitted_to(&self, xs: &[f64]) -> Result<Self> {
        match self {
            KernelSpec::Sobolev { order, .. } => Ok(KernelSpec::Sobolev {
                order: *order,
                domain: Some(UnitDomain::from_values(xs)?),
            }),
            other => Ok(other.clone()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Gaussian { bandwidth } if !(*bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                ApcError::InvalidKernel(format!("gaussian bandwidth must be positive, got {bandwidth}")),
            ),
            KernelSpec::Sobolev { order, .. } if *order == 0 || *order > MAX_SOBOLEV_ORDER => {
                Err(ApcError::InvalidKernel(format!("unsupported sobolev order {order}")))
            }
            _ => Ok(()),
        }
    }

    /// Maps a raw value onto the scale the kernel is evaluated on.
    #[inline]
    pub(crate) fn scaled(&self, x: f64) -> f64 {
        match self {
            KernelSpec::Sobolev { domain: Some(d), .. } => d.to_unit(x),
            _ => x,
        }
    }
}

/// Largest supported spline order. Bernoulli coefficients lose accuracy in
/// double precision well before order 20.
pub const MAX_SOBOLEV_ORDER: usize = 8;

/// Evaluates `k(x, x')`. For a Sobolev kernel carrying a domain the raw
/// values are rescaled first; values outside `[0, 1]` use the polynomial
/// continuation of the Bernoulli terms.
pub fn eval_kernel(spec: &KernelSpec, x: f64, x_prime: f64) -> Result<f64> {
    spec.validate()?;
    match spec {
        KernelSpec::Gaussian { bandwidth } => Ok(gaussian(*bandwidth, x, x_prime)),
        KernelSpec::Sobolev { order, .. } => {
            let table = SobolevTable::new(*order);
            Ok(table.eval(spec.scaled(x), spec.scaled(x_prime)))
        }
        KernelSpec::Precomputed { .. } => Err(ApcError::NoPointwiseKernel),
    }
}

#[inline]
fn gaussian(bandwidth: f64, x: f64, y: f64) -> f64 {
    let z = (x - y) / bandwidth;
    (-0.5 * z * z).exp()
}

/// Raw kernel matrix `K[i][l] = k(x_i, x_l)`.
///
/// For Sobolev kernels without a recorded domain, `xs` is rescaled by its own
/// min/max (use [`KernelSpec::fitted_to`] to record it). For precomputed
/// kernels `xs` only fixes the expected dimension; pass an empty slice to
/// accept the stored size.
pub fn kernel_matrix(spec: &KernelSpec, xs: &[f64]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if let KernelSpec::Precomputed { matrix, .. } = spec {
        let m = matrix
            .as_ref()
            .ok_or_else(|| ApcError::InvalidKernel("precomputed kernel has no matrix".into()))?;
        let n = if xs.is_empty() { m.nrows() } else { xs.len() };
        return crate::gram::validate_kernel_matrix((**m).clone(), n);
    }
    check_finite(xs)?;
    let n = xs.len();
    if n < 2 {
        return Err(ApcError::InvalidArgument(format!(
            "kernel matrix needs at least 2 points, got {n}"
        )));
    }
    let mut k = DMatrix::zeros(n, n);
    match spec {
        KernelSpec::Gaussian { bandwidth } => {
            for i in 0..n {
                k[(i, i)] = 1.0;
                for l in 0..i {
                    let v = gaussian(*bandwidth, xs[i], xs[l]);
                    k[(i, l)] = v;
                    k[(l, i)] = v;
                }
            }
        }
        KernelSpec::Sobolev { order, domain } => {
            let fitted;
            let domain = match domain {
                Some(d) => d,
                None => {
                    fitted = UnitDomain::from_values(xs)?;
                    &fitted
                }
            };
            let u: Vec<f64> = xs.iter().map(|&x| domain.to_unit(x)).collect();
            let table = SobolevTable::new(*order);
            for i in 0..n {
                for l in 0..=i {
                    let v = table.eval(u[i], u[l]);
                    k[(i, l)] = v;
                    k[(l, i)] = v;
                }
            }
        }
        KernelSpec::Precomputed { .. } => unreachable!(),
    }
    Ok(k)
}

/// Kernel values between new points (rows) and training points (columns).
/// Sobolev specs should carry the training domain (see
/// [`KernelSpec::fitted_to`]).
pub fn cross_kernel_matrix(spec: &KernelSpec, train: &[f64], new: &[f64]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_finite(train)?;
    check_finite(new)?;
    match spec {
        KernelSpec::Gaussian { bandwidth } => Ok(DMatrix::from_fn(new.len(), train.len(), |h, i| {
            gaussian(*bandwidth, new[h], train[i])
        })),
        KernelSpec::Sobolev { order, domain } => {
            let domain = match domain {
                Some(d) => *d,
                None => UnitDomain::from_values(train)?,
            };
            let table = SobolevTable::new(*order);
            let ut: Vec<f64> = train.iter().map(|&x| domain.to_unit(x)).collect();
            let un: Vec<f64> = new.iter().map(|&x| domain.to_unit(x)).collect();
            Ok(DMatrix::from_fn(new.len(), train.len(), |h, i| {
                table.eval(un[h], ut[i])
            }))
        }
        KernelSpec::Precomputed { .. } => Err(ApcError::NoPointwiseKernel),
    }
}

/// Null-space monomials at new points, centered by their training means.
pub fn cross_null_space(spec: &KernelSpec, train: &[f64], new: &[f64]) -> Result<DMatrix<f64>> {
    let q = spec.null_space_dim();
    if q == 0 {
        return Ok(DMatrix::zeros(new.len(), 0));
    }
    let domain = match spec {
        KernelSpec::Sobolev { domain: Some(d), .. } => *d,
        _ => UnitDomain::from_values(train)?,
    };
    let mut means = vec![0.0; q];
    for &x in train {
        for (m, v) in means.iter_mut().zip(null_space_monomials(q, domain.to_unit(x))) {
            *m += v / train.len() as f64;
        }
    }
    let mut out = DMatrix::zeros(new.len(), q);
    for (h, &x) in new.iter().enumerate() {
        for (l, v) in null_space_monomials(q, domain.to_unit(x)).into_iter().enumerate() {
            out[(h, l)] = v - means[l];
        }
    }
    Ok(out)
}

/// Linear kernel of a feature block normalized by its trace, `H H^T / tr(H H^T)`.
pub fn feature_gram_kernel(features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = features.shape();
    if n < 2 || m < 1 {
        return Err(ApcError::InvalidArgument(format!(
            "feature block must be at least 2x1, got {n}x{m}"
        )));
    }
    if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
        return Err(ApcError::NonFinite(pos));
    }
    let mut k = features * features.transpose();
    let trace = k.trace();
    if !(trace > 0.0) {
        return Err(ApcError::DegenerateKernel("feature block is identically zero".into()));
    }
    k /= trace;
    // exact symmetry
    for i in 0..n {
        for l in 0..i {
            let v = 0.5 * (k[(i, l)] + k[(l, i)]);
            k[(i, l)] = v;
            k[(l, i)] = v;
        }
    }
    Ok(k)
}

/// Centered null-space design `Q`: columns `x, x^2, ..., x^(m-1)` of the
/// (rescaled) values, each mean-centered. Kernels without a null space yield
/// an `n x 0` matrix.
pub fn null_space_basis(spec: &KernelSpec, xs: &[f64]) -> Result<DMatrix<f64>> {
    let q = spec.null_space_dim();
    let n = xs.len();
    if q == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    check_finite(xs)?;
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    // q centered monomials are independent iff there are at least q + 1 distinct points
    if distinct.len() < q + 1 {
        return Err(ApcError::RankDeficientNullSpace {
            needed: q + 1,
            found: distinct.len(),
        });
    }
    let domain = match spec {
        KernelSpec::Sobolev { domain: Some(d), .. } => *d,
        _ => UnitDomain::from_values(xs)?,
    };
    let mut basis = DMatrix::zeros(n, q);
    for (i, &x) in xs.iter().enumerate() {
        let u = domain.to_unit(x);
        let mut pow = 1.0;
        for j in 0..q {
            pow *= u;
            basis[(i, j)] = pow;
        }
    }
    for j in 0..q {
        let mean = basis.column(j).mean();
        basis.column_mut(j).add_scalar_mut(-mean);
    }
    Ok(basis)
}

/// Evaluates the raw null-space monomials `u, u^2, ...` at a unit-scale point.
pub(crate) fn null_space_monomials(q: usize, u: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(q);
    let mut pow = 1.0;
    for _ in 0..q {
        pow *= u;
        out.push(pow);
    }
    out
}

fn check_finite(xs: &[f64]) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(ApcError::NonFinite(pos)),
        None => Ok(()),
    }
}

/// Coefficients of the two scaled Bernoulli polynomials that make up the
/// order-`m` spline kernel:
/// `k(u, v) = k_m(u) k_m(v) + (-1)^(m-1) k_2m(|u - v|)`, with `k_r = B_r / r!`.
#[derive(Debug, Clone)]
pub(crate) struct SobolevTable {
    half: Vec<f64>,
    full: Vec<f64>,
    sign: f64,
}

impl SobolevTable {
    pub(crate) fn new(order: usize) -> Self {
        let bern = bernoulli_numbers(2 * order);
        Self {
            half: scaled_bernoulli_coeffs(order, &bern),
            full: scaled_bernoulli_coeffs(2 * order, &bern),
            sign: if order % 2 == 1 { 1.0 } else { -1.0 },
        }
    }

    #[inline]
    pub(crate) fn eval(&self, u: f64, v: f64) -> f64 {
        horner(&self.half, u) * horner(&self.half, v) + self.sign * horner(&self.full, (u - v).abs())
    }
}

/// Bernoulli numbers `B_0..=B_n` with `B_1 = -1/2`.
fn bernoulli_numbers(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n + 1];
    b[0] = 1.0;
    for m in 1..=n {
        let acc: f64 = (0..m).map(|k| binomial(m + 1, k) * b[k]).sum();
        b[m] = -acc / (m as f64 + 1.0);
    }
    b
}

/// Ascending power coefficients of `B_r(x) / r!`.
fn scaled_bernoulli_coeffs(r: usize, bern: &[f64]) -> Vec<f64> {
    let fact: f64 = (1..=r).map(|v| v as f64).product();
    // B_r(x) = sum_k C(r, k) B_k x^(r-k)
    let mut coeffs = vec![0.0; r + 1];
    for (k, bk) in bern.iter().enumerate().take(r + 1) {
        coeffs[r - k] = binomial(r, k) * bk / fact;
    }
    coeffs
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

#[inline]
fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}
