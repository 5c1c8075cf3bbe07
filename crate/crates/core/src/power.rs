//! Power iteration for the smallest kernelized additive principal components.
//!
//! The smoothing operator `S~` (per-variable penalized regression of the other
//! transforms, plus the identity) has spectrum in `[0, p]`. Iterating with
//! `gamma I - S~`, `gamma = (p + 1) / 2`, turns the bottom of that spectrum into
//! the dominant eigenvalue. Components are kept normalized in the star inner
//! product
//!
//! ```text
//! <Phi, Psi>* = sum_j [ (1/n) phi_j^T psi_j + alpha_j beta_j^T G_j beta'_j ]
//! ```
//!
//! and later components are Gram-Schmidt orthogonalized against earlier ones
//! after every sweep.
//!
//! Internally every block is carried in the eigenbasis of its Gram matrix
//! (`beta = U b`), which makes each smoother call a pair of thin matrix
//! products.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};
use crate::gram::{center_gram, CenteredGram, GramSpectrum, SPECTRAL_FLOOR};
use crate::kernels::{kernel_matrix, null_space_basis, KernelSpec};
use crate::smoother::{check_alpha, SpectralSmoother, TransformEvaluator};

/// One variable's prepared numerics.
///
/// The Gram matrix, null-space design and spectrum do not depend on the
/// penalty, so [`VariableBlock::with_alpha`] shares them.
#[derive(Debug, Clone)]
pub struct VariableBlock {
    spec: KernelSpec,
    xs: Option<Arc<Vec<f64>>>,
    gram: Arc<CenteredGram>,
    null: Arc<DMatrix<f64>>,
    spectrum: Arc<GramSpectrum>,
    alpha: f64,
}

impl VariableBlock {
    /// Builds a block from raw values. Sobolev domains are fitted to `xs`;
    /// precomputed specs use their stored matrix and ignore `xs` values apart
    /// from the count.
    pub fn from_values(spec: &KernelSpec, xs: &[f64], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let spec = spec.fitted_to(xs)?;
        let k = kernel_matrix(&spec, xs)?;
        if !xs.is_empty() && k.nrows() != xs.len() {
            return Err(ApcError::DimensionMismatch {
                expected: xs.len(),
                found: k.nrows(),
            });
        }
        let null = if spec.null_space_dim() > 0 {
            null_space_basis(&spec, xs)?
        } else {
            DMatrix::zeros(k.nrows(), 0)
        };
        let xs = spec.is_pointwise().then(|| Arc::new(xs.to_vec()));
        Self::assemble(spec, xs, center_gram(&k)?, null, alpha)
    }

    /// Builds a block from a kernel matrix directly (no pointwise kernel).
    pub fn from_kernel_matrix(k: DMatrix<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let spec = KernelSpec::precomputed(k, None)?;
        let k = spec.precomputed_matrix().expect("precomputed").as_ref().clone();
        let n = k.nrows();
        Self::assemble(spec, None, center_gram(&k)?, DMatrix::zeros(n, 0), alpha)
    }

    /// Builds a block from an already centered Gram matrix and null-space
    /// design. The block has no out-of-sample form.
    pub fn from_gram(gram: CenteredGram, null: DMatrix<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if null.nrows() != gram.n() {
            return Err(ApcError::DimensionMismatch {
                expected: gram.n(),
                found: null.nrows(),
            });
        }
        let spec = KernelSpec::Precomputed {
            source: None,
            matrix: None,
        };
        Self::assemble(spec, None, gram, null, alpha)
    }

    fn assemble(
        spec: KernelSpec,
        xs: Option<Arc<Vec<f64>>>,
        gram: CenteredGram,
        null: DMatrix<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let spectrum = GramSpectrum::new(&gram, SPECTRAL_FLOOR);
        Ok(Self {
            spec,
            xs,
            gram: Arc::new(gram),
            null: Arc::new(null),
            spectrum: Arc::new(spectrum),
            alpha,
        })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { alpha, ..self.clone() })
    }

    pub fn n(&self) -> usize {
        self.gram.n()
    }

    pub fn null_dim(&self) -> usize {
        self.null.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Training values, for pointwise kernels.
    pub fn xs(&self) -> Option<&[f64]> {
        self.xs.as_deref().map(|v| v.as_slice())
    }

    pub fn gram(&self) -> &CenteredGram {
        &self.gram
    }

    pub fn null(&self) -> &DMatrix<f64> {
        &self.null
    }

    pub fn spectrum(&self) -> &GramSpectrum {
        &self.spectrum
    }

    /// Out-of-sample evaluator for a fitted transform of this block.
    pub fn evaluator(&self, coef: &BlockCoef) -> Result<TransformEvaluator> {
        match self.xs() {
            Some(xs) => TransformEvaluator::new(&self.spec, xs, &coef.beta, &coef.d),
            None => Err(ApcError::OutOfSampleUnsupported),
        }
    }

    fn is_degenerate(&self) -> bool {
        self.spectrum.rank() == 0 && self.null_dim() == 0
    }
}

/// Which eigensolver computes the components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Power,
    Direct,
}

/// Starting point for the power iteration.
#[derive(Debug, Clone, Default)]
pub enum Init {
    #[default]
    RandomNormal,
    Supplied(Vec<BlockCoef>),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Relative change of the penalized criterion that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub n_components: usize,
    pub init: Init,
    pub solver: SolverKind,
    /// Keep the criterion value after every iteration in the diagnostics.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 10_000,
            seed: 0,
            n_components: 1,
            init: Init::RandomNormal,
            solver: SolverKind::Power,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(ApcError::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(ApcError::InvalidArgument("max_iter must be at least 1".into()));
        }
        if self.n_components == 0 {
            return Err(ApcError::InvalidArgument("n_components must be at least 1".into()));
        }
        Ok(())
    }
}

/// The blocks of one problem together with the solver settings.
#[derive(Debug, Clone)]
pub struct ApcProblem {
    blocks: Vec<VariableBlock>,
    gamma: f64,
    config: SolverConfig,
}

impl ApcProblem {
    pub fn new(blocks: Vec<VariableBlock>, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        if blocks.len() < 2 {
            return Err(ApcError::InvalidArgument(format!(
                "need at least two variables, got {}",
                blocks.len()
            )));
        }
        let n = blocks[0].n();
        for b in &blocks {
            if b.n() != n {
                return Err(ApcError::DimensionMismatch {
                    expected: n,
                    found: b.n(),
                });
            }
        }
        let p = blocks.len();
        Ok(Self {
            blocks,
            gamma: (p as f64 + 1.0) / 2.0,
            config,
        })
    }

    pub fn blocks(&self) -> &[VariableBlock] {
        &self.blocks
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.blocks[0].n()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut SolverConfig {
        &mut self.config
    }

    /// The same problem with every block's penalty replaced.
    pub fn with_common_alpha(&self, alpha: f64) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.with_alpha(alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, ..self.clone() })
    }
}

/// Coefficients of one variable's transform: `phi = G beta + Q d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCoef {
    pub beta: DVector<f64>,
    pub d: DVector<f64>,
}

impl BlockCoef {
    pub fn zeros(n: usize, q: usize) -> Self {
        Self {
            beta: DVector::zeros(n),
            d: DVector::zeros(q),
        }
    }
}

/// One variable's part of a component.
#[derive(Debug, Clone)]
pub struct BlockTransform {
    pub coef: BlockCoef,
    /// Transform values at the data points (centered).
    pub phi: DVector<f64>,
    /// Empirical variance, `|phi|^2 / n`.
    pub var: f64,
    /// `alpha beta^T G beta`.
    pub penalty: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    /// Relative criterion change at the last iteration.
    pub final_change: f64,
    /// Gap to the next eigenvalue, estimated from the convergence rate.
    pub estimated_gap: Option<f64>,
    /// Set when the estimated gap is below `1e-6`.
    pub near_tie: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<f64>>,
}

/// One eigen-solution.
#[derive(Debug, Clone)]
pub struct ApcComponent {
    pub blocks: Vec<BlockTransform>,
    /// Penalized Rayleigh quotient.
    pub eigenvalue: f64,
    /// `Var(sum phi) / sum Var(phi)`.
    pub raw_eigenvalue: f64,
    pub diagnostics: Diagnostics,
}

impl ApcComponent {
    /// Builds a component from coefficients: computes transforms, rescales to
    /// the unit constraint and fixes the sign.
    pub fn from_coefficients(
        blocks: &[VariableBlock],
        coefs: Vec<BlockCoef>,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        check_coefs(blocks, &coefs)?;
        let n = blocks[0].n() as f64;
        let mut parts: Vec<BlockTransform> = blocks
            .iter()
            .zip(coefs)
            .map(|(b, coef)| {
                let gb = b.gram.matrix() * &coef.beta;
                let penalty = b.alpha * coef.beta.dot(&gb);
                let phi = gb + b.null.as_ref() * &coef.d;
                let var = phi.norm_squared() / n;
                BlockTransform {
                    coef,
                    phi,
                    var,
                    penalty,
                }
            })
            .collect();
        let total: f64 = parts.iter().map(|t| t.var + t.penalty).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(ApcError::DegenerateStart);
        }
        let scale = total.sqrt().recip();
        let sign = sign_of_largest(parts.iter().map(|t| &t.phi));
        let s = scale * sign;
        for t in &mut parts {
            t.coef.beta *= s;
            t.coef.d *= s;
            t.phi *= s;
            t.var *= scale * scale;
            t.penalty *= scale * scale;
        }
        let (eigenvalue, raw_eigenvalue) = quotients(parts.iter().map(|t| (&t.phi, t.penalty)), n);
        Ok(Self {
            blocks: parts,
            eigenvalue,
            raw_eigenvalue,
            diagnostics,
        })
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    pub fn coefficients(&self) -> Vec<BlockCoef> {
        self.blocks.iter().map(|t| t.coef.clone()).collect()
    }

    /// `var_j / sum_i var_i`.
    pub fn variance_shares(&self) -> Vec<f64> {
        let total: f64 = self.blocks.iter().map(|t| t.var).sum();
        self.blocks.iter().map(|t| t.var / total).collect()
    }

    /// `sum_j (var_j + penalty_j)`; one for every returned component.
    pub fn constraint(&self) -> f64 {
        self.blocks.iter().map(|t| t.var + t.penalty).sum()
    }
}

/// Sign making the largest-magnitude entry across all blocks positive.
fn sign_of_largest<'a>(phis: impl Iterator<Item = &'a DVector<f64>>) -> f64 {
    let mut best = 0.0f64;
    for phi in phis {
        for &v in phi.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// (penalized, raw) Rayleigh quotients from transform values and penalties.
fn quotients<'a>(parts: impl Iterator<Item = (&'a DVector<f64>, f64)>, n: f64) -> (f64, f64) {
    let mut sum: Option<DVector<f64>> = None;
    let (mut var_sum, mut pen_sum) = (0.0, 0.0);
    for (phi, pen) in parts {
        var_sum += phi.norm_squared() / n;
        pen_sum += pen;
        match &mut sum {
            Some(s) => *s += phi,
            None => sum = Some(phi.clone()),
        }
    }
    let var_total = sum.map_or(0.0, |s| s.norm_squared() / n);
    ((var_total + pen_sum) / (var_sum + pen_sum), var_total / var_sum)
}

fn check_coefs(blocks: &[VariableBlock], coefs: &[BlockCoef]) -> Result<()> {
    if coefs.len() != blocks.len() {
        return Err(ApcError::DimensionMismatch {
            expected: blocks.len(),
            found: coefs.len(),
        });
    }
    for (b, c) in blocks.iter().zip(coefs) {
        if c.beta.len() != b.n() {
            return Err(ApcError::DimensionMismatch {
                expected: b.n(),
                found: c.beta.len(),
            });
        }
        if c.d.len() != b.null_dim() {
            return Err(ApcError::DimensionMismatch {
                expected: b.null_dim(),
                found: c.d.len(),
            });
        }
    }
    Ok(())
}

/// Star inner product of two coefficient sets on the same blocks.
pub fn star_inner_product(blocks: &[VariableBlock], a: &[BlockCoef], b: &[BlockCoef]) -> Result<f64> {
    check_coefs(blocks, a)?;
    check_coefs(blocks, b)?;
    let mut total = 0.0;
    for ((blk, ca), cb) in blocks.iter().zip(a).zip(b) {
        let n = blk.n() as f64;
        let g = blk.gram.matrix();
        let gb = g * &cb.beta;
        let phi_a = g * &ca.beta + blk.null.as_ref() * &ca.d;
        let phi_b = &gb + blk.null.as_ref() * &cb.d;
        total += phi_a.dot(&phi_b) / n + blk.alpha * ca.beta.dot(&gb);
    }
    Ok(total)
}

/// `(Var sum phi + sum J) / (sum Var phi + sum J)` for arbitrary coefficients.
pub fn penalized_rayleigh(problem: &ApcProblem, coefs: &[BlockCoef]) -> Result<f64> {
    let blocks = problem.blocks();
    check_coefs(blocks, coefs)?;
    let n = problem.n() as f64;
    let parts: Vec<(DVector<f64>, f64)> = blocks
        .iter()
        .zip(coefs)
        .map(|(b, c)| {
            let gb = b.gram.matrix() * &c.beta;
            let pen = b.alpha * c.beta.dot(&gb);
            (gb + b.null.as_ref() * &c.d, pen)
        })
        .collect();
    let denom: f64 = parts.iter().map(|(phi, pen)| phi.norm_squared() / n + pen).sum();
    if !(denom > 0.0) {
        return Err(ApcError::DegenerateProblem(
            "Rayleigh quotient has zero denominator".into(),
        ));
    }
    Ok(quotients(parts.iter().map(|(phi, pen)| (phi, *pen)), n).0)
}

// ---------------------------------------------------------------------------
// spectral-coordinate machinery

#[derive(Debug, Clone)]
struct SpecCoef {
    b: DVector<f64>,
    d: DVector<f64>,
    phi: DVector<f64>,
}

struct Engine<'a> {
    blocks: &'a [VariableBlock],
    smoothers: Vec<SpectralSmoother>,
    gamma: f64,
    n: f64,
}

impl<'a> Engine<'a> {
    fn new(problem: &'a ApcProblem) -> Result<Self> {
        let blocks = problem.blocks();
        if blocks.iter().all(|b| b.is_degenerate()) {
            return Err(ApcError::DegenerateProblem(
                "every Gram matrix is zero and no null space is present".into(),
            ));
        }
        let smoothers = blocks
            .iter()
            .map(|b| SpectralSmoother::new(&b.spectrum, &b.null, b.alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            smoothers,
            gamma: problem.gamma,
            n: problem.n() as f64,
        })
    }

    fn phi(&self, j: usize, b: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let blk = &self.blocks[j];
        let spec = &blk.spectrum;
        let mut phi = spec.vectors() * b.component_mul(spec.values());
        if !d.is_empty() {
            phi += blk.null.as_ref() * d;
        }
        phi
    }

    fn penalty(&self, j: usize, b: &DVector<f64>) -> f64 {
        let blk = &self.blocks[j];
        blk.alpha
            * b.iter()
                .zip(blk.spectrum.values().iter())
                .map(|(x, l)| l * x * x)
                .sum::<f64>()
    }

    fn to_spectral(&self, coefs: &[BlockCoef]) -> Vec<SpecCoef> {
        coefs
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let b = self.blocks[j].spectrum.vectors().transpose() * &c.beta;
                let phi = self.phi(j, &b, &c.d);
                SpecCoef { b, d: c.d.clone(), phi }
            })
            .collect()
    }

    fn to_beta(&self, state: &[SpecCoef]) -> Vec<BlockCoef> {
        state
            .iter()
            .enumerate()
            .map(|(j, s)| BlockCoef {
                beta: self.blocks[j].spectrum.vectors() * &s.b,
                d: s.d.clone(),
            })
            .collect()
    }

    fn star(&self, x: &[SpecCoef], y: &[SpecCoef]) -> f64 {
        let mut total = 0.0;
        for (j, (a, b)) in x.iter().zip(y).enumerate() {
            let blk = &self.blocks[j];
            let pen: f64 =
                a.b.iter()
                    .zip(b.b.iter())
                    .zip(blk.spectrum.values().iter())
                    .map(|((u, v), l)| l * u * v)
                    .sum();
            total += a.phi.dot(&b.phi) / self.n + blk.alpha * pen;
        }
        total
    }

    fn scale(state: &mut [SpecCoef], s: f64) {
        for c in state.iter_mut() {
            c.b *= s;
            c.d *= s;
            c.phi *= s;
        }
    }

    fn normalize(&self, state: &mut [SpecCoef]) -> Result<()> {
        let norm2 = self.star(state, state);
        if !(norm2 > 0.0) || !norm2.is_finite() {
            return Err(ApcError::DegenerateStart);
        }
        Self::scale(state, norm2.sqrt().recip());
        Ok(())
    }

    /// Removes the star projections onto (orthonormal) prior components.
    fn orthogonalize(&self, state: &mut [SpecCoef], priors: &[Vec<SpecCoef>]) {
        // two passes keep the result orthogonal to working precision
        for _ in 0..2 {
            for prior in priors {
                let proj = self.star(state, prior);
                for (c, p) in state.iter_mut().zip(prior) {
                    c.b.axpy(-proj, &p.b, 1.0);
                    c.d.axpy(-proj, &p.d, 1.0);
                    c.phi.axpy(-proj, &p.phi, 1.0);
                }
            }
        }
    }

    /// One Jacobi sweep of `gamma I - S~` (no normalization).
    fn sweep(&self, state: &[SpecCoef]) -> Vec<SpecCoef> {
        let mut total = state[0].phi.clone();
        for c in &state[1..] {
            total += &c.phi;
        }
        let g1 = self.gamma - 1.0;
        state
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let blk = &self.blocks[j];
                let mut y = &total - &c.phi;
                let m = y.mean();
                y.add_scalar_mut(-m);
                let ut_y = blk.spectrum.vectors().transpose() * &y;
                let qt_y = if blk.null_dim() > 0 {
                    blk.null.transpose() * &y
                } else {
                    DVector::zeros(0)
                };
                let (bc, dc) = self.smoothers[j].fit_projected(&ut_y, &qt_y);
                let b = &c.b * g1 - bc;
                let d = &c.d * g1 - dc;
                let phi = self.phi(j, &b, &d);
                SpecCoef { b, d, phi }
            })
            .collect()
    }

    /// Penalized Rayleigh quotient of a (not necessarily normalized) state.
    fn rayleigh(&self, state: &[SpecCoef]) -> f64 {
        let parts: Vec<f64> = state.iter().enumerate().map(|(j, c)| self.penalty(j, &c.b)).collect();
        quotients(state.iter().zip(parts).map(|(c, p)| (&c.phi, p)), self.n).0
    }

    fn random_start(&self, rng: &mut ChaCha8Rng) -> Vec<SpecCoef> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(j, blk)| {
                let n = blk.n();
                let mut beta: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                let m = beta.mean();
                beta.add_scalar_mut(-m);
                let d: DVector<f64> = DVector::from_fn(blk.null_dim(), |_, _| StandardNormal.sample(rng));
                let b = blk.spectrum.vectors().transpose() * &beta;
                let phi = self.phi(j, &b, &d);
                SpecCoef { b, d, phi }
            })
            .collect()
    }
}

struct RunOutcome {
    state: Vec<SpecCoef>,
    criterion: f64,
    diagnostics: Diagnostics,
}

fn run_iteration(
    engine: &Engine,
    mut state: Vec<SpecCoef>,
    priors: &[Vec<SpecCoef>],
    config: &SolverConfig,
) -> Result<RunOutcome> {
    engine.orthogonalize(&mut state, priors);
    engine.normalize(&mut state)?;
    let mut crit = engine.rayleigh(&state);
    let mut trace = config.record_trace.then(|| vec![crit]);
    let mut changes: Vec<f64> = Vec::new();
    let mut diag = Diagnostics::default();
    let mut last_change = f64::INFINITY;
    for it in 1..=config.max_iter {
        let mut next = engine.sweep(&state);
        engine.orthogonalize(&mut next, priors);
        engine.normalize(&mut next)?;
        let new_crit = engine.rayleigh(&next);
        let delta = (new_crit - crit).abs();
        last_change = delta / crit.abs().max(1e-300);
        changes.push(delta);
        if changes.len() > 3 {
            changes.remove(0);
        }
        state = next;
        crit = new_crit;
        if let Some(t) = trace.as_mut() {
            t.push(crit);
        }
        diag.iterations = it;
        if last_change < config.tol {
            diag.converged = true;
            break;
        }
    }
    diag.final_change = last_change;
    diag.trace = trace;
    // criterion changes decay like (mu_2 / mu_1)^2 per step, mu = gamma - eigenvalue
    if changes.len() >= 3 && changes[1] > 0.0 && changes[2] > 0.0 {
        let ratio = (changes[2] / changes[1]).min(1.0);
        let gap = (engine.gamma - crit) * (1.0 - ratio.sqrt());
        diag.estimated_gap = Some(gap);
        diag.near_tie = gap < 1e-6;
    }
    Ok(RunOutcome {
        state,
        criterion: crit,
        diagnostics: diag,
    })
}

/// One normalized power step: a sweep of `gamma I - S~` followed by rescaling
/// to the unit constraint.
pub fn power_step(problem: &ApcProblem, coefs: &[BlockCoef]) -> Result<Vec<BlockCoef>> {
    check_coefs(problem.blocks(), coefs)?;
    let engine = Engine::new(problem)?;
    let state = engine.to_spectral(coefs);
    let mut next = engine.sweep(&state);
    engine.normalize(&mut next)?;
    Ok(engine.to_beta(&next))
}

/// Computes the next smallest component, star-orthogonal to `prior`.
///
/// `prior` must be star-orthonormal components of the same problem (as
/// returned by earlier calls). The random start for component `k` draws from
/// stream `k` of the configured seed.
pub fn solve_power(problem: &ApcProblem, prior: &[ApcComponent]) -> Result<ApcComponent> {
    let engine = Engine::new(problem)?;
    let config = problem.config();
    let priors: Vec<Vec<SpecCoef>> = prior.iter().map(|c| engine.to_spectral(&c.coefficients())).collect();
    let stream = prior.len() as u64;

    let start = |restart: u64| -> Result<Vec<SpecCoef>> {
        match (&config.init, restart) {
            (Init::Supplied(coefs), 0) => {
                check_coefs(problem.blocks(), coefs)?;
                Ok(engine.to_spectral(coefs))
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(2 * stream + restart);
                Ok(engine.random_start(&mut rng))
            }
        }
    };

    let mut best = run_iteration(&engine, start(0)?, &priors, config)?;
    if !best.diagnostics.converged {
        let second = run_iteration(&engine, start(1)?, &priors, config)?;
        let iterations = best.diagnostics.iterations + second.diagnostics.iterations;
        if second.criterion < best.criterion {
            best = second;
        }
        best.diagnostics.restarts = 1;
        best.diagnostics.iterations = iterations;
    }
    let coefs = engine.to_beta(&best.state);
    ApcComponent::from_coefficients(problem.blocks(), coefs, best.diagnostics)
}

/// Computes `config.n_components` components by repeated deflation.
pub fn solve_components(problem: &ApcProblem) -> Result<Vec<ApcComponent>> {
    let mut out: Vec<ApcComponent> = Vec::with_capacity(problem.config().n_components);
    for _ in 0..problem.config().n_components {
        let comp = solve_power(problem, &out)?;
        out.push(comp);
    }
    Ok(out)
}

/// Solves with the configured solver. The direct solver ignores `tol`,
/// `max_iter`, `seed` and `init`.
pub fn solve(problem: &ApcProblem) -> Result<Vec<ApcComponent>> {
    match problem.config().solver {
        SolverKind::Power => solve_components(problem),
        SolverKind::Direct => {
            let sol = crate::direct::solve_direct_blocks(problem.blocks(), problem.config().n_components)?;
            if sol.degenerate {
                return Err(ApcError::DegenerateProblem("every Gram matrix is zero".into()));
            }
            Ok(sol.components)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian_blocks(p: usize, n: usize, alpha: f64, seed: u64) -> Vec<VariableBlock> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        (0..p)
            .map(|j| {
                let xs: Vec<f64> = base
                    .iter()
                    .map(|&b| {
                        if j == 0 {
                            b
                        } else {
                            b * (j as f64) + 0.3 * rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect();
                VariableBlock::from_values(&KernelSpec::gaussian(1.0).unwrap(), &xs, alpha).unwrap()
            })
            .collect()
    }

    fn random_coefs(blocks: &[VariableBlock], rng: &mut ChaCha8Rng) -> Vec<BlockCoef> {
        blocks
            .iter()
            .map(|b| BlockCoef {
                beta: DVector::from_fn(b.n(), |_, _| rng.random_range(-1.0..1.0)),
                d: DVector::from_fn(b.null_dim(), |_, _| rng.random_range(-1.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn star_product_examples() {
        let blocks = gaussian_blocks(3, 15, 0.01, 1);
        let zero: Vec<BlockCoef> = blocks.iter().map(|b| BlockCoef::zeros(b.n(), 0)).collect();
        assert_eq!(star_inner_product(&blocks, &zero, &zero).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut single = zero.clone();
        single[0].beta = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
        let g = blocks[0].gram().matrix();
        let phi = g * &single[0].beta;
        let want = phi.norm_squared() / 15.0 + 0.01 * single[0].beta.dot(&phi);
        let got = star_inner_product(&blocks, &single, &single).unwrap();
        assert!((got - want).abs() < 1e-14 * want.max(1.0));
    }

    #[test]
    fn star_product_bilinear() {
        let blocks = gaussian_blocks(3, 15, 0.05, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (x, y, z) = (
                random_coefs(&blocks, &mut rng),
                random_coefs(&blocks, &mut rng),
                random_coefs(&blocks, &mut rng),
            );
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let combo: Vec<BlockCoef> = x
                .iter()
                .zip(&y)
                .map(|(u, v)| BlockCoef {
                    beta: &u.beta * a + &v.beta * b,
                    d: &u.d * a + &v.d * b,
                })
                .collect();
            let lhs = star_inner_product(&blocks, &combo, &z).unwrap();
            let rhs =
                a * star_inner_product(&blocks, &x, &z).unwrap() + b * star_inner_product(&blocks, &y, &z).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
            let sym = star_inner_product(&blocks, &z, &combo).unwrap();
            assert!((lhs - sym).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn rayleigh_examples() {
        let blocks = gaussian_blocks(3, 20, 0.01, 5);
        let problem = ApcProblem::new(blocks.clone(), SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut single: Vec<BlockCoef> = blocks.iter().map(|b| BlockCoef::zeros(b.n(), 0)).collect();
        single[1].beta = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(penalized_rayleigh(&problem, &single).unwrap(), 1.0);
        for _ in 0..50 {
            let c = random_coefs(&blocks, &mut rng);
            let r = penalized_rayleigh(&problem, &c).unwrap();
            assert!((0.0..=3.0 + 1e-10).contains(&r));
        }
        let zero: Vec<BlockCoef> = blocks.iter().map(|b| BlockCoef::zeros(b.n(), 0)).collect();
        assert!(penalized_rayleigh(&problem, &zero).is_err());
    }

    #[test]
    fn cancelling_pair_has_vanishing_quotient() {
        let xs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let mut prev = f64::INFINITY;
        for alpha in [1e-2, 1e-5, 1e-8, 1e-11] {
            let b = VariableBlock::from_values(&spec, &xs, alpha).unwrap();
            let problem = ApcProblem::new(vec![b.clone(), b], SolverConfig::default()).unwrap();
            let beta = DVector::from_fn(20, |i, _| (i as f64 * 1.3).cos());
            let coefs = vec![
                BlockCoef {
                    beta: beta.clone(),
                    d: DVector::zeros(0),
                },
                BlockCoef {
                    beta: -beta,
                    d: DVector::zeros(0),
                },
            ];
            let r = penalized_rayleigh(&problem, &coefs).unwrap();
            assert!(r < prev);
            prev = r;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn zero_start_is_degenerate() {
        let blocks = gaussian_blocks(2, 12, 0.01, 7);
        let zero: Vec<BlockCoef> = blocks.iter().map(|b| BlockCoef::zeros(b.n(), 0)).collect();
        let config = SolverConfig {
            init: Init::Supplied(zero.clone()),
            ..Default::default()
        };
        let problem = ApcProblem::new(blocks, config).unwrap();
        assert!(matches!(power_step(&problem, &zero), Err(ApcError::DegenerateStart)));
        assert!(matches!(solve_power(&problem, &[]), Err(ApcError::DegenerateStart)));
    }

    #[test]
    fn antisymmetry_preserved() {
        let xs: Vec<f64> = (0..18).map(|i| (i as f64 * 0.71).cos() * 2.0).collect();
        let b = VariableBlock::from_values(&KernelSpec::gaussian(1.0).unwrap(), &xs, 0.01).unwrap();
        let problem = ApcProblem::new(vec![b.clone(), b], SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let beta = DVector::from_fn(18, |_, _| rng.random_range(-1.0..1.0));
        let start = vec![
            BlockCoef {
                beta: beta.clone(),
                d: DVector::zeros(0),
            },
            BlockCoef {
                beta: -beta,
                d: DVector::zeros(0),
            },
        ];
        let next = power_step(&problem, &start).unwrap();
        let scale = next[0].beta.amax();
        assert!((&next[0].beta + &next[1].beta).amax() < 1e-10 * scale.max(1.0));
    }

    #[test]
    fn problem_validation() {
        let blocks = gaussian_blocks(2, 10, 0.01, 9);
        assert!(ApcProblem::new(blocks[..1].to_vec(), SolverConfig::default()).is_err());
        let bad = SolverConfig {
            tol: 0.0,
            ..Default::default()
        };
        assert!(ApcProblem::new(blocks.clone(), bad).is_err());
        let other = gaussian_blocks(1, 11, 0.01, 9).remove(0);
        assert!(matches!(
            ApcProblem::new(vec![blocks[0].clone(), other], SolverConfig::default()),
            Err(ApcError::DimensionMismatch { .. })
        ));
        let g = center_gram(&DMatrix::from_element(4, 4, 1.0)).unwrap();
        let zero = VariableBlock::from_gram(g, DMatrix::zeros(4, 0), 0.1).unwrap();
        let problem = ApcProblem::new(vec![zero.clone(), zero], SolverConfig::default()).unwrap();
        assert!(matches!(
            solve_power(&problem, &[]),
            Err(ApcError::DegenerateProblem(_))
        ));
    }

    #[test]
    fn criterion_trace_is_monotone() {
        for seed in 0..5 {
            let blocks = gaussian_blocks(3, 30, 1e-3, 100 + seed);
            let config = SolverConfig {
                record_trace: true,
                seed,
                ..Default::default()
            };
            let problem = ApcProblem::new(blocks, config).unwrap();
            let comp = solve_power(&problem, &[]).unwrap();
            let trace = comp.diagnostics.trace.unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "criterion rose: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn components_are_star_orthonormal() {
        let blocks = gaussian_blocks(3, 25, 1e-2, 11);
        let config = SolverConfig {
            n_components: 3,
            tol: 1e-12,
            ..Default::default()
        };
        let problem = ApcProblem::new(blocks.clone(), config).unwrap();
        let comps = solve_components(&problem).unwrap();
        for (a, ca) in comps.iter().enumerate() {
            assert!((ca.constraint() - 1.0).abs() < 1e-8);
            for (b, cb) in comps.iter().enumerate() {
                let ip = star_inner_product(&blocks, &ca.coefficients(), &cb.coefficients()).unwrap();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-6, "({a},{b}) = {ip}");
            }
        }
        assert!(comps[0].eigenvalue <= comps[1].eigenvalue + 1e-8);
        assert!(comps[1].eigenvalue <= comps[2].eigenvalue + 1e-8);
    }

    #[test]
    fn sobolev_blocks_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x1: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let x2: Vec<f64> = x1.iter().map(|&x| x * x + 0.02 * rng.random_range(-1.0..1.0)).collect();
        let spec = KernelSpec::sobolev(2).unwrap();
        let blocks = vec![
            VariableBlock::from_values(&spec, &x1, 1e-4).unwrap(),
            VariableBlock::from_values(&spec, &x2, 1e-4).unwrap(),
        ];
        let problem = ApcProblem::new(blocks, SolverConfig::default()).unwrap();
        let comp = solve_power(&problem, &[]).unwrap();
        assert!(comp.diagnostics.converged);
        assert!(comp.eigenvalue < 0.05, "eigenvalue {}", comp.eigenvalue);
        assert!((comp.constraint() - 1.0).abs() < 1e-10);
        for t in &comp.blocks {
            assert_eq!(t.coef.d.len(), 1);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let blocks = gaussian_blocks(3, 20, 1e-2, 13);
        let problem = ApcProblem::new(
            blocks,
            SolverConfig {
                seed: 77,
                ..Default::default()
            },
        )
        .unwrap();
        let a = solve_power(&problem, &[]).unwrap();
        let b = solve_power(&problem, &[]).unwrap();
        for (x, y) in a.blocks.iter().zip(&b.blocks) {
            assert_eq!(x.phi, y.phi);
        }
    }
}
