//! Penalty selection and variable standardization.
//!
//! Cross-validation fits the smallest component on the training rows of each
//! fold and scores it by the unpenalized variance ratio of the transforms
//! evaluated on the holdout rows,
//!
//! ```text
//! CV(alpha) = mean over folds of  Var(sum_j phi_j) / sum_j Var(phi_j)
//! ```
//!
//! with holdout sample variances (denominator `n_holdout - 1`, which cancels).
//! A single common `alpha` is used for every variable.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};
use crate::gram::CenteredGram;
use crate::kernels::{cross_kernel_matrix, cross_null_space, kernel_matrix, KernelSpec};
use crate::power::{solve, ApcProblem, SolverConfig, VariableBlock};
use crate::smoother::{degrees_of_freedom, hat_matrix, transform_from_cross_kernel, DfKind};

/// Per-column centering and scaling (sample standard deviation, `n - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, j: usize, x: f64) -> f64 {
        (x - self.means[j]) / self.scales[j]
    }

    pub fn invert(&self, j: usize, z: f64) -> f64 {
        z * self.scales[j] + self.means[j]
    }

    pub fn apply_matrix(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.ncols() != self.means.len() {
            return Err(ApcError::DimensionMismatch {
                expected: self.means.len(),
                found: data.ncols(),
            });
        }
        Ok(DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            self.apply(j, data[(i, j)])
        }))
    }
}

/// Standardizes every column to mean 0 and sample variance 1.
pub fn standardize(data: &DMatrix<f64>) -> Result<(DMatrix<f64>, Standardization)> {
    let (n, p) = data.shape();
    if n < 2 {
        return Err(ApcError::InvalidArgument(format!(
            "need at least 2 rows to standardize, got {n}"
        )));
    }
    let mut means = Vec::with_capacity(p);
    let mut scales = Vec::with_capacity(p);
    for j in 0..p {
        let col = data.column(j);
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(ApcError::NonFinite(i * p + j));
        }
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        if !(var > 0.0) {
            return Err(ApcError::InvalidArgument(format!("column {} has zero variance", j + 1)));
        }
        means.push(mean);
        scales.push(var.sqrt());
    }
    let rec = Standardization { means, scales };
    let out = rec.apply_matrix(data)?;
    Ok((out, rec))
}

/// `base^e` for `e = min_exp..=max_exp`.
pub fn geometric_grid(base: f64, min_exp: i32, max_exp: i32) -> Result<Vec<f64>> {
    if !(base > 0.0 && base.is_finite() && base != 1.0) || min_exp > max_exp {
        return Err(ApcError::InvalidArgument(format!(
            "invalid grid: base {base}, exponents {min_exp}..={max_exp}"
        )));
    }
    Ok((min_exp..=max_exp).map(|e| base.powi(e)).collect())
}

/// `1.5^-29, ..., 1.5^5` (35 values).
pub fn default_grid() -> Vec<f64> {
    geometric_grid(1.5, -29, 5).expect("valid grid")
}

/// Seeded shuffle split into `folds` contiguous, near-equal holdout sets.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(ApcError::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    if n < 2 * folds {
        return Err(ApcError::InvalidArgument(format!(
            "{n} rows are too few for {folds} folds (each holdout needs 2 rows)"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<f64>,
    /// Mean holdout ratio per grid value.
    pub cv_scores: Vec<f64>,
    /// `per_fold[f][g]`: holdout ratio of fold `f` at grid value `g`.
    pub per_fold: Vec<Vec<f64>>,
    pub selected_alpha: f64,
    pub selected_index: usize,
    pub folds: usize,
    pub seed: u64,
    /// Denominator used for holdout variances.
    pub variance_denominator: String,
}

/// Everything a fold needs that does not depend on `alpha`.
struct FoldData {
    blocks: Vec<VariableBlock>,
    k_train: Vec<DMatrix<f64>>,
    k_cross: Vec<DMatrix<f64>>,
    null_holdout: Vec<DMatrix<f64>>,
}

fn split(n: usize, holdout: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &h in holdout {
        mask[h] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

fn pointwise_fold(data: &DMatrix<f64>, specs: &[KernelSpec], holdout: &[usize]) -> Result<FoldData> {
    let train = split(data.nrows(), holdout);
    let mut fd = FoldData {
        blocks: Vec::new(),
        k_train: Vec::new(),
        k_cross: Vec::new(),
        null_holdout: Vec::new(),
    };
    for (j, spec) in specs.iter().enumerate() {
        if !spec.is_pointwise() {
            return Err(ApcError::OutOfSampleUnsupported);
        }
        let xt: Vec<f64> = train.iter().map(|&i| data[(i, j)]).collect();
        let xh: Vec<f64> = holdout.iter().map(|&i| data[(i, j)]).collect();
        let fitted = spec.fitted_to(&xt)?;
        // the alpha here is a placeholder replaced per grid value
        fd.blocks.push(VariableBlock::from_values(&fitted, &xt, 1.0)?);
        fd.k_train.push(kernel_matrix(&fitted, &xt)?);
        fd.k_cross.push(cross_kernel_matrix(&fitted, &xt, &xh)?);
        fd.null_holdout.push(cross_null_space(&fitted, &xt, &xh)?);
    }
    Ok(fd)
}

fn precomputed_fold(kernels: &[DMatrix<f64>], holdout: &[usize]) -> Result<FoldData> {
    let n = kernels[0].nrows();
    let train = split(n, holdout);
    let mut fd = FoldData {
        blocks: Vec::new(),
        k_train: Vec::new(),
        k_cross: Vec::new(),
        null_holdout: Vec::new(),
    };
    for k in kernels {
        let kt = k.select_rows(&train).select_columns(&train);
        let kc = k.select_rows(holdout).select_columns(&train);
        fd.blocks.push(VariableBlock::from_kernel_matrix(kt.clone(), 1.0)?);
        fd.k_train.push(kt);
        fd.k_cross.push(kc);
        fd.null_holdout.push(DMatrix::zeros(holdout.len(), 0));
    }
    Ok(fd)
}

/// Sample-variance ratio `Var(sum phi) / sum Var(phi)` over holdout rows.
fn holdout_ratio(phis: &[DVector<f64>]) -> f64 {
    fn var(v: &DVector<f64>) -> f64 {
        let m = v.mean();
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    }
    let mut total = phis[0].clone();
    for phi in &phis[1..] {
        total += phi;
    }
    let denom: f64 = phis.iter().map(var).sum();
    var(&total) / denom
}

fn fold_score(fd: &FoldData, alpha: f64, config: &SolverConfig) -> Result<f64> {
    let blocks = fd
        .blocks
        .iter()
        .map(|b| b.with_alpha(alpha))
        .collect::<Result<Vec<_>>>()?;
    let config = SolverConfig {
        n_components: 1,
        ..config.clone()
    };
    let problem = ApcProblem::new(blocks, config)?;
    let comp = solve(&problem)?.remove(0);
    let phis = comp
        .blocks
        .iter()
        .enumerate()
        .map(|(j, t)| {
            transform_from_cross_kernel(
                &fd.k_train[j],
                &fd.k_cross[j],
                &t.coef.beta,
                &fd.null_holdout[j],
                &t.coef.d,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(holdout_ratio(&phis))
}

/// Index of the smallest score; ties go to the smaller alpha.
pub fn select_index(grid: &[f64], scores: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let mut best = order[0];
    for &g in &order[1..] {
        if scores[g] < scores[best] {
            best = g;
        }
    }
    best
}

fn run_cv(folds_data: Vec<FoldData>, grid: &[f64], seed: u64, config: &SolverConfig) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(ApcError::InvalidArgument("empty penalty grid".into()));
    }
    let k = folds_data.len();
    let tasks: Vec<(usize, usize)> = (0..k).flat_map(|f| (0..grid.len()).map(move |g| (f, g))).collect();
    let scores: Vec<f64> = tasks
        .par_iter()
        .map(|&(f, g)| fold_score(&folds_data[f], grid[g], config))
        .collect::<Result<Vec<_>>>()?;
    let per_fold: Vec<Vec<f64>> = scores.chunks(grid.len()).map(|c| c.to_vec()).collect();
    let cv_scores: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|row| row[g]).sum::<f64>() / k as f64)
        .collect();
    let best = select_index(grid, &cv_scores);
    Ok(CvResult {
        grid: grid.to_vec(),
        cv_scores,
        per_fold,
        selected_alpha: grid[best],
        selected_index: best,
        folds: k,
        seed,
        variance_denominator: "n_holdout - 1".into(),
    })
}

/// k-fold cross-validation over a common penalty for pointwise kernels.
/// `data` holds one column per variable (already standardized if desired).
pub fn cross_validate(
    data: &DMatrix<f64>,
    specs: &[KernelSpec],
    grid: &[f64],
    folds: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<CvResult> {
    if specs.len() != data.ncols() {
        return Err(ApcError::DimensionMismatch {
            expected: data.ncols(),
            found: specs.len(),
        });
    }
    if let Some(&a) = grid.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(ApcError::InvalidPenalty(a));
    }
    let assignment = fold_assignment(data.nrows(), folds, seed)?;
    let folds_data = assignment
        .par_iter()
        .map(|holdout| pointwise_fold(data, specs, holdout))
        .collect::<Result<Vec<_>>>()?;
    run_cv(folds_data, grid, seed, config)
}

/// Cross-validation with full `n x n` precomputed kernel matrices: each fold
/// fits on the training submatrix and evaluates holdout transforms through
/// the holdout-by-training block.
pub fn cross_validate_precomputed(
    kernels: &[DMatrix<f64>],
    grid: &[f64],
    folds: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<CvResult> {
    if kernels.len() < 2 {
        return Err(ApcError::InvalidArgument(format!(
            "need at least two variables, got {}",
            kernels.len()
        )));
    }
    let n = kernels[0].nrows();
    let checked = kernels
        .iter()
        .map(|k| crate::gram::validate_kernel_matrix(k.clone(), n))
        .collect::<Result<Vec<_>>>()?;
    if let Some(&a) = grid.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(ApcError::InvalidPenalty(a));
    }
    let assignment = fold_assignment(n, folds, seed)?;
    let folds_data = assignment
        .par_iter()
        .map(|holdout| precomputed_fold(&checked, holdout))
        .collect::<Result<Vec<_>>>()?;
    run_cv(folds_data, grid, seed, config)
}

/// Search interval for [`calibrate_alpha_for_df`].
pub const DF_ALPHA_RANGE: (f64, f64) = (1e-10, 1e6);

/// Finds `alpha` with `|df(alpha) - target| <= 0.01` by bisection on
/// `log alpha`.
pub fn calibrate_alpha_for_df(gram: &CenteredGram, null: &DMatrix<f64>, target: f64, kind: DfKind) -> Result<f64> {
    let df = |alpha: f64| -> Result<f64> { Ok(degrees_of_freedom(&hat_matrix(gram, null, alpha)?, kind)) };
    let (lo_a, hi_a) = DF_ALPHA_RANGE;
    let (df_lo, df_hi) = (df(lo_a)?, df(hi_a)?);
    // df decreases in alpha
    if !(target <= df_lo + 0.01 && target >= df_hi - 0.01) {
        return Err(ApcError::DfTargetOutOfRange {
            target,
            low: df_hi,
            high: df_lo,
        });
    }
    if (df_lo - target).abs() <= 0.01 {
        return Ok(lo_a);
    }
    if (df_hi - target).abs() <= 0.01 {
        return Ok(hi_a);
    }
    let (mut a, mut b) = (lo_a.ln(), hi_a.ln());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let v = df(mid.exp())?;
        if (v - target).abs() <= 0.01 {
            return Ok(mid.exp());
        }
        if v > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Err(ApcError::DfTargetOutOfRange {
        target,
        low: df_hi,
        high: df_lo,
    })
}

/// Per-variable df target of the `p * df = n / 10` rule of thumb.
pub fn df_preset_target(n: usize, p: usize) -> f64 {
    n as f64 / (10.0 * p as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::center_gram;
    use crate::kernels::null_space_basis;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn standardize_examples() {
        let data = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let (z, rec) = standardize(&data).unwrap();
        assert_eq!(z.as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(rec.means, vec![2.0]);
        assert_eq!(rec.scales, vec![1.0]);
        assert_eq!(rec.invert(0, z[(2, 0)]), 3.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = DMatrix::from_fn(40, 3, |_, j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64);
        let (z, _) = standardize(&data).unwrap();
        let (zz, _) = standardize(&z).unwrap();
        assert!((&zz - &z).amax() < 1e-12);

        let flat = DMatrix::from_element(5, 1, 2.0);
        assert!(standardize(&flat).is_err());
    }

    #[test]
    fn standardization_transfers_to_fresh_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draw = |n: usize| {
            DMatrix::from_fn(n, 2, |_, j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                3.0 * z + 5.0 * j as f64
            })
        };
        let (_, rec) = standardize(&draw(2000)).unwrap();
        let fresh = rec.apply_matrix(&draw(20000)).unwrap();
        for j in 0..2 {
            let col = fresh.column(j);
            let m = col.mean();
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 19999.0;
            assert!((v - 1.0).abs() < 0.1, "variance {v}");
        }
    }

    #[test]
    fn grid_and_folds() {
        let grid = default_grid();
        assert_eq!(grid.len(), 35);
        assert_eq!(grid[0], 1.5f64.powi(-29));
        assert_eq!(grid[34], 1.5f64.powi(5));

        let folds = fold_assignment(23, 5, 9).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(folds, fold_assignment(23, 5, 9).unwrap());
        assert!(fold_assignment(9, 5, 0).is_err());
        assert!(fold_assignment(10, 1, 0).is_err());
    }

    fn related_data(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = DMatrix::zeros(n, 3);
        for i in 0..n {
            let a: f64 = rng.random_range(-1.5..1.5);
            let b: f64 = rng.random_range(-1.5..1.5);
            let e: f64 = StandardNormal.sample(&mut rng);
            data[(i, 0)] = a;
            data[(i, 1)] = b;
            data[(i, 2)] = a.powi(3) + b + 0.1 * e;
        }
        standardize(&data).unwrap().0
    }

    #[test]
    fn cv_scores_are_fold_means_and_deterministic() {
        let data = related_data(40, 3);
        let specs = vec![KernelSpec::gaussian(1.0).unwrap(); 3];
        let grid = geometric_grid(10.0, -4, 0).unwrap();
        let config = SolverConfig::default();
        let cv = cross_validate(&data, &specs, &grid, 4, 11, &config).unwrap();
        assert_eq!(cv.cv_scores.len(), 5);
        assert_eq!(cv.per_fold.len(), 4);
        for g in 0..5 {
            let mean = cv.per_fold.iter().map(|r| r[g]).sum::<f64>() / 4.0;
            assert_eq!(mean, cv.cv_scores[g]);
            assert!(cv.cv_scores[g] >= -1e-8 && cv.cv_scores[g] <= 3.0 + 1e-8);
        }
        let best = cv.cv_scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(cv.cv_scores[cv.selected_index], best);
        assert_eq!(cv.selected_alpha, grid[cv.selected_index]);
        let again = cross_validate(&data, &specs, &grid, 4, 11, &config).unwrap();
        assert_eq!(again.cv_scores, cv.cv_scores);
    }

    #[test]
    fn single_value_grid() {
        let data = related_data(20, 4);
        let specs = vec![KernelSpec::sobolev(2).unwrap(); 3];
        let cv = cross_validate(&data, &specs, &[0.01], 2, 0, &SolverConfig::default()).unwrap();
        assert_eq!(cv.selected_alpha, 0.01);
        assert_eq!(cv.cv_scores.len(), 1);
    }

    #[test]
    fn ties_pick_smaller_alpha() {
        let grid = [0.1, 0.01, 1.0, 10.0];
        assert_eq!(select_index(&grid, &[0.5, 0.2, 0.2, 0.3]), 1);
        assert_eq!(select_index(&grid, &[0.2, 0.5, 0.2, 0.3]), 0);
        assert_eq!(select_index(&[3.0], &[0.7]), 0);
    }

    #[test]
    fn precomputed_cv_matches_pointwise() {
        let data = related_data(30, 5);
        let specs = vec![KernelSpec::gaussian(1.0).unwrap(); 3];
        let kernels: Vec<DMatrix<f64>> = (0..3)
            .map(|j| {
                let xs: Vec<f64> = data.column(j).iter().copied().collect();
                kernel_matrix(&specs[j], &xs).unwrap()
            })
            .collect();
        let grid = [1e-3, 1e-1];
        let config = SolverConfig {
            tol: 1e-12,
            ..Default::default()
        };
        let a = cross_validate(&data, &specs, &grid, 3, 7, &config).unwrap();
        let b = cross_validate_precomputed(&kernels, &grid, 3, 7, &config).unwrap();
        for (x, y) in a.cv_scores.iter().zip(&b.cv_scores) {
            assert!((x - y).abs() < 1e-6 * x.max(1e-3), "{x} vs {y}");
        }
    }

    #[test]
    fn precomputed_requires_cross_blocks_only() {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats: Vec<DMatrix<f64>> = (0..2)
            .map(|_| DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let kernels: Vec<DMatrix<f64>> = feats
            .iter()
            .map(|f| crate::kernels::feature_gram_kernel(f).unwrap())
            .collect();
        let cv = cross_validate_precomputed(&kernels, &[0.01, 0.1], 3, 1, &SolverConfig::default()).unwrap();
        assert!(cv.cv_scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn holdout_ratio_single_block() {
        let phi = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.5]);
        let zero = DVector::zeros(4);
        assert!((holdout_ratio(&[phi.clone(), zero]) - 1.0).abs() < 1e-15);
        assert!(holdout_ratio(&[phi.clone(), -phi]).abs() < 1e-15);
    }

    #[test]
    fn calibration_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let spec = KernelSpec::sobolev(2).unwrap().fitted_to(&xs).unwrap();
        let g = center_gram(&kernel_matrix(&spec, &xs).unwrap()).unwrap();
        let q = null_space_basis(&spec, &xs).unwrap();
        for target in [1.05, 2.5, 6.25, 15.0] {
            let alpha = calibrate_alpha_for_df(&g, &q, target, DfKind::TrS).unwrap();
            let df = degrees_of_freedom(&hat_matrix(&g, &q, alpha).unwrap(), DfKind::TrS);
            assert!((df - target).abs() <= 0.01, "target {target} got {df}");
        }
        // df -> 1 (the linear null space) as alpha grows
        let big = degrees_of_freedom(&hat_matrix(&g, &q, 1e6).unwrap(), DfKind::TrS);
        assert!(big > 1.0 && big < 1.01);
        assert!(matches!(
            calibrate_alpha_for_df(&g, &q, 0.5, DfKind::TrS),
            Err(ApcError::DfTargetOutOfRange { .. })
        ));

        // Gaussian, well separated points: full interpolation at tiny alpha
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let spec = KernelSpec::gaussian(0.2).unwrap();
        let g = center_gram(&kernel_matrix(&spec, &xs).unwrap()).unwrap();
        let none = DMatrix::zeros(20, 0);
        // the centered Gram has rank n - 1
        let alpha = calibrate_alpha_for_df(&g, &none, 19.0 - 0.005, DfKind::TrS).unwrap();
        assert!(alpha < 1e-3, "alpha {alpha}");
        let for_kind = calibrate_alpha_for_df(&g, &none, 5.0, DfKind::Tr2SminusS2).unwrap();
        let df = degrees_of_freedom(&hat_matrix(&g, &none, for_kind).unwrap(), DfKind::Tr2SminusS2);
        assert!((df - 5.0).abs() <= 0.01);

        assert_eq!(df_preset_target(250, 4), 6.25);
    }

    #[test]
    fn cv_selects_reasonable_alpha_on_signal() {
        let data = related_data(60, 10);
        let specs = vec![KernelSpec::gaussian(1.0).unwrap(); 3];
        let grid = geometric_grid(10.0, -6, 2).unwrap();
        let cv = cross_validate(&data, &specs, &grid, 3, 2, &SolverConfig::default()).unwrap();
        // the relation is strong; the best holdout ratio is small
        assert!(cv.cv_scores[cv.selected_index] < 0.1, "{:?}", cv.cv_scores);
    }
}
