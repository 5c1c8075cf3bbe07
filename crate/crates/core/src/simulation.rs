//! Four-variable simulated example with known additive principal components.
//!
//! Latent normals `Y1 = W1 + Z1`, `Y2 = W2 + Z2`, `Y3 = W1 + W2 + Z3`,
//! `Y4 = Z4` (`W ~ N(0, 1)`, `Z ~ N(0, 0.1^2)`) are observed through
//! `X1 = exp(Y1)`, `X2 = -cbrt(Y2)`, `X3 = logistic(Y3)`, `X4 = Y4`, so the
//! smallest component is linear in the `Y`s and its transforms are `log`,
//! `-x^3`, `logit` and zero.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{ApcError, Result};
use crate::model::ApcModel;

pub const NOISE_SD: f64 = 0.1;
pub const P: usize = 4;

#[derive(Debug, Clone)]
pub struct SimulationSample {
    /// Observed variables, `n x 4`.
    pub x: DMatrix<f64>,
    /// Latent normals, `n x 4`.
    pub y: DMatrix<f64>,
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Maps a latent value to its observed value.
pub fn observe(j: usize, y: f64) -> f64 {
    match j {
        0 => y.exp(),
        1 => -y.cbrt(),
        2 => logistic(y),
        3 => y,
        _ => panic!("simulation has four variables, got index {j}"),
    }
}

/// Inverse of [`observe`]: the latent value behind an observation.
pub fn latent(j: usize, x: f64) -> f64 {
    match j {
        0 => x.ln(),
        1 => -x * x * x,
        2 => (x / (1.0 - x)).ln(),
        3 => x,
        _ => panic!("simulation has four variables, got index {j}"),
    }
}

pub fn generate_simulation(n: usize, seed: u64) -> Result<SimulationSample> {
    if n < 2 {
        return Err(ApcError::InvalidArgument(format!("simulation needs n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SD).expect("valid noise sd");
    let mut y = DMatrix::zeros(n, P);
    for i in 0..n {
        let w1: f64 = StandardNormal.sample(&mut rng);
        let w2: f64 = StandardNormal.sample(&mut rng);
        let z: [f64; 4] = std::array::from_fn(|_| noise.sample(&mut rng));
        y[(i, 0)] = w1 + z[0];
        y[(i, 1)] = w2 + z[1];
        y[(i, 2)] = w1 + w2 + z[2];
        y[(i, 3)] = z[3];
    }
    let x = DMatrix::from_fn(n, P, |i, j| observe(j, y[(i, j)]));
    Ok(SimulationSample { x, y })
}

/// Exact covariance of the latent normals.
pub fn population_covariance() -> DMatrix<f64> {
    let s2 = NOISE_SD * NOISE_SD;
    let mut c = DMatrix::zeros(P, P);
    c[(0, 0)] = 1.0 + s2;
    c[(1, 1)] = 1.0 + s2;
    c[(2, 2)] = 2.0 + s2;
    c[(3, 3)] = s2;
    for j in 0..2 {
        c[(j, 2)] = 1.0;
        c[(2, j)] = 1.0;
    }
    c
}

#[derive(Debug, Clone)]
pub struct SimulationTruth {
    pub population_corr: DMatrix<f64>,
    pub smallest_eigenvalue: f64,
    /// Unit eigenvector for the smallest eigenvalue, largest-magnitude entry
    /// positive.
    pub eigenvector: [f64; 4],
    /// Population variances of the true transforms (squared eigenvector).
    pub component_variances: [f64; 4],
    /// `c_j` such that `phi_j*(x) = c_j * latent(j, x)`.
    pub transform_scales: [f64; 4],
}

pub fn population_correlation_eigen() -> SimulationTruth {
    let cov = population_covariance();
    let sd: Vec<f64> = (0..P).map(|j| cov[(j, j)].sqrt()).collect();
    let corr = DMatrix::from_fn(P, P, |i, j| if i == j { 1.0 } else { cov[(i, j)] / (sd[i] * sd[j]) });
    let eig = SymmetricEigen::new(corr.clone());
    let k = eig.eigenvalues.imin();
    let mut v: [f64; 4] = std::array::from_fn(|j| eig.eigenvectors[(j, k)]);
    let lead = (0..P).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    SimulationTruth {
        population_corr: corr,
        smallest_eigenvalue: eig.eigenvalues[k],
        eigenvector: v,
        component_variances: std::array::from_fn(|j| v[j] * v[j]),
        transform_scales: std::array::from_fn(|j| v[j] / sd[j]),
    }
}

/// True transform of variable `j`, scaled to its population variance share.
pub fn true_transform(truth: &SimulationTruth, j: usize, x: f64) -> f64 {
    if truth.transform_scales[j] == 0.0 {
        return 0.0;
    }
    truth.transform_scales[j] * latent(j, x)
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// `Var[a - b]` over paired values; additive constants drop out.
pub fn difference_variance(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    sample_variance(&d)
}

/// Signed factor mapping a fitted component onto the scale of the truth:
/// unit total variance at the training points, sign chosen so the
/// transforms covary positively with the true ones overall.
pub fn alignment_factor(model: &ApcModel, comp: usize, truth: &SimulationTruth) -> Result<f64> {
    if model.p() != P {
        return Err(ApcError::DimensionMismatch {
            expected: P,
            found: model.p(),
        });
    }
    let c = model
        .components
        .get(comp)
        .ok_or_else(|| ApcError::InvalidArgument(format!("model has no component {}", comp + 1)))?;
    let total_var: f64 = c.blocks.iter().map(|b| b.var).sum();
    if total_var <= 0.0 {
        return Err(ApcError::DegenerateProblem("component has zero variance".into()));
    }
    let mut cov = 0.0;
    for (j, var) in model.variables.iter().enumerate() {
        let xs = var.training_values.as_ref().ok_or(ApcError::OutOfSampleUnsupported)?;
        let star: Vec<f64> = xs.iter().map(|&x| true_transform(truth, j, x)).collect();
        let mean = star.iter().sum::<f64>() / star.len() as f64;
        cov += c.blocks[j]
            .phi
            .iter()
            .zip(&star)
            .map(|(p, s)| p * (s - mean))
            .sum::<f64>();
    }
    let sign = if cov < 0.0 { -1.0 } else { 1.0 };
    Ok(sign / total_var.sqrt())
}

/// `Var[phi_hat_j(X_j) - phi_j*(X_j)]` for every variable, estimated on
/// `n_eval` fresh draws from `seed`.
pub fn estimation_errors(model: &ApcModel, comp: usize, n_eval: usize, seed: u64) -> Result<Vec<f64>> {
    let truth = population_correlation_eigen();
    let s = alignment_factor(model, comp, &truth)?;
    let fresh = generate_simulation(n_eval, seed)?;
    let fitted = model.evaluate(comp, &fresh.x)?;
    Ok((0..P)
        .map(|j| {
            let a: Vec<f64> = fitted.column(j).iter().map(|v| s * v).collect();
            let b: Vec<f64> = fresh
                .x
                .column(j)
                .iter()
                .map(|&x| true_transform(&truth, j, x))
                .collect();
            difference_variance(&a, &b)
        })
        .collect())
}

pub fn estimation_error(model: &ApcModel, comp: usize, j: usize, n_eval: usize, seed: u64) -> Result<f64> {
    if j >= P {
        return Err(ApcError::InvalidArgument(format!("variable index {j} out of range")));
    }
    Ok(estimation_errors(model, comp, n_eval, seed)?[j])
}
