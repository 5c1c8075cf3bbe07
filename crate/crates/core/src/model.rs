//! Fitted-model document: the configuration, the variables (kernel, penalty,
//! training values, standardization) and the components, serializable to
//! JSON and usable for out-of-sample evaluation.
//!
//! Document layout (`format = "kapc-model/1"`):
//!
//! ```text
//! {
//!   "format": "kapc-model/1",
//!   "n": 250,
//!   "config": { "solver": "power", "tol": 1e-9, "max_iter": 10000, "seed": 0,
//!               "n_components": 1, "standardize": true,
//!               "penalty": { "method": "cross_validated", ... } },
//!   "variables": [ { "name": "x1", "kernel": { "kind": "gaussian", "bandwidth": 1.0 },
//!                    "alpha": 0.01, "training_values": [...],
//!                    "standardization": { "mean": 0.3, "scale": 1.2 } }, ... ],
//!   "components": [ { "eigenvalue": ..., "raw_eigenvalue": ..., "constraint": 1.0,
//!                     "variance_shares": [...], "diagnostics": {...},
//!                     "blocks": [ { "beta": [...], "d": [...], "phi": [...],
//!                                   "var": ..., "penalty": ... }, ... ] } ]
//! }
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};
use crate::kernels::{null_space_basis, KernelSpec};
use crate::model_selection::{
    calibrate_alpha_for_df, cross_validate, cross_validate_precomputed, standardize, CvResult, Standardization,
};
use crate::power::{solve, ApcComponent, ApcProblem, BlockCoef, Diagnostics, SolverConfig, SolverKind, VariableBlock};
use crate::smoother::{DfKind, TransformEvaluator};

pub const MODEL_FORMAT: &str = "kapc-model/1";

/// How penalties are chosen.
#[derive(Debug, Clone)]
pub enum PenaltyChoice {
    /// One value shared by every variable, or one per variable.
    Fixed(Vec<f64>),
    CrossValidate {
        grid: Vec<f64>,
        folds: usize,
        seed: u64,
    },
    /// Per-variable calibration to a degrees-of-freedom target.
    DfTarget {
        target: f64,
        kind: DfKind,
    },
}

#[derive(Debug, Clone)]
pub struct FitRequest {
    pub names: Vec<String>,
    pub specs: Vec<KernelSpec>,
    pub penalty: PenaltyChoice,
    pub standardize: bool,
    pub config: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PenaltyRecord {
    Fixed {
        alphas: Vec<f64>,
    },
    CrossValidated {
        grid: Vec<f64>,
        folds: usize,
        seed: u64,
        scores: Vec<f64>,
        selected: f64,
    },
    DfTarget {
        target: f64,
        kind: DfKind,
        alphas: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    /// Where the data came from, when fitted from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub solver: SolverKind,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub n_components: usize,
    pub standardize: bool,
    pub penalty: PenaltyRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableRecord {
    pub name: String,
    /// Kernel as fitted (Sobolev domains recorded).
    pub kernel: KernelSpec,
    pub alpha: f64,
    /// Raw training values; absent for precomputed kernels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<ColumnScale>,
}

impl VariableRecord {
    fn to_kernel_scale(&self, x: f64) -> f64 {
        match self.standardization {
            Some(s) => (x - s.mean) / s.scale,
            None => x,
        }
    }

    /// Training values on the scale the kernel saw.
    pub fn kernel_inputs(&self) -> Option<Vec<f64>> {
        self.training_values
            .as_ref()
            .map(|v| v.iter().map(|&x| self.to_kernel_scale(x)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub beta: Vec<f64>,
    pub d: Vec<f64>,
    pub phi: Vec<f64>,
    pub var: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub eigenvalue: f64,
    pub raw_eigenvalue: f64,
    pub constraint: f64,
    pub variance_shares: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub blocks: Vec<BlockRecord>,
}

impl ComponentRecord {
    fn from_component(c: &ApcComponent) -> Self {
        Self {
            eigenvalue: c.eigenvalue,
            raw_eigenvalue: c.raw_eigenvalue,
            constraint: c.constraint(),
            variance_shares: c.variance_shares(),
            diagnostics: c.diagnostics.clone(),
            blocks: c
                .blocks
                .iter()
                .map(|t| BlockRecord {
                    beta: t.coef.beta.iter().copied().collect(),
                    d: t.coef.d.iter().copied().collect(),
                    phi: t.phi.iter().copied().collect(),
                    var: t.var,
                    penalty: t.penalty,
                })
                .collect(),
        }
    }

    pub fn coef(&self, j: usize) -> BlockCoef {
        BlockCoef {
            beta: DVector::from_vec(self.blocks[j].beta.clone()),
            d: DVector::from_vec(self.blocks[j].d.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApcModel {
    pub format: String,
    pub n: usize,
    pub config: ConfigRecord,
    pub variables: Vec<VariableRecord>,
    pub components: Vec<ComponentRecord>,
}

/// Out-of-sample evaluator of one variable's transform on the raw scale.
#[derive(Debug, Clone)]
pub struct ModelTransform {
    scale: Option<ColumnScale>,
    inner: TransformEvaluator,
}

impl ModelTransform {
    pub fn eval(&self, x: f64) -> f64 {
        let z = match self.scale {
            Some(s) => (x - s.mean) / s.scale,
            None => x,
        };
        self.inner.eval(z)
    }
}

/// Points and transform values for one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub variable: String,
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ApcModel {
    pub fn p(&self) -> usize {
        self.variables.len()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| ApcError::InvalidArgument(format!("serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ApcModel = serde_json::from_str(text)
            .map_err(|e| ApcError::InvalidArgument(format!("invalid model document: {e}")))?;
        if model.format != MODEL_FORMAT {
            return Err(ApcError::InvalidArgument(format!(
                "unknown model format '{}'",
                model.format
            )));
        }
        for (c, comp) in model.components.iter().enumerate() {
            if comp.blocks.len() != model.p() {
                return Err(ApcError::InvalidArgument(format!(
                    "component {} has {} blocks for {} variables",
                    c + 1,
                    comp.blocks.len(),
                    model.p()
                )));
            }
        }
        Ok(model)
    }

    fn component(&self, comp: usize) -> Result<&ComponentRecord> {
        self.components
            .get(comp)
            .ok_or_else(|| ApcError::InvalidArgument(format!("model has no component {}", comp + 1)))
    }

    pub fn transform(&self, comp: usize, j: usize) -> Result<ModelTransform> {
        let c = self.component(comp)?;
        let var = self
            .variables
            .get(j)
            .ok_or_else(|| ApcError::InvalidArgument(format!("model has no variable {}", j + 1)))?;
        let xs = var.kernel_inputs().ok_or(ApcError::OutOfSampleUnsupported)?;
        let coef = c.coef(j);
        let inner = TransformEvaluator::new(&var.kernel, &xs, &coef.beta, &coef.d)?;
        Ok(ModelTransform {
            scale: var.standardization,
            inner,
        })
    }

    /// Transform values of component `comp` at raw points (one column per
    /// variable).
    pub fn evaluate(&self, comp: usize, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if points.ncols() != self.p() {
            return Err(ApcError::DimensionMismatch {
                expected: self.p(),
                found: points.ncols(),
            });
        }
        let mut out = DMatrix::zeros(points.nrows(), self.p());
        for j in 0..self.p() {
            let t = self.transform(comp, j)?;
            for i in 0..points.nrows() {
                out[(i, j)] = t.eval(points[(i, j)]);
            }
        }
        Ok(out)
    }

    /// Transform curves on `points` equally spaced values spanning each
    /// variable's training range (both ends included).
    pub fn plot_data(&self, comp: usize, points: usize) -> Result<Vec<Curve>> {
        if points < 2 {
            return Err(ApcError::InvalidArgument("plot grid needs at least 2 points".into()));
        }
        (0..self.p())
            .map(|j| {
                let var = &self.variables[j];
                let xs = var.training_values.as_ref().ok_or(ApcError::OutOfSampleUnsupported)?;
                let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let t = self.transform(comp, j)?;
                let x: Vec<f64> = (0..points)
                    .map(|i| {
                        if i + 1 == points {
                            hi
                        } else {
                            lo + (hi - lo) * i as f64 / (points - 1) as f64
                        }
                    })
                    .collect();
                let phi = x.iter().map(|&v| t.eval(v)).collect();
                Ok(Curve {
                    variable: var.name.clone(),
                    x,
                    phi,
                })
            })
            .collect()
    }

    /// Star inner products between all stored components, using
    /// `G beta = phi - Q d` so that no kernel matrix is needed.
    pub fn star_gram(&self) -> Result<DMatrix<f64>> {
        let k = self.components.len();
        let nf = self.n as f64;
        let nulls: Vec<DMatrix<f64>> = self
            .variables
            .iter()
            .map(|v| match v.kernel_inputs() {
                Some(xs) if v.kernel.null_space_dim() > 0 => null_space_basis(&v.kernel, &xs),
                _ => Ok(DMatrix::zeros(self.n, 0)),
            })
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                let mut total = 0.0;
                for (j, var) in self.variables.iter().enumerate() {
                    let (ba, bb) = (&self.components[a].blocks[j], &self.components[b].blocks[j]);
                    let phi_a = DVector::from_column_slice(&ba.phi);
                    let phi_b = DVector::from_column_slice(&bb.phi);
                    let mut g_beta_b = phi_b.clone();
                    if !bb.d.is_empty() {
                        g_beta_b -= &nulls[j] * DVector::from_column_slice(&bb.d);
                    }
                    total += phi_a.dot(&phi_b) / nf + var.alpha * DVector::from_column_slice(&ba.beta).dot(&g_beta_b);
                }
                out[(a, b)] = total;
            }
        }
        Ok(out)
    }
}

fn check_request(req: &FitRequest, p: usize) -> Result<()> {
    if p < 2 {
        return Err(ApcError::InvalidArgument(format!(
            "need at least two variables, got {p}"
        )));
    }
    if req.specs.len() != p {
        return Err(ApcError::DimensionMismatch {
            expected: p,
            found: req.specs.len(),
        });
    }
    if req.names.len() != p {
        return Err(ApcError::DimensionMismatch {
            expected: p,
            found: req.names.len(),
        });
    }
    if req.config.solver == SolverKind::Direct {
        if let Some(j) = req.specs.iter().position(|s| s.null_space_dim() > 0) {
            return Err(ApcError::Unsupported(format!(
                "the direct solver does not handle null spaces (variable {})",
                req.names[j]
            )));
        }
    }
    Ok(())
}

fn fixed_alphas(alphas: &[f64], p: usize) -> Result<Vec<f64>> {
    match alphas.len() {
        1 => Ok(vec![alphas[0]; p]),
        l if l == p => Ok(alphas.to_vec()),
        l => Err(ApcError::DimensionMismatch { expected: p, found: l }),
    }
}

fn calibrated(blocks: &[VariableBlock], target: f64, kind: DfKind) -> Result<Vec<f64>> {
    blocks
        .iter()
        .map(|b| calibrate_alpha_for_df(b.gram(), b.null(), target, kind))
        .collect()
}

fn finish(
    req: &FitRequest,
    blocks: Vec<VariableBlock>,
    penalty: PenaltyRecord,
    variables: Vec<VariableRecord>,
) -> Result<ApcModel> {
    let n = blocks[0].n();
    let problem = ApcProblem::new(blocks, req.config.clone())?;
    let components = solve(&problem)?;
    Ok(ApcModel {
        format: MODEL_FORMAT.into(),
        n,
        config: ConfigRecord {
            input: None,
            solver: req.config.solver,
            tol: req.config.tol,
            max_iter: req.config.max_iter,
            seed: req.config.seed,
            n_components: req.config.n_components,
            standardize: req.standardize,
            penalty,
        },
        variables,
        components: components.iter().map(ComponentRecord::from_component).collect(),
    })
}

/// Fits a model to raw data with pointwise kernels (one column per variable).
pub fn fit_model(data: &DMatrix<f64>, req: &FitRequest) -> Result<(ApcModel, Option<CvResult>)> {
    let p = data.ncols();
    check_request(req, p)?;
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(ApcError::NonFinite(pos));
    }
    if req.specs.iter().any(|s| !s.is_pointwise()) {
        return Err(ApcError::InvalidArgument(
            "precomputed kernels are fitted with fit_precomputed_model".into(),
        ));
    }
    let (z, rec): (DMatrix<f64>, Option<Standardization>) = if req.standardize {
        let (z, rec) = standardize(data)?;
        (z, Some(rec))
    } else {
        (data.clone(), None)
    };
    let cols: Vec<Vec<f64>> = (0..p).map(|j| z.column(j).iter().copied().collect()).collect();

    let mut cv = None;
    let (alphas, penalty) = match &req.penalty {
        PenaltyChoice::Fixed(a) => {
            let alphas = fixed_alphas(a, p)?;
            (alphas.clone(), PenaltyRecord::Fixed { alphas })
        }
        PenaltyChoice::CrossValidate { grid, folds, seed } => {
            let res = cross_validate(&z, &req.specs, grid, *folds, *seed, &req.config)?;
            let record = PenaltyRecord::CrossValidated {
                grid: grid.clone(),
                folds: *folds,
                seed: *seed,
                scores: res.cv_scores.clone(),
                selected: res.selected_alpha,
            };
            let alphas = vec![res.selected_alpha; p];
            cv = Some(res);
            (alphas, record)
        }
        PenaltyChoice::DfTarget { target, kind } => {
            let probe = (0..p)
                .map(|j| VariableBlock::from_values(&req.specs[j], &cols[j], 1.0))
                .collect::<Result<Vec<_>>>()?;
            let alphas = calibrated(&probe, *target, *kind)?;
            let record = PenaltyRecord::DfTarget {
                target: *target,
                kind: *kind,
                alphas: alphas.clone(),
            };
            (alphas, record)
        }
    };

    let blocks = (0..p)
        .map(|j| VariableBlock::from_values(&req.specs[j], &cols[j], alphas[j]))
        .collect::<Result<Vec<_>>>()?;
    let variables = (0..p)
        .map(|j| VariableRecord {
            name: req.names[j].clone(),
            kernel: blocks[j].spec().clone(),
            alpha: alphas[j],
            training_values: Some(data.column(j).iter().copied().collect()),
            standardization: rec.as_ref().map(|r| ColumnScale {
                mean: r.means[j],
                scale: r.scales[j],
            }),
        })
        .collect();
    Ok((finish(req, blocks, penalty, variables)?, cv))
}

/// Fits a model to precomputed kernel matrices (`req.specs` must all be
/// precomputed specs carrying their matrix). Standardization does not apply.
pub fn fit_precomputed_model(req: &FitRequest) -> Result<(ApcModel, Option<CvResult>)> {
    let p = req.specs.len();
    check_request(req, p)?;
    let matrices: Vec<DMatrix<f64>> = req
        .specs
        .iter()
        .map(|s| {
            s.precomputed_matrix()
                .map(|m| m.as_ref().clone())
                .ok_or_else(|| ApcError::InvalidArgument("expected precomputed kernels with matrices".into()))
        })
        .collect::<Result<_>>()?;
    let n = matrices[0].nrows();
    if let Some(m) = matrices.iter().find(|m| m.nrows() != n) {
        return Err(ApcError::DimensionMismatch {
            expected: n,
            found: m.nrows(),
        });
    }
    let build = |alphas: &[f64]| -> Result<Vec<VariableBlock>> {
        matrices
            .iter()
            .zip(alphas)
            .map(|(m, &a)| VariableBlock::from_kernel_matrix(m.clone(), a))
            .collect()
    };

    let mut cv = None;
    let (alphas, penalty) = match &req.penalty {
        PenaltyChoice::Fixed(a) => {
            let alphas = fixed_alphas(a, p)?;
            (alphas.clone(), PenaltyRecord::Fixed { alphas })
        }
        PenaltyChoice::CrossValidate { grid, folds, seed } => {
            let res = cross_validate_precomputed(&matrices, grid, *folds, *seed, &req.config)?;
            let record = PenaltyRecord::CrossValidated {
                grid: grid.clone(),
                folds: *folds,
                seed: *seed,
                scores: res.cv_scores.clone(),
                selected: res.selected_alpha,
            };
            let alphas = vec![res.selected_alpha; p];
            cv = Some(res);
            (alphas, record)
        }
        PenaltyChoice::DfTarget { target, kind } => {
            let alphas = calibrated(&build(&vec![1.0; p])?, *target, *kind)?;
            let record = PenaltyRecord::DfTarget {
                target: *target,
                kind: *kind,
                alphas: alphas.clone(),
            };
            (alphas, record)
        }
    };
    let blocks = build(&alphas)?;
    let variables = (0..p)
        .map(|j| VariableRecord {
            name: req.names[j].clone(),
            kernel: req.specs[j].clone(),
            alpha: alphas[j],
            training_values: None,
            standardization: None,
        })
        .collect();
    Ok((finish(req, blocks, penalty, variables)?, cv))
}
