use std::path::Path;

use kapc::kernels::KernelSpec;
use kapc::model::{fit_model, fit_precomputed_model, ApcModel, FitRequest, PenaltyChoice};
use kapc::model_selection::{
    cross_validate, cross_validate_precomputed, df_preset_target, geometric_grid, standardize,
};
use kapc::power::{SolverConfig, SolverKind};
use kapc::simulation::{generate_simulation, population_correlation_eigen, true_transform};
use kapc::smoother::DfKind;
use nalgebra::DMatrix;

use crate::args::{
    CvArgs, DataArgs, DfKindArg, EvalArgs, FitArgs, GridArgs, KernelKind, PlotArgs, SimulateArgs, SolverArg, SolverArgs,
};
use crate::error::CliError;
use crate::io::{read_matrix, read_table, read_text, write_csv, write_text};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Picks entry `j` of a flag given once or once per variable.
fn per_variable<T: Copy>(values: &[T], j: usize, p: usize, flag: &str) -> Result<T, CliError> {
    match values.len() {
        1 => Ok(values[0]),
        l if l == p => Ok(values[j]),
        l => Err(usage(format!("--{flag} takes 1 or {p} values, got {l}"))),
    }
}

/// Inputs resolved from the data flags.
enum Inputs {
    Values {
        names: Vec<String>,
        data: DMatrix<f64>,
        specs: Vec<KernelSpec>,
    },
    Precomputed {
        names: Vec<String>,
        specs: Vec<KernelSpec>,
    },
}

impl Inputs {
    fn names(&self) -> &[String] {
        match self {
            Inputs::Values { names, .. } | Inputs::Precomputed { names, .. } => names,
        }
    }
}

fn load_inputs(args: &DataArgs, solver: SolverArg) -> Result<Inputs, CliError> {
    let precomputed = args.kernel.contains(&KernelKind::Precomputed);
    if precomputed {
        if args.kernel.iter().any(|k| *k != KernelKind::Precomputed) {
            return Err(usage("precomputed kernels cannot be mixed with pointwise kernels"));
        }
        if args.standardize {
            return Err(usage("--standardize does not apply to precomputed kernels"));
        }
        if args.matrices.len() < 2 {
            return Err(usage("--kernel precomputed needs --matrices with at least two files"));
        }
        let table = args.input.as_deref().map(read_table).transpose()?;
        let mut specs = Vec::with_capacity(args.matrices.len());
        for path in &args.matrices {
            let m = read_matrix(path)?;
            if let Some(t) = &table {
                if m.nrows() != t.values.nrows() {
                    return Err(CliError::Data(format!(
                        "{}: {} rows, but the data has {}",
                        path.display(),
                        m.nrows(),
                        t.values.nrows()
                    )));
                }
            }
            let spec = KernelSpec::precomputed(m, Some(path.display().to_string()))
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            specs.push(spec);
        }
        let names = match table {
            Some(t) if t.names.len() == specs.len() => t.names,
            _ => args.matrices.iter().map(|p| stem(p)).collect(),
        };
        return Ok(Inputs::Precomputed { names, specs });
    }

    let path = args.input.as_deref().ok_or_else(|| usage("--input is required"))?;
    let table = read_table(path)?;
    let p = table.names.len();
    if p < 2 {
        return Err(CliError::Data(format!(
            "{}: need at least two variables, found {p}",
            path.display()
        )));
    }
    let mut specs = Vec::with_capacity(p);
    for j in 0..p {
        let spec = match per_variable(&args.kernel, j, p, "kernel")? {
            KernelKind::Gaussian => KernelSpec::gaussian(per_variable(&args.bandwidth, j, p, "bandwidth")?)?,
            KernelKind::Sobolev => KernelSpec::sobolev(per_variable(&args.order, j, p, "order")?)?,
            KernelKind::Precomputed => unreachable!("handled above"),
        };
        if solver == SolverArg::Direct && spec.null_space_dim() > 0 {
            return Err(usage(format!(
                "--solver direct does not support kernels with a null space (variable '{}' uses Sobolev order >= 2)",
                table.names[j]
            )));
        }
        specs.push(spec);
    }
    Ok(Inputs::Values {
        names: table.names,
        data: table.values,
        specs,
    })
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn solver_config(args: &SolverArgs) -> Result<SolverConfig, CliError> {
    if !(args.tol > 0.0 && args.tol.is_finite()) {
        return Err(usage(format!("--tol must be positive, got {}", args.tol)));
    }
    if args.max_iter == 0 {
        return Err(usage("--max-iter must be at least 1"));
    }
    if args.components == 0 {
        return Err(usage("--components must be at least 1"));
    }
    Ok(SolverConfig {
        tol: args.tol,
        max_iter: args.max_iter,
        seed: args.seed,
        n_components: args.components,
        solver: match args.solver {
            SolverArg::Power => SolverKind::Power,
            SolverArg::Direct => SolverKind::Direct,
        },
        ..Default::default()
    })
}

fn grid(args: &GridArgs) -> Result<Vec<f64>, CliError> {
    if args.folds < 2 {
        return Err(usage(format!("--folds must be at least 2, got {}", args.folds)));
    }
    if !args.grid.is_empty() {
        if let Some(bad) = args.grid.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(usage(format!("grid values must be positive, got {bad}")));
        }
        return Ok(args.grid.clone());
    }
    geometric_grid(args.grid_base, args.grid_min, args.grid_max).map_err(|e| usage(e.to_string()))
}

fn df_kind(k: DfKindArg) -> DfKind {
    match k {
        DfKindArg::TrS => DfKind::TrS,
        DfKindArg::TrS2 => DfKind::TrS2,
        DfKindArg::Tr2sMinusS2 => DfKind::Tr2SminusS2,
    }
}

fn rows_of(inputs: &Inputs) -> usize {
    match inputs {
        Inputs::Values { data, .. } => data.nrows(),
        Inputs::Precomputed { specs, .. } => specs[0].precomputed_matrix().map(|m| m.nrows()).unwrap_or(0),
    }
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let config = solver_config(&args.solver)?;
    let inputs = load_inputs(&args.data, args.solver.solver)?;
    let p = inputs.names().len();
    let penalty = if !args.alpha.is_empty() {
        if let Some(bad) = args.alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(usage(format!("--alpha must be positive, got {bad}")));
        }
        if args.alpha.len() != 1 && args.alpha.len() != p {
            return Err(usage(format!(
                "--alpha takes 1 or {p} values, got {}",
                args.alpha.len()
            )));
        }
        PenaltyChoice::Fixed(args.alpha.clone())
    } else if args.cv {
        PenaltyChoice::CrossValidate {
            grid: grid(&args.grid)?,
            folds: args.grid.folds,
            seed: args.solver.seed,
        }
    } else {
        let target = match args.df_target {
            Some(t) if t > 0.0 && t.is_finite() => t,
            Some(t) => return Err(usage(format!("--df-target must be positive, got {t}"))),
            None => df_preset_target(rows_of(&inputs), p),
        };
        PenaltyChoice::DfTarget {
            target,
            kind: df_kind(args.df_kind),
        }
    };

    let (mut model, _) = match inputs {
        Inputs::Values { names, data, specs } => {
            let req = FitRequest {
                names,
                specs,
                penalty,
                standardize: args.data.standardize,
                config,
            };
            fit_model(&data, &req)?
        }
        Inputs::Precomputed { names, specs } => {
            let req = FitRequest {
                names,
                specs,
                penalty,
                standardize: false,
                config,
            };
            fit_precomputed_model(&req)?
        }
    };
    model.config.input = args.data.input.as_ref().map(|p| p.display().to_string());
    for (k, c) in model.components.iter().enumerate() {
        eprintln!(
            "component {}: eigenvalue {:.6} (raw {:.6}), {} iterations{}",
            k + 1,
            c.eigenvalue,
            c.raw_eigenvalue,
            c.diagnostics.iterations,
            if c.diagnostics.converged { "" } else { ", NOT converged" }
        );
        if c.diagnostics.near_tie {
            eprintln!("component {}: warning: next eigenvalue is nearly tied", k + 1);
        }
    }
    write_text(args.output.as_deref(), &model.to_json()?)
}

pub fn cv(args: &CvArgs) -> Result<(), CliError> {
    let config = solver_config(&args.solver)?;
    let grid = grid(&args.grid)?;
    let inputs = load_inputs(&args.data, args.solver.solver)?;
    let result = match inputs {
        Inputs::Values { data, specs, .. } => {
            let data = if args.data.standardize {
                standardize(&data)?.0
            } else {
                data
            };
            cross_validate(&data, &specs, &grid, args.grid.folds, args.solver.seed, &config)?
        }
        Inputs::Precomputed { specs, .. } => {
            let ks: Vec<DMatrix<f64>> = specs
                .iter()
                .filter_map(|s| s.precomputed_matrix().map(|m| m.as_ref().clone()))
                .collect();
            cross_validate_precomputed(&ks, &grid, args.grid.folds, args.solver.seed, &config)?
        }
    };
    eprintln!(
        "selected alpha {} (grid index {})",
        result.selected_alpha, result.selected_index
    );
    let text =
        serde_json::to_string_pretty(&result).map_err(|e| CliError::Data(format!("serialization failed: {e}")))?;
    write_text(args.output.as_deref(), &text)
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    if args.n < 2 {
        return Err(usage(format!("-n must be at least 2, got {}", args.n)));
    }
    let s = generate_simulation(args.n, args.seed)?;
    let truth = population_correlation_eigen();
    let mut header: Vec<String> = (1..=4).map(|j| format!("x{j}")).collect();
    if args.latent {
        header.extend((1..=4).map(|j| format!("y{j}")));
    }
    if args.truth {
        header.extend((1..=4).map(|j| format!("phi{j}")));
    }
    let rows = (0..args.n).map(|i| {
        let mut row: Vec<String> = (0..4).map(|j| s.x[(i, j)].to_string()).collect();
        if args.latent {
            row.extend((0..4).map(|j| s.y[(i, j)].to_string()));
        }
        if args.truth {
            row.extend((0..4).map(|j| true_transform(&truth, j, s.x[(i, j)]).to_string()));
        }
        row
    });
    write_csv(args.output.as_deref(), &header, rows)
}

fn load_model(path: &Path) -> Result<ApcModel, CliError> {
    ApcModel::from_json(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn component_index(model: &ApcModel, component: usize) -> Result<usize, CliError> {
    if component == 0 || component > model.components.len() {
        return Err(usage(format!(
            "--component must be between 1 and {}, got {component}",
            model.components.len()
        )));
    }
    Ok(component - 1)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let comp = component_index(&model, args.component)?;
    let table = read_table(&args.points)?;
    let names: Vec<&str> = model.variables.iter().map(|v| v.name.as_str()).collect();
    // match columns by name when possible, otherwise by position
    let order: Vec<usize> = if names.iter().all(|n| table.names.iter().any(|t| t == n)) {
        names
            .iter()
            .map(|n| table.names.iter().position(|t| t == n).unwrap_or(0))
            .collect()
    } else if table.names.len() == names.len() {
        (0..names.len()).collect()
    } else {
        return Err(CliError::Data(format!(
            "{}: expected columns {:?}, found {:?}",
            args.points.display(),
            names,
            table.names
        )));
    };
    let points = DMatrix::from_fn(table.values.nrows(), names.len(), |i, j| table.values[(i, order[j])]);
    let values = model.evaluate(comp, &points)?;
    let header: Vec<String> = names.iter().map(|n| format!("phi_{n}")).collect();
    let rows = (0..values.nrows()).map(|i| (0..values.ncols()).map(|j| values[(i, j)].to_string()).collect());
    write_csv(args.output.as_deref(), &header, rows)
}

pub fn plotdata(args: &PlotArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let comp = component_index(&model, args.component)?;
    if args.points < 2 {
        return Err(usage("--points must be at least 2"));
    }
    let curves = model.plot_data(comp, args.points)?;
    let header = vec!["variable".to_string(), "x".to_string(), "phi".to_string()];
    let rows = curves.iter().flat_map(|c| {
        c.x.iter()
            .zip(&c.phi)
            .map(move |(x, y)| vec![c.variable.clone(), x.to_string(), y.to_string()])
    });
    write_csv(args.output.as_deref(), &header, rows)
}
