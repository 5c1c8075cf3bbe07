use kapc::kernels::KernelSpec;
use kapc::model::{fit_model, ApcModel, FitRequest, PenaltyChoice};
use kapc::model_selection::default_grid;
use kapc::power::SolverConfig;
use kapc::simulation::{estimation_errors, generate_simulation};

const N_EVAL: usize = 10_000;

fn request(penalty: PenaltyChoice) -> FitRequest {
    FitRequest {
        names: (1..=4).map(|j| format!("x{j}")).collect(),
        specs: vec![KernelSpec::gaussian(1.0).unwrap(); 4],
        penalty,
        standardize: true,
        config: SolverConfig::default(),
    }
}

fn fit_at(x: &nalgebra::DMatrix<f64>, alpha: f64) -> ApcModel {
    fit_model(x, &request(PenaltyChoice::Fixed(vec![alpha]))).unwrap().0
}

#[test]
fn cv_fit_beats_heavy_smoothing_and_tracks_grid_optimum() {
    let sample = generate_simulation(250, 42).unwrap();
    let grid = default_grid();
    let (model, cv) = fit_model(
        &sample.x,
        &request(PenaltyChoice::CrossValidate {
            grid: grid.clone(),
            folds: 5,
            seed: 42,
        }),
    )
    .unwrap();
    let cv = cv.unwrap();
    assert_eq!(cv.cv_scores.len(), 35);
    let selected = estimation_errors(&model, 0, N_EVAL, 7).unwrap();

    let baseline = estimation_errors(&fit_at(&sample.x, 1e8), 0, N_EVAL, 7).unwrap();
    for j in 0..3 {
        assert!(
            5.0 * selected[j] <= baseline[j],
            "variable {}: cv error {} vs baseline {}",
            j + 1,
            selected[j],
            baseline[j]
        );
    }

    let mut best = [f64::INFINITY; 4];
    for &alpha in &grid {
        let errs = estimation_errors(&fit_at(&sample.x, alpha), 0, N_EVAL, 7).unwrap();
        for j in 0..4 {
            best[j] = best[j].min(errs[j]);
        }
    }
    for j in 0..3 {
        assert!(
            selected[j] <= 3.0 * best[j],
            "variable {}: cv error {} vs grid optimum {}",
            j + 1,
            selected[j],
            best[j]
        );
    }
}
