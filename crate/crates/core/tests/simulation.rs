use delaysteer::model::{artstein_transform_path, ControlHistory, Feedforward};
use delaysteer::sim::{simulate_ensemble, simulate_path, SimulationConfig};
use delaysteer::{DelayedSystem, FeedbackLaw, Mat, TimeGrid, TimeVaryingMatrix, Vector};

fn scalar_system(a: f64, sigma: f64, h: f64, horizon: f64, x0: f64) -> DelayedSystem {
    DelayedSystem::new(
        TimeVaryingMatrix::Constant(Mat::from_element(1, 1, a)),
        TimeVaryingMatrix::Constant(Mat::from_element(1, 1, 1.0)),
        TimeVaryingMatrix::Constant(Mat::zeros(1, 1)),
        TimeVaryingMatrix::Constant(Mat::from_element(1, 1, sigma)),
        h,
        horizon,
        Vector::from_element(1, x0),
    )
    .unwrap()
}

fn open(sys: &DelayedSystem, dt: f64) -> FeedbackLaw {
    let steps = ((sys.horizon() - sys.delay()) / dt).round() as usize;
    FeedbackLaw::open_loop(sys, sys.control_grid(steps).unwrap()).unwrap()
}

#[test]
fn ou_variance_matches_closed_form() {
    let sys = scalar_system(-1.0, 1.0, 0.5, 2.0, 0.0);
    let dt = 0.002;
    let n = 100_000;
    let e = simulate_ensemble(&sys, &open(&sys, dt), &SimulationConfig::new(dt, n, 11)).unwrap();
    let exact = (1.0 - (-4.0f64).exp()) / 2.0;
    let var = e.covariance.last()[(0, 0)];
    let se = e.covariance_stderr.last()[(0, 0)];
    assert!((exact - 0.4908).abs() < 1e-4);
    assert!((var - exact).abs() <= 3.0 * se, "{var} vs {exact} (se {se})");
}

#[test]
fn artstein_state_matches_control_history() {
    let a = Mat::from_row_slice(2, 2, &[-0.3, 1.0, -0.5, -0.1]);
    let sys = DelayedSystem::new(
        TimeVaryingMatrix::Constant(a),
        TimeVaryingMatrix::Constant(Mat::from_row_slice(2, 1, &[0.0, 1.0])),
        TimeVaryingMatrix::Constant(Mat::zeros(2, 1)),
        TimeVaryingMatrix::Constant(Mat::from_row_slice(2, 1, &[0.2, 0.4])),
        0.4,
        2.0,
        Vector::from_row_slice(&[1.0, -1.0]),
    )
    .unwrap();
    let dt = 0.0005;
    let grid = sys.control_grid(3200).unwrap();
    let ff = Feedforward::from_control(&sys, grid, |t| Vector::from_element(1, (3.0 * t).sin() + 0.5)).unwrap();
    let law = FeedbackLaw::open_loop(&sys, grid).unwrap().with_feedforward(ff).unwrap();
    let path = simulate_path(&sys, &law, &SimulationConfig::new(dt, 1, 5), 5).unwrap();
    let history = ControlHistory {
        grid: path.grid,
        values: path.u.clone(),
    };
    let mut worst: f64 = 0.0;
    let mut largest: f64 = 0.0;
    for k in (0..path.grid.len()).step_by(100) {
        let t = path.grid.time(k);
        let y = artstein_transform_path(&path.x[k], &history, &sys, t).unwrap();
        worst = worst.max((y - &path.y[k]).amax());
        largest = largest.max((&path.y[k] - &path.x[k]).amax());
    }
    assert!(largest > 0.1);
    assert!(worst <= 5e-3, "Z mismatch {worst}");
}

#[test]
fn ensembles_do_not_depend_on_worker_count() {
    let sys = scalar_system(-0.5, 1.0, 0.2, 1.0, 1.0);
    let law = open(&sys, 0.01);
    let cfg = SimulationConfig::new(0.01, 700, 3).retaining(5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_ensemble(&sys, &law, &cfg).unwrap())
    };
    let one = run(1);
    let four = run(4);
    for k in 0..one.grid.len() {
        assert_eq!(one.mean[k].as_slice(), four.mean[k].as_slice());
        assert_eq!(one.covariance.at(k), four.covariance.at(k));
    }
    assert_eq!(one.paths[4].x, four.paths[4].x);
}

#[test]
fn standard_error_scales_with_path_count() {
    let sys = scalar_system(-0.5, 1.0, 0.2, 1.0, 0.0);
    let law = open(&sys, 0.01);
    let small = simulate_ensemble(&sys, &law, &SimulationConfig::new(0.01, 4000, 1)).unwrap();
    let large = simulate_ensemble(&sys, &law, &SimulationConfig::new(0.01, 8000, 1)).unwrap();
    let ratio = large.covariance_stderr.last()[(0, 0)] / small.covariance_stderr.last()[(0, 0)];
    assert!((ratio - 0.5f64.sqrt()).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn euler_maruyama_error_is_first_order() {
    let sys = scalar_system(-2.0, 0.0, 0.25, 1.0, 1.0);
    let exact = (-2.0f64).exp();
    let error = |dt: f64| {
        let e = simulate_ensemble(&sys, &open(&sys, dt), &SimulationConfig::new(dt, 2, 0)).unwrap();
        (e.mean.last().unwrap()[0] - exact).abs()
    };
    let coarse = error(0.01);
    let fine = error(0.005);
    let ratio = coarse / fine;
    assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn grid_mismatch_is_rejected() {
    let sys = scalar_system(-0.5, 1.0, 0.2, 1.0, 0.0);
    let law = open(&sys, 0.01);
    assert!(simulate_ensemble(&sys, &law, &SimulationConfig::new(0.005, 10, 0)).is_err());
    let grid = TimeGrid::new(0.0, 0.8, 80).unwrap();
    assert_eq!(*law.grid(), grid);
}
