use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use delaysteer::analysis::{controllability_report, sigma_min, sigma_min_profile};
use delaysteer::building::BuildingParams;
use delaysteer::lq::{evaluate_cost, rho_sweep, synthesize_lq, weights_with_rho};
use delaysteer::model::{load_system, Feedforward, LoadedModel};
use delaysteer::report::{fmt_float, indexed_labels, upper_labels, upper_values, write_header, write_row};
use delaysteer::sim::{simulate_ensemble, SimulationConfig};
use delaysteer::steering::{steer_to_state_covariance, ShootingOptions, ShootingResult};
use delaysteer::{DelayedSystem, FeedbackLaw, Mat, MatrixFn, MatrixPath, SteeringProblem, TimeGrid, TimeVaryingMatrix, Vector};

use crate::{parse, Cli, Command, LawChoice};

const DEFAULT_GRID_STEPS: usize = 1000;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(delaysteer::Error),
    Output(io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use delaysteer::Error as E;
        match self {
            Self::Usage(_) => 2,
            Self::Output(_) => 1,
            Self::Core(e) => match e {
                E::Config { .. }
                | E::Parameter(_)
                | E::Shape { .. }
                | E::NonFinite { .. }
                | E::Grid(_)
                | E::Range { .. }
                | E::Domain(_) => 2,
                E::Controllability(_) => 3,
                E::NonConvergence { .. } => 4,
                E::BelowThreshold { .. } => 5,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Core(e) => write!(f, "{e}"),
            Self::Output(e) => write!(f, "writing output: {e}"),
        }
    }
}

impl From<delaysteer::Error> for CliError {
    fn from(e: delaysteer::Error) -> Self {
        Self::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::Output(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn load(cli: &Cli) -> Result<LoadedModel> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("this command needs --config"))?;
    let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    Ok(load_system(&text)?)
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn steps_for(span: f64, dt: f64, what: &str) -> Result<usize> {
    let q = span / dt;
    let k = q.round();
    if k < 1.0 || (q - k).abs() > 1e-9 * k {
        return Err(usage(format!("dt = {dt} does not divide {what} = {span}")));
    }
    Ok(k as usize)
}

fn square_or(text: Option<&String>, n: usize, default: Mat) -> Result<Mat> {
    match text {
        Some(t) => parse::matrix(t, Some(n)).map_err(usage),
        None => Ok(default),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let steps = cli.grid_steps.unwrap_or(DEFAULT_GRID_STEPS);
    match &cli.command {
        Command::Check { tau_samples } => check(cli, *tau_samples),
        Command::SigmaMin { q } => threshold(cli, q.as_ref(), steps),
        Command::Steer {
            target_cov,
            target_mean,
            r,
            tol,
        } => {
            let model = load(cli)?;
            let problem = problem(&model, target_cov.as_ref(), target_mean.as_ref())?;
            let grid = problem.system.control_grid(steps)?;
            let result = steer(&problem, r, *tol, grid)?;
            write_gains(&cli.out, &result.law)?;
            let mut w = create(&cli.out, "predicted_cov.csv")?;
            write_covariances(&mut w, &result.predicted_sigma_x)?;
            w.flush()?;
            println!("iterations: {}", result.iterations);
            println!("relative terminal residual: {:.3e}", result.residual_norm);
            if let Some(mean) = &result.predicted_terminal_mean {
                println!("predicted terminal mean: {}", join(mean.iter().copied()));
            }
            Ok(())
        }
        Command::Lq { q, g, rho } => {
            let model = load(cli)?;
            let sys = model.system();
            let grid = sys.control_grid(steps)?;
            let law = lq_law(sys, q.as_ref(), g.as_ref(), *rho, grid, true)?;
            write_gains(&cli.out, &law)
        }
        Command::Simulate {
            law,
            paths,
            dt,
            seed,
            stride,
            save_paths,
            q,
            g,
            rho,
            target_cov,
            target_mean,
            r,
        } => {
            let model = load(cli)?;
            let sys = model.system();
            let (h, horizon) = (sys.delay(), sys.horizon());
            let dt = match (dt, cli.grid_steps) {
                (Some(dt), _) => *dt,
                (None, Some(n)) => (horizon - h) / n as f64,
                (None, None) => h / 50.0,
            };
            let grid = TimeGrid::new(0.0, horizon - h, steps_for(horizon - h, dt, "T - h")?)?;
            let law = match law {
                LawChoice::Open => FeedbackLaw::open_loop(sys, grid)?,
                LawChoice::Lq => lq_law(sys, q.as_ref(), g.as_ref(), *rho, grid, false)?,
                LawChoice::Steer => {
                    let problem = problem(&model, target_cov.as_ref(), target_mean.as_ref())?;
                    steer(&problem, r, 1e-6, grid)?.law
                }
            };
            let cfg = SimulationConfig::new(dt, *paths, *seed)
                .with_stride(*stride)
                .retaining(*save_paths);
            let ensemble = simulate_ensemble(sys, &law, &cfg)?;
            let mut w = create(&cli.out, "moments.csv")?;
            ensemble.write_moments_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&cli.out, "paths.csv")?;
            ensemble.write_paths_csv(&mut w, *save_paths)?;
            w.flush()?;
            Ok(())
        }
        Command::SweepRho { q, g, rhos } => {
            let model = load(cli)?;
            let sys = model.system();
            let n = sys.dim_state();
            let q = square_or(q.as_ref(), n, Mat::identity(n, n))?;
            let g = square_or(g.as_ref(), n, Mat::identity(n, n))?;
            let rhos = parse::list(rhos).map_err(usage)?;
            let rows = rho_sweep(sys, &TimeVaryingMatrix::Constant(q), &g, &rhos, sys.control_grid(steps)?)?;
            let mut w = create(&cli.out, "sweep.csv")?;
            let header: Vec<String> = [
                "rho",
                "cost_total",
                "cost_state_running",
                "cost_state_terminal",
                "cost_control",
                "v_min",
                "gap",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            write_header(&mut w, &header)?;
            for row in &rows {
                write_row(
                    &mut w,
                    &[
                        row.rho,
                        row.cost.total,
                        row.cost.state_running,
                        row.cost.state_terminal,
                        row.cost.control_effort,
                        row.v_min,
                        row.gap,
                    ],
                )?;
                println!("rho {:e}: gap {:.4e}", row.rho, row.gap);
            }
            w.flush()?;
            Ok(())
        }
        Command::Building {
            h,
            horizon,
            rho,
            paths,
            seed,
            dt,
            stride,
            set_point,
        } => building(
            &cli.out,
            &BuildingRun {
                h: *h,
                horizon: *horizon,
                rho: *rho,
                paths: *paths,
                seed: *seed,
                dt: *dt,
                stride: *stride,
                set_point: *set_point,
            },
        ),
    }
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(fmt_float).collect::<Vec<_>>().join(",")
}

fn check(cli: &Cli, tau_samples: usize) -> Result<()> {
    let model = load(cli)?;
    let report = controllability_report(model.system(), tau_samples)?;
    let mut w = create(&cli.out, "report.csv")?;
    write_header(&mut w, &["tau".into(), "min_sv".into(), "cond".into()])?;
    for ((tau, sv), cond) in report
        .tau_grid
        .iter()
        .zip(&report.min_singular_values)
        .zip(&report.condition_numbers)
    {
        write_row(&mut w, &[*tau, *sv, *cond])?;
    }
    w.flush()?;
    println!("{}", report.verdict_line());
    if report.is_controllable() {
        Ok(())
    } else {
        Err(delaysteer::Error::Controllability(report.verdict_line()).into())
    }
}

fn threshold(cli: &Cli, q: Option<&String>, steps: usize) -> Result<()> {
    let model = load(cli)?;
    let sys = model.system();
    let n = sys.dim_state();
    let q = square_or(q, n, Mat::identity(n, n))?;
    let grid = TimeGrid::new(sys.delay(), sys.horizon(), steps)?;
    let profile = sigma_min_profile(sys, &grid)?;
    let mut w = create(&cli.out, "threshold.csv")?;
    let mut header = vec!["t".to_string()];
    header.extend(upper_labels("sigma_min", n));
    header.push("weighted".into());
    write_header(&mut w, &header)?;
    for (t, s) in grid.times().zip(&profile) {
        let mut row = vec![t];
        row.extend(upper_values(s));
        row.push((&q * s).trace());
        write_row(&mut w, &row)?;
    }
    w.flush()?;
    Ok(())
}

fn problem(model: &LoadedModel, cov: Option<&String>, mean: Option<&String>) -> Result<SteeringProblem> {
    let sys = model.system().clone();
    let n = sys.dim_state();
    let (base_mean, base_cov) = match model {
        LoadedModel::Problem(p) => (Some(p.target_mean.clone()), Some(p.target_covariance.clone())),
        LoadedModel::System(_) => (None, None),
    };
    let cov = match cov {
        Some(t) => parse::matrix(t, Some(n)).map_err(usage)?,
        None => base_cov.ok_or_else(|| usage("no target covariance in the config or --target-cov"))?,
    };
    let mean = match mean {
        Some(t) => parse::vector(t, n).map_err(usage)?,
        None => base_mean.unwrap_or_else(|| Vector::zeros(n)),
    };
    Ok(SteeringProblem::new(sys, mean, cov)?)
}

fn steer(problem: &SteeringProblem, r: &str, tol: f64, grid: TimeGrid) -> Result<ShootingResult> {
    let m = problem.system.dim_control();
    let r = parse::matrix(r, Some(m)).map_err(usage)?;
    let opts = ShootingOptions {
        tol,
        ..ShootingOptions::default()
    };
    Ok(steer_to_state_covariance(problem, &r, grid, &opts)?)
}

fn lq_law(
    sys: &DelayedSystem,
    q: Option<&String>,
    g: Option<&String>,
    rho: f64,
    grid: TimeGrid,
    report: bool,
) -> Result<FeedbackLaw> {
    let n = sys.dim_state();
    let q = square_or(q, n, Mat::identity(n, n))?;
    let g = square_or(g, n, Mat::identity(n, n))?;
    let weights = weights_with_rho(sys, TimeVaryingMatrix::Constant(q), g, rho)?;
    let law = synthesize_lq(sys, &weights, grid)?;
    if report {
        let cost = evaluate_cost(sys, &law, &weights)?;
        println!("cost total: {}", fmt_float(cost.total));
        println!("  state running: {}", fmt_float(cost.state_running));
        println!("  state terminal: {}", fmt_float(cost.state_terminal));
        println!("  control effort: {}", fmt_float(cost.control_effort));
        println!("  v_min: {}", fmt_float(cost.v_min_component));
    }
    Ok(law)
}

fn write_gains(out: &Path, law: &FeedbackLaw) -> Result<()> {
    let gain = law.gain();
    let (m, n) = gain.shape();
    let mut w = create(out, "gains.csv")?;
    let mut header = vec!["t".to_string()];
    for i in 1..=m {
        header.extend(indexed_labels(&format!("k_{i}"), n));
    }
    if law.schedule().is_some() {
        header.extend(upper_labels("pi", n));
    }
    write_header(&mut w, &header)?;
    for (k, (t, kk)) in gain.iter().enumerate() {
        let mut row = vec![t];
        row.extend(kk.transpose().iter());
        if let Some(s) = law.schedule() {
            row.extend(upper_values(s.at(k)));
        }
        write_row(&mut w, &row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_covariances<W: Write>(w: &mut W, path: &MatrixPath) -> Result<()> {
    let n = path.shape().0;
    let mut header = vec!["t".to_string()];
    header.extend(upper_labels("cov", n));
    write_header(w, &header)?;
    for (t, s) in path.iter() {
        let mut row = vec![t];
        row.extend(upper_values(s));
        write_row(w, &row)?;
    }
    Ok(())
}

struct BuildingRun {
    h: f64,
    horizon: f64,
    rho: f64,
    paths: usize,
    seed: u64,
    dt: f64,
    stride: usize,
    set_point: f64,
}

fn building(out: &Path, run: &BuildingRun) -> Result<()> {
    let params = BuildingParams::default();
    let sys = params.system(run.h, run.horizon, params.initial_state(run.set_point))?;
    let grid = TimeGrid::new(0.0, run.horizon - run.h, steps_for(run.horizon - run.h, run.dt, "T - h")?)?;
    let weight = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let weights = weights_with_rho(&sys, TimeVaryingMatrix::Constant(weight.clone()), weight, run.rho)?;
    let ff = Feedforward::from_control(&sys, grid, |t| {
        Vector::from_element(1, params.holding_control(run.set_point, run.h, t))
    })?;
    let law = synthesize_lq(&sys, &weights, grid)?.with_feedforward(ff)?;
    let cfg = SimulationConfig::new(run.dt, run.paths, run.seed)
        .with_stride(run.stride)
        .retaining(1);
    let ensemble = simulate_ensemble(&sys, &law, &cfg)?;

    let mut w = create(out, "fig1.csv")?;
    let header = ["t", "building_temperature", "external_temperature", "control"];
    write_header(&mut w, &header.map(String::from))?;
    let path = &ensemble.paths[0];
    for (k, t) in path.grid.times().enumerate() {
        write_row(&mut w, &[t, path.x[k][0], path.x[k][1], path.u[k][0]])?;
    }
    w.flush()?;

    let mut w = create(out, "fig2.csv")?;
    write_header(&mut w, &["t", "variance", "threshold"].map(String::from))?;
    let mut worst: f64 = 0.0;
    for (k, t) in ensemble.grid.times().enumerate() {
        if t < run.h - 1e-9 * run.h {
            continue;
        }
        let var = ensemble.covariance.at(k)[(0, 0)];
        let floor = sigma_min(&sys, t)?[(0, 0)];
        if t > 2.0 * run.h {
            worst = worst.max((var - floor).abs() / floor);
        }
        write_row(&mut w, &[t, var, floor])?;
    }
    w.flush()?;

    let mut w = create(out, "parameters.csv")?;
    writeln!(w, "name,value")?;
    for (name, value) in [
        ("delay", fmt_float(run.h)),
        ("horizon", fmt_float(run.horizon)),
        ("rho", fmt_float(run.rho)),
        ("paths", run.paths.to_string()),
        ("seed", run.seed.to_string()),
        ("dt", fmt_float(run.dt)),
        ("set_point", fmt_float(run.set_point)),
    ] {
        writeln!(w, "{name},{value}")?;
    }
    w.flush()?;
    println!(
        "delay {} horizon {} rho {:e}: max relative variance gap after 2h = {:.4}",
        run.h, run.horizon, run.rho, worst
    );
    Ok(())
}
