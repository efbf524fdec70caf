//! `simulate`: integrate the dissipation flow on a periodic grid, export
//! the sampled functionals as CSV, and fit the Fisher decay rate against
//! the curvature reference.

use crate::common::{
    emit, mode_name, parse_box, parse_res, resolve_weight, AnalysisArgs, CliError,
    StructureArgs,
};
use crate::json::JsonWriter;
use clap::Args;
use gammaz::curvature::{kappa_detail, BoxGrid};
use gammaz::fields::Structure;
use gammaz::tensor::Mode;
use gammaz::fpe::{
    fit_decay, simulate, steady_state, DecayField, DensityField, FpeError, Simulator,
    TimeSeries,
};
use gammaz::{Expression, Grid};
use std::path::PathBuf;

/// Largest grid held in memory; explicit stepping above this is not a desk
/// job any more.
const MAX_CELLS: usize = 4096;
/// Explicit Euler step budget.
const MAX_STEPS: f64 = 2e6;

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub structure: StructureArgs,

    #[command(flatten)]
    pub analysis: AnalysisArgs,

    /// Periodic box, LO:HI per axis; one pair replicates. Default
    /// [-pi, pi] per axis.
    #[arg(long = "box", value_name = "LO:HI[,..]", allow_hyphen_values = true)]
    pub box_spec: Option<String>,

    /// Cells per axis, `N[,N..]` or `NxN..`; one value replicates.
    /// Default 64 / 32 / 16 cells per axis in 1 / 2 / 3 dimensions.
    #[arg(long, value_name = "N[,..]")]
    pub res: Option<String>,

    /// Simulation horizon.
    #[arg(long = "T", default_value_t = 1.0, value_name = "TIME")]
    pub t_end: f64,

    /// Step size, or `auto` for the stability bound.
    #[arg(long, default_value = "auto")]
    pub dt: String,

    /// Record every Nth step.
    #[arg(long = "sample-every", default_value_t = 10, value_name = "N")]
    pub sample_every: usize,

    /// Initial density: `star` (the steady state), `tilt` (the steady
    /// state with a cosine perturbation in the last variable), or an
    /// expression over the structure's variables.
    #[arg(long, default_value = "tilt", value_name = "SPEC", allow_hyphen_values = true)]
    pub rho0: String,

    /// Write the CSV here and the summary to stdout; without it the CSV
    /// goes to stdout and the summary to stderr.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Echoed into the summary; the run itself draws no randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &SimulateArgs) -> Result<u8, CliError> {
    let s = args.structure.resolve()?;
    let dim = s.dim();
    if dim > 3 {
        return Err(CliError::Config(format!(
            "the grid solver covers 1..=3 dimensions; the structure has {dim}"
        )));
    }
    let pi = std::f64::consts::PI;
    let (lo, hi) = match &args.box_spec {
        Some(spec) => parse_box(spec, dim)?,
        None => (vec![-pi; dim], vec![pi; dim]),
    };
    let res = match &args.res {
        Some(spec) => parse_res(spec, dim)?,
        None => vec![[64, 32, 16][dim - 1]; dim],
    };
    let cells: usize = res.iter().product();
    if cells > MAX_CELLS {
        return Err(CliError::Config(format!(
            "{cells} cells exceed the {MAX_CELLS}-cell in-memory guard; \
             shrink --res"
        )));
    }
    let grid = Grid::new(lo.clone(), hi.clone(), res.clone()).map_err(map_fpe)?;

    let sim = Simulator::new(&s, &grid).map_err(map_fpe)?;
    let dt = match args.dt.as_str() {
        "auto" => {
            let bound = sim.cfl_bound();
            if !bound.is_finite() {
                return Err(CliError::Config(
                    "diffusion vanishes on the whole grid; no stable step size".into(),
                ));
            }
            bound
        }
        other => {
            let v: f64 = other.parse().map_err(|_| {
                CliError::Config(format!("--dt expects `auto` or a number, got `{other}`"))
            })?;
            if !(v > 0.0) {
                return Err(CliError::Config("--dt must be positive".into()));
            }
            if v > sim.cfl_bound() {
                return Err(CliError::Config(format!(
                    "--dt {v:.3e} exceeds the stability bound {:.3e}",
                    sim.cfl_bound()
                )));
            }
            v
        }
    };
    if !(args.t_end > 0.0) {
        return Err(CliError::Config("--T must be positive".into()));
    }
    if args.t_end / dt > MAX_STEPS {
        return Err(CliError::Config(format!(
            "{:.0} explicit steps exceed the {MAX_STEPS:.0}-step budget; \
             shrink --T or coarsen --res",
            (args.t_end / dt).ceil()
        )));
    }
    if args.sample_every == 0 {
        return Err(CliError::Config("--sample-every must be at least 1".into()));
    }

    let rho0 = initial_density(&s, &grid, &args.rho0)?;
    let series = simulate(&s, &rho0, args.t_end, dt, args.sample_every).map_err(map_fpe)?;
    if series.truncated() {
        eprintln!("simulate: series truncated at non-finite values");
    }

    let kappa_ref = coarse_kappa(&s, args, &lo, &hi);
    let summary = render_summary(&s, args, &lo, &hi, &res, dt, &series, kappa_ref);
    let csv = series.to_csv();
    match &args.out {
        Some(_) => {
            emit(&args.out, &csv)?;
            print!("{summary}");
        }
        None => {
            print!("{csv}");
            eprint!("{summary}");
        }
    }
    Ok(0)
}

fn map_fpe(e: FpeError) -> CliError {
    match e {
        FpeError::Domain(d) => CliError::Domain(d.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn initial_density(
    s: &Structure,
    grid: &Grid<f64>,
    spec: &str,
) -> Result<DensityField<f64>, CliError> {
    let star = steady_state(s, grid).map_err(map_fpe)?;
    match spec {
        "star" => Ok(star),
        "tilt" => {
            let d = grid.dim();
            let mut values = star.values().to_vec();
            for (flat, v) in values.iter_mut().enumerate() {
                let x = grid.center(flat);
                *v *= 1.0 + 0.5 * x[d - 1].cos();
            }
            let field = DensityField::new(grid.clone(), values).map_err(map_fpe)?;
            field.normalized().map_err(map_fpe)
        }
        src => {
            let vars: Vec<&str> = s.variables().iter().map(|v| v.as_str()).collect();
            let expr = Expression::parse(src, &vars)
                .map_err(|e| CliError::Config(format!("--rho0: {e}")))?;
            let field = DensityField::from_expression(grid.clone(), &expr).map_err(map_fpe)?;
            field.normalized().map_err(map_fpe)
        }
    }
}

/// Minimum curvature over a coarse grid on the simulation box, in the
/// resolved mode; `None` when every probe point raises a domain error.
fn coarse_kappa(
    s: &Structure,
    args: &SimulateArgs,
    lo: &[f64],
    hi: &[f64],
) -> Option<(f64, Mode)> {
    let weight = resolve_weight(&args.analysis.weight, s).ok()?;
    let drift = args.analysis.drift_for(s);
    let grid = BoxGrid::new(lo.to_vec(), hi.to_vec(), vec![3; lo.len()]).ok()?;
    let points = grid.points();
    let (mode, _) = args.analysis.mode_for(s, &points, 1e-8).ok()?;
    let mut min = f64::INFINITY;
    for x in points {
        if let Ok(kp) = kappa_detail(s, &x, mode, drift, &weight.get()) {
            min = min.min(kp.kappa);
        }
    }
    min.is_finite().then_some((min, mode))
}

#[allow(clippy::too_many_arguments)]
fn render_summary(
    s: &Structure,
    args: &SimulateArgs,
    lo: &[f64],
    hi: &[f64],
    res: &[usize],
    dt: f64,
    series: &TimeSeries<f64>,
    kappa_ref: Option<(f64, Mode)>,
) -> String {
    let fisher_rate = fit_decay(series, DecayField::FisherAz);
    let entropy_rate = fit_decay(series, DecayField::Entropy);
    let mut w = JsonWriter::new();
    w.begin_object();
    w.field_int("schema_version", 1);
    w.field_str("command", "simulate");
    w.field_str("structure", s.name());
    w.key("params");
    w.begin_object();
    for (k, v) in s.params() {
        w.field_num(k, *v);
    }
    w.end_object();
    match kappa_ref {
        Some((_, mode)) => w.field_str("mode", mode_name(mode)),
        None => w.field_str("mode", "auto"),
    }
    w.field_bool("drift", args.analysis.drift_for(s));
    w.field_int("seed", args.seed as i64);
    w.key("grid");
    w.begin_object();
    w.key("lo");
    w.begin_array();
    for v in lo {
        w.number(*v);
    }
    w.end_array();
    w.key("hi");
    w.begin_array();
    for v in hi {
        w.number(*v);
    }
    w.end_array();
    w.key("res");
    w.begin_array();
    for n in res {
        w.integer(*n as i64);
    }
    w.end_array();
    w.end_object();
    w.field_num("t_end", args.t_end);
    w.field_num("dt", dt);
    w.field_str("dt_mode", if args.dt == "auto" { "auto" } else { "fixed" });
    w.field_int("sample_every", args.sample_every as i64);
    w.field_str("rho0", &args.rho0);
    w.field_int("samples", series.len() as i64);
    w.field_bool("truncated", series.truncated());
    w.key("fitted_rate");
    w.begin_object();
    w.field_num("entropy", entropy_rate);
    w.field_num("fisher_az", fisher_rate);
    w.end_object();
    w.key("kappa_ref");
    match kappa_ref {
        Some((k, _)) => w.number(k),
        None => w.null(),
    }
    w.key("two_kappa_ref");
    match kappa_ref {
        Some((k, _)) => w.number(2.0 * k),
        None => w.null(),
    }
    w.key("rate_ratio_fisher_az");
    match kappa_ref {
        Some((k, _)) if k > 0.0 => w.number(fisher_rate / (2.0 * k)),
        _ => w.null(),
    }
    w.end_object();
    w.finish()
}
