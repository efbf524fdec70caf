//! `verify`: random-sample checks of the algebraic identities behind the
//! decomposition, the stationarity of the declared volume weight, the
//! bracket-rank condition, and the weak commutator identity on a periodic
//! grid.

use crate::common::{
    emit, mode_name, parse_box, resolve_weight, AnalysisArgs, CliError, StructureArgs,
};
use crate::json::JsonWriter;
use clap::Args;
use gammaz::curvature::random_polynomial;
use gammaz::expr::DomainError;
use gammaz::fields::Structure;
use gammaz::fpe::weak_identity_check;
use gammaz::gamma::Weight;
use gammaz::tensor::{assemble, decomposition_residual, Mode};
use gammaz::{Expression, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// Sample points per run, decomposition polynomials per point, and the
/// flat-weight (Bochner) polynomials per point.
const N_POINTS: usize = 20;
const N_FNS: usize = 5;
const N_BOCHNER_FNS: usize = 2;
/// Tries per collected point before giving up on the box.
const MAX_TRIES_PER_POINT: usize = 40;
/// Zero threshold for the stationarity identity.
const MEASURE_TOL: f64 = 1e-10;
/// Weak-identity quadrature gap allowance, matched to the default torus
/// resolutions below (the gap is pure quadrature error, order >= 2).
const WEAK_TOL: f64 = 2e-2;

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub structure: StructureArgs,

    #[command(flatten)]
    pub analysis: AnalysisArgs,

    /// Sampling box, LO:HI per axis; one pair replicates. Defaults to a
    /// box away from the structure's known singular sets.
    #[arg(long = "box", value_name = "LO:HI[,..]", allow_hyphen_values = true)]
    pub box_spec: Option<String>,

    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Seed for the sample points and polynomials.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Largest acceptable Lambda defect.
    #[arg(long = "tol-lambda", default_value_t = 1e-8)]
    pub tol_lambda: f64,

    /// Largest acceptable relative decomposition residual.
    #[arg(long = "tol-decomp", default_value_t = 1e-8)]
    pub tol_decomp: f64,
}

struct PointChecks {
    decomp: f64,
    lambda: f64,
    bochner: f64,
}

struct MeasureParts {
    total: f64,
    frame: f64,
    drift: f64,
}

enum Status {
    Pass,
    Fail,
    Info,
    Skip,
}

impl Status {
    fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Info => "info",
            Status::Skip => "skip",
        }
    }
}

struct CheckRow {
    name: &'static str,
    value: Option<f64>,
    tolerance: Option<f64>,
    status: Status,
    note: Option<String>,
}

pub fn run(args: &VerifyArgs) -> Result<u8, CliError> {
    let s = args.structure.resolve()?;
    let dim = s.dim();
    let (lo, hi) = match &args.box_spec {
        Some(spec) => parse_box(spec, dim)?,
        None => default_box(&s),
    };
    let weight = resolve_weight(&args.analysis.weight, &s)?;
    let drift = args.analysis.drift_for(&s);
    let vars: Vec<&str> = s.variables().iter().map(|v| v.as_str()).collect();

    // Phase 1: rejection-sample admissible points. Admissibility covers
    // everything the per-point checks touch, so later errors are hard ones.
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut tries = 0usize;
    let mut last_error = String::new();
    while points.len() < N_POINTS && tries < N_POINTS * MAX_TRIES_PER_POINT {
        tries += 1;
        let x: Vec<f64> = (0..dim).map(|i| rng.gen_range(lo[i]..=hi[i])).collect();
        let admissible = assemble(&s, &x)
            .map_err(|e| last_error = e.to_string())
            .is_ok()
            && measure_parts(&s, &x).map_err(|e| last_error = e.to_string()).is_ok()
            && weight
                .get()
                .log_jet(&s, &x, 1)
                .map_err(|e| last_error = e.to_string())
                .is_ok();
        if admissible {
            points.push(x);
        }
    }
    if points.is_empty() {
        let detail = if last_error.is_empty() {
            String::new()
        } else {
            format!(" (last error: {last_error})")
        };
        return Err(CliError::Domain(format!(
            "no admissible sample points after {tries} tries in the box{detail}"
        )));
    }

    let (mode, mode_auto) = args.analysis.mode_for(&s, &points, args.tol_lambda)?;
    let bochner_mode = if s.m_z() > 0 { Mode::ZPlain } else { Mode::Horizontal };

    let mut collected: Vec<PointChecks> = Vec::with_capacity(points.len());
    let mut measure = MeasureParts { total: 0.0, frame: 0.0, drift: 0.0 };
    for x in &points {
        let pc = point_checks(&s, x, mode, bochner_mode, drift, &weight.get(), &vars, &mut rng)
            .map_err(|e| CliError::Domain(e.to_string()))?;
        collected.push(pc);
        let mp = measure_parts(&s, x).map_err(|e| CliError::Domain(e.to_string()))?;
        measure.total = measure.total.max(mp.total);
        measure.frame = measure.frame.max(mp.frame);
        measure.drift = measure.drift.max(mp.drift);
    }

    let fold = |f: fn(&PointChecks) -> f64| collected.iter().map(f).fold(0.0f64, f64::max);
    let mut checks = vec![
        tol_row("decomposition", fold(|p| p.decomp), args.tol_decomp),
        tol_row("lambda_residual", fold(|p| p.lambda), args.tol_lambda),
        tol_row("bochner", fold(|p| p.bochner), args.tol_decomp),
        measure_row(&measure),
    ];
    checks.push(hormander_row(&s, &points[0]));
    checks.push(weak_row(&s, &vars));

    let failed = checks.iter().filter(|c| matches!(c.status, Status::Fail)).count();
    let artifact = render_json(
        &s,
        args,
        weight.label(),
        mode,
        mode_auto,
        drift,
        &lo,
        &hi,
        tries,
        &checks,
        failed == 0,
    );
    emit(&args.out, &artifact)?;
    if failed > 0 {
        eprintln!("verify: {failed} check(s) out of tolerance");
        return Ok(3);
    }
    Ok(0)
}

fn tol_row(name: &'static str, value: f64, tol: f64) -> CheckRow {
    CheckRow {
        name,
        value: Some(value),
        tolerance: Some(tol),
        status: if value <= tol { Status::Pass } else { Status::Fail },
        note: None,
    }
}

/// The stationarity identity is judged on its total residual; the
/// frame/drift split only classifies a nonzero total. Kinetic transport
/// keeps the measure invariant without being gradient type, so a pure
/// drift-flux residual is reported informationally, not as a failure.
fn measure_row(m: &MeasureParts) -> CheckRow {
    if m.total <= MEASURE_TOL {
        CheckRow {
            name: "measure",
            value: Some(m.total),
            tolerance: Some(MEASURE_TOL),
            status: Status::Pass,
            note: Some("declared volume weight is stationary".into()),
        }
    } else if m.frame <= MEASURE_TOL {
        CheckRow {
            name: "measure",
            value: Some(m.total),
            tolerance: Some(MEASURE_TOL),
            status: Status::Info,
            note: Some(format!(
                "residual is a pure drift flux (frame part {:.3e}); the drift is \
                 not gradient type for the stored potential",
                m.frame
            )),
        }
    } else {
        CheckRow {
            name: "measure",
            value: Some(m.total),
            tolerance: Some(MEASURE_TOL),
            status: Status::Fail,
            note: Some(format!(
                "frame part {:.3e} is nonzero: the declared volume weight does \
                 not match the frame",
                m.frame
            )),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn point_checks(
    s: &Structure,
    x: &[f64],
    mode: Mode,
    bochner_mode: Mode,
    drift: bool,
    weight: &Weight,
    vars: &[&str],
    rng: &mut ChaCha8Rng,
) -> Result<PointChecks, DomainError> {
    let mut worst_decomp = 0.0f64;
    let mut worst_lambda = 0.0f64;
    for _ in 0..N_FNS {
        let f = random_polynomial(vars, 4, rng);
        let c = decomposition_residual(s, &f, x, mode, drift, weight)?;
        worst_decomp = worst_decomp.max(c.residual);
        worst_lambda = worst_lambda.max(c.lambda_residual);
    }
    let mut worst_bochner = 0.0f64;
    for _ in 0..N_BOCHNER_FNS {
        let f = random_polynomial(vars, 4, rng);
        let c = decomposition_residual(s, &f, x, bochner_mode, false, &Weight::Vol)?;
        worst_bochner = worst_bochner.max(c.residual);
    }
    Ok(PointChecks { decomp: worst_decomp, lambda: worst_lambda, bochner: worst_bochner })
}

/// The stationarity identity splits as
/// `(a gradient a + a a^T grad log vol) - (2b + a a^T grad V)`: the total
/// must vanish for the effective weight to be invariant; the frame part
/// alone vanishes whenever the volume matches the frame.
fn measure_parts(s: &Structure, x: &[f64]) -> Result<MeasureParts, DomainError> {
    let d = s.dim();
    let a = s.a_matrix(x)?;
    let n_a = a.ncols();
    let oga = s.a_otimes_grad_a(x)?;
    let aat = |i: usize, j: usize| -> f64 { (0..n_a).map(|k| a[(i, k)] * a[(j, k)]).sum() };

    let lv = s.log_vol_expr().eval_jet(x, 1)?;
    let b = s.b_vector(x)?;
    let pot = s.potential_expr().eval_jet(x, 1)?;

    let mut parts = MeasureParts { total: 0.0, frame: 0.0, drift: 0.0 };
    for i in 0..d {
        let mut frame_row = oga[i];
        let mut drift_row = 2.0 * b[i];
        for j in 0..d {
            frame_row += aat(i, j) * lv.d1(j);
            drift_row += aat(i, j) * pot.d1(j);
        }
        parts.frame = parts.frame.max(frame_row.abs());
        parts.drift = parts.drift.max(drift_row.abs());
        parts.total = parts.total.max((frame_row - drift_row).abs());
    }
    Ok(parts)
}

fn hormander_row(s: &Structure, x: &[f64]) -> CheckRow {
    match s.hormander_rank(x, 4) {
        Ok((rank, depth)) => {
            let full = rank == s.dim();
            CheckRow {
                name: "hormander",
                value: Some(rank as f64),
                tolerance: None,
                status: if full { Status::Pass } else { Status::Info },
                note: Some(if full {
                    format!("frame brackets span rank {rank} of {} at depth {depth}", s.dim())
                } else {
                    format!(
                        "frame brackets alone span rank {rank} of {}; drift directions \
                         are not counted",
                        s.dim()
                    )
                }),
            }
        }
        Err(e) => CheckRow {
            name: "hormander",
            value: None,
            tolerance: None,
            status: Status::Skip,
            note: Some(e.to_string()),
        },
    }
}

/// Periodic quadrature of the commutator identity with a coupled trig test
/// function, `g = exp(h)`, and a density vanishing at the box faces.
fn weak_row(s: &Structure, vars: &[&str]) -> CheckRow {
    let skip = |note: String| CheckRow {
        name: "weak_identity",
        value: None,
        tolerance: Some(WEAK_TOL),
        status: Status::Skip,
        note: Some(note),
    };
    let d = s.dim();
    if d > 3 {
        return skip("the grid solver covers 1..=3 dimensions".into());
    }
    let n = if d == 3 { 24 } else { 64 };
    let pi = std::f64::consts::PI;
    let grid = match Grid::new(vec![-pi; d], vec![pi; d], vec![n; d]) {
        Ok(g) => g,
        Err(e) => return skip(e.to_string()),
    };
    let hsrc = match d {
        1 => format!("sin({})", vars[0]),
        2 => format!("sin({}) + cos({}) * sin({})", vars[0], vars[0], vars[1]),
        _ => format!("sin({}) + cos({}) * sin({})", vars[0], vars[1], vars[2]),
    };
    let rsrc = vars
        .iter()
        .map(|v| format!("(1 + cos({v}))^2"))
        .collect::<Vec<_>>()
        .join(" * ");
    let parse = |src: &str| Expression::parse(src, vars).expect("trig source parses");
    let h = parse(&hsrc);
    let g = parse(&format!("exp({hsrc})"));
    let rho = parse(&rsrc);
    match weak_identity_check(s, &h, &g, &rho, &grid) {
        Ok(w) => CheckRow {
            name: "weak_identity",
            value: Some(w.gap),
            tolerance: Some(WEAK_TOL),
            status: if w.gap <= WEAK_TOL { Status::Pass } else { Status::Fail },
            note: Some(format!("torus quadrature at {n} cells per axis")),
        },
        Err(e) => skip(e.to_string()),
    }
}

/// Boxes that avoid the built-in structures' singular sets; custom configs
/// get the unit box and rejection sampling.
fn default_box(s: &Structure) -> (Vec<f64>, Vec<f64>) {
    let d = s.dim();
    match s.name() {
        "su2" => (vec![0.4, -1.0, -1.0], vec![2.7, 1.0, 1.0]),
        "grushin" => (vec![0.4, -1.0], vec![1.6, 1.0]),
        _ => (vec![-1.0; d], vec![1.0; d]),
    }
}

#[allow(clippy::too_many_arguments)]
fn render_json(
    s: &Structure,
    args: &VerifyArgs,
    weight_label: &str,
    mode: Mode,
    mode_auto: bool,
    drift: bool,
    lo: &[f64],
    hi: &[f64],
    tries: usize,
    checks: &[CheckRow],
    pass: bool,
) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.field_int("schema_version", 1);
    w.field_str("command", "verify");
    w.field_str("structure", s.name());
    w.key("params");
    w.begin_object();
    for (k, v) in s.params() {
        w.field_num(k, *v);
    }
    w.end_object();
    w.field_str("mode", mode_name(mode));
    w.field_bool("mode_auto", mode_auto);
    w.field_bool("drift", drift);
    w.field_str("weight", weight_label);
    w.field_int("seed", args.seed as i64);
    w.key("samples");
    w.begin_object();
    w.field_int("points", N_POINTS as i64);
    w.field_int("functions", N_FNS as i64);
    w.field_int("tries", tries as i64);
    w.key("box_lo");
    w.begin_array();
    for v in lo {
        w.number(*v);
    }
    w.end_array();
    w.key("box_hi");
    w.begin_array();
    for v in hi {
        w.number(*v);
    }
    w.end_array();
    w.end_object();
    w.key("checks");
    w.begin_array();
    for c in checks {
        w.begin_object();
        w.field_str("name", c.name);
        w.key("value");
        match c.value {
            Some(v) => w.number(v),
            None => w.null(),
        }
        w.key("tolerance");
        match c.tolerance {
            Some(t) => w.number(t),
            None => w.null(),
        }
        w.field_str("status", c.status.as_str());
        if let Some(note) = &c.note {
            w.field_str("note", note);
        }
        w.end_object();
    }
    w.end_array();
    w.field_str("status", if pass { "pass" } else { "fail" });
    w.end_object();
    w.finish()
}
