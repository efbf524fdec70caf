//! `analyze`: scan a box for the pointwise curvature lower bound and the
//! residuals certifying it.

use crate::common::{
    emit, mode_name, parse_box, parse_res, resolve_weight, AnalysisArgs, CliError,
    StructureArgs,
};
use crate::json::JsonWriter;
use clap::Args;
use gammaz::curvature::{kappa_detail, BoxGrid, KappaPoint};
use gammaz::fields::Structure;
use gammaz::tensor::Mode;
use std::path::PathBuf;

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub structure: StructureArgs,

    #[command(flatten)]
    pub analysis: AnalysisArgs,

    /// Scan box, LO:HI per axis; one pair replicates to all axes.
    /// Default [-1, 1] per axis.
    #[arg(long = "box", value_name = "LO:HI[,..]", allow_hyphen_values = true)]
    pub box_spec: Option<String>,

    /// Grid points per axis; one value replicates. Default 5.
    #[arg(long, value_name = "N[,..]")]
    pub res: Option<String>,

    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Report format.
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    pub format: String,

    /// Echoed into the report; the scan itself draws no randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Largest acceptable Lambda defect; exceeding it exits 3 after the
    /// report is written.
    #[arg(long = "tol-lambda", default_value_t = 1e-8)]
    pub tol_lambda: f64,
}

struct Scan {
    lo: Vec<f64>,
    hi: Vec<f64>,
    res: Vec<usize>,
    records: Vec<(Vec<f64>, KappaPoint<f64>)>,
    skipped: Vec<(Vec<f64>, String)>,
}

pub fn run(args: &AnalyzeArgs) -> Result<u8, CliError> {
    let s = args.structure.resolve()?;
    let dim = s.dim();
    let (lo, hi) = match &args.box_spec {
        Some(spec) => parse_box(spec, dim)?,
        None => (vec![-1.0; dim], vec![1.0; dim]),
    };
    let res = match &args.res {
        Some(spec) => parse_res(spec, dim)?,
        None => vec![5; dim],
    };
    let weight = resolve_weight(&args.analysis.weight, &s)?;
    let drift = args.analysis.drift_for(&s);

    let grid = BoxGrid::new(lo.clone(), hi.clone(), res.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let points = grid.points();
    let stride = (points.len() / 8).max(1);
    let probe: Vec<Vec<f64>> = points.iter().step_by(stride).take(8).cloned().collect();
    let (mode, mode_auto) = args.analysis.mode_for(&s, &probe, args.tol_lambda)?;

    let mut scan = Scan { lo, hi, res, records: Vec::new(), skipped: Vec::new() };
    for x in points {
        match kappa_detail(&s, &x, mode, drift, &weight.get()) {
            Ok(kp) => scan.records.push((x, kp)),
            Err(e) => scan.skipped.push((x, e.to_string())),
        }
    }

    let artifact = match args.format.as_str() {
        "csv" => render_csv(&s, &scan),
        _ => render_json(&s, args, &weight.label().to_string(), mode, mode_auto, drift, &scan),
    };
    emit(&args.out, &artifact)?;

    if scan.records.is_empty() {
        eprintln!(
            "analyze: all {} grid points raised domain errors",
            scan.skipped.len()
        );
        return Ok(2);
    }
    let worst_lambda = scan
        .records
        .iter()
        .map(|(_, kp)| kp.lambda_residual)
        .fold(0.0f64, f64::max);
    if worst_lambda > args.tol_lambda {
        eprintln!(
            "analyze: worst Lambda defect {worst_lambda:.3e} exceeds --tol-lambda {:.3e}",
            args.tol_lambda
        );
        return Ok(3);
    }
    Ok(0)
}

fn render_json(
    s: &Structure,
    args: &AnalyzeArgs,
    weight_label: &str,
    mode: Mode,
    mode_auto: bool,
    drift: bool,
    scan: &Scan,
) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.field_int("schema_version", 1);
    w.field_str("command", "analyze");
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
    w.key("grid");
    w.begin_object();
    w.key("lo");
    w.begin_array();
    for v in &scan.lo {
        w.number(*v);
    }
    w.end_array();
    w.key("hi");
    w.begin_array();
    for v in &scan.hi {
        w.number(*v);
    }
    w.end_array();
    w.key("res");
    w.begin_array();
    for n in &scan.res {
        w.integer(*n as i64);
    }
    w.end_array();
    w.end_object();
    w.field_num("tol_lambda", args.tol_lambda);

    let mut min_kappa = f64::INFINITY;
    let mut argmin: &[f64] = &[];
    let mut lambda_ok = 0usize;
    for (x, kp) in &scan.records {
        if kp.kappa < min_kappa {
            min_kappa = kp.kappa;
            argmin = x;
        }
        if kp.lambda_residual <= args.tol_lambda {
            lambda_ok += 1;
        }
    }
    w.key("summary");
    w.begin_object();
    w.key("min_kappa");
    if scan.records.is_empty() {
        w.null();
    } else {
        w.number(min_kappa);
    }
    w.key("argmin");
    w.begin_array();
    for v in argmin {
        w.number(*v);
    }
    w.end_array();
    w.key("lambda_ok_fraction");
    if scan.records.is_empty() {
        w.null();
    } else {
        w.number(lambda_ok as f64 / scan.records.len() as f64);
    }
    w.field_int("points", scan.records.len() as i64);
    w.field_int("skipped", scan.skipped.len() as i64);
    w.end_object();

    w.key("records");
    w.begin_array();
    for (x, kp) in &scan.records {
        w.begin_object();
        w.key("x");
        w.begin_array();
        for v in x {
            w.number(*v);
        }
        w.end_array();
        w.field_num("kappa", kp.kappa);
        w.field_num("lambda_residual", kp.lambda_residual);
        w.field_num("factorization_residual", kp.factorization_residual);
        w.field_bool("rank_fallback", kp.rank_fallback);
        w.end_object();
    }
    w.end_array();

    w.key("skipped");
    w.begin_array();
    for (x, msg) in &scan.skipped {
        w.begin_object();
        w.key("x");
        w.begin_array();
        for v in x {
            w.number(*v);
        }
        w.end_array();
        w.field_str("error", msg);
        w.end_object();
    }
    w.end_array();

    w.end_object();
    w.finish()
}

fn render_csv(s: &Structure, scan: &Scan) -> String {
    let mut out = String::new();
    for v in s.variables() {
        out.push_str(v);
        out.push(',');
    }
    out.push_str("kappa,lambda_residual,factorization_residual,rank_fallback\n");
    for (x, kp) in &scan.records {
        for v in x {
            out.push_str(&format!("{v:.16e},"));
        }
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{}\n",
            kp.kappa,
            kp.lambda_residual,
            kp.factorization_residual,
            u8::from(kp.rank_fallback)
        ));
    }
    if !scan.skipped.is_empty() {
        eprintln!("analyze: skipped {} points on domain errors", scan.skipped.len());
    }
    out
}
