//! Shared plumbing: the exit-code contract, structure resolution, and the
//! flag grammar for boxes, resolutions, modes, and weights.

use clap::Args;
use gammaz::expr::Expression;
use gammaz::fields::{builtin, load_structure, Structure};
use gammaz::gamma::Weight;
use gammaz::tensor::{natural_mode, Mode};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;

/// Errors that abort a command. Tolerance exceedances are not errors: the
/// commands write their artifact first and return exit code 3 themselves.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or a malformed structure config; exit 1.
    Config(String),
    /// The structure cannot be evaluated where requested; exit 2.
    Domain(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Domain(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Domain(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Structure selection, shared by every subcommand.
#[derive(Args)]
pub struct StructureArgs {
    /// Built-in structure name; `gammaz examples` lists them.
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    pub builtin: Option<String>,

    /// Path to a JSON structure description.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Parameter override, repeatable.
    #[arg(long = "param", value_name = "K=V")]
    pub params: Vec<String>,
}

impl StructureArgs {
    pub fn resolve(&self) -> Result<Structure, CliError> {
        let params = parse_params(&self.params)?;
        match (&self.builtin, &self.config) {
            (Some(name), None) => {
                builtin(name, &params).map_err(|e| CliError::Config(e.to_string()))
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                let text = if params.is_empty() {
                    text
                } else {
                    with_param_overrides(&text, &params)?
                };
                load_structure(&text).map_err(|e| CliError::Config(e.to_string()))
            }
            _ => Err(CliError::Config(
                "exactly one of --builtin or --config is required".into(),
            )),
        }
    }
}

fn parse_params(raw: &[String]) -> Result<BTreeMap<String, f64>, CliError> {
    let mut out = BTreeMap::new();
    for p in raw {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--param expects K=V, got `{p}`")))?;
        let value: f64 = v
            .parse()
            .map_err(|_| CliError::Config(format!("--param {k}: `{v}` is not a number")))?;
        out.insert(k.to_string(), value);
    }
    Ok(out)
}

/// Merge `--param` overrides into the `params` object of a JSON config.
fn with_param_overrides(
    text: &str,
    params: &BTreeMap<String, f64>,
) -> Result<String, CliError> {
    let mut doc: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    let root = doc
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config root must be a JSON object".into()))?;
    let slot = root
        .entry("params")
        .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    let map = slot
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config `params` must be an object".into()))?;
    for (k, v) in params {
        map.insert(k.clone(), serde_json::json!(v));
    }
    Ok(doc.to_string())
}

/// Identity selection, shared by analyze, verify, and simulate.
#[derive(Args)]
pub struct AnalysisArgs {
    /// Identity to assemble: horizontal, z_plain, generalized, or auto
    /// (most general identity whose joint system closes on the structure).
    #[arg(long, default_value = "auto", value_parser = parse_mode)]
    pub mode: ModeSpec,

    /// Include drift corrections; defaults to whether the structure stores
    /// a drift.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub drift: Option<bool>,

    /// Divergence weight: voleff (volume tilted by the stored potential),
    /// vol, or custom:EXPR with EXPR the log-weight.
    #[arg(long, default_value = "voleff", value_parser = parse_weight)]
    pub weight: WeightSpec,
}

/// Mode as named on the command line; `auto` resolves per structure.
#[derive(Clone, Copy, Debug)]
pub enum ModeSpec {
    Auto,
    Fixed(Mode),
}

impl AnalysisArgs {
    pub fn drift_for(&self, s: &Structure) -> bool {
        self.drift.unwrap_or_else(|| s.has_drift())
    }

    /// Resolves the mode, probing `points` when it was left on auto; the
    /// bool reports whether auto selection happened.
    pub fn mode_for(
        &self,
        s: &Structure,
        points: &[Vec<f64>],
        tol: f64,
    ) -> Result<(Mode, bool), CliError> {
        match self.mode {
            ModeSpec::Fixed(m) => Ok((m, false)),
            ModeSpec::Auto => natural_mode(s, points, tol)
                .map(|m| (m, true))
                .map_err(|e| CliError::Domain(e.to_string())),
        }
    }
}

fn parse_mode(s: &str) -> Result<ModeSpec, String> {
    match s {
        "auto" => Ok(ModeSpec::Auto),
        "horizontal" => Ok(ModeSpec::Fixed(Mode::Horizontal)),
        "z_plain" | "z-plain" | "zplain" => Ok(ModeSpec::Fixed(Mode::ZPlain)),
        "generalized" => Ok(ModeSpec::Fixed(Mode::Generalized)),
        other => Err(format!(
            "`{other}` is not a mode; use horizontal, z_plain, generalized, or auto"
        )),
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Horizontal => "horizontal",
        Mode::ZPlain => "z_plain",
        Mode::Generalized => "generalized",
    }
}

/// Weight as named on the command line; the custom expression is parsed
/// later, once the structure's variables are known.
#[derive(Clone, Debug)]
pub enum WeightSpec {
    Vol,
    VolEff,
    Custom(String),
}

fn parse_weight(s: &str) -> Result<WeightSpec, String> {
    match s {
        "vol" => Ok(WeightSpec::Vol),
        "voleff" | "vol_eff" | "vol-eff" => Ok(WeightSpec::VolEff),
        other => match other.strip_prefix("custom:") {
            Some(src) if !src.trim().is_empty() => Ok(WeightSpec::Custom(src.to_string())),
            _ => Err(format!(
                "`{other}` is not a weight; use vol, voleff, or custom:EXPR"
            )),
        },
    }
}

/// A weight spec bound to one structure: holds the parsed custom log-weight
/// so `get` can lend it out for the borrow-carrying [`Weight`].
pub struct ResolvedWeight {
    label: String,
    spec: WeightSpec,
    custom: Option<Expression>,
}

impl ResolvedWeight {
    pub fn get(&self) -> Weight<'_> {
        match &self.spec {
            WeightSpec::Vol => Weight::Vol,
            WeightSpec::VolEff => Weight::VolEff,
            WeightSpec::Custom(_) => {
                Weight::Custom(self.custom.as_ref().expect("custom weight parsed"))
            }
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

pub fn resolve_weight(
    spec: &WeightSpec,
    s: &Structure,
) -> Result<ResolvedWeight, CliError> {
    let (label, custom) = match spec {
        WeightSpec::Vol => ("vol".to_string(), None),
        WeightSpec::VolEff => ("voleff".to_string(), None),
        WeightSpec::Custom(src) => {
            let vars: Vec<&str> = s.variables().iter().map(|v| v.as_str()).collect();
            let expr = Expression::parse(src, &vars)
                .map_err(|e| CliError::Config(format!("--weight custom: {e}")))?;
            (format!("custom:{src}"), Some(expr))
        }
    };
    Ok(ResolvedWeight { label, spec: spec.clone(), custom })
}

/// `lo:hi[,lo:hi...]`; a single pair replicates across all `dim` axes.
pub fn parse_box(spec: &str, dim: usize) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for part in spec.split(',') {
        let (l, h) = part
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("--box axis `{part}` is not LO:HI")))?;
        let l: f64 = l
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("--box: `{l}` is not a number")))?;
        let h: f64 = h
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("--box: `{h}` is not a number")))?;
        lo.push(l);
        hi.push(h);
    }
    if lo.len() == 1 && dim > 1 {
        lo = vec![lo[0]; dim];
        hi = vec![hi[0]; dim];
    }
    if lo.len() != dim {
        return Err(CliError::Config(format!(
            "--box has {} axes but the structure has {dim} variables",
            lo.len()
        )));
    }
    Ok((lo, hi))
}

/// `N[,N...]` or `NxN...`; a single value replicates across all `dim` axes.
pub fn parse_res(spec: &str, dim: usize) -> Result<Vec<usize>, CliError> {
    let mut out = Vec::new();
    for part in spec.split(|c| c == ',' || c == 'x') {
        let n: usize = part
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("--res: `{part}` is not a count")))?;
        out.push(n);
    }
    if out.len() == 1 && dim > 1 {
        out = vec![out[0]; dim];
    }
    if out.len() != dim {
        return Err(CliError::Config(format!(
            "--res has {} axes but the structure has {dim} variables",
            out.len()
        )));
    }
    Ok(out)
}

/// Write the artifact to `--out` when given, else to stdout.
pub fn emit(out: &Option<PathBuf>, artifact: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, artifact).map_err(|e| {
            CliError::Config(format!("cannot write {}: {e}", path.display()))
        }),
        None => {
            print!("{artifact}");
            Ok(())
        }
    }
}
