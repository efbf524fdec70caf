//! Problem instances: diffusion matrix `a`, auxiliary directions `z`, drift
//! `b`, and volume weight, plus JSON loading, built-in examples, and the
//! structural identities they satisfy (divergence vector, invariant-measure
//! residual, bracket-generating rank).

use crate::expr::{DomainError, Expression, ParseError};
use crate::jet::Jet;
use crate::real::Real;
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug)]
pub enum StructureError {
    /// Malformed config: missing key, wrong type, inconsistent dimensions.
    Schema(String),
    /// Expression failed to parse; `location` names the field and entry.
    Parse { location: String, error: ParseError },
    UnknownExample(String),
    MissingParameter { example: String, param: String },
}

impl fmt::Display for StructureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructureError::Schema(msg) => write!(f, "config schema error: {msg}"),
            StructureError::Parse { location, error } => {
                write!(f, "in {location}: {error}")
            }
            StructureError::UnknownExample(name) => {
                write!(f, "unknown example `{name}`")
            }
            StructureError::MissingParameter { example, param } => {
                write!(f, "example `{example}` requires parameter `{param}`")
            }
        }
    }
}

impl std::error::Error for StructureError {}

/// Jets of every field of a [`Structure`] at one point, the single input the
/// operator evaluators consume.
pub struct FieldJets<R: Real> {
    /// D x n entries of `a`.
    pub a: Vec<Vec<Jet<R>>>,
    /// D x m entries of `z` (empty when m = 0).
    pub z: Vec<Vec<Jet<R>>>,
    /// Length-D drift.
    pub b: Vec<Jet<R>>,
    pub log_vol: Jet<R>,
    pub potential: Jet<R>,
}

/// A full problem instance. Immutable after load; evaluation methods are
/// pure, so sharing across threads is safe.
#[derive(Debug, Clone)]
pub struct Structure {
    name: String,
    variables: Vec<String>,
    a: Vec<Vec<Expression>>,
    z: Vec<Vec<Expression>>,
    b: Vec<Expression>,
    log_vol: Expression,
    potential: Expression,
    params: BTreeMap<String, f64>,
}

impl Structure {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Coordinate dimension D.
    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    /// Number of columns of `a`.
    pub fn n_a(&self) -> usize {
        self.a[0].len()
    }

    /// Number of columns of `z` (0 when no auxiliary directions).
    pub fn m_z(&self) -> usize {
        self.z.first().map_or(0, |row| row.len())
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn a_entry(&self, row: usize, col: usize) -> &Expression {
        &self.a[row][col]
    }

    pub fn z_entry(&self, row: usize, col: usize) -> &Expression {
        &self.z[row][col]
    }

    pub fn b_entry(&self, row: usize) -> &Expression {
        &self.b[row]
    }

    pub fn log_vol_expr(&self) -> &Expression {
        &self.log_vol
    }

    pub fn potential_expr(&self) -> &Expression {
        &self.potential
    }

    /// True when any drift entry is a nonzero expression.
    pub fn has_drift(&self) -> bool {
        self.b.iter().any(|e| e.serialized() != "0")
    }

    /// True when log Vol or V is a nonzero expression.
    pub fn has_weight(&self) -> bool {
        self.log_vol.serialized() != "0" || self.potential.serialized() != "0"
    }

    /// Jets of all fields at `x`, to the given order.
    pub fn field_jets<R: Real>(
        &self,
        x: &[R],
        order: usize,
    ) -> Result<FieldJets<R>, DomainError> {
        let grid = |m: &Vec<Vec<Expression>>| -> Result<Vec<Vec<Jet<R>>>, DomainError> {
            m.iter()
                .map(|row| row.iter().map(|e| e.eval_jet(x, order)).collect())
                .collect()
        };
        Ok(FieldJets {
            a: grid(&self.a)?,
            z: grid(&self.z)?,
            b: self.b.iter().map(|e| e.eval_jet(x, order)).collect::<Result<_, _>>()?,
            log_vol: self.log_vol.eval_jet(x, order)?,
            potential: self.potential.eval_jet(x, order)?,
        })
    }

    /// Matrix of `a` values at `x` (D x n).
    pub fn a_matrix<R: Real>(&self, x: &[R]) -> Result<DMatrix<R>, DomainError> {
        eval_matrix(&self.a, x)
    }

    /// Matrix of `z` values at `x` (D x m; zero columns when m = 0).
    pub fn z_matrix<R: Real>(&self, x: &[R]) -> Result<DMatrix<R>, DomainError> {
        if self.m_z() == 0 {
            return Ok(DMatrix::zeros(self.dim(), 0));
        }
        eval_matrix(&self.z, x)
    }

    pub fn b_vector<R: Real>(&self, x: &[R]) -> Result<DVector<R>, DomainError> {
        let vals: Vec<R> = self
            .b
            .iter()
            .map(|e| e.eval_jet(x, 0).map(|j| j.value()))
            .collect::<Result<_, _>>()?;
        Ok(DVector::from_vec(vals))
    }

    /// Jet of log Vol_eff = log Vol - V, the unified weight.
    pub fn log_vol_eff_jet<R: Real>(&self, x: &[R], order: usize) -> Result<Jet<R>, DomainError> {
        Ok(self.log_vol.eval_jet(x, order)?.sub(&self.potential.eval_jet(x, order)?))
    }

    /// Divergence vector (a o grad a)_khat = sum_k a_{khat,k} div(column k).
    pub fn a_otimes_grad_a<R: Real>(&self, x: &[R]) -> Result<DVector<R>, DomainError> {
        let d = self.dim();
        let n = self.n_a();
        let jets: Vec<Vec<Jet<R>>> = self
            .a
            .iter()
            .map(|row| row.iter().map(|e| e.eval_jet(x, 1)).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()?;
        let mut out = DVector::zeros(d);
        for k in 0..n {
            let mut div = R::zero();
            for kp in 0..d {
                div += jets[kp][k].d1(kp);
            }
            for khat in 0..d {
                out[khat] += jets[khat][k].value() * div;
            }
        }
        Ok(out)
    }

    /// Max over `points` of the sup-norm of
    /// a o grad a - 2b + aa^T grad log Vol_eff; zero certifies the
    /// symmetric-invariant-measure identity at those points.
    pub fn invariant_measure_residual<R: Real>(
        &self,
        points: &[Vec<R>],
    ) -> Result<R, DomainError> {
        let mut worst = R::zero();
        for x in points {
            let oga = self.a_otimes_grad_a(x)?;
            let b = self.b_vector(x)?;
            let a = self.a_matrix(x)?;
            let w = self.log_vol_eff_jet(x, 1)?;
            let grad_w = DVector::from_fn(self.dim(), |i, _| w.d1(i));
            let resid = oga - b.scale(R::of(2.0)) + (&a * (a.transpose() * grad_w));
            for v in resid.iter() {
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }

    /// Rank of the span of the columns of `a` and their iterated Lie
    /// brackets at `x`, up to `max_depth` (at most 4: a depth-d bracket value
    /// needs order-(d-1) jets of the base fields). Returns (rank, smallest
    /// depth achieving it).
    pub fn hormander_rank<R: Real>(
        &self,
        x: &[R],
        max_depth: usize,
    ) -> Result<(usize, usize), DomainError> {
        assert!(max_depth >= 1, "need at least depth 1");
        assert!(max_depth <= 4, "bracket depth above 4 exceeds jet order 3");
        let d = self.dim();
        let n = self.n_a();
        let base_order = max_depth - 1;
        let base: Vec<Vec<Jet<R>>> = (0..n)
            .map(|k| {
                (0..d)
                    .map(|i| self.a[i][k].eval_jet(x, base_order))
                    .collect::<Result<_, _>>()
            })
            .collect::<Result<_, _>>()?;

        let mut columns: Vec<DVector<R>> = Vec::new();
        let mut rank_at_depth = Vec::new();
        let mut level = base.clone();
        for depth in 1..=max_depth {
            if depth > 1 {
                // left-normed brackets span each filtration level
                let prev = std::mem::take(&mut level);
                for f in &prev {
                    for g in &base {
                        level.push(bracket(g, f));
                    }
                }
            }
            for f in &level {
                columns.push(DVector::from_fn(d, |i, _| f[i].value()));
            }
            rank_at_depth.push(numeric_rank(&columns, d));
        }
        let rank = *rank_at_depth.last().unwrap();
        let depth_used = rank_at_depth.iter().position(|&r| r == rank).unwrap() + 1;
        Ok((rank, depth_used))
    }

    /// JSON config reproducing this structure through [`load_structure`].
    pub fn to_json(&self) -> String {
        use serde_json::{json, Map, Value};
        let grid = |m: &Vec<Vec<Expression>>| -> Value {
            Value::Array(
                m.iter()
                    .map(|row| {
                        Value::Array(
                            row.iter().map(|e| Value::String(e.source().to_string())).collect(),
                        )
                    })
                    .collect(),
            )
        };
        let mut doc = Map::new();
        doc.insert("name".into(), json!(self.name));
        doc.insert("variables".into(), json!(self.variables));
        doc.insert("a".into(), grid(&self.a));
        if self.m_z() > 0 {
            doc.insert("z".into(), grid(&self.z));
        }
        doc.insert(
            "b".into(),
            Value::Array(
                self.b.iter().map(|e| Value::String(e.source().to_string())).collect(),
            ),
        );
        doc.insert("log_vol".into(), json!(self.log_vol.source()));
        doc.insert("potential".into(), json!(self.potential.source()));
        if !self.params.is_empty() {
            doc.insert(
                "params".into(),
                Value::Object(
                    self.params
                        .iter()
                        .map(|(k, v)| (k.clone(), json!(v)))
                        .collect(),
                ),
            );
        }
        serde_json::to_string_pretty(&Value::Object(doc)).expect("structure serializes")
    }
}

fn eval_matrix<R: Real>(
    m: &[Vec<Expression>],
    x: &[R],
) -> Result<DMatrix<R>, DomainError> {
    let rows = m.len();
    let cols = m[0].len();
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            out[(i, j)] = m[i][j].eval_jet(x, 0)?.value();
        }
    }
    Ok(out)
}

/// [f, g]_i = sum_j f_j d_j g_i - g_j d_j f_i, one jet order lower than the
/// inputs.
fn bracket<R: Real>(f: &[Jet<R>], g: &[Jet<R>]) -> Vec<Jet<R>> {
    let d = f.len();
    (0..d)
        .map(|i| {
            let mut acc: Option<Jet<R>> = None;
            for j in 0..d {
                let term = f[j]
                    .mul(&g[i].extract_partial(j))
                    .sub(&g[j].mul(&f[i].extract_partial(j)));
                acc = Some(match acc {
                    None => term,
                    Some(s) => s.add(&term),
                });
            }
            acc.expect("dimension at least 1")
        })
        .collect()
}

fn numeric_rank<R: Real>(columns: &[DVector<R>], d: usize) -> usize {
    if columns.is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(d, columns.len(), |i, j| columns[j][i]);
    let sv = m.singular_values();
    let max = sv.iter().fold(R::zero(), |a: R, &b| a.max(b));
    if max == R::zero() {
        return 0;
    }
    let tol = R::of(1e-9) * max;
    sv.iter().filter(|&&s| s > tol).count()
}

// ---------------------------------------------------------------------------
// loading

/// Parse a JSON config into a [`Structure`]. Schema:
/// `{"name", "variables", "a", "z"?, "b"?, "log_vol"?, "potential"?,
/// "params"?}` with expressions as strings and params substituted textually
/// before parsing.
pub fn load_structure(config: &str) -> Result<Structure, StructureError> {
    let doc: serde_json::Value = serde_json::from_str(config)
        .map_err(|e| StructureError::Schema(format!("invalid JSON: {e}")))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| StructureError::Schema("top level must be an object".into()))?;

    for key in obj.keys() {
        if !matches!(
            key.as_str(),
            "name" | "variables" | "a" | "z" | "b" | "log_vol" | "potential" | "params"
        ) {
            return Err(StructureError::Schema(format!("unknown key `{key}`")));
        }
    }

    let name = obj
        .get("name")
        .and_then(|v| v.as_str())
        .ok_or_else(|| StructureError::Schema("missing string field `name`".into()))?
        .to_string();

    let variables: Vec<String> = obj
        .get("variables")
        .and_then(|v| v.as_array())
        .ok_or_else(|| StructureError::Schema("missing array field `variables`".into()))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| StructureError::Schema("variables must be strings".into()))
        })
        .collect::<Result<_, _>>()?;
    if variables.is_empty() {
        return Err(StructureError::Schema("need at least one variable".into()));
    }
    {
        let mut seen = variables.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != variables.len() {
            return Err(StructureError::Schema("variable names must be distinct".into()));
        }
    }
    let d = variables.len();

    let mut params = BTreeMap::new();
    if let Some(p) = obj.get("params") {
        let map = p
            .as_object()
            .ok_or_else(|| StructureError::Schema("`params` must be an object".into()))?;
        for (k, v) in map {
            let num = v
                .as_f64()
                .ok_or_else(|| StructureError::Schema(format!("param `{k}` must be a number")))?;
            params.insert(k.clone(), num);
        }
    }

    let var_refs: Vec<&str> = variables.iter().map(String::as_str).collect();
    let parse = |src: &str, location: String| -> Result<Expression, StructureError> {
        Expression::parse_with_params(src, &var_refs, &params)
            .map_err(|error| StructureError::Parse { location, error })
    };

    let read_grid = |key: &str| -> Result<Option<Vec<Vec<Expression>>>, StructureError> {
        let Some(v) = obj.get(key) else { return Ok(None) };
        let rows = v
            .as_array()
            .ok_or_else(|| StructureError::Schema(format!("`{key}` must be an array of rows")))?;
        if rows.len() != d {
            return Err(StructureError::Schema(format!(
                "`{key}` has {} rows, expected D = {d}",
                rows.len()
            )));
        }
        let mut grid = Vec::with_capacity(d);
        let mut width = None;
        for (i, row) in rows.iter().enumerate() {
            let entries = row.as_array().ok_or_else(|| {
                StructureError::Schema(format!("`{key}` row {i} must be an array"))
            })?;
            match width {
                None => width = Some(entries.len()),
                Some(w) if w != entries.len() => {
                    return Err(StructureError::Schema(format!(
                        "`{key}` row {i} has {} entries, expected {w}",
                        entries.len()
                    )))
                }
                _ => {}
            }
            let mut out_row = Vec::with_capacity(entries.len());
            for (j, cell) in entries.iter().enumerate() {
                let src = cell.as_str().ok_or_else(|| {
                    StructureError::Schema(format!("`{key}`[{i}][{j}] must be a string"))
                })?;
                out_row.push(parse(src, format!("{key}[{i}][{j}]"))?);
            }
            grid.push(out_row);
        }
        Ok(Some(grid))
    };

    let a = read_grid("a")?
        .ok_or_else(|| StructureError::Schema("missing matrix field `a`".into()))?;
    if a[0].is_empty() {
        return Err(StructureError::Schema("`a` needs at least one column".into()));
    }
    let z = read_grid("z")?.unwrap_or_else(|| vec![Vec::new(); d]);
    if z[0].len() > d {
        return Err(StructureError::Schema(format!(
            "`z` has {} columns, more than D = {d}",
            z[0].len()
        )));
    }

    let b = match obj.get("b") {
        None => {
            let mut out = Vec::with_capacity(d);
            for i in 0..d {
                out.push(parse("0", format!("b[{i}] default"))?);
            }
            out
        }
        Some(v) => {
            let entries = v
                .as_array()
                .ok_or_else(|| StructureError::Schema("`b` must be an array".into()))?;
            if entries.len() != d {
                return Err(StructureError::Schema(format!(
                    "`b` has {} entries, expected D = {d}",
                    entries.len()
                )));
            }
            let mut out = Vec::with_capacity(d);
            for (i, cell) in entries.iter().enumerate() {
                let src = cell.as_str().ok_or_else(|| {
                    StructureError::Schema(format!("`b`[{i}] must be a string"))
                })?;
                out.push(parse(src, format!("b[{i}]"))?);
            }
            out
        }
    };

    let scalar = |key: &str| -> Result<Expression, StructureError> {
        match obj.get(key) {
            None => parse("0", format!("{key} default")),
            Some(v) => {
                let src = v.as_str().ok_or_else(|| {
                    StructureError::Schema(format!("`{key}` must be a string"))
                })?;
                parse(src, key.to_string())
            }
        }
    };
    let log_vol = scalar("log_vol")?;
    let potential = scalar("potential")?;

    Ok(Structure { name, variables, a, z, b, log_vol, potential, params })
}

// ---------------------------------------------------------------------------
// built-in examples

pub const BUILTIN_NAMES: [&str; 8] = [
    "euclidean",
    "heisenberg",
    "su2",
    "grushin",
    "langevin_const",
    "langevin_var",
    "se2",
    "conformal2d",
];

/// Instantiate a named example. User `params` override the example defaults;
/// `grushin` requires `k`.
pub fn builtin(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<Structure, StructureError> {
    let mut merged: BTreeMap<String, f64>;
    let config = match name {
        "euclidean" => {
            let dim_f = params.get("dim").or_else(|| params.get("D")).copied().unwrap_or(2.0);
            if dim_f.fract() != 0.0 || !(1.0..=9.0).contains(&dim_f) {
                return Err(StructureError::Schema(format!(
                    "euclidean dimension must be an integer in 1..=9, got {dim_f}"
                )));
            }
            let d = dim_f as usize;
            let vars: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
            let a: Vec<Vec<String>> = (0..d)
                .map(|i| (0..d).map(|j| if i == j { "1" } else { "0" }.to_string()).collect())
                .collect();
            serde_json::json!({
                "name": "euclidean",
                "variables": vars,
                "a": a,
            })
        }
        "heisenberg" => serde_json::json!({
            "name": "heisenberg",
            "variables": ["x1", "x2", "x3"],
            "a": [["1", "0"], ["0", "1"], ["-x2/2", "x1/2"]],
            "z": [["x2/2"], ["-x1/2"], ["1"]],
        }),
        "su2" => serde_json::json!({
            "name": "su2",
            "variables": ["theta", "phi", "psi"],
            "a": [
                ["cos(psi)", "-sin(psi)"],
                ["sin(psi)/sin(theta)", "cos(psi)/sin(theta)"],
                ["-cos(theta)*sin(psi)/sin(theta)", "-cos(theta)*cos(psi)/sin(theta)"]
            ],
            "z": [["0"], ["0"], ["1"]],
            "log_vol": "log(sin(theta))",
        }),
        "grushin" => {
            let k = params
                .get("k")
                .copied()
                .ok_or_else(|| StructureError::MissingParameter {
                    example: "grushin".into(),
                    param: "k".into(),
                })?;
            if k.fract() != 0.0 || k < 1.0 {
                return Err(StructureError::Schema(format!(
                    "grushin exponent k must be a positive integer, got {k}"
                )));
            }
            serde_json::json!({
                "name": "grushin",
                "variables": ["x", "y"],
                "a": [["1", "0"], ["0", "x^k"]],
                "params": {"k": k},
            })
        }
        "langevin_const" => {
            merged = BTreeMap::from(
                [("gamma", 1.0), ("u", 1.0), ("omega", 1.0), ("z1", 2.0), ("z2", -1.0)]
                    .map(|(k, v)| (k.to_string(), v)),
            );
            merged.extend(params.iter().map(|(k, v)| (k.clone(), *v)));
            serde_json::json!({
                "name": "langevin_const",
                "variables": ["x", "v"],
                "a": [["0"], ["sqrt(2*gamma*u)"]],
                "z": [["z1"], ["z2"]],
                "b": ["2*v", "-2*gamma*u*v - 2*omega^2*x"],
                "potential": "v^2/2 + omega^2*x^2/2",
                "params": merged,
            })
        }
        "langevin_var" => {
            merged = BTreeMap::from(
                [
                    ("gamma", 1.0),
                    ("u0", 1.0),
                    ("eps", 0.5),
                    ("omega", 1.0),
                    ("z10", 2.0),
                    ("z11", 0.1),
                    ("z20", -1.0),
                    ("z21", 0.1),
                ]
                .map(|(k, v)| (k.to_string(), v)),
            );
            merged.extend(params.iter().map(|(k, v)| (k.clone(), *v)));
            serde_json::json!({
                "name": "langevin_var",
                "variables": ["x", "v"],
                "a": [["0"], ["sqrt(2*gamma*u0*(1 + eps*cos(x)))"]],
                "z": [["z10 + z11*v"], ["z20 + z21*v"]],
                "b": [
                    "2*v",
                    "-2*gamma*u0*(1 + eps*cos(x))*v - 2*omega^2*x"
                ],
                "potential": "v^2/2 + omega^2*x^2/2",
                "params": merged,
            })
        }
        "se2" => {
            merged = BTreeMap::from([("beta".to_string(), 0.1)]);
            merged.extend(params.iter().map(|(k, v)| (k.clone(), *v)));
            serde_json::json!({
                "name": "se2",
                "variables": ["theta", "x", "y"],
                "a": [["1", "0"], ["0", "exp(beta*theta)"], ["0", "1"]],
                "z": [["0"], ["0"], ["-beta"]],
                "b": [
                    "-theta",
                    "-(exp(2*beta*theta)*x + exp(beta*theta)*y)/2",
                    "-(exp(beta*theta)*x + y)/2"
                ],
                "potential": "theta^2 + x^2/2 + y^2/2",
                "params": merged,
            })
        }
        "conformal2d" => {
            merged = BTreeMap::from([("c".to_string(), 0.25)]);
            merged.extend(params.iter().map(|(k, v)| (k.clone(), *v)));
            serde_json::json!({
                "name": "conformal2d",
                "variables": ["x", "y"],
                "a": [
                    ["exp(-c*sin(x)*cos(y))", "0"],
                    ["0", "exp(-c*sin(x)*cos(y))"]
                ],
                "b": [
                    "c*cos(x)*cos(y)*exp(-2*c*sin(x)*cos(y))/2",
                    "-c*sin(x)*sin(y)*exp(-2*c*sin(x)*cos(y))/2"
                ],
                "log_vol": "2*c*sin(x)*cos(y)",
                "params": merged,
            })
        }
        other => return Err(StructureError::UnknownExample(other.to_string())),
    };
    load_structure(&config.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heisenberg_divergence_vanishes() {
        let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
        let v = s.a_otimes_grad_a(&[0.3f64, -1.1, 0.7]).unwrap();
        for x in v.iter() {
            assert!(x.abs() < 1e-15);
        }
    }

    #[test]
    fn su2_divergence_matches_closed_form() {
        let s = builtin("su2", &BTreeMap::new()).unwrap();
        let (theta, phi, psi) = (0.9f64, 0.4, -0.6);
        let v = s.a_otimes_grad_a(&[theta, phi, psi]).unwrap();
        assert!((v[0] - (-theta.cos() / theta.sin())).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn grushin_bracket_rank_steps() {
        for k in 1..=3usize {
            let params = BTreeMap::from([("k".to_string(), k as f64)]);
            let s = builtin("grushin", &params).unwrap();
            let got = s.hormander_rank(&[0.0f64, 0.4], k + 1).unwrap();
            assert_eq!(got, (2, k + 1), "k = {k}");
        }
    }

    #[test]
    fn load_rejects_ragged_rows() {
        let cfg = r#"{"name":"bad","variables":["x","y"],"a":[["1","0"],["0"]]}"#;
        assert!(matches!(load_structure(cfg), Err(StructureError::Schema(_))));
    }

    #[test]
    fn serialization_round_trips_evaluations() {
        let s = builtin("se2", &BTreeMap::from([("beta".to_string(), 0.1)])).unwrap();
        let s2 = load_structure(&s.to_json()).unwrap();
        let x = [0.2f64, -0.5, 0.8];
        let a1 = s.a_matrix(&x).unwrap();
        let a2 = s2.a_matrix(&x).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(
            s.b_vector(&x).unwrap(),
            s2.b_vector(&x).unwrap()
        );
    }
}
