//! `examples`: list the built-in structures with their parameters and the
//! section labels of the text they are drawn from.

use crate::common::CliError;
use crate::json::JsonWriter;
use clap::Args;
use gammaz::fields::{builtin, BUILTIN_NAMES};
use std::collections::BTreeMap;

#[derive(Args)]
pub struct ExamplesArgs {
    /// Emit the listing as JSON.
    #[arg(long)]
    pub json: bool,
}

struct Row {
    name: &'static str,
    section: &'static str,
    blurb: &'static str,
    /// Extra params needed just to instantiate the listing entry.
    required: &'static [(&'static str, f64)],
}

/// One row per builtin, in `BUILTIN_NAMES` order.
const ROWS: [Row; 8] = [
    Row {
        name: "euclidean",
        section: "\u{a7}2.2",
        blurb: "flat frame; zero-curvature baseline",
        required: &[],
    },
    Row {
        name: "heisenberg",
        section: "\u{a7}2.2",
        blurb: "step-2 nilpotent frame; one z column closes the missing direction",
        required: &[],
    },
    Row {
        name: "su2",
        section: "\u{a7}2.3.1",
        blurb: "compact frame in Euler angles with a sin(theta) volume weight",
        required: &[],
    },
    Row {
        name: "grushin",
        section: "\u{a7}3.4.3",
        blurb: "plane frame degenerating like x^k along a line",
        required: &[("k", 1.0)],
    },
    Row {
        name: "langevin_const",
        section: "\u{a7}3.4.2",
        blurb: "kinetic transport with velocity noise at constant temperature",
        required: &[],
    },
    Row {
        name: "langevin_var",
        section: "\u{a7}3.4.2",
        blurb: "kinetic transport with state-dependent temperature",
        required: &[],
    },
    Row {
        name: "se2",
        section: "\u{a7}3.4.4",
        blurb: "exponential-twist frame with a quadratic potential drift",
        required: &[],
    },
    Row {
        name: "conformal2d",
        section: "\u{a7}3.4.1",
        blurb: "conformally rescaled plane frame",
        required: &[],
    },
];

pub fn run(args: &ExamplesArgs) -> Result<u8, CliError> {
    let mut listing: Vec<(&Row, gammaz::Structure)> = Vec::new();
    for row in &ROWS {
        let params: BTreeMap<String, f64> =
            row.required.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        let s = builtin(row.name, &params)
            .unwrap_or_else(|e| panic!("builtin {} must instantiate: {e}", row.name));
        listing.push((row, s));
    }
    debug_assert_eq!(listing.len(), BUILTIN_NAMES.len());

    if args.json {
        print!("{}", render_json(&listing));
    } else {
        print!("{}", render_text(&listing));
    }
    Ok(0)
}

fn param_list(row: &Row, s: &gammaz::Structure) -> Vec<String> {
    s.params()
        .iter()
        .map(|(k, v)| {
            if row.required.iter().any(|&(r, _)| r == k) {
                format!("{k}={v} (required)")
            } else {
                format!("{k}={v}")
            }
        })
        .collect()
}

fn render_text(listing: &[(&Row, gammaz::Structure)]) -> String {
    let mut out = String::new();
    for (row, s) in listing {
        out.push_str(&format!("{:<15} {:<8} {}\n", row.name, row.section, row.blurb));
        out.push_str(&format!(
            "{:<15} variables: {}; frame: {} a-column(s), {} z-column(s){}\n",
            "",
            s.variables().join(", "),
            s.n_a(),
            s.m_z(),
            if s.has_drift() { "; drift" } else { "" }
        ));
        let params = param_list(row, s);
        if !params.is_empty() {
            out.push_str(&format!("{:<15} params: {}\n", "", params.join(", ")));
        }
    }
    out
}

fn render_json(listing: &[(&Row, gammaz::Structure)]) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.field_int("schema_version", 1);
    w.field_str("command", "examples");
    w.key("examples");
    w.begin_array();
    for (row, s) in listing {
        w.begin_object();
        w.field_str("name", row.name);
        w.field_str("section", row.section);
        w.field_str("description", row.blurb);
        w.key("variables");
        w.begin_array();
        for v in s.variables() {
            w.string(v);
        }
        w.end_array();
        w.key("params");
        w.begin_object();
        for (k, v) in s.params() {
            w.field_num(k, *v);
        }
        w.end_object();
        w.key("required_params");
        w.begin_array();
        for (k, _) in row.required {
            w.string(k);
        }
        w.end_array();
        w.field_int("a_columns", s.n_a() as i64);
        w.field_int("z_columns", s.m_z() as i64);
        w.field_bool("drift", s.has_drift());
        w.end_object();
    }
    w.end_array();
    w.end_object();
    w.finish()
}
