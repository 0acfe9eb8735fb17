//! Dataset and result JSONL handling. Result lines echo each input time
//! token byte-for-byte, so reading keeps the raw text of the `t` field
//! alongside its parsed value.

use crate::CliError;
use measure_filter::fv::FilterStepRecord;
use measure_filter::measures::{fmt_g17, ComponentMap};
use measure_filter::parametric::ParamStepRecord;
use measure_filter::sim::Dataset;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub struct RawBatch {
    pub t: f64,
    /// The exact byte span of the `t` value in the input line.
    pub t_raw: String,
    pub obs: Vec<f64>,
    pub latent: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineJson {
    t: f64,
    obs: Vec<f64>,
    #[serde(default)]
    z: Option<f64>,
}

fn data_err(line_no: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::new(2, format!("data line {line_no}: {msg}"))
}

/// Locates the raw number token of the top-level `"t"` key: the occurrence
/// whose previous non-space byte opens an object or follows a comma.
fn scan_t_token(line: &str) -> Option<&str> {
    let mut search = 0;
    while let Some(pos) = line[search..].find("\"t\"") {
        let at = search + pos;
        let prev_ok = matches!(line[..at].trim_end().chars().last(), Some('{') | Some(','));
        let after = line[at + 3..].trim_start();
        if prev_ok && after.starts_with(':') {
            let rest = after[1..].trim_start();
            let end = rest
                .find(|c: char| !(c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E')))
                .unwrap_or(rest.len());
            if end > 0 {
                return Some(&rest[..end]);
            }
        }
        search = at + 3;
    }
    None
}

pub fn read_dataset(text: &str) -> Result<Vec<RawBatch>, CliError> {
    let mut batches = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LineJson =
            serde_json::from_str(line).map_err(|e| data_err(line_no, e))?;
        let t_raw = scan_t_token(line)
            .ok_or_else(|| data_err(line_no, "cannot locate the \"t\" value"))?;
        if t_raw.parse::<f64>().ok() != Some(parsed.t) {
            return Err(data_err(
                line_no,
                format!("the \"t\" token {t_raw:?} does not scan as its parsed value"),
            ));
        }
        batches.push(RawBatch {
            t: parsed.t,
            t_raw: t_raw.to_string(),
            obs: parsed.obs,
            latent: parsed.z,
        });
    }
    Ok(batches)
}

/// Converts a batch of observation values to counts, rejecting negatives
/// and non-integers with the input line number.
pub fn counts_from_obs(obs: &[f64], line_no: usize) -> Result<Vec<u64>, CliError> {
    obs.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= 2f64.powi(53) {
                Ok(v as u64)
            } else {
                Err(data_err(line_no, format!("count observations must be nonnegative integers, got {v}")))
            }
        })
        .collect()
}

pub fn write_dataset(ds: &Dataset, integer_obs: bool, with_latent: bool) -> String {
    let mut out = String::new();
    for b in &ds.batches {
        let _ = write!(out, "{{\"t\":{},\"obs\":[", fmt_g17(b.t));
        for (i, &v) in b.obs.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            if integer_obs {
                let _ = write!(out, "{}", v as u64);
            } else {
                out.push_str(&fmt_g17(v));
            }
        }
        out.push(']');
        if with_latent {
            if let Some(z) = b.latent {
                let _ = write!(out, ",\"z\":{}", fmt_g17(z));
            }
        }
        out.push_str("}\n");
    }
    out
}

// --- result lines -----------------------------------------------------------

fn write_measure_components(out: &mut String, components: &ComponentMap) {
    out.push('[');
    for (i, (m, &w)) in components.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"counts\":{");
        for (j, (idx, c)) in m.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "\"{idx}\":{c}");
        }
        let _ = write!(out, "}},\"w\":{}}}", fmt_g17(w));
    }
    out.push(']');
}

fn write_param_components(out: &mut String, components: &BTreeMap<Vec<u64>, f64>) {
    out.push('[');
    for (i, (key, &w)) in components.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"counts\":{");
        let mut first = true;
        for (idx, &c) in key.iter().enumerate() {
            if c == 0 {
                continue;
            }
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "\"{idx}\":{c}");
        }
        let _ = write!(out, "}},\"w\":{}}}", fmt_g17(w));
    }
    out.push(']');
}

fn step_line(
    t_raw: &str,
    logml_increment: f64,
    n_components: usize,
    s: Option<f64>,
    pruned_mass: f64,
    weight_fullinfo: f64,
    weight_prior: f64,
    write_components: impl FnOnce(&mut String),
) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"t\":{t_raw},\"logml_increment\":{},\"n_components\":{n_components}",
        fmt_g17(logml_increment)
    );
    if let Some(s) = s {
        let _ = write!(out, ",\"s\":{}", fmt_g17(s));
    }
    let _ = write!(out, ",\"pruned_mass\":{},\"components\":", fmt_g17(pruned_mass));
    write_components(&mut out);
    let _ = write!(
        out,
        ",\"weight_fullinfo\":{},\"weight_prior\":{}}}\n",
        fmt_g17(weight_fullinfo),
        fmt_g17(weight_prior)
    );
    out
}

pub fn measure_step_line(
    t_raw: &str,
    rec: &FilterStepRecord,
    components: &ComponentMap,
) -> String {
    step_line(
        t_raw,
        rec.logml_increment,
        components.len(),
        rec.s,
        rec.cumulative_pruned_mass,
        rec.weight_fullinfo,
        rec.weight_prior,
        |out| write_measure_components(out, components),
    )
}

pub fn param_step_line(
    t_raw: &str,
    rec: &ParamStepRecord,
    components: &BTreeMap<Vec<u64>, f64>,
) -> String {
    step_line(
        t_raw,
        rec.logml_increment,
        components.len(),
        rec.s,
        rec.cumulative_pruned_mass,
        rec.weight_fullinfo,
        rec.weight_prior,
        |out| write_param_components(out, components),
    )
}

fn summary_line(
    total_logml: f64,
    n_steps: usize,
    n_components: usize,
    s: Option<f64>,
    write_components: impl FnOnce(&mut String),
) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"total_logml\":{},\"n_steps\":{n_steps},\"n_components\":{n_components}",
        fmt_g17(total_logml)
    );
    if let Some(s) = s {
        let _ = write!(out, ",\"s\":{}", fmt_g17(s));
    }
    out.push_str(",\"components\":");
    write_components(&mut out);
    out.push_str("}\n");
    out
}

pub fn measure_summary_line(
    total_logml: f64,
    n_steps: usize,
    s: Option<f64>,
    components: &ComponentMap,
) -> String {
    summary_line(total_logml, n_steps, components.len(), s, |out| {
        write_measure_components(out, components)
    })
}

pub fn param_summary_line(
    total_logml: f64,
    n_steps: usize,
    s: Option<f64>,
    components: &BTreeMap<Vec<u64>, f64>,
) -> String {
    summary_line(total_logml, n_steps, components.len(), s, |out| {
        write_param_components(out, components)
    })
}
