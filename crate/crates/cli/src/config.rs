//! Configuration files for the `simulate` and `filter` commands: strict
//! parsing (unknown keys rejected), per-model field validation with errors
//! naming the offending field, and a canonical serialization that is a
//! byte-level fixpoint of parse -> write.

use crate::CliError;
use measure_filter::dual::BinomialConvention;
use measure_filter::dw::DwWeightMode;
use measure_filter::measures::{fmt_g17, BaseMeasure, P0, P0Json};
use measure_filter::sim::{simulate, Dataset, SimConfig, SimModel};
use serde::Deserialize;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fv,
    Dw,
    Wf,
    Cir,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fv => "fv",
            ModelKind::Dw => "dw",
            ModelKind::Wf => "wf",
            ModelKind::Cir => "cir",
        }
    }

    /// Whether observations are integer counts (projected models) rather
    /// than real-valued locations (measure-valued models).
    pub fn integer_obs(self) -> bool {
        matches!(self, ModelKind::Wf | ModelKind::Cir)
    }

    /// Whether simulation records the latent total mass alongside the data.
    pub fn has_latent(self) -> bool {
        matches!(self, ModelKind::Dw | ModelKind::Cir)
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::new(2, msg)
}

fn require<T>(opt: Option<T>, field: &str, model: &str) -> Result<T, CliError> {
    opt.ok_or_else(|| config_err(format!("model \"{model}\" requires the field \"{field}\"")))
}

fn forbid<T>(opt: &Option<T>, field: &str, model: &str) -> Result<(), CliError> {
    if opt.is_some() {
        return Err(config_err(format!(
            "model \"{model}\" does not accept the field \"{field}\""
        )));
    }
    Ok(())
}

fn check_positive(v: f64, field: &str) -> Result<f64, CliError> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(config_err(format!("\"{field}\" must be positive: {v}")));
    }
    Ok(v)
}

fn check_alpha(alpha: &[f64]) -> Result<(), CliError> {
    if alpha.is_empty() {
        return Err(config_err("\"alpha\" must be a nonempty vector"));
    }
    for &a in alpha {
        check_positive(a, "alpha")?;
    }
    Ok(())
}

fn check_prune_eps(eps: f64) -> Result<f64, CliError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(config_err(format!("\"prune_eps\" must lie in [0, 1): {eps}")));
    }
    Ok(eps)
}

fn parse_weight_mode(raw: Option<&str>) -> Result<DwWeightMode, CliError> {
    match raw {
        None | Some("full_marginal") => Ok(DwWeightMode::FullMarginal),
        Some("paper_literal") => Ok(DwWeightMode::PaperLiteral),
        Some(other) => Err(config_err(format!(
            "\"dw_weight_mode\" must be \"full_marginal\" or \"paper_literal\", got {other:?}"
        ))),
    }
}

fn parse_convention(raw: Option<&str>) -> Result<BinomialConvention, CliError> {
    match raw {
        None | Some("survivor") => Ok(BinomialConvention::Survivor),
        Some("paper_literal") => Ok(BinomialConvention::PaperLiteral),
        Some(other) => Err(config_err(format!(
            "\"dw_binomial_convention\" must be \"survivor\" or \"paper_literal\", got {other:?}"
        ))),
    }
}

fn weight_mode_name(mode: DwWeightMode) -> &'static str {
    match mode {
        DwWeightMode::FullMarginal => "full_marginal",
        DwWeightMode::PaperLiteral => "paper_literal",
    }
}

fn convention_name(conv: BinomialConvention) -> &'static str {
    match conv {
        BinomialConvention::Survivor => "survivor",
        BinomialConvention::PaperLiteral => "paper_literal",
    }
}

fn base_from(theta: f64, p0: P0) -> Result<BaseMeasure, CliError> {
    BaseMeasure::new(theta, p0).map_err(|e| config_err(e.to_string()))
}

fn write_p0(out: &mut String, p0: &P0) {
    match *p0 {
        P0::Uniform { a, b } => {
            let _ = write!(
                out,
                "{{\"type\":\"uniform\",\"a\":{},\"b\":{}}}",
                fmt_g17(a),
                fmt_g17(b)
            );
        }
        P0::Gaussian { mu, var } => {
            let _ = write!(
                out,
                "{{\"type\":\"gaussian\",\"mu\":{},\"var\":{}}}",
                fmt_g17(mu),
                fmt_g17(var)
            );
        }
    }
}

fn write_alpha(out: &mut String, alpha: &[f64]) {
    out.push('[');
    for (i, a) in alpha.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_g17(*a));
    }
    out.push(']');
}

// --- filter configuration --------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigJson {
    model: ModelKind,
    #[serde(default)]
    theta: Option<f64>,
    #[serde(default)]
    p0: Option<P0Json>,
    #[serde(default)]
    alpha: Option<Vec<f64>>,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    sigma_speed: Option<f64>,
    #[serde(default)]
    prune_eps: Option<f64>,
    #[serde(default)]
    dw_weight_mode: Option<String>,
    #[serde(default)]
    dw_binomial_convention: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Model-specific parameters of a validated filter configuration.
pub enum RunModel {
    Fv {
        base: BaseMeasure,
    },
    Dw {
        base: BaseMeasure,
        beta: f64,
        mode: DwWeightMode,
        convention: BinomialConvention,
    },
    Wf {
        alpha: Vec<f64>,
    },
    Cir {
        alpha: f64,
        beta: f64,
    },
}

pub struct RunConfig {
    pub kind: ModelKind,
    pub model: RunModel,
    pub sigma_speed: f64,
    pub prune_eps: f64,
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RunConfigJson = serde_json::from_str(text)
            .map_err(|e| config_err(format!("config: {e}")))?;
        let model_name = raw.model.name();
        if raw.model != ModelKind::Dw {
            forbid(&raw.dw_weight_mode, "dw_weight_mode", model_name)?;
            forbid(&raw.dw_binomial_convention, "dw_binomial_convention", model_name)?;
        }
        let model = match raw.model {
            ModelKind::Fv => {
                forbid(&raw.alpha, "alpha", model_name)?;
                forbid(&raw.beta, "beta", model_name)?;
                let theta = require(raw.theta, "theta", model_name)?;
                let p0 = require(raw.p0, "p0", model_name)?;
                RunModel::Fv {
                    base: base_from(theta, p0.into())?,
                }
            }
            ModelKind::Dw => {
                forbid(&raw.alpha, "alpha", model_name)?;
                let theta = require(raw.theta, "theta", model_name)?;
                let p0 = require(raw.p0, "p0", model_name)?;
                let beta = check_positive(require(raw.beta, "beta", model_name)?, "beta")?;
                RunModel::Dw {
                    base: base_from(theta, p0.into())?,
                    beta,
                    mode: parse_weight_mode(raw.dw_weight_mode.as_deref())?,
                    convention: parse_convention(raw.dw_binomial_convention.as_deref())?,
                }
            }
            ModelKind::Wf => {
                forbid(&raw.theta, "theta", model_name)?;
                forbid(&raw.p0, "p0", model_name)?;
                forbid(&raw.beta, "beta", model_name)?;
                let alpha = require(raw.alpha, "alpha", model_name)?;
                check_alpha(&alpha)?;
                RunModel::Wf { alpha }
            }
            ModelKind::Cir => {
                forbid(&raw.theta, "theta", model_name)?;
                forbid(&raw.p0, "p0", model_name)?;
                let alpha = require(raw.alpha, "alpha", model_name)?;
                check_alpha(&alpha)?;
                if alpha.len() != 1 {
                    return Err(config_err(
                        "model \"cir\" takes a single-entry \"alpha\" vector",
                    ));
                }
                let beta = check_positive(require(raw.beta, "beta", model_name)?, "beta")?;
                RunModel::Cir {
                    alpha: alpha[0],
                    beta,
                }
            }
        };
        Ok(RunConfig {
            kind: raw.model,
            model,
            sigma_speed: check_positive(raw.sigma_speed.unwrap_or(1.0), "sigma_speed")?,
            prune_eps: check_prune_eps(raw.prune_eps.unwrap_or(1e-8))?,
            seed: raw.seed.unwrap_or(0),
        })
    }

    /// Canonical JSON form; parsing it back and re-serializing reproduces
    /// the same bytes.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{{\"model\":\"{}\"", self.kind.name());
        match &self.model {
            RunModel::Fv { base } => {
                let _ = write!(out, ",\"theta\":{},\"p0\":", fmt_g17(base.theta));
                write_p0(&mut out, &base.p0);
            }
            RunModel::Dw {
                base,
                beta,
                mode,
                convention,
            } => {
                let _ = write!(out, ",\"theta\":{},\"p0\":", fmt_g17(base.theta));
                write_p0(&mut out, &base.p0);
                let _ = write!(
                    out,
                    ",\"beta\":{},\"dw_weight_mode\":\"{}\",\"dw_binomial_convention\":\"{}\"",
                    fmt_g17(*beta),
                    weight_mode_name(*mode),
                    convention_name(*convention)
                );
            }
            RunModel::Wf { alpha } => {
                out.push_str(",\"alpha\":");
                write_alpha(&mut out, alpha);
            }
            RunModel::Cir { alpha, beta } => {
                out.push_str(",\"alpha\":");
                write_alpha(&mut out, &[*alpha]);
                let _ = write!(out, ",\"beta\":{}", fmt_g17(*beta));
            }
        }
        let _ = write!(
            out,
            ",\"sigma_speed\":{},\"prune_eps\":{},\"seed\":{}}}",
            fmt_g17(self.sigma_speed),
            fmt_g17(self.prune_eps),
            self.seed
        );
        out
    }
}

// --- simulation configuration ----------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfigJson {
    model: ModelKind,
    #[serde(default)]
    theta: Option<f64>,
    #[serde(default)]
    p0: Option<P0Json>,
    #[serde(default)]
    alpha: Option<Vec<f64>>,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    sigma_speed: Option<f64>,
    schedule: Vec<(f64, u64)>,
    seed: u64,
}

pub enum SimModelSpec {
    Fv { base: BaseMeasure },
    Dw { base: BaseMeasure, beta: f64 },
    Wf { alpha: Vec<f64> },
    Cir { alpha: f64, beta: f64 },
}

pub struct SimSpec {
    pub kind: ModelKind,
    pub model: SimModelSpec,
    pub sigma_speed: f64,
    pub schedule: Vec<(f64, u64)>,
    pub seed: u64,
}

impl SimSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: SimConfigJson = serde_json::from_str(text)
            .map_err(|e| config_err(format!("config: {e}")))?;
        let model_name = raw.model.name();
        let model = match raw.model {
            ModelKind::Fv => {
                forbid(&raw.alpha, "alpha", model_name)?;
                forbid(&raw.beta, "beta", model_name)?;
                let theta = require(raw.theta, "theta", model_name)?;
                let p0 = require(raw.p0, "p0", model_name)?;
                SimModelSpec::Fv {
                    base: base_from(theta, p0.into())?,
                }
            }
            ModelKind::Dw => {
                forbid(&raw.alpha, "alpha", model_name)?;
                let theta = require(raw.theta, "theta", model_name)?;
                let p0 = require(raw.p0, "p0", model_name)?;
                let beta = check_positive(require(raw.beta, "beta", model_name)?, "beta")?;
                SimModelSpec::Dw {
                    base: base_from(theta, p0.into())?,
                    beta,
                }
            }
            ModelKind::Wf => {
                forbid(&raw.theta, "theta", model_name)?;
                forbid(&raw.p0, "p0", model_name)?;
                forbid(&raw.beta, "beta", model_name)?;
                let alpha = require(raw.alpha, "alpha", model_name)?;
                check_alpha(&alpha)?;
                SimModelSpec::Wf { alpha }
            }
            ModelKind::Cir => {
                forbid(&raw.theta, "theta", model_name)?;
                forbid(&raw.p0, "p0", model_name)?;
                let alpha = require(raw.alpha, "alpha", model_name)?;
                check_alpha(&alpha)?;
                if alpha.len() != 1 {
                    return Err(config_err(
                        "model \"cir\" takes a single-entry \"alpha\" vector",
                    ));
                }
                let beta = check_positive(require(raw.beta, "beta", model_name)?, "beta")?;
                SimModelSpec::Cir {
                    alpha: alpha[0],
                    beta,
                }
            }
        };
        let mut prev = 0.0;
        for &(t, _) in &raw.schedule {
            if !t.is_finite() || t <= prev {
                return Err(config_err(format!(
                    "schedule times must be finite and strictly increasing from 0, got {t} after {prev}"
                )));
            }
            prev = t;
        }
        Ok(SimSpec {
            kind: raw.model,
            model,
            sigma_speed: check_positive(raw.sigma_speed.unwrap_or(1.0), "sigma_speed")?,
            schedule: raw.schedule,
            seed: raw.seed,
        })
    }

    pub fn run(&self) -> measure_filter::Result<Dataset> {
        let model = match &self.model {
            SimModelSpec::Fv { base } => SimModel::Fv { base: *base },
            SimModelSpec::Dw { base, beta } => SimModel::Dw {
                base: *base,
                beta: *beta,
            },
            SimModelSpec::Wf { alpha } => SimModel::Wf { alpha },
            SimModelSpec::Cir { alpha, beta } => SimModel::Cir {
                alpha: *alpha,
                beta: *beta,
            },
        };
        simulate(&SimConfig {
            model,
            sigma_speed: self.sigma_speed,
            schedule: self.schedule.clone(),
            seed: self.seed,
        })
    }

    /// Canonical JSON form (used for the provenance sidecar); a parse ->
    /// write fixpoint like `RunConfig::canonical`.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{{\"model\":\"{}\"", self.kind.name());
        match &self.model {
            SimModelSpec::Fv { base } => {
                let _ = write!(out, ",\"theta\":{},\"p0\":", fmt_g17(base.theta));
                write_p0(&mut out, &base.p0);
            }
            SimModelSpec::Dw { base, beta } => {
                let _ = write!(out, ",\"theta\":{},\"p0\":", fmt_g17(base.theta));
                write_p0(&mut out, &base.p0);
                let _ = write!(out, ",\"beta\":{}", fmt_g17(*beta));
            }
            SimModelSpec::Wf { alpha } => {
                out.push_str(",\"alpha\":");
                write_alpha(&mut out, alpha);
            }
            SimModelSpec::Cir { alpha, beta } => {
                out.push_str(",\"alpha\":");
                write_alpha(&mut out, &[*alpha]);
                let _ = write!(out, ",\"beta\":{}", fmt_g17(*beta));
            }
        }
        let _ = write!(out, ",\"sigma_speed\":{},\"schedule\":[", fmt_g17(self.sigma_speed));
        for (i, &(t, n)) in self.schedule.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "[{},{}]", fmt_g17(t), n);
        }
        let _ = write!(out, "],\"seed\":{}}}", self.seed);
        out
    }
}
