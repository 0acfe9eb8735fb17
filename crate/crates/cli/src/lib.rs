//! Command-line driver: `simulate` writes synthetic datasets, `filter` runs
//! the exact filtering recursion over a dataset, `validate` executes a
//! verification suite. Exit codes: 0 success, 1 failed validation check,
//! 2 configuration or usage error, 3 resource cap, 4 non-monotone times.

pub mod config;
pub mod data;

use clap::{Parser, Subcommand};
use config::{RunConfig, RunModel, SimSpec};
use measure_filter::dw::dw_filter_with;
use measure_filter::fv::fv_filter_with;
use measure_filter::measures::{DwFilterState, FvFilterState};
use measure_filter::parametric::{cir_filter_with, wf_filter_with, DirichletMixture, GammaMixture};
use measure_filter::validate::{run_suite, Suite};
use measure_filter::Error;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

/// Maps library failures to the documented exit codes; `advice` is appended
/// to resource-cap messages so the user knows which knob to turn.
fn from_core(e: Error, advice: &str) -> CliError {
    let code = match e {
        Error::SupportCap { .. } | Error::Instability { .. } => 3,
        Error::NonMonotoneTimes { .. } => 4,
        _ => 2,
    };
    let message = match code {
        3 if !advice.is_empty() => format!("{e}; {advice}"),
        _ => e.to_string(),
    };
    CliError::new(code, message)
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::new(2, format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .map_err(|e| CliError::new(2, format!("cannot write {}: {e}", path.display())))
}

#[derive(Parser)]
#[command(
    name = "measure-filter",
    version,
    about = "Exact filtering for Fleming-Viot and Dawson-Watanabe signals"
)]
struct Cli {
    /// Worker threads (default 1, or MEASURE_FILTER_THREADS). Orchestration
    /// is single-threaded; results are identical for any accepted value.
    #[arg(long, global = true)]
    threads: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset plus a provenance sidecar
    Simulate {
        /// Simulation config JSON
        #[arg(long)]
        config: PathBuf,
        /// Output dataset JSONL path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the exact filter over a dataset
    Filter {
        /// Filter config JSON
        #[arg(long)]
        config: PathBuf,
        /// Input dataset JSONL path
        #[arg(long)]
        data: PathBuf,
        /// Output results JSONL path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite (duality, projection, oracle, stability)
    Validate {
        /// Suite name
        #[arg(long)]
        suite: String,
        /// Master seed for randomized checks
        #[arg(long)]
        seed: Option<u64>,
        /// Write the machine-readable report JSON here
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Validates the thread count from the flag or the environment fallback.
/// Any positive integer is accepted; the pipeline stays single-threaded, so
/// the identical-results-for-any-thread-count requirement holds trivially.
fn resolve_threads(flag: Option<&str>, env_val: Option<&str>) -> Result<u32, CliError> {
    let (source, raw) = match (flag, env_val) {
        (Some(v), _) => ("--threads", v),
        (None, Some(v)) => ("MEASURE_FILTER_THREADS", v),
        (None, None) => return Ok(1),
    };
    raw.trim()
        .parse::<u32>()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| {
            CliError::new(
                2,
                format!("{source} must be a positive integer, got {raw:?}"),
            )
        })
}

fn cmd_simulate(config: &Path, out: &Path) -> Result<(), CliError> {
    let spec = SimSpec::parse(&read_file(config)?)?;
    let ds = spec.run().map_err(|e| {
        from_core(
            e,
            "use larger gaps between epochs (dt >= 1e-3/sigma_speed keeps seed counts bounded)",
        )
    })?;
    let body = data::write_dataset(&ds, spec.kind.integer_obs(), spec.kind.has_latent());
    write_file(out, &body)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".provenance.json");
    write_file(Path::new(&sidecar), &(spec.canonical() + "\n"))?;
    Ok(())
}

const PRUNE_ADVICE: &str = "raise prune_eps to keep the mixture support bounded";

fn cmd_filter(config: &Path, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::parse(&read_file(config)?)?;
    let raw = data::read_dataset(&read_file(data_path)?)?;
    let times: Vec<f64> = raw.iter().map(|b| b.t).collect();
    let mut body = String::new();
    let mut total_logml = 0.0;
    let mut idx = 0;
    match &cfg.model {
        RunModel::Fv { base } => {
            let prior = FvFilterState::prior(*base, cfg.sigma_speed)
                .map_err(|e| from_core(e, ""))?;
            let batches: Vec<Vec<f64>> = raw.iter().map(|b| b.obs.clone()).collect();
            let (state, _) = fv_filter_with(&prior, &times, &batches, cfg.prune_eps, |st, rec| {
                total_logml += rec.logml_increment;
                body.push_str(&data::measure_step_line(&raw[idx].t_raw, rec, &st.components));
                idx += 1;
                Ok(())
            })
            .map_err(|e| from_core(e, PRUNE_ADVICE))?;
            body.push_str(&data::measure_summary_line(
                total_logml,
                raw.len(),
                None,
                &state.components,
            ));
        }
        RunModel::Dw {
            base,
            beta,
            mode,
            convention,
        } => {
            let prior = DwFilterState::prior(*base, *beta, cfg.sigma_speed)
                .map_err(|e| from_core(e, ""))?;
            let batches: Vec<Vec<f64>> = raw.iter().map(|b| b.obs.clone()).collect();
            let (state, _) = dw_filter_with(
                &prior,
                &times,
                &batches,
                cfg.prune_eps,
                *mode,
                *convention,
                |st, rec| {
                    total_logml += rec.logml_increment;
                    body.push_str(&data::measure_step_line(&raw[idx].t_raw, rec, &st.components));
                    idx += 1;
                    Ok(())
                },
            )
            .map_err(|e| from_core(e, PRUNE_ADVICE))?;
            body.push_str(&data::measure_summary_line(
                total_logml,
                raw.len(),
                Some(state.s),
                &state.components,
            ));
        }
        RunModel::Wf { alpha } => {
            let prior = DirichletMixture::prior(alpha.clone(), cfg.sigma_speed)
                .map_err(|e| from_core(e, ""))?;
            let mut batches = Vec::with_capacity(raw.len());
            for (i, b) in raw.iter().enumerate() {
                let counts = data::counts_from_obs(&b.obs, i + 1)?;
                if counts.len() != alpha.len() {
                    return Err(CliError::new(
                        2,
                        format!(
                            "data line {}: expected {} category counts, got {}",
                            i + 1,
                            alpha.len(),
                            counts.len()
                        ),
                    ));
                }
                batches.push(counts);
            }
            let (state, _) = wf_filter_with(&prior, &times, &batches, cfg.prune_eps, |st, rec| {
                total_logml += rec.logml_increment;
                body.push_str(&data::param_step_line(&raw[idx].t_raw, rec, &st.components));
                idx += 1;
                Ok(())
            })
            .map_err(|e| from_core(e, PRUNE_ADVICE))?;
            body.push_str(&data::param_summary_line(
                total_logml,
                raw.len(),
                None,
                &state.components,
            ));
        }
        RunModel::Cir { alpha, beta } => {
            let prior = GammaMixture::prior(vec![*alpha], *beta, cfg.sigma_speed)
                .map_err(|e| from_core(e, ""))?;
            let mut batches = Vec::with_capacity(raw.len());
            for (i, b) in raw.iter().enumerate() {
                let counts = data::counts_from_obs(&b.obs, i + 1)?;
                let n = counts.len() as u64;
                let y: u64 = counts.iter().sum();
                batches.push((n, y));
            }
            let (state, _) = cir_filter_with(&prior, &times, &batches, cfg.prune_eps, |st, rec| {
                total_logml += rec.logml_increment;
                body.push_str(&data::param_step_line(&raw[idx].t_raw, rec, &st.components));
                idx += 1;
                Ok(())
            })
            .map_err(|e| from_core(e, PRUNE_ADVICE))?;
            body.push_str(&data::param_summary_line(
                total_logml,
                raw.len(),
                Some(state.s),
                &state.components,
            ));
        }
    }
    write_file(out, &body)
}

fn cmd_validate(
    suite_name: &str,
    seed: Option<u64>,
    report: Option<&Path>,
) -> Result<i32, CliError> {
    let suite = Suite::parse(suite_name).map_err(|e| CliError::new(2, e.to_string()))?;
    let rep = run_suite(suite, seed.unwrap_or(0));
    for check in &rep.checks {
        let verdict = if check.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {} ({})", check.name, check.details);
    }
    println!(
        "suite {} [seed {}]: {}",
        rep.suite,
        rep.seed,
        if rep.pass { "PASS" } else { "FAIL" }
    );
    if let Some(path) = report {
        let json = serde_json::to_string_pretty(&rep)
            .map_err(|e| CliError::new(2, format!("cannot encode report: {e}")))?;
        write_file(path, &(json + "\n"))?;
    }
    Ok(if rep.pass { 0 } else { 1 })
}

/// Parses arguments and runs the selected command, returning the process
/// exit code. Factored out of `main` so tests can drive the full pipeline
/// in-process.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let env_threads = std::env::var("MEASURE_FILTER_THREADS").ok();
    if let Err(e) = resolve_threads(cli.threads.as_deref(), env_threads.as_deref()) {
        eprintln!("error: {}", e.message);
        return e.code;
    }
    let outcome = match &cli.cmd {
        Cmd::Simulate { config, out } => cmd_simulate(config, out).map(|()| 0),
        Cmd::Filter { config, data, out } => cmd_filter(config, data, out).map(|()| 0),
        Cmd::Validate {
            suite,
            seed,
            report,
        } => cmd_validate(suite, *seed, report.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_resolution() {
        assert_eq!(resolve_threads(None, None).unwrap(), 1);
        assert_eq!(resolve_threads(Some("4"), None).unwrap(), 4);
        assert_eq!(resolve_threads(None, Some("2")).unwrap(), 2);
        assert_eq!(resolve_threads(Some("4"), Some("bad")).unwrap(), 4);
        assert_eq!(resolve_threads(Some("0"), None).unwrap_err().code, 2);
        assert_eq!(resolve_threads(Some("x"), None).unwrap_err().code, 2);
        assert_eq!(resolve_threads(None, Some("-1")).unwrap_err().code, 2);
    }
}
