//! Run orchestration and report emission for the `modal` binary.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use modal_core::ensemble::{
    born_statistics, branch_weights, ergodicity_diagnostic, factorization_check, run_ensemble,
    serialize_real, Timeline, Trajectory,
};
use modal_core::rng::GENERATOR;
use modal_core::scenarios::{delta_estimate, load_scenario, DeltaParams, Scenario};
use modal_core::Error as CoreError;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

/// Fraction of broken-down trajectories above which a run exits with code 3.
pub const BREAKDOWN_LIMIT: f64 = 0.01;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BREAKDOWN: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] modal_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(_) | CliError::Config(_) => EXIT_VALIDATION,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    }
}

/// Artifacts a run can write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, ValueEnum, Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Summary,
    Trajectories,
    TransitionMatrices,
    Frames,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario_path: PathBuf,
    pub master_seed: u64,
    pub n_trajectories: u64,
    /// `0` picks the number of threads automatically.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub emit: BTreeSet<Emit>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_trajectories == 0 {
            return Err(CliError::Config("--trajectories must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a run computes before anything is written.
pub struct RunOutput {
    pub scenario: Scenario,
    pub timeline: Timeline,
    pub trajectories: Vec<Trajectory>,
    pub summary: Value,
    pub breakdown_fraction: f64,
}

/// `f64` as JSON, with non-finite values as strings.
pub fn real(x: f64) -> Value {
    serialize_real(&x, serde_json::value::Serializer).expect("reals serialize")
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("reports serialize")
}

/// Loads the scenario, computes the timeline, samples the ensemble and builds
/// the summary.
pub fn execute(config: &RunConfig) -> Result<RunOutput, CliError> {
    config.validate()?;
    let scenario = load_scenario(&config.scenario_path)?;
    let timeline = Timeline::compute(&scenario)?;
    let trajectories = run_ensemble(
        &timeline,
        config.master_seed,
        config.n_trajectories,
        config.workers,
    )?;
    let n = trajectories.len();
    let breakdowns = trajectories
        .iter()
        .filter(|t| t.breakdown.is_some())
        .count();
    let deaths: usize = trajectories.iter().map(|t| t.death_events).sum();
    let breakdown_fraction = breakdowns as f64 / n as f64;

    let tau = timeline.min_tau();
    let flow = &timeline.flow_residuals;
    let mean_residual = if flow.is_empty() {
        0.0
    } else {
        flow.iter().sum::<f64>() / flow.len() as f64
    };
    let diag = &timeline.diagnostics;

    let window = scenario.window.unwrap_or(scenario.t_final());
    let ergodicity = if timeline.transitions.is_empty() {
        Value::Null
    } else {
        // Broken matrices cannot be composed; the breakdown count reports them.
        let report = timeline
            .aligned_window(window)
            .and_then(|tms| ergodicity_diagnostic(&tms, window, timeline.partition.as_ref()));
        match report {
            Ok(r) => to_value(&r),
            Err(e @ CoreError::Composition(_)) => return Err(e.into()),
            Err(e) => json!({ "error": e.to_string() }),
        }
    };

    let measurement = match (
        &scenario.measurement,
        &timeline.partition,
        &timeline.branches,
    ) {
        (Some(m), Some(part), Some(b)) => {
            let (wp, wm, wn) = branch_weights(&timeline.final_frame, part);
            let born = match born_statistics(&trajectories, &m.spec) {
                Ok(r) => to_value(&r),
                Err(e) => json!({ "error": e.to_string() }),
            };
            json!({
                "c_plus": [m.spec.c_plus.re, m.spec.c_plus.im],
                "c_minus": [m.spec.c_minus.re, m.spec.c_minus.im],
                "partition": part,
                "branch_weights": { "plus": wp, "minus": wm, "null": wn },
                "mixture_residual": b.mixture_residual,
                "born": born,
            })
        }
        _ => Value::Null,
    };

    let factorization = match scenario.factor_dims {
        Some(dims) => to_value(&factorization_check(
            &timeline.final_state,
            dims,
            scenario.eps_null,
        )?),
        None => Value::Null,
    };

    let summary = json!({
        "tool": {
            "name": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "generator": GENERATOR,
        },
        "config": {
            "scenario": config.scenario_path.display().to_string(),
            "master_seed": config.master_seed,
            "n_trajectories": config.n_trajectories,
            "emit": config.emit,
        },
        "scenario": {
            "model": scenario.model,
            "metadata": scenario.metadata,
            "dim_a": scenario.dim_a,
            "dim_e": scenario.dim_e,
            "eta": scenario.eta,
            "n_steps": scenario.n_steps,
            "eps_null": scenario.eps_null,
            "seed": scenario.seed,
            "warnings": scenario.warnings,
        },
        "flow": {
            "max_residual": timeline.max_flow_residual(),
            "mean_residual": mean_residual,
            "min_tau": real(tau),
            "eta_over_tau": real(scenario.eta / tau),
            "min_overlap": timeline.min_overlap(),
            "degenerate_steps": diag.iter().filter(|d| d.degeneracy).count(),
            "broken_steps": timeline.broken_steps(),
            "births": diag.iter().map(|d| d.births.len()).sum::<usize>(),
            "deaths": diag.iter().map(|d| d.deaths.len()).sum::<usize>(),
            "final_labels": timeline.final_frame.len(),
            "final_null_weight": timeline.final_frame.null_weight(),
        },
        "trajectories": {
            "count": n,
            "breakdowns": breakdowns,
            "breakdown_fraction": breakdown_fraction,
            "death_events": deaths,
        },
        "ergodicity": ergodicity,
        "measurement": measurement,
        "factorization": factorization,
    });

    Ok(RunOutput {
        scenario,
        timeline,
        trajectories,
        summary,
        breakdown_fraction,
    })
}

/// Round-trip decimal form of a float.
pub fn fmt_real(x: f64) -> String {
    format!("{x:?}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the requested artifacts into `dir`.
pub fn write_outputs(out: &RunOutput, config: &RunConfig) -> Result<(), CliError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if config.emit.contains(&Emit::Summary) {
        let path = dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    if config.emit.contains(&Emit::Trajectories) {
        let rows = out.trajectories.iter().flat_map(|t| {
            t.labels
                .iter()
                .enumerate()
                .map(move |(k, l)| vec![t.seed_index.to_string(), k.to_string(), l.to_string()])
        });
        write_rows(
            &dir.join("trajectories.csv"),
            &["index", "step", "label"],
            rows,
        )?;
        let tl = &out.timeline;
        let rows = tl.diagnostics.iter().map(|d| {
            vec![
                d.step.to_string(),
                fmt_real(d.t),
                fmt_real(d.flow_residual),
                fmt_real(d.tau),
            ]
        });
        write_rows(
            &dir.join("flow_residuals.csv"),
            &["step", "t", "residual", "tau"],
            rows,
        )?;
    }
    if config.emit.contains(&Emit::TransitionMatrices) {
        for (k, raw) in out.timeline.transitions.iter().enumerate() {
            let tm = &raw.matrix;
            let labels = tm.labels();
            let rows = (0..labels.len()).flat_map(|j| {
                (0..labels.len()).map(move |i| {
                    vec![
                        labels[i].to_string(),
                        labels[j].to_string(),
                        fmt_real(tm.p_cond()[(i, j)]),
                    ]
                })
            });
            write_rows(
                &dir.join(format!("transition_t{k}.csv")),
                &["to", "from", "p"],
                rows,
            )?;
        }
    }
    if config.emit.contains(&Emit::Frames) {
        let rows = out.timeline.frames.iter().enumerate().flat_map(|(k, f)| {
            f.labels.iter().zip(&f.p).map(move |(l, p)| {
                vec![k.to_string(), fmt_real(f.time), l.to_string(), fmt_real(*p)]
            })
        });
        write_rows(&dir.join("frames.csv"), &["step", "t", "label", "p"], rows)?;
    }
    Ok(())
}

/// Runs a scenario and writes its reports; returns the process exit code.
pub fn cmd_run(config: &RunConfig, err: &mut dyn Write) -> i32 {
    let out = match execute(config) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return e.exit_code();
        }
    };
    for w in &out.scenario.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    if let Err(e) = write_outputs(&out, config) {
        let _ = writeln!(err, "error: {e}");
        return e.exit_code();
    }
    if out.breakdown_fraction > BREAKDOWN_LIMIT {
        let _ = writeln!(
            err,
            "error: {:.2}% of trajectories hit a breakdown of the effective description",
            100.0 * out.breakdown_fraction
        );
        return EXIT_BREAKDOWN;
    }
    EXIT_OK
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), fmt_real)
}

/// Per-step diagnostics of a scenario and, optionally, the distinctness
/// estimate `ln Delta = -N L^2 / ell^2`.
pub fn diagnose(
    scenario_path: Option<&Path>,
    delta: Option<[f64; 3]>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let w = |e| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    if let Some(path) = scenario_path {
        let s = load_scenario(path)?;
        let tl = Timeline::compute(&s)?;
        writeln!(out, "# {}", s.metadata).map_err(w)?;
        for warning in &s.warnings {
            writeln!(out, "# warning: {warning}").map_err(w)?;
        }
        writeln!(
            out,
            "step\tt\ttau\tflow_residual\tmin_overlap\tlabels\tflags"
        )
        .map_err(w)?;
        for d in &tl.diagnostics {
            let mut flags = Vec::new();
            if d.degeneracy {
                flags.push("degenerate".to_string());
            }
            if !d.births.is_empty() {
                flags.push(format!("births={:?}", d.births));
            }
            if !d.deaths.is_empty() {
                flags.push(format!("deaths={:?}", d.deaths));
            }
            if !d.broken.is_empty() {
                flags.push(format!("broken={:?}", d.broken));
            }
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                d.step,
                fmt_real(d.t),
                fmt_real(d.tau),
                fmt_real(d.flow_residual),
                fmt_opt(d.min_overlap),
                d.n_labels,
                if flags.is_empty() {
                    "-".into()
                } else {
                    flags.join(",")
                }
            )
            .map_err(w)?;
        }
        let tau = tl.min_tau();
        writeln!(out, "tau = {}", fmt_real(tau)).map_err(w)?;
        writeln!(out, "eta / tau = {}", fmt_real(s.eta / tau)).map_err(w)?;
        writeln!(
            out,
            "max flow residual = {}",
            fmt_real(tl.max_flow_residual())
        )
        .map_err(w)?;
        writeln!(out, "min frame overlap = {}", fmt_opt(tl.min_overlap())).map_err(w)?;
        writeln!(out, "broken steps = {}", tl.broken_steps()).map_err(w)?;
        if let Some(dims) = s.factor_dims {
            let f = factorization_check(&tl.final_state, dims, s.eps_null)?;
            writeln!(
                out,
                "factorization: max residual = {}, max |p(i,a) - p_m| = {}",
                fmt_real(f.max_residual),
                fmt_real(f.max_prob_gap)
            )
            .map_err(w)?;
        }
    }
    if let Some([n, l, ell]) = delta {
        let ln = delta_estimate(DeltaParams::new(n, l, ell)?);
        writeln!(out, "ln Delta = {}", fmt_real(ln)).map_err(w)?;
    }
    Ok(())
}

/// [`diagnose`] with exit-code reporting.
pub fn cmd_diagnose(
    scenario_path: Option<&Path>,
    delta: Option<[f64; 3]>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    if scenario_path.is_none() && delta.is_none() {
        let _ = writeln!(err, "error: give a scenario file, --delta N L ELL, or both");
        return EXIT_VALIDATION;
    }
    match diagnose(scenario_path, delta, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
