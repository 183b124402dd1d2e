//! Experiment driver for the reward score matching lab.
//!
//! Four experiment kinds share one JSON configuration schema
//! ([`config::ExperimentConfig`]):
//!
//! * `RmseBench` measures value-guidance estimators against the exact
//!   optimal guidance of a tilted Gaussian mixture ([`rmse`]);
//! * `ScheduleDump` tabulates per-method weighting schedules and the
//!   normalised influence `h(t)` ([`schedules`]);
//! * `Train` pretrains a small score network and fine-tunes it ([`train`]);
//! * `KernelAudit` cross-checks the kernel algebra and oracles ([`audit`]).
//!
//! All CSV output uses a fixed column order and 17 significant digits, and
//! rows are ordered independently of the worker count, so a rerun with the
//! same configuration and seed reproduces every file byte for byte.

pub mod audit;
pub mod config;
pub mod error;
pub mod output;
pub mod rmse;
pub mod schedules;
pub mod svg;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use config::{ExperimentConfig, ExperimentKind};
pub use error::{BenchError, Result};
use output::{ensure_dir, fmt_f64, write_csv, write_text};
use svg::{emit_svg, PlotOptions, Series};

/// Runs `cfg` and writes its artifacts into `out`. Returns a short
/// human-readable summary.
pub fn execute(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    ensure_dir(out)?;
    write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))?;
    match cfg.kind {
        ExperimentKind::RmseBench => write_rmse(cfg, out),
        ExperimentKind::ScheduleDump => write_schedules(cfg, out),
        ExperimentKind::Train => write_train(cfg, out),
        ExperimentKind::KernelAudit => write_audit(cfg, out),
    }
}

fn write_rmse(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let rows = rmse::run_rmse_bench(cfg)?;
    write_csv(&out.join("rmse.csv"), &rmse::HEADER, &rmse::rows_to_records(&rows))?;
    let mut groups: BTreeMap<(usize, usize, u64), Series> = BTreeMap::new();
    let order: Vec<&str> = cfg.rmse.estimators.iter().map(|e| e.label.as_str()).collect();
    for r in &rows {
        let m = order.iter().position(|l| *l == r.method).unwrap_or(usize::MAX);
        groups
            .entry((m, r.i, r.seed))
            .or_insert_with(|| Series {
                label: format!("{} @ i={}", r.method, r.i),
                points: Vec::new(),
            })
            .points
            .push((r.nfe as f64, r.rmse));
    }
    let series: Vec<Series> = groups.into_values().collect();
    emit_svg(
        &out.join("rmse.svg"),
        &series,
        &PlotOptions {
            title: format!("{}: RMSE against score evaluations", cfg.experiment_id),
            x_label: "score evaluations per estimate".into(),
            y_label: "RMSE".into(),
            log_x: true,
            log_y: true,
            ..PlotOptions::default()
        },
    )?;
    Ok(format!("{} rows written to rmse.csv", rows.len()))
}

fn write_schedules(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let dump = schedules::run_schedule_dump(cfg)?;
    write_csv(&out.join("schedules.csv"), &schedules::HEADER, &dump.records())?;
    write_csv(
        &out.join("crossings.csv"),
        &schedules::CROSSING_HEADER,
        &dump.crossing_records(),
    )?;
    emit_svg(
        &out.join("influence.svg"),
        &dump.influence_series(),
        &PlotOptions {
            title: format!("{}: normalised influence h(t)", cfg.experiment_id),
            x_label: "t".into(),
            y_label: "h(t)".into(),
            log_y: cfg.schedules.log_y,
            ..PlotOptions::default()
        },
    )?;
    let mut msg = format!("{} methods written to schedules.csv", dump.methods.len());
    for c in &dump.crossings {
        msg.push_str(&format!(
            "\n{} and {} cross between steps {} and {} (t ≈ {:.6})",
            c.method_a, c.method_b, c.step_lo, c.step_hi, c.t_cross
        ));
    }
    Ok(msg)
}

fn write_train(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let outcome = train::run_train(cfg)?;
    write_csv(
        &out.join("metrics.csv"),
        &train::METRICS_HEADER,
        &outcome.metrics_records(),
    )?;
    write_text(&out.join("reference.json"), &outcome.reference.net.to_json())?;
    write_text(&out.join("finetuned.json"), &outcome.result.net.to_json())?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_else(|| "none".into());
    let summary = format!(
        "method={}\npretrain_final_loss={}\nreference_w2_bound={}\nfinal_smoothed_reward={}\naborted={}\n",
        outcome.method.name.label(),
        opt(outcome.reference.final_loss),
        opt(outcome.reference.w2_bound),
        opt(outcome.final_smoothed()),
        outcome.result.aborted.as_deref().unwrap_or("no"),
    );
    write_text(&out.join("summary.txt"), &summary)?;
    Ok(summary.trim_end().to_string())
}

fn write_audit(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let report = audit::run_kernel_audit(cfg)?;
    let text = report.render();
    write_text(&out.join("audit.txt"), &text)?;
    if report.passed() {
        Ok(text.trim_end().to_string())
    } else {
        eprint!("{text}");
        Err(BenchError::AuditFailed {
            failed: report.n_failed(),
            total: report.checks.len(),
        })
    }
}
