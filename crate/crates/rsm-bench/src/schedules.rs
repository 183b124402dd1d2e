//! Per-method weighting schedules over the sampling grid.

use rsm_core::rsm_objective::{method_schedule, named_config, MethodName, ScheduleRow};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};
use crate::output::fmt_f64;
use crate::svg::Series;

pub const HEADER: [&str; 11] = [
    "method", "step", "t", "gamma", "c1", "c2", "h", "w", "omega", "sigma", "delta",
];

pub const CROSSING_HEADER: [&str; 5] = ["method_a", "method_b", "step_lo", "step_hi", "t_cross"];

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRows {
    pub method: String,
    pub rows: Vec<ScheduleRow>,
}

/// A sign change of `h_a − h_b` between two consecutive steps on which both
/// methods are defined.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    pub method_a: String,
    pub method_b: String,
    pub step_lo: usize,
    pub step_hi: usize,
    /// Linear interpolation of the root in `t`.
    pub t_cross: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDump {
    pub methods: Vec<MethodRows>,
    pub crossings: Vec<Crossing>,
}

impl ScheduleDump {
    pub fn records(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for m in &self.methods {
            for r in &m.rows {
                out.push(vec![
                    m.method.clone(),
                    r.step.to_string(),
                    fmt_f64(r.t),
                    fmt_f64(r.gamma),
                    fmt_f64(r.c1),
                    fmt_f64(r.c2),
                    fmt_f64(r.h),
                    fmt_f64(r.w),
                    fmt_f64(r.omega),
                    fmt_f64(r.sigma),
                    fmt_f64(r.delta),
                ]);
            }
        }
        out
    }

    pub fn crossing_records(&self) -> Vec<Vec<String>> {
        self.crossings
            .iter()
            .map(|c| {
                vec![
                    c.method_a.clone(),
                    c.method_b.clone(),
                    c.step_lo.to_string(),
                    c.step_hi.to_string(),
                    fmt_f64(c.t_cross),
                ]
            })
            .collect()
    }

    /// `h(t)` per method.
    pub fn influence_series(&self) -> Vec<Series> {
        self.methods
            .iter()
            .map(|m| Series {
                label: m.method.clone(),
                points: m.rows.iter().map(|r| (r.t, r.h)).collect(),
            })
            .collect()
    }

    pub fn rows_of(&self, method: &str) -> Option<&[ScheduleRow]> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.rows.as_slice())
    }
}

/// Sign changes of `h_a − h_b`, in increasing step order.
pub fn find_crossings(a: &MethodRows, b: &MethodRows) -> Vec<Crossing> {
    let common: Vec<(&ScheduleRow, f64)> = a
        .rows
        .iter()
        .filter_map(|ra| b.rows.iter().find(|rb| rb.step == ra.step).map(|rb| (ra, ra.h - rb.h)))
        .filter(|(_, d)| d.is_finite())
        .collect();
    common
        .windows(2)
        .filter(|w| w[0].1 == 0.0 || w[0].1.signum() != w[1].1.signum() && w[1].1 != 0.0)
        .map(|w| {
            let (r0, d0) = w[0];
            let (r1, d1) = w[1];
            let t_cross = if d0 == 0.0 {
                r0.t
            } else {
                r0.t + (r1.t - r0.t) * d0 / (d0 - d1)
            };
            Crossing {
                method_a: a.method.clone(),
                method_b: b.method.clone(),
                step_lo: r0.step,
                step_hi: r1.step,
                t_cross,
            }
        })
        .collect()
}

pub fn run_schedule_dump(cfg: &ExperimentConfig) -> Result<ScheduleDump> {
    let sched = cfg.setup.schedule()?;
    let sc = &cfg.schedules;
    let mut methods = Vec::with_capacity(sc.methods.len());
    for label in &sc.methods {
        let name = MethodName::from_label(label)
            .filter(|m| *m != MethodName::Custom)
            .ok_or_else(|| BenchError::invalid(format!("unknown method {label:?}")))?;
        let mc = named_config(name, &sched, &sc.registry).map_err(|e| BenchError::invalid(format!("{label}: {e}")))?;
        methods.push(MethodRows {
            method: label.clone(),
            rows: method_schedule(&mc, &sched)?,
        });
    }
    let mut crossings = Vec::new();
    for (a, b) in &sc.crossings {
        let (Some(ma), Some(mb)) = (
            methods.iter().find(|m| &m.method == a),
            methods.iter().find(|m| &m.method == b),
        ) else {
            continue;
        };
        crossings.extend(find_crossings(ma, mb));
    }
    Ok(ScheduleDump { methods, crossings })
}
