use serde::Serialize;
use zeropp_core::collectives::GRAD_REDUCE_SCATTER;
use zeropp_core::engine::simulate_comm_iteration;
use zeropp_core::topology::{latency_sweep, pipelined_time};

use super::Report;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{write_csv, write_json};

#[derive(Debug, Clone, Serialize)]
struct Row {
    stages: usize,
    total_s: f64,
    intra_s: f64,
    inter_s: f64,
    compute_s: f64,
    relative_to_one_stage: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    collective: &'static str,
    params: usize,
    argmin_stages: usize,
    /// Argmin recomputed directly from the pipeline formula.
    brute_force_argmin: usize,
    one_stage_is_unpipelined: bool,
    rows: &'a [Row],
    passed: bool,
}

/// Pipelined time of the gradient reduce-scatter for `S = 1..=max_stages`.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    let topo = cfg.topology.build()?;
    let links = cfg.links.build()?;
    let zero = cfg.zero.build()?;
    let it = simulate_comm_iteration(topo, &zero, cfg.params, cfg.seed)?;
    let trace = it
        .traces
        .iter()
        .find(|t| t.label == GRAD_REDUCE_SCATTER)
        .ok_or_else(|| CliError::Config("iteration recorded no gradient reduce-scatter".into()))?;
    let (estimates, argmin) = latency_sweep(trace, &links, cfg.latency.max_stages)?;

    let base = estimates[0].total_s;
    let rows: Vec<Row> = estimates
        .iter()
        .map(|e| Row {
            stages: e.stages,
            total_s: e.total_s,
            intra_s: e.intra_s,
            inter_s: e.inter_s,
            compute_s: e.compute_s,
            relative_to_one_stage: if base > 0.0 { e.total_s / base } else { 1.0 },
        })
        .collect();
    let formula = |r: &Row| pipelined_time(r.intra_s, r.inter_s, r.stages) + r.compute_s;
    let brute = rows
        .iter()
        .min_by(|a, b| formula(a).total_cmp(&formula(b)))
        .map(|r| r.stages)
        .unwrap_or(1);
    let one = &rows[0];
    let unpipelined = one.intra_s + one.inter_s + one.compute_s;
    let one_stage_is_unpipelined =
        (one.total_s - unpipelined).abs() <= 1e-12 * unpipelined.max(f64::MIN_POSITIVE);
    let passed = brute == argmin && one_stage_is_unpipelined;

    let files = vec![
        write_csv(&cfg.out, "latency.csv", &rows)?,
        write_json(
            &cfg.out,
            "latency_summary.json",
            &Summary {
                command: "latency",
                collective: GRAD_REDUCE_SCATTER,
                params: cfg.params,
                argmin_stages: argmin,
                brute_force_argmin: brute,
                one_stage_is_unpipelined,
                rows: &rows,
                passed,
            },
        )?,
    ];
    let mut lines = vec![format!(
        "{:>6} {:>12} {:>12} {:>12} {:>8}",
        "stages", "total_us", "intra_us", "inter_us", "vs S=1"
    )];
    for r in &rows {
        lines.push(format!(
            "{:>6} {:>12.3} {:>12.3} {:>12.3} {:>8.4}",
            r.stages,
            r.total_s * 1e6,
            r.intra_s * 1e6,
            r.inter_s * 1e6,
            r.relative_to_one_stage
        ));
    }
    lines.push(format!("fastest: S = {argmin}"));
    Ok(Report { passed, lines, files })
}
