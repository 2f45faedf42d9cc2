use serde::Serialize;
use zeropp_core::partitioner::{memory_report, MemoryMode, MemoryRow};

use super::Report;
use crate::config::RunConfig;
use crate::error::Result;
use crate::report::{write_csv, write_json};

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    #[serde(rename = "hpZ_over_ZeRO3")]
    hpz_over_zero3: f64,
    #[serde(rename = "DP_over_hpZ")]
    dp_over_hpz: f64,
    rows: &'a [MemoryRow],
}

/// Per-device model-state bytes of each memory mode.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    let model = cfg.memory.build()?;
    let rows = memory_report(&model)?;
    let bytes = |mode| {
        rows.iter()
            .find(|r| r.mode == mode)
            .map(|r| r.bytes)
            .unwrap_or(f64::NAN)
    };
    let hpz = bytes(MemoryMode::Hpz);
    let summary = Summary {
        command: "memory",
        hpz_over_zero3: hpz / bytes(MemoryMode::Zero3),
        dp_over_hpz: bytes(MemoryMode::Dp) / hpz,
        rows: &rows,
    };
    let files = vec![
        write_csv(&cfg.out, "memory.csv", &rows)?,
        write_json(&cfg.out, "memory_summary.json", &summary)?,
    ];
    let mut lines = vec![format!(
        "M = {:e}, K = {}, P = {}, alpha = {}",
        model.params, model.k, model.world, model.alpha
    )];
    lines.push(format!("{:<6} {:>14} {:>12}", "mode", "GB/device", "vs ZeRO-3"));
    for r in &rows {
        lines.push(format!(
            "{:<6} {:>14.3} {:>11.3}x",
            r.mode.as_str(),
            r.bytes / 1e9,
            r.ratio_vs_zero3
        ));
    }
    lines.push(format!(
        "hpZ / ZeRO-3 = {:.2}x, DP / hpZ = {:.1}x",
        summary.hpz_over_zero3, summary.dp_over_hpz
    ));
    Ok(Report {
        passed: true,
        lines,
        files,
    })
}
