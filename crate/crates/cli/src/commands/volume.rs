use serde::Serialize;
use zeropp_core::engine::{simulate_comm_iteration, VolumeRow};
use zeropp_core::topology::estimate_latency;
use zeropp_core::ZeroConfig;

use super::Report;
use crate::config::RunConfig;
use crate::error::Result;
use crate::report::{write_csv, write_json};

/// Largest metadata-to-payload ratio a row may carry and still pass.
pub const METADATA_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Serialize)]
struct Row {
    variant: &'static str,
    #[serde(rename = "qwZ")]
    qwz: bool,
    #[serde(rename = "hpZ")]
    hpz: bool,
    #[serde(rename = "qgZ")]
    qgz: bool,
    fwd: f64,
    bwd: f64,
    rs: f64,
    total: f64,
    expected_fwd: f64,
    expected_bwd: f64,
    expected_rs: f64,
    metadata_ratio: f64,
    est_latency_s: f64,
    pass: bool,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    nodes: usize,
    gpus_per_node: usize,
    params: usize,
    padded_params: usize,
    metadata_tolerance: f64,
    rows: &'a [Row],
    passed: bool,
}

/// Cross-node volume per collective, in units of the model size, that a
/// configuration should produce.
pub fn expected_volumes(cfg: &ZeroConfig, nodes: usize) -> VolumeRow {
    if nodes == 1 {
        return VolumeRow::default();
    }
    let shrink = |bits: u8| if cfg.passthrough { 1.0 } else { bits as f64 / 16.0 };
    let weights = if cfg.qwz {
        shrink(cfg.weight_quant.bit_width.bits())
    } else {
        1.0
    };
    VolumeRow {
        fwd: weights,
        bwd: if cfg.hpz { 0.0 } else { weights },
        rs: if cfg.qgz {
            shrink(cfg.grad_quant.bit_width.bits())
        } else {
            1.0
        },
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

/// Simulates one iteration for the baseline, each optimization alone and
/// all three together, using the configured codecs.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    let topo = cfg.topology.build()?;
    let links = cfg.links.build()?;
    let base = cfg.zero.build()?;
    let variants = [
        ("baseline", (false, false, false)),
        ("qwZ", (true, false, false)),
        ("hpZ", (false, true, false)),
        ("qgZ", (false, false, true)),
        ("ZeRO++", (true, true, true)),
    ];
    let mut rows = Vec::new();
    let mut padded = cfg.params;
    for (variant, (qwz, hpz, qgz)) in variants {
        let z = base.with_toggles(qwz, hpz, qgz);
        let it = simulate_comm_iteration(topo, &z, cfg.params, cfg.seed)?;
        padded = padded.max(it.padded_len);
        let mut latency = 0.0;
        for t in &it.traces {
            latency += estimate_latency(t, &links, t.stages.max(1), true)?.total_s;
        }
        let want = expected_volumes(&z, topo.nodes());
        let got = it.volumes;
        let metadata_ratio = it.max_metadata_ratio();
        let pass = close(got.fwd, want.fwd)
            && close(got.bwd, want.bwd)
            && close(got.rs, want.rs)
            && metadata_ratio <= METADATA_TOLERANCE;
        rows.push(Row {
            variant,
            qwz,
            hpz,
            qgz,
            fwd: got.fwd,
            bwd: got.bwd,
            rs: got.rs,
            total: got.total(),
            expected_fwd: want.fwd,
            expected_bwd: want.bwd,
            expected_rs: want.rs,
            metadata_ratio,
            est_latency_s: latency,
            pass,
        });
    }
    let passed = rows.iter().all(|r| r.pass);
    let mut files = vec![write_csv(&cfg.out, "volume.csv", &rows)?];
    files.push(write_json(
        &cfg.out,
        "volume_summary.json",
        &Summary {
            command: "volume",
            nodes: topo.nodes(),
            gpus_per_node: topo.gpus_per_node(),
            params: cfg.params,
            padded_params: padded,
            metadata_tolerance: METADATA_TOLERANCE,
            rows: &rows,
            passed,
        },
    )?);

    let mut lines = vec![
        format!(
            "cross-node volume per collective (x M = {}) on {} nodes x {} GPUs",
            cfg.params,
            topo.nodes(),
            topo.gpus_per_node()
        ),
        format!(
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>9}  check",
            "variant", "fwd", "bwd", "rs", "total", "metadata"
        ),
    ];
    for r in &rows {
        lines.push(format!(
            "{:<10} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8.3}%  {}",
            r.variant,
            r.fwd,
            r.bwd,
            r.rs,
            r.total,
            100.0 * r.metadata_ratio,
            if r.pass { "ok" } else { "MISMATCH" }
        ));
    }
    Ok(Report { passed, lines, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_rows() {
        let z = ZeroConfig::zeropp();
        let row = |z: ZeroConfig| {
            let v = expected_volumes(&z, 2);
            (v.fwd, v.bwd, v.rs)
        };
        assert_eq!(row(z), (0.5, 0.0, 0.25));
        assert_eq!(row(ZeroConfig::baseline()), (1.0, 1.0, 1.0));
        assert_eq!(row(z.with_toggles(true, false, false)), (0.5, 0.5, 1.0));
        assert_eq!(
            row(ZeroConfig {
                passthrough: true,
                ..z
            }),
            (1.0, 0.0, 1.0)
        );
        assert_eq!(expected_volumes(&z, 1).total(), 0.0);
    }
}
