use std::io::Write;

use serde::Serialize;
use zeropp_core::engine::{train_toy, Divergence, ToyConfig, TrainRecord};
use zeropp_core::{ModelShape, ZeroConfig};

use super::Report;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{create, io_err, output_path, write_json};

/// Largest relative final-loss gap between ZeRO++ and the baseline.
pub const LOSS_GAP_TOLERANCE: f64 = 0.05;

#[derive(Serialize)]
struct VariantSummary {
    name: String,
    final_val_loss: f64,
    last_val_loss: f64,
    final_train_loss: Option<f64>,
    diverged: Option<Divergence>,
    csv: String,
}

/// Comparisons that apply when the variants they need were run.
#[derive(Serialize, Default)]
struct Checks {
    zeropp_vs_baseline_gap: Option<f64>,
    zeropp_within_tolerance: Option<bool>,
    full_tensor_worse_than_blocked: Option<bool>,
    interleaved_between_all_on_and_qgz_off: Option<bool>,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    steps: usize,
    seed: u64,
    nodes: usize,
    gpus_per_node: usize,
    variants: &'a [VariantSummary],
    checks: &'a Checks,
    passed: bool,
}

fn variant_config(name: &str, base: ZeroConfig, interleave: f64) -> Result<ZeroConfig> {
    let all_on = base.with_toggles(true, true, true);
    Ok(match name {
        "baseline" => base.with_toggles(false, false, false),
        "zeropp" => all_on,
        "full-tensor" => all_on.full_tensor()?,
        "interleaved" => ZeroConfig {
            qgz_fraction: interleave,
            ..all_on
        },
        "qgz-off" => base.with_toggles(true, true, false),
        other => return Err(CliError::Config(format!("unknown train variant {other:?}"))),
    })
}

fn loss_or_inf(r: &TrainRecord) -> f64 {
    if r.diverged.is_some() || !r.final_val_loss.is_finite() {
        f64::INFINITY
    } else {
        r.final_val_loss
    }
}

fn compare(runs: &[(String, TrainRecord)]) -> Checks {
    let get = |n: &str| runs.iter().find(|(name, _)| name == n).map(|(_, r)| r);
    let mut c = Checks::default();
    if let (Some(base), Some(zpp)) = (get("baseline"), get("zeropp")) {
        let gap = (loss_or_inf(zpp) - loss_or_inf(base)).abs() / loss_or_inf(base);
        c.zeropp_vs_baseline_gap = Some(gap);
        c.zeropp_within_tolerance = Some(gap <= LOSS_GAP_TOLERANCE);
    }
    if let (Some(zpp), Some(full)) = (get("zeropp"), get("full-tensor")) {
        c.full_tensor_worse_than_blocked = Some(loss_or_inf(full) > loss_or_inf(zpp));
    }
    if let (Some(zpp), Some(mid), Some(off)) = (get("zeropp"), get("interleaved"), get("qgz-off")) {
        let (a, b) = (loss_or_inf(zpp), loss_or_inf(off));
        c.interleaved_between_all_on_and_qgz_off = Some((a.min(b)..=a.max(b)).contains(&loss_or_inf(mid)));
    }
    c
}

/// Trains the toy model once per configured variant, in parallel.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    let t = &cfg.train;
    let base = cfg.zero.build()?;
    let toy = ToyConfig {
        topo: t.topology.build()?,
        links: cfg.links.build()?,
        zero: base,
        shape: ModelShape::new(t.dims.clone())?,
        batch_rows: t.batch_rows,
        train_rows: t.train_rows,
        val_rows: t.val_rows,
        noise: t.noise,
        adam: t.adam(),
        loss_scale: t.loss_scale,
    };
    let configs = t
        .variants
        .iter()
        .map(|n| {
            Ok(ToyConfig {
                zero: variant_config(n, base, t.interleave_fraction)?,
                ..toy.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(move || train_toy(c, cfg.steps, cfg.seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let runs: Vec<(String, TrainRecord)> = t.variants.iter().cloned().zip(records).collect();

    let mut files = Vec::new();
    let mut variants = Vec::new();
    for (name, rec) in &runs {
        let file = format!("train_{name}.csv");
        let path = output_path(&cfg.out, &file)?;
        let mut w = create(&path)?;
        rec.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(io_err(&path))?;
        files.push(path);
        variants.push(VariantSummary {
            name: name.clone(),
            final_val_loss: rec.final_val_loss,
            last_val_loss: rec.last_val_loss,
            final_train_loss: rec.final_train_loss(),
            diverged: rec.diverged,
            csv: file,
        });
    }
    let checks = compare(&runs);
    let passed = [
        checks.zeropp_within_tolerance,
        checks.full_tensor_worse_than_blocked,
        checks.interleaved_between_all_on_and_qgz_off,
    ]
    .iter()
    .all(|c| c.unwrap_or(true));
    files.push(write_json(
        &cfg.out,
        "train_summary.json",
        &Summary {
            command: "train",
            steps: cfg.steps,
            seed: cfg.seed,
            nodes: toy.topo.nodes(),
            gpus_per_node: toy.topo.gpus_per_node(),
            variants: &variants,
            checks: &checks,
            passed,
        },
    )?);

    let mut lines = vec![format!(
        "{:<12} {:>14} {:>14}  diverged",
        "variant", "final_val", "last_val"
    )];
    for v in &variants {
        lines.push(format!(
            "{:<12} {:>14.6} {:>14.6}  {}",
            v.name,
            v.final_val_loss,
            v.last_val_loss,
            v.diverged.map_or("-".to_string(), |d| format!("step {}", d.step))
        ));
    }
    if let Some(g) = checks.zeropp_vs_baseline_gap {
        lines.push(format!(
            "ZeRO++ vs baseline: {:.2}% (limit {:.0}%)",
            100.0 * g,
            100.0 * LOSS_GAP_TOLERANCE
        ));
    }
    if let Some(b) = checks.full_tensor_worse_than_blocked {
        lines.push(format!("full-tensor worse than blocked: {b}"));
    }
    if let Some(b) = checks.interleaved_between_all_on_and_qgz_off {
        lines.push(format!("interleaved between all-on and qgZ-off: {b}"));
    }
    Ok(Report { passed, lines, files })
}
