//! Plot-ready CSV/JSON for toy reports and run manifests. Column order is
//! fixed and floats carry 17 significant digits, so re-exports are
//! byte-identical.

use std::path::{Path, PathBuf};

use crate::distill::LossBreakdown;
use crate::io::{fmt_f64, to_json_pretty, write_file};
use crate::nn::Tensor;
use crate::pipeline::toy::{ToyReport, ToySamples};
use crate::pipeline::RunManifest;
use crate::reward::EvalReport;
use crate::{io, Error, Result};

/// `arm,mode0,mode1,...,ood`, one row per arm.
pub fn toy_counts_csv(report: &ToyReport) -> String {
    let n_modes = report.arms.iter().map(|a| a.mode_counts.len()).max().unwrap_or(0);
    let mut s = String::from("arm");
    for k in 0..n_modes {
        s.push_str(&format!(",mode{k}"));
    }
    s.push_str(",ood\n");
    for a in &report.arms {
        s.push_str(&a.arm);
        for k in 0..n_modes {
            s.push_str(&format!(",{}", a.mode_counts.get(k).copied().unwrap_or(0)));
        }
        s.push_str(&format!(",{}\n", a.ood_count));
    }
    s
}

/// `epoch,dpo,sft,total`; header only for an empty history.
pub fn loss_history_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("epoch,dpo,sft,total\n");
    for (i, b) in history.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{}\n", fmt_f64(b.dpo), fmt_f64(b.sft), fmt_f64(b.total)));
    }
    s
}

/// `x,y`, one row per sample.
pub fn samples_csv(samples: &Tensor) -> String {
    let mut s = String::from("x,y\n");
    for [x, y] in samples.points() {
        s.push_str(&format!("{},{}\n", fmt_f64(x), fmt_f64(y)));
    }
    s
}

fn report_row(stage: usize, phase: &str, r: &EvalReport, props: &[String]) -> String {
    let mut s = format!("{stage},{phase},{}", fmt_f64(r.total));
    for p in props {
        s.push(',');
        s.push_str(&fmt_f64(r.property(p).unwrap_or(f64::NAN)));
    }
    s.push_str(&format!(",{}\n", r.ood_count));
    s
}

/// `stage,phase,total,<properties>,ood` with phases `before`, `pruned`,
/// `after` per stage.
pub fn stage_means_csv(manifest: &RunManifest) -> String {
    let props: Vec<String> = manifest
        .stages
        .first()
        .map(|s| s.report_before.properties.keys().cloned().collect())
        .unwrap_or_default();
    let mut s = String::from("stage,phase,total");
    for p in &props {
        s.push(',');
        s.push_str(p);
    }
    s.push_str(",ood\n");
    for st in &manifest.stages {
        s.push_str(&report_row(st.stage, "before", &st.report_before, &props));
        s.push_str(&report_row(st.stage, "pruned", &st.report_pruned, &props));
        s.push_str(&report_row(st.stage, "after", &st.report_after, &props));
    }
    s
}

fn put(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    write_file(&p, contents.as_bytes())?;
    written.push(p);
    Ok(())
}

/// Counts, per-arm loss histories and (when given) per-arm samples.
pub fn export_toy(report: &ToyReport, samples: &[ToySamples], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    put(dir, "toy_counts.csv", &toy_counts_csv(report), &mut written)?;
    for a in &report.arms {
        put(dir, &format!("loss_{}.csv", a.arm), &loss_history_csv(&a.loss_history), &mut written)?;
    }
    for s in samples {
        put(dir, &format!("samples_{}.csv", s.arm), &samples_csv(&s.samples), &mut written)?;
    }
    Ok(written)
}

/// Per-stage property means and loss histories.
pub fn export_manifest(manifest: &RunManifest, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    put(dir, "stage_means.csv", &stage_means_csv(manifest), &mut written)?;
    for st in &manifest.stages {
        put(
            dir,
            &format!("loss_stage{}.csv", st.stage),
            &loss_history_csv(&st.loss_history),
            &mut written,
        )?;
    }
    Ok(written)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_file(path, to_json_pretty(report)?.as_bytes())
}

/// Exports whichever artifact `input` holds: a run manifest or a toy report.
pub fn export_artifact(input: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let text = io::read_to_string(input)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("stages").is_some() {
        export_manifest(&serde_json::from_value(value)?, dir)
    } else if value.get("arms").is_some() {
        export_toy(&serde_json::from_value(value)?, &[], dir)
    } else {
        Err(Error::Parse {
            path: input.to_path_buf(),
            line: 1,
            msg: "neither a run manifest nor a toy report".into(),
        })
    }
}
