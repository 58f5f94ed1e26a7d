//! `agf gradcheck`: finite-difference check of every backward pass.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use agfusion::autodiff::{Fault, Gradcheck, GradcheckReport, OpKind};
use agfusion::gradsuite::run_suite;

use crate::config::RunConfig;
use crate::exit::{fail, ExitClass};

#[derive(Debug, Serialize)]
pub struct GradcheckRecord {
    pub tol: f64,
    pub step: f64,
    pub fault: Option<FaultRecord>,
    pub passed: bool,
    pub failed_ops: Vec<String>,
    pub checks: Vec<GradcheckReport>,
}

#[derive(Debug, Serialize)]
pub struct FaultRecord {
    pub op: String,
    pub scale: f64,
}

pub fn parse_fault(name: &str, scale: f64) -> anyhow::Result<Fault> {
    let kind = OpKind::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        fail(
            ExitClass::Parse,
            format!("--inject-fault: unknown op {name:?} (one of {})", known.join(", ")),
        )
    })?;
    if !scale.is_finite() {
        return Err(fail(ExitClass::Parse, "--fault-scale must be finite"));
    }
    Ok(Fault { kind, scale })
}

pub fn run(
    cfg: &RunConfig,
    tol: Option<f64>,
    fault: Option<Fault>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> anyhow::Result<GradcheckRecord> {
    let tol = tol.unwrap_or(cfg.gradcheck.tol);
    if !(tol > 0.0) {
        return Err(fail(ExitClass::Parse, "--tol must be positive"));
    }
    let gc = Gradcheck {
        tol,
        step: cfg.gradcheck.step,
        fault,
        ..Gradcheck::default()
    };
    let checks = run_suite(&gc);
    for r in &checks {
        let status = if r.passed { "ok  " } else { "FAIL" };
        match &r.error {
            Some(e) => writeln!(out, "{status} {:<22} error: {e}", r.op)?,
            None => writeln!(out, "{status} {:<22} max rel err {:.3e}", r.op, r.max_rel_error())?,
        }
    }
    let failed_ops: Vec<String> = checks.iter().filter(|r| !r.passed).map(|r| r.op.clone()).collect();
    let record = GradcheckRecord {
        tol,
        step: gc.step,
        fault: fault.map(|f| FaultRecord {
            op: f.kind.name().to_string(),
            scale: f.scale,
        }),
        passed: failed_ops.is_empty(),
        failed_ops,
        checks,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("gradcheck.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    writeln!(
        out,
        "{} of {} checks passed at tol {:.1e}",
        record.checks.len() - record.failed_ops.len(),
        record.checks.len(),
        tol
    )?;
    if !record.passed {
        let worst = record
            .checks
            .iter()
            .filter(|r| !r.passed)
            .map(|r| format!("{} ({:.3e})", r.op, r.max_rel_error()))
            .collect::<Vec<_>>();
        return Err(fail(ExitClass::Check, format!("gradient check failed: {}", worst.join(", "))));
    }
    Ok(record)
}
