//! `agf ablate`: train every fusion strategy on the degradation benchmark.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use agfusion::degradation::{rank, run_ablation_on, AblationConfig, AblationRun, MetricsRecord, Strategy};

use crate::config::RunConfig;
use crate::exit::{fail, ExitClass};

pub const THREADS_ENV: &str = "AGF_THREADS";

/// Worker count from `AGF_THREADS`: unset means all cores, `0` means run on
/// the calling thread.
pub fn worker_count(value: Option<&str>, jobs: usize) -> anyhow::Result<usize> {
    let n = match value {
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        Some(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| fail(ExitClass::Parse, format!("{THREADS_ENV}: {v:?} is not a count")))?,
    };
    Ok(n.min(jobs))
}

#[derive(Debug, Serialize)]
pub struct AblationSummary {
    pub seed: u64,
    pub train_steps: usize,
    pub ranking: Vec<String>,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Serialize)]
struct LossRow<'a> {
    strategy: &'a str,
    step: usize,
    loss: f64,
}

/// Runs `strategies` on `workers` threads; results keep strategy order.
pub fn run_all(cfg: &AblationConfig, strategies: &[Strategy], workers: usize) -> anyhow::Result<Vec<AblationRun>> {
    cfg.validate()?;
    let train = cfg.samples(false)?;
    let holdout = cfg.samples(true)?;
    let job = |s: Strategy| run_ablation_on(cfg, s, &train, &holdout);
    if workers == 0 {
        return Ok(strategies.iter().map(|&s| job(s)).collect::<agfusion::Result<_>>()?);
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<agfusion::Result<AblationRun>>>> =
        Mutex::new((0..strategies.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&s) = strategies.get(i) else { break };
                let r = job(s);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    let runs = slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every strategy ran"))
        .collect::<agfusion::Result<_>>()?;
    Ok(runs)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn run(
    cfg: &RunConfig,
    strategies: &[Strategy],
    workers: usize,
    out_dir: &Path,
    out: &mut dyn Write,
) -> anyhow::Result<AblationSummary> {
    let acfg = cfg.ablation();
    let runs = run_all(&acfg, strategies, workers)?;
    let records: Vec<MetricsRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let summary = AblationSummary {
        seed: acfg.seed,
        train_steps: acfg.train_steps,
        ranking: rank(&records),
        records,
    };

    std::fs::create_dir_all(out_dir)?;
    let mut csv = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
    let mut jsonl = String::new();
    for r in &summary.records {
        csv.serialize(r)?;
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    csv.flush()?;
    std::fs::write(out_dir.join("metrics.jsonl"), jsonl)?;
    let mut curves = csv::Writer::from_path(out_dir.join("loss_curves.csv"))?;
    for run in &runs {
        for (step, &loss) in run.losses.iter().enumerate() {
            curves.serialize(LossRow {
                strategy: &run.record.strategy,
                step,
                loss,
            })?;
        }
    }
    curves.flush()?;
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    writeln!(
        out,
        "{:>4} {:<12} {:>12} {:>12} {:>8} {:>8}  status",
        "rank", "strategy", "holdout_mse", "train_mse", "g_in", "g_out"
    )?;
    let position = |name: &str| summary.ranking.iter().position(|n| n == name);
    let mut ordered: Vec<&MetricsRecord> = summary.records.iter().collect();
    ordered.sort_by_key(|r| position(&r.strategy).unwrap_or(usize::MAX));
    for r in ordered {
        writeln!(
            out,
            "{:>4} {:<12} {:>12.6e} {:>12.6e} {:>8} {:>8}  {}",
            position(&r.strategy).map_or_else(|| "-".to_string(), |p| (p + 1).to_string()),
            r.strategy,
            r.holdout_mse,
            r.final_train_mse,
            opt(r.gate_inside),
            opt(r.gate_outside),
            r.failure.as_deref().unwrap_or("ok")
        )?;
    }
    if summary.ranking.is_empty() {
        return Err(fail(ExitClass::Check, "every strategy failed"));
    }
    Ok(summary)
}
