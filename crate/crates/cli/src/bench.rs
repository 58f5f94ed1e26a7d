//! `agf bench`: analytic vs counted attention cost, windowed and global.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use agfusion::attention::{attend, count_macs, AttentionMode, MhaParams};
use agfusion::macs;
use agfusion::rng::{self, Stream};
use agfusion::{BevMap, Modality, Tensor};

use crate::config::RunConfig;
use crate::exit::{fail, ExitClass};

/// One benchmark row. MAC columns count the attention products; projection
/// MACs are identical in both modes and reported separately.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub analytic_windowed: u64,
    pub analytic_global: u64,
    pub measured_windowed: u64,
    pub measured_global: u64,
    pub analytic_projection: u64,
    pub measured_projection: u64,
    pub windowed_ms: f64,
    pub global_ms: f64,
}

impl BenchRow {
    pub fn counters_match(&self) -> bool {
        self.analytic_windowed == self.measured_windowed
            && self.analytic_global == self.measured_global
            && self.analytic_projection == self.measured_projection
    }
}

fn random_map(h: usize, w: usize, c: usize, seed: u64, modality: Modality) -> BevMap {
    let t = Tensor::from_fn(&[h, w, c], |i| rng::uniform_at(seed, i as u64) * 2.0 - 1.0);
    BevMap::new(t, modality).expect("rank-3 map")
}

pub fn measure(cfg: &RunConfig, height: usize, width: usize, window: usize) -> anyhow::Result<BenchRow> {
    let (c, heads) = (cfg.pipeline.channels, cfg.pipeline.num_heads);
    let seed = rng::sub_seed(cfg.seed, (height as u64) << 32 | (width as u64) << 16 | window as u64);
    let q = random_map(height, width, c, rng::sub_seed(seed, 1), Modality::Camera);
    let kv = random_map(height, width, c, rng::sub_seed(seed, 2), Modality::Lidar);
    let p = MhaParams::init(c, heads, &mut Stream::new(rng::sub_seed(seed, 3)));

    let analytic_w = count_macs(height, width, c, window, heads, AttentionMode::Windowed)?;
    let analytic_g = count_macs(height, width, c, window, heads, AttentionMode::Global)?;

    let t0 = Instant::now();
    let (rw, measured_w) = macs::measure(|| attend(&q, &kv, &p, window, AttentionMode::Windowed));
    let windowed_ms = t0.elapsed().as_secs_f64() * 1e3;
    rw?;
    let t0 = Instant::now();
    let (rg, measured_g) = macs::measure(|| attend(&q, &kv, &p, window, AttentionMode::Global));
    let global_ms = t0.elapsed().as_secs_f64() * 1e3;
    rg?;
    if measured_w.projection != measured_g.projection {
        return Err(fail(ExitClass::Check, "projection counts differ between modes"));
    }
    Ok(BenchRow {
        height,
        width,
        window,
        analytic_windowed: analytic_w.attention,
        analytic_global: analytic_g.attention,
        measured_windowed: measured_w.attention,
        measured_global: measured_g.attention,
        analytic_projection: analytic_w.projection,
        measured_projection: measured_w.projection,
        windowed_ms,
        global_ms,
    })
}

/// Every (H, W) pair from `sizes` with every window dividing both.
pub fn run(
    cfg: &RunConfig,
    sizes: &[usize],
    windows: &[usize],
    out_dir: &Path,
    out: &mut dyn Write,
) -> anyhow::Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &h in sizes {
        for &w in sizes {
            for &win in windows {
                if h % win == 0 && w % win == 0 {
                    rows.push(measure(cfg, h, w, win)?);
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(fail(ExitClass::Shape, "no window size divides any requested map size"));
    }
    writeln!(
        out,
        "{:>4} {:>4} {:>3} {:>14} {:>14} {:>14} {:>14} {:>10} {:>10}",
        "H", "W", "h", "analytic_win", "analytic_glob", "counted_win", "counted_glob", "win_ms", "glob_ms"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:>4} {:>4} {:>3} {:>14} {:>14} {:>14} {:>14} {:>10.3} {:>10.3}{}",
            r.height,
            r.width,
            r.window,
            r.analytic_windowed,
            r.analytic_global,
            r.measured_windowed,
            r.measured_global,
            r.windowed_ms,
            r.global_ms,
            if r.counters_match() { "" } else { "  MISMATCH" }
        )?;
    }
    std::fs::create_dir_all(out_dir)?;
    let mut csv = csv::Writer::from_path(out_dir.join("bench.csv"))?;
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !r.counters_match())
        .map(|r| format!("{}x{} h={}", r.height, r.width, r.window))
        .collect();
    if !bad.is_empty() {
        return Err(fail(ExitClass::Check, format!("counted MACs differ from analytic: {}", bad.join(", "))));
    }
    Ok(rows)
}
