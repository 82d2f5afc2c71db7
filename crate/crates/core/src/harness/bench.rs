use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::{write_json, BenchConfig, CsvWriter, OutputLock};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::ssm::{ScanImpl, ScanProblem};
use crate::tensor::{max_rel_dev, Tensor};

pub const BENCH_FILE: &str = "bench_scan.csv";
pub const SLOPE_FILE: &str = "bench_slope.json";
/// Largest tolerated deviation of the parallel kernel from the sequential one.
pub const EQUIVALENCE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub imp: ScanImpl,
    pub mean_ns: f64,
    pub std_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    pub slope_sequential: f64,
    pub slope_parallel: f64,
    /// Worst relative deviation of parallel from sequential outputs.
    pub max_rel_dev: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn problem(len: usize, d: usize, n: usize, rng: &mut Rng) -> ScanProblem<f32> {
    ScanProblem {
        u: Tensor::normal([len, d], 1.0, rng),
        delta: Tensor::uniform([len, d], 1e-3, 1e-1, rng),
        a: Tensor::uniform([d, n], -2.0, -0.1, rng),
        b: Tensor::normal([len, n], 1.0, rng),
        c: Tensor::normal([len, n], 1.0, rng),
        skip: Tensor::ones([d]),
    }
}

/// Times both kernels over the sweep and checks them against each other on
/// every instance. With `out` set, writes the CSV and the fitted slopes.
pub fn bench_scan(cfg: &BenchConfig, seed: u64, out: Option<&Path>) -> Result<BenchSummary> {
    if cfg.lengths.len() < 2 || cfg.repetitions == 0 {
        return Err(Error::Config(
            "bench needs at least two lengths and one repetition".into(),
        ));
    }
    let _lock = out.map(OutputLock::acquire).transpose()?;
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for &len in &cfg.lengths {
        let p = problem(len, cfg.channels, cfg.state, &mut rng);
        let reference = p.run(ScanImpl::Sequential)?;
        for imp in [ScanImpl::Sequential, ScanImpl::Parallel] {
            let y = p.run(imp)?;
            let dev = max_rel_dev(y.data(), reference.data(), 1e-6);
            if dev >= EQUIVALENCE_TOL {
                return Err(Error::Invalid(format!("{imp:?} deviates by {dev:e} at L={len}")));
            }
            worst = worst.max(dev);
            let times: Vec<f64> = (0..cfg.repetitions)
                .map(|_| {
                    let t = Instant::now();
                    let y = p.run(imp);
                    let ns = t.elapsed().as_nanos() as f64;
                    drop(y);
                    ns
                })
                .collect();
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
            rows.push(BenchRow {
                len,
                channels: cfg.channels,
                state: cfg.state,
                imp,
                mean_ns: mean,
                std_ns: var.sqrt(),
            });
        }
    }
    let slope = |imp: ScanImpl| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.imp == imp)
            .map(|r| (r.len as f64, r.mean_ns))
            .collect();
        fit_slope(&pts)
    };
    let summary = BenchSummary {
        slope_sequential: slope(ScanImpl::Sequential),
        slope_parallel: slope(ScanImpl::Parallel),
        max_rel_dev: worst,
        rows,
    };
    if let Some(dir) = out {
        let mut csv = CsvWriter::create(dir.join(BENCH_FILE), &["L", "D", "N", "impl", "mean_ns", "std_ns"])?;
        for r in &summary.rows {
            csv.row(&[
                r.len.to_string(),
                r.channels.to_string(),
                r.state.to_string(),
                r.imp.name().to_string(),
                format!("{:.1}", r.mean_ns),
                format!("{:.1}", r.std_ns),
            ])?;
        }
        write_json(
            dir.join(SLOPE_FILE),
            &serde_json::json!({
                "sequential": summary.slope_sequential,
                "parallel": summary.slope_parallel,
                "max_rel_dev": summary.max_rel_dev,
            }),
        )?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = (1..6).map(|i| (i as f64, 3.0 * (i as f64).powf(1.5))).collect();
        assert!((fit_slope(&pts) - 1.5).abs() < 1e-12);
    }
}
