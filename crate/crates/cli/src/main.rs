use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ssmavs::harness::{self, BenchConfig, LayoutDumpOptions, RunConfig};
use ssmavs::layout::{AudioAttach, Extent, LayoutKind, DEFAULT_DIRECTIONS};
use ssmavs::model::{MetricOptions, Task};

#[derive(Parser)]
#[command(name = "ssmavs", version, about = "Selective-scan audio-visual segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on generated clips; writes metrics.csv, metrics.json and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out clips and print metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        clips: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 1.0)]
        beta_sq: f64,
        /// Also write the JSON to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train once per direction count and write ablation.csv.
    AblateDirections {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time the scan kernels over a sweep of sequence lengths.
    BenchScan {
        /// Run config whose `bench` section supplies defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        state: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write pre- and post-pyramid features and PCA overlays for one clip.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the token order of a scan layout as CSV.
    LayoutDump {
        /// Comma-separated `HxW` extents, fine to coarse.
        #[arg(long, value_delimiter = ',', value_parser = parse_extent)]
        extents: Vec<Extent>,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, value_enum, default_value_t = Kind::Spatiotemporal)]
        kind: Kind,
        #[arg(long, default_value_t = DEFAULT_DIRECTIONS)]
        directions: usize,
        #[arg(long, value_enum, default_value_t = Attach::None)]
        attach: Attach,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write generated clips as tensor files plus a JSON manifest.
    DatasetDump {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference gradient checks of every block and a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        coords: usize,
    },
    /// Re-read every emitted file under a directory and verify its format.
    ValidateFormats { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    PerFrame,
    Spatiotemporal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attach {
    None,
    Append,
    Prepend,
}

fn parse_extent(s: &str) -> Result<Extent, String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("{s:?} is not HxW"))?;
    let n = |v: &str| v.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok(Extent::new(n(h)?, n(w)?))
}

fn run_config(path: &PathBuf, steps: Option<usize>, output: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    harness::configure_threads()?;
    match cli.command {
        Command::Train { config, steps, output } => {
            let cfg = run_config(&config, steps, output)?;
            let summary = harness::train(&cfg)?;
            println!("{}", serde_json::to_string(&summary.metrics)?);
        }
        Command::Eval {
            checkpoint,
            task,
            seed,
            clips,
            frames,
            beta_sq,
            output,
        } => {
            let m = harness::eval_checkpoint(&checkpoint, task, seed, clips, frames, MetricOptions { beta_sq })?;
            let text = serde_json::to_string(&m)?;
            println!("{text}");
            if let Some(path) = output {
                std::fs::write(&path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::AblateDirections { config, steps, output } => {
            let cfg = run_config(&config, steps, output)?;
            for row in harness::ablate_directions(&cfg)? {
                println!(
                    "{} directions: M_J={} M_F={}",
                    row.directions, row.metrics.m_j, row.metrics.m_f
                );
            }
        }
        Command::BenchScan {
            config,
            lengths,
            reps,
            channels,
            state,
            seed,
            output,
        } => {
            let mut bench = match config {
                Some(p) => RunConfig::load(&p)?.bench,
                None => BenchConfig::default(),
            };
            bench.lengths = lengths.unwrap_or(bench.lengths);
            bench.repetitions = reps.unwrap_or(bench.repetitions);
            bench.channels = channels.unwrap_or(bench.channels);
            bench.state = state.unwrap_or(bench.state);
            let s = harness::bench_scan(&bench, seed, Some(&output))?;
            println!(
                "slope sequential {:.4}, parallel {:.4}, max deviation {:e}",
                s.slope_sequential, s.slope_parallel, s.max_rel_dev
            );
        }
        Command::DumpFeatures {
            checkpoint,
            task,
            seed,
            index,
            frames,
            output,
        } => {
            let dump = harness::dump_features(&checkpoint, task, seed, index, frames, &output)?;
            println!("wrote {} files to {}", dump.files.len(), output.display());
        }
        Command::LayoutDump {
            extents,
            frames,
            kind,
            directions,
            attach,
            output,
        } => {
            if extents.is_empty() {
                bail!("--extents is required");
            }
            let opts = LayoutDumpOptions {
                extents,
                frames,
                kind: match kind {
                    Kind::PerFrame => LayoutKind::PerFrame,
                    Kind::Spatiotemporal => LayoutKind::Spatiotemporal,
                },
                directions,
                attach: match attach {
                    Attach::None => AudioAttach::None,
                    Attach::Append => AudioAttach::Append,
                    Attach::Prepend => AudioAttach::Prepend,
                },
            };
            let layout = harness::layout_dump(&opts, &output)?;
            println!("{} sequences of length {}", layout.seqs(), layout.len());
        }
        Command::DatasetDump {
            task,
            seed,
            count,
            frames,
            output,
        } => {
            let m = harness::dataset_dump(task, seed, count, frames, &output)?;
            println!("wrote {} samples to {}", m.samples.len(), output.display());
        }
        Command::Gradcheck { seed, coords } => {
            let mut failed = Vec::new();
            for e in harness::gradcheck_suite(seed, coords)? {
                let status = if e.report.passed() { "ok" } else { "FAIL" };
                println!("{:<14} {status:<4} max rel err {:.3e}", e.name, e.report.max_rel_err());
                if !e.report.passed() {
                    failed.push(e.name);
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Command::ValidateFormats { dir } => {
            let r = harness::validate_formats(&dir)?;
            for (path, err) in &r.failures {
                println!("FAIL {}: {err}", path.display());
            }
            println!(
                "{} files valid, {} skipped, {} invalid",
                r.checked.len(),
                r.skipped.len(),
                r.failures.len()
            );
            if !r.ok() {
                bail!("format validation failed");
            }
        }
    }
    Ok(())
}
