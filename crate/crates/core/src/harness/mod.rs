//! Experiment drivers behind the `ssmavs` command line.

mod bench;
mod dump;
mod features;
mod grad;
mod train;
mod validate;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};

pub use bench::{bench_scan, fit_slope, BenchRow, BenchSummary};
pub use dump::{dataset_dump, layout_dump, LayoutDumpOptions};
pub use features::{dump_features, first_component, overlay, read_ppm, write_ppm, FeatureDump, Image};
pub use grad::{gradcheck_suite, gradcheck_suite_with, tiny_model_config, GradCheckEntry, BLOCK_CASES};
pub use train::{
    ablate_directions, eval_checkpoint, evaluate, init_model, load_checkpoint, train, AblationRow, LogRow,
    TrainSummary, HELD_OUT_BASE,
};
pub use validate::{validate_formats, ValidationReport};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const METRICS_LOG: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
/// Model configuration stored next to the checkpoint manifest.
pub const MODEL_FILE: &str = "model.json";
pub const LOCK_FILE: &str = ".ssmavs.lock";
pub const THREADS_ENV: &str = "SSMAVS_THREADS";

/// Model configuration given either as a path or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(ModelConfig),
}

impl ModelSource {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSource::Path(p) => ModelConfig::load(p),
            ModelSource::Inline(c) => {
                c.validate()?;
                Ok(c.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_bench_width")]
    pub channels: usize,
    #[serde(default = "default_bench_width")]
    pub state: usize,
}

fn default_lengths() -> Vec<usize> {
    (8..=14).map(|e| 1 << e).collect()
}

fn default_reps() -> usize {
    5
}

fn default_bench_width() -> usize {
    16
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: default_lengths(),
            repetitions: default_reps(),
            channels: default_bench_width(),
            state: default_bench_width(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub task: Task,
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub cosine: bool,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub direction_count: Option<usize>,
    /// Frames per generated clip.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_clips")]
    pub eval_clips: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// `β²` of the F-measure.
    #[serde(default = "default_beta_sq")]
    pub f_beta_sq: f64,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_batch() -> usize {
    2
}
fn default_lr() -> f64 {
    2e-5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_frames() -> usize {
    5
}
fn default_eval_every() -> usize {
    50
}
fn default_eval_clips() -> usize {
    32
}
fn default_true() -> bool {
    true
}
fn default_beta_sq() -> f64 {
    1.0
}

impl RunConfig {
    pub fn new(model: ModelConfig, task: Task, seed: u64, steps: usize, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: ModelSource::Inline(model),
            task,
            seed,
            steps,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            cosine: false,
            output_dir: output_dir.into(),
            direction_count: None,
            frames: default_frames(),
            eval_every: default_eval_every(),
            eval_clips: default_eval_clips(),
            augment: true,
            f_beta_sq: default_beta_sq(),
            bench: BenchConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Model configuration with the direction override applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = self.model.resolve()?;
        if let Some(k) = self.direction_count {
            cfg.direction_count = k;
        }
        cfg.validate()?;
        if self.frames == 0 || self.frames > cfg.t_max {
            return Err(Error::Config(format!(
                "frames {} outside 1..={}",
                self.frames, cfg.t_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let need = crate::data::num_classes(self.task);
        if cfg.num_classes != need {
            return Err(Error::Config(format!(
                "task {} needs num_classes = {need}, config has {}",
                self.task.name(),
                cfg.num_classes
            )));
        }
        if cfg.height != crate::data::CANVAS
            || cfg.width != crate::data::CANVAS
            || cfg.audio_dim != crate::data::AUDIO_DIM
        {
            return Err(Error::Config(format!(
                "synthetic clips are {0}x{0} with {1}-dim audio",
                crate::data::CANVAS,
                crate::data::AUDIO_DIM
            )));
        }
        Ok(cfg)
    }

    /// Copy with the model inlined and the override folded in.
    pub fn resolved(&self) -> Result<Self> {
        Ok(Self {
            model: ModelSource::Inline(self.model_config()?),
            direction_count: None,
            ..self.clone()
        })
    }
}

/// Exclusive ownership of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::Invalid(format!("{} is locked by another run", dir.display()))
                }
                _ => Error::io(&path, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Worker thread cap from `SSMAVS_THREADS`, if set.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Installs the global worker pool, honouring `SSMAVS_THREADS`.
pub fn configure_threads() -> Result<()> {
    if let Some(n) = thread_limit()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok(())
}

/// Comma-separated writer with a header row and LF line endings.
pub struct CsvWriter {
    file: std::io::BufWriter<File>,
    path: PathBuf,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            file: std::io::BufWriter::new(file),
            path,
            columns: header.len(),
        };
        w.row(header)?;
        Ok(w)
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::Invalid(format!(
                "csv row of {} fields, expected {}",
                fields.len(),
                self.columns
            )));
        }
        let line: Vec<&str> = fields.iter().map(AsRef::as_ref).collect();
        writeln!(self.file, "{}", line.join(",")).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn write_json<V: Serialize>(path: impl AsRef<Path>, value: &V) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
