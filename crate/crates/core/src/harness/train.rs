use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{
    write_json, CsvWriter, OutputLock, RunConfig, CHECKPOINT_DIR, METRICS_JSON, METRICS_LOG, MODEL_FILE,
    RUN_CONFIG_FILE,
};
use crate::autodiff::{checkpoint, Graph, ParamStore};
use crate::data::{self, ClipSample};
use crate::error::{Error, Result};
use crate::layout::DIRECTION_COUNTS;
use crate::model::{
    binary_metrics, pad_frames, segmentation_loss, semantic_metrics, upsample_logits, AdamW, AdamWConfig, ClipInput,
    Counts, MetricOptions, Metrics, Model, ModelConfig, Task, PATCH,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Held-out clips are drawn from sample indices at and above this value.
pub const HELD_OUT_BASE: u64 = 1 << 32;
const INIT_STREAM: u64 = 0x1417;
const AUGMENT_STREAM: u64 = 0xA06;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub metrics: Option<Metrics>,
}

impl LogRow {
    fn fields(&self) -> [String; 4] {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        [
            self.step.to_string(),
            opt(self.loss),
            opt(self.metrics.map(|m| m.m_j)),
            opt(self.metrics.map(|m| m.m_f)),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Metrics,
    pub log: Vec<LogRow>,
    pub checkpoint: PathBuf,
}

/// Freshly initialised model and parameters for `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Model::new(cfg, &mut store, &mut Rng::derive(seed, INIT_STREAM))?;
    Ok((model, store))
}

fn prepare(sample: &ClipSample, t_max: usize) -> Result<(ClipInput<f32>, Tensor<f32>)> {
    let clip = ClipInput::pad(&sample.video, &sample.audio, t_max)?;
    Ok((clip, pad_frames(&sample.masks, t_max)))
}

fn clip_counts(model: &Model, store: &ParamStore<f32>, sample: &ClipSample) -> Result<Counts> {
    let cfg = model.config();
    let (clip, masks) = prepare(sample, cfg.t_max)?;
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, &clip)?;
    let logits = upsample_logits(g.value(out.mask_logits), PATCH)?;
    if cfg.num_classes == 1 {
        binary_metrics(&logits, &masks, &clip.valid)
    } else {
        semantic_metrics(&logits, &masks, &clip.valid)
    }
}

/// Metrics over `clips` held-out samples of `(seed, task)`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    task: Task,
    seed: u64,
    clips: usize,
    frames: usize,
    opts: MetricOptions,
) -> Result<Metrics> {
    let counts: Vec<Counts> = (0..clips as u64)
        .into_par_iter()
        .map(|i| clip_counts(model, store, &data::sample(seed, task, HELD_OUT_BASE + i, frames)?))
        .collect::<Result<_>>()?;
    let mut total = Counts::default();
    for c in &counts {
        total.merge(c);
    }
    Ok(total.metrics(opts))
}

/// Trains per `cfg`, writing the resolved config, the metrics log, the final
/// metrics and a checkpoint into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let model_cfg = cfg.model_config()?;
    let out = &cfg.output_dir;
    let _lock = OutputLock::acquire(out)?;
    write_json(out.join(RUN_CONFIG_FILE), &cfg.resolved()?)?;
    let opts = MetricOptions { beta_sq: cfg.f_beta_sq };
    let (model, mut store) = init_model(&model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            cosine_steps: cfg.cosine.then_some(cfg.steps),
            ..Default::default()
        },
        &store,
    );
    let mut csv = CsvWriter::create(out.join(METRICS_LOG), &["step", "loss", "M_J", "M_F"])?;
    let eval = |store: &ParamStore<f32>| evaluate(&model, store, cfg.task, cfg.seed, cfg.eval_clips, cfg.frames, opts);

    let mut metrics = eval(&store)?;
    let mut log = vec![LogRow {
        step: 0,
        loss: None,
        metrics: Some(metrics),
    }];
    csv.row(&log[0].fields())?;
    for step in 1..=cfg.steps {
        store.zero_grad();
        let mut loss_sum = 0.0;
        for b in 0..cfg.batch_size {
            let index = ((step - 1) * cfg.batch_size + b) as u64;
            let mut sample = data::sample(cfg.seed, cfg.task, index, cfg.frames)?;
            if cfg.augment {
                sample = data::augment(&sample, Rng::derive(cfg.seed ^ AUGMENT_STREAM, index).next_u64());
            }
            let (clip, masks) = prepare(&sample, model_cfg.t_max)?;
            let grads = {
                let mut g = Graph::new(&store);
                let outp = model.forward(&mut g, &clip)?;
                let loss = segmentation_loss(&mut g, outp.mask_logits, &masks, &clip.valid, model_cfg.num_classes)?;
                let v = g.value(loss).item() as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at step {step} (sample {index}): {v}; last metrics M_J={} M_F={}",
                        metrics.m_j, metrics.m_f
                    )));
                }
                loss_sum += v;
                g.backward(loss)?
            };
            store.accumulate(&grads);
        }
        store.scale_grads(1.0 / cfg.batch_size as f32);
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.data().iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {} at step {step}", p.name)));
        }
        opt.step(&mut store);
        let evaluate_now = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if evaluate_now {
            metrics = eval(&store)?;
        }
        let row = LogRow {
            step,
            loss: Some(loss_sum / cfg.batch_size as f64),
            metrics: evaluate_now.then_some(metrics),
        };
        csv.row(&row.fields())?;
        log.push(row);
    }

    let ckpt = out.join(CHECKPOINT_DIR);
    save_checkpoint(&store, &model_cfg, &ckpt)?;
    write_json(out.join(METRICS_JSON), &metrics)?;
    Ok(TrainSummary {
        metrics,
        log,
        checkpoint: ckpt,
    })
}

pub fn save_checkpoint(store: &ParamStore<f32>, cfg: &ModelConfig, dir: &Path) -> Result<()> {
    checkpoint::save(store, dir)?;
    write_json(dir.join(MODEL_FILE), cfg)
}

/// Model and parameters restored from a checkpoint directory.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, ParamStore<f32>)> {
    let dir = dir.as_ref();
    let cfg = ModelConfig::load(dir.join(MODEL_FILE))?;
    let (model, mut store) = init_model(&cfg, 0)?;
    checkpoint::load_into(&mut store, dir)?;
    Ok((model, store))
}

pub fn eval_checkpoint(
    dir: impl AsRef<Path>,
    task: Task,
    seed: u64,
    clips: usize,
    frames: usize,
    opts: MetricOptions,
) -> Result<Metrics> {
    let (model, store) = load_checkpoint(dir)?;
    if model.config().num_classes != data::num_classes(task) {
        return Err(Error::Shape(format!(
            "checkpoint has {} classes, task {} needs {}",
            model.config().num_classes,
            task.name(),
            data::num_classes(task)
        )));
    }
    evaluate(&model, &store, task, seed, clips, frames, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub directions: usize,
    pub metrics: Metrics,
    pub steps: usize,
    pub seed: u64,
}

pub const ABLATION_FILE: &str = "ablation.csv";

/// Trains once per direction count, each run in its own subdirectory, and
/// writes `ablation.csv`.
pub fn ablate_directions(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let out = &cfg.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let mut csv = CsvWriter::create(out.join(ABLATION_FILE), &["directions", "M_J", "M_F", "steps", "seed"])?;
    let mut rows = Vec::new();
    for k in DIRECTION_COUNTS {
        let sub = RunConfig {
            direction_count: Some(k),
            output_dir: out.join(format!("directions_{k}")),
            ..cfg.clone()
        };
        let summary = train(&sub)?;
        let row = AblationRow {
            directions: k,
            metrics: summary.metrics,
            steps: cfg.steps,
            seed: cfg.seed,
        };
        csv.row(&[
            k.to_string(),
            row.metrics.m_j.to_string(),
            row.metrics.m_f.to_string(),
            cfg.steps.to_string(),
            cfg.seed.to_string(),
        ])?;
        rows.push(row);
    }
    Ok(rows)
}
