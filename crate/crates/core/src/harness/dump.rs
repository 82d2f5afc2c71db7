use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{write_json, CsvWriter, OutputLock};
use crate::data;
use crate::error::Result;
use crate::layout::{direction_set, AudioAttach, Extent, LayoutKind, ScanLayout, Token};
use crate::model::Task;
use crate::tensor::io;

pub const LAYOUT_HEADER: [&str; 8] = [
    "direction",
    "sequence",
    "position",
    "scale",
    "t",
    "y",
    "x",
    "audio_slot",
];
pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct LayoutDumpOptions {
    pub extents: Vec<Extent>,
    pub frames: usize,
    pub kind: LayoutKind,
    /// Direction count of spatio-temporal layouts.
    pub directions: usize,
    pub attach: AudioAttach,
}

impl LayoutDumpOptions {
    pub fn build(&self) -> Result<ScanLayout> {
        match self.kind {
            LayoutKind::PerFrame => ScanLayout::per_frame(&self.extents, self.frames, self.attach),
            LayoutKind::Spatiotemporal => ScanLayout::spatiotemporal(
                &self.extents,
                self.frames,
                &direction_set(self.directions)?,
                self.attach,
            ),
        }
    }
}

/// One CSV row per (sequence, position): visual tokens fill `scale,t,y,x`,
/// audio tokens fill `t` and `audio_slot`.
pub fn layout_dump(opts: &LayoutDumpOptions, path: &Path) -> Result<ScanLayout> {
    let layout = opts.build()?;
    let mut csv = CsvWriter::create(path, &LAYOUT_HEADER)?;
    for s in 0..layout.seqs() {
        for p in 0..layout.len() {
            let mut row = vec![
                layout.direction_of(s).to_string(),
                s.to_string(),
                p.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ];
            match layout.token(layout.index()[s * layout.len() + p]) {
                Token::Visual { scale, t, y, x } => {
                    row[3] = scale.to_string();
                    row[4] = t.to_string();
                    row[5] = y.to_string();
                    row[6] = x.to_string();
                }
                Token::Audio { t } => {
                    row[4] = t.to_string();
                    row[7] = t.to_string();
                }
            }
            csv.row(&row)?;
        }
    }
    Ok(layout)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetEntry {
    pub index: u64,
    pub video: PathBuf,
    pub audio: PathBuf,
    pub masks: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub seed: u64,
    #[serde(rename = "T")]
    pub frames: usize,
    pub samples: Vec<DatasetEntry>,
}

/// Writes `count` generated samples as tensor files plus a JSON manifest with
/// paths relative to `out`.
pub fn dataset_dump(task: Task, seed: u64, count: usize, frames: usize, out: &Path) -> Result<DatasetManifest> {
    let _lock = OutputLock::acquire(out)?;
    let samples = data::generate(seed, task, count, frames)?;
    let mut entries = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let name = |part: &str| PathBuf::from(format!("sample_{i:05}_{part}.{}", io::EXTENSION));
        let entry = DatasetEntry {
            index: i as u64,
            video: name("video"),
            audio: name("audio"),
            masks: name("masks"),
        };
        io::save(out.join(&entry.video), &s.video)?;
        io::save(out.join(&entry.audio), &s.audio)?;
        io::save(out.join(&entry.masks), &s.masks)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        task,
        seed,
        frames,
        samples: entries,
    };
    write_json(out.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}
