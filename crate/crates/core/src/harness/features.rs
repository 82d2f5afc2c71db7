use std::fs;
use std::path::{Path, PathBuf};

use super::{OutputLock, CHECKPOINT_DIR};
use crate::autodiff::Graph;
use crate::data;
use crate::error::{Error, Result};
use crate::model::{ClipInput, Task};
use crate::tensor::{io, Tensor};

pub const POWER_ITERATIONS: usize = 100;
pub const POWER_TOL: f64 = 1e-8;
/// Weight of the feature map in the overlay; the frame gets the rest.
pub const OVERLAY_WEIGHT: f64 = 0.7;
const VARIANCE_FLOOR: f64 = 1e-12;

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.rgb);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary PPM with maxval 255.
pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("magic is not P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if pos >= bytes.len() || body.len() != width * height * 3 {
        return Err(bad("pixel data length"));
    }
    Ok(Image {
        width,
        height,
        rgb: body.to_vec(),
    })
}

/// Leading eigenvector of the channel covariance of `rows: [P, C]` by
/// power iteration, or `None` when the rows have no variance.
pub fn first_component(rows: &[f64], channels: usize) -> Option<Vec<f64>> {
    let p = rows.len() / channels;
    if p == 0 {
        return None;
    }
    let mut mean = vec![0.0; channels];
    for r in rows.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v / p as f64;
        }
    }
    let mut cov = vec![0.0; channels * channels];
    for r in rows.chunks_exact(channels) {
        for i in 0..channels {
            let di = r[i] - mean[i];
            for j in 0..channels {
                cov[i * channels + j] += di * (r[j] - mean[j]) / p as f64;
            }
        }
    }
    let trace: f64 = (0..channels).map(|i| cov[i * channels + i]).sum();
    if trace < VARIANCE_FLOOR {
        return None;
    }
    let k = (0..channels).max_by(|&a, &b| cov[a * channels + a].total_cmp(&cov[b * channels + b]))?;
    let mut v: Vec<f64> = cov[k * channels..(k + 1) * channels].to_vec();
    normalize(&mut v)?;
    for _ in 0..POWER_ITERATIONS {
        let mut next: Vec<f64> = (0..channels)
            .map(|i| (0..channels).map(|j| cov[i * channels + j] * v[j]).sum())
            .collect();
        normalize(&mut next)?;
        let change: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < POWER_TOL {
            break;
        }
    }
    Some(v)
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < VARIANCE_FLOOR {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(())
}

/// Blends a `[0, 1]` grayscale map onto an RGB frame: `0.7·feature + 0.3·image`.
pub fn overlay(feature: &[f64], frame: &[f32], width: usize, height: usize) -> Image {
    let mut rgb = Vec::with_capacity(width * height * 3);
    for p in 0..width * height {
        for ch in 0..3 {
            let v = OVERLAY_WEIGHT * feature[p] + (1.0 - OVERLAY_WEIGHT) * frame[p * 3 + ch] as f64;
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Image { width, height, rgb }
}

/// First-component map of `[T, h, w, C]` features, min-max scaled to `[0, 1]`
/// over the first `frames` frames and upsampled to `size × size` by
/// replication. Zero-variance input gives an all-zero map.
fn component_maps(features: &Tensor<f32>, frames: usize, size: usize) -> Vec<Vec<f64>> {
    let (h, w, c) = (features.shape()[1], features.shape()[2], features.shape()[3]);
    let rows: Vec<f64> = features.data()[..frames * h * w * c]
        .iter()
        .map(|&v| v as f64)
        .collect();
    let proj: Vec<f64> = match first_component(&rows, c) {
        Some(v) => rows
            .chunks_exact(c)
            .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect(),
        None => vec![0.0; frames * h * w],
    };
    let (lo, hi) = proj
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &x| (l.min(x), u.max(x)));
    let scaled: Vec<f64> = if hi - lo > VARIANCE_FLOOR {
        proj.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; proj.len()]
    };
    (0..frames)
        .map(|t| {
            (0..size * size)
                .map(|p| {
                    let (y, x) = (p / size * h / size, p % size * w / size);
                    scaled[(t * h + y) * w + x]
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub files: Vec<PathBuf>,
}

/// Runs the checkpoint at `run_dir` (or a bare checkpoint directory) on one
/// generated clip and writes pre- and post-pyramid features with overlays.
pub fn dump_features(
    checkpoint: impl AsRef<Path>,
    task: Task,
    seed: u64,
    index: u64,
    frames: usize,
    out: &Path,
) -> Result<FeatureDump> {
    let mut ckpt = checkpoint.as_ref().to_path_buf();
    if ckpt.join(CHECKPOINT_DIR).is_dir() {
        ckpt = ckpt.join(CHECKPOINT_DIR);
    }
    let (model, store) = super::train::load_checkpoint(&ckpt)?;
    let _lock = OutputLock::acquire(out)?;
    let sample = data::sample(seed, task, index, frames)?;
    let clip = ClipInput::pad(&sample.video, &sample.audio, model.config().t_max)?;
    let mut g = Graph::new(&store);
    let result = model.forward(&mut g, &clip)?;
    let mut files = Vec::new();
    for (name, var) in [("pre_cip", result.pre_pyramid), ("post_cip", result.mask_feature)] {
        let features = g.value(var);
        let path = out.join(format!("{name}.{}", io::EXTENSION));
        io::save(&path, features)?;
        files.push(path);
        let size = data::CANVAS;
        for (t, map) in component_maps(features, frames, size).iter().enumerate() {
            let frame = &sample.video.data()[t * size * size * 3..(t + 1) * size * size * 3];
            let path = out.join(format!("{name}_t{t}.ppm"));
            write_ppm(&path, &overlay(map, frame, size, size))?;
            files.push(path);
        }
    }
    Ok(FeatureDump { files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn rank_one_direction_is_recovered() {
        let mut rng = Rng::new(5);
        let c = 12;
        let mut dir: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        normalize(&mut dir).unwrap();
        let rows: Vec<f64> = (0..300)
            .flat_map(|_| {
                let s = rng.normal() * 3.0;
                dir.iter().map(move |d| s * d).collect::<Vec<_>>()
            })
            .collect();
        let v = first_component(&rows, c).unwrap();
        let cos: f64 = v.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 0.999);
    }

    #[test]
    fn constant_features_take_the_guard_path() {
        assert!(first_component(&[2.0; 60], 6).is_none());
        let t = Tensor::<f32>::full([1, 2, 2, 3], 0.5);
        let maps = component_maps(&t, 1, 4);
        assert!(maps[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlay_is_weighted_sum() {
        let feature = [0.0, 1.0, 0.5, 0.25];
        let frame: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let img = overlay(&feature, &frame, 2, 2);
        for p in 0..4 {
            for ch in 0..3 {
                let want = 0.7 * feature[p] + 0.3 * frame[p * 3 + ch] as f64;
                assert_eq!(img.rgb[p * 3 + ch], (want * 255.0).round() as u8);
            }
        }
    }

    #[test]
    fn ppm_round_trip() {
        let img = Image {
            width: 3,
            height: 2,
            rgb: (0..18).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(read_ppm(&bytes).unwrap(), img);
        assert!(read_ppm(&bytes[..bytes.len() - 1]).is_err());
    }
}
