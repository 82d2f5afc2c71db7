use std::fs;
use std::path::{Path, PathBuf};

use super::features::read_ppm;
use crate::autodiff::checkpoint::MANIFEST;
use crate::error::{Error, Result};
use crate::tensor::{io, DType};

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checked: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, String)>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn check_nst(bytes: &[u8]) -> Result<()> {
    let header = io::decode_header(bytes)?;
    let again = match header.dtype {
        DType::F32 => io::encode(&io::decode::<f32>(bytes)?),
        DType::F64 => io::encode(&io::decode::<f64>(bytes)?),
    };
    if again != bytes {
        return Err(Error::Format("re-encoding differs".into()));
    }
    Ok(())
}

fn check_csv(text: &str) -> Result<()> {
    let bad = |m: String| Error::Format(format!("csv: {m}"));
    if text.contains('\r') {
        return Err(bad("CR line ending".into()));
    }
    if !text.ends_with('\n') {
        return Err(bad("missing final LF".into()));
    }
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let columns = header.split(',').count();
    if header.split(',').any(str::is_empty) {
        return Err(bad("empty header field".into()));
    }
    for (i, line) in lines.enumerate() {
        let n = line.split(',').count();
        if n != columns {
            return Err(bad(format!("line {} has {n} fields, header has {columns}", i + 2)));
        }
    }
    Ok(())
}

fn check_manifest(dir: &Path, text: &str) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest line {} lacks a tab", i + 1)))?;
        if name.is_empty() || !dir.join(file).is_file() {
            return Err(Error::Format(format!("manifest line {}: {file:?} missing", i + 1)));
        }
    }
    Ok(())
}

fn check_file(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = || std::str::from_utf8(&bytes).map_err(|_| Error::Format("not UTF-8".into()));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match path.extension().and_then(|e| e.to_str()) {
        Some(io::EXTENSION) => check_nst(&bytes)?,
        Some("csv") => check_csv(text()?)?,
        Some("json") => {
            serde_json::from_str::<serde_json::Value>(text()?)?;
        }
        Some("ppm") => {
            read_ppm(&bytes)?;
        }
        _ if name == MANIFEST => check_manifest(path.parent().unwrap_or(Path::new(".")), text()?)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Re-reads every emitted file under `dir` and checks it against its format:
/// tensor files re-encode bit-exactly, CSVs are rectangular with LF endings,
/// JSON parses, PPMs have a valid P6 header and pixel count, and checkpoint
/// manifests reference existing files.
pub fn validate_formats(dir: impl AsRef<Path>) -> Result<ValidationReport> {
    let mut files = Vec::new();
    walk(dir.as_ref(), &mut files)?;
    let mut report = ValidationReport::default();
    for f in files {
        match check_file(&f) {
            Ok(true) => report.checked.push(f),
            Ok(false) => report.skipped.push(f),
            Err(e) => report.failures.push((f, e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rules() {
        assert!(check_csv("a,b\n1,2\n").is_ok());
        assert!(check_csv("a,b\r\n1,2\r\n").is_err());
        assert!(check_csv("a,b\n1\n").is_err());
        assert!(check_csv("a,b\n1,2").is_err());
        assert!(check_csv("a,b\n1,\n").is_ok());
    }

    #[test]
    fn corrupted_tensor_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let t = crate::tensor::Tensor::<f32>::ones([2, 3]);
        io::save(dir.path().join("a.nst"), &t).unwrap();
        let mut bytes = io::encode(&t);
        bytes.pop();
        fs::write(dir.path().join("b.nst"), bytes).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let r = validate_formats(dir.path()).unwrap();
        assert_eq!(r.checked.len(), 1);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.failures.len(), 1);
    }
}
