//! Checkpoint directories: `manifest.txt` with one `name<TAB>relative-path`
//! line per parameter, plus one `.nst` file per parameter.

use std::fs;
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{io, Element};

pub const MANIFEST: &str = "manifest.txt";

pub fn save<T: Element>(store: &ParamStore<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (_, p) in store.iter() {
        let file = format!("{}.{}", p.name, io::EXTENSION);
        io::save(dir.join(&file), &p.value)?;
        manifest.push_str(&p.name);
        manifest.push('\t');
        manifest.push_str(&file);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (name, file) = line
                .split_once('\t')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line {line:?}")))?;
            Ok((name.to_string(), file.to_string()))
        })
        .collect()
}

/// Overwrites the values of `store` from `dir`. Every parameter of the store
/// must be present with the same shape; extra entries are an error too.
pub fn load_into<T: Element>(store: &mut ParamStore<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let entries = read_manifest(dir)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, file) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let value = io::load::<T>(dir.join(&file))?;
        store
            .set_value(id, value)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("enc.w", Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        s.add("enc.b", Tensor::from_f64([2], &[0.5, -0.5]).unwrap());
        save(&s, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "enc.w\tenc.w.nst\nenc.b\tenc.b.nst\n");

        let mut t = ParamStore::<f32>::new();
        t.add("enc.w", Tensor::zeros([2, 2]));
        t.add("enc.b", Tensor::zeros([2]));
        load_into(&mut t, dir.path()).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert!(a.value.bit_eq(&b.value));
        }

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("enc.w", Tensor::zeros([3, 2]));
        wrong.add("enc.b", Tensor::zeros([2]));
        assert!(matches!(load_into(&mut wrong, dir.path()), Err(Error::Checkpoint(_))));
    }
}
