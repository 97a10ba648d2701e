//! Parameter checkpoints: a JSON manifest (names, shapes, seed, step count,
//! free-form metadata) next to one little-endian `f64` blob per parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "bikedemand-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub seed: u64,
    pub step: u64,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    step: u64,
    meta: serde_json::Value,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn blob_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.f64")
}

pub fn write_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (_, name, t) in ckpt.params.iter() {
        let file = blob_name(name);
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        seed: ckpt.seed,
        step: ckpt.step,
        meta: ckpt.meta.clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Data(format!("{}: not a {FORMAT} v1 manifest", path.display())));
    }
    let mut params = ParamStore::new();
    for e in manifest.params {
        let p = dir.join(&e.file);
        let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::Data(format!(
                "{}: expected {} bytes for shape {:?}, found {}",
                p.display(),
                n * 8,
                e.shape,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.add(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(Checkpoint {
        params,
        seed: manifest.seed,
        step: manifest.step,
        meta: manifest.meta,
    })
}
