//! Model checkpoints: a TOML manifest plus one little-endian `f64` file per
//! owner.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, SplitTopology};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OwnerEntry {
    owner: usize,
    file: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    topology: SplitTopology,
    owners: Vec<OwnerEntry>,
}

fn format_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", path: path.to_path_buf(), detail: detail.into() }
}

pub fn save<T: Scalar>(dir: &Path, topology: &SplitTopology, params: &ModelParams<T>) -> Result<()> {
    params.check_layout(topology)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut owners = Vec::new();
    for owner in 0..topology.owner_count() {
        let file = format!("w{owner}.bin");
        let flat = params.flat(owner);
        let bytes: Vec<u8> =
            flat.iter().flat_map(|v| v.to_f64().expect("finite scalar").to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        owners.push(OwnerEntry { owner, file, len: flat.len() });
    }
    let manifest = Manifest { format: 1, topology: topology.clone(), owners };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(SplitTopology, ModelParams<T>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| format_error(&path, e.to_string()))?;
    if manifest.format != 1 {
        return Err(format_error(&path, format!("unsupported format {}", manifest.format)));
    }
    let topology = manifest.topology;
    topology.validate()?;
    if manifest.owners.len() != topology.owner_count() {
        return Err(format_error(
            &path,
            format!("{} owner files for {} owners", manifest.owners.len(), topology.owner_count()),
        ));
    }
    let mut params = ModelParams::<T>::zeros(&topology);
    for (k, entry) in manifest.owners.iter().enumerate() {
        if entry.owner != k {
            return Err(format_error(&path, format!("owner entry {k} names owner {}", entry.owner)));
        }
        let expected = topology.param_count(k);
        if entry.len != expected {
            return Err(format_error(
                &path,
                format!("owner {k} declares {} values, topology needs {expected}", entry.len),
            ));
        }
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() != 8 * entry.len {
            return Err(format_error(
                &file,
                format!("holds {} bytes, declared {} values", bytes.len(), entry.len),
            ));
        }
        let values: Vec<T> = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        params.set_flat(k, &values)?;
    }
    Ok((topology, params))
}
