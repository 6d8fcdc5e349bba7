//! Small writers shared by the subcommands. Every numeric table is written
//! as text (CSV/JSON) and mirrored as a VXT1 tensor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use voxelfit::{write_tensor, Error, Result, Tensor};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

pub fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(path)
}

pub fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(path)
}

pub fn write_vxt(path: PathBuf, shape: Vec<usize>, data: Vec<f64>) -> Result<PathBuf> {
    write_tensor(&Tensor::from_f64(shape, data)?, &path)?;
    Ok(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}
