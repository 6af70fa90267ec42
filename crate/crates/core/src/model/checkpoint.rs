//! Checkpoint directories: a `manifest.json` describing every array plus one
//! raw little-endian `f32` blob per array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ModelConfig, ModelParameters};

pub const MAGIC: &str = "LNRP1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub config: ModelConfig,
    pub dtype: String,
    pub byte_order: String,
    pub arrays: Vec<ArrayEntry>,
}

/// Writes `params` into directory `dir` (created if missing).
pub fn save(params: &ModelParameters, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    let mut failure = None;
    params.visit(|name, _, shape, data| {
        if failure.is_some() {
            return;
        }
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = data
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect();
        if let Err(e) = fs::write(dir.join(&file), bytes) {
            failure = Some(e);
        }
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            file,
        });
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    let manifest = Manifest {
        magic: MAGIC.into(),
        config: params.config.clone(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        arrays,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.magic != MAGIC {
        return Err(Error::Parse(format!(
            "bad checkpoint magic {:?}",
            manifest.magic
        )));
    }
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(Error::Parse(format!(
            "unsupported storage {} / {}",
            manifest.dtype, manifest.byte_order
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<ModelParameters> {
    let manifest = read_manifest(dir)?;
    // Shapes are derived from the config; the random values are overwritten.
    let mut params = ModelParameters::random(manifest.config.clone(), 0)?;
    let mut expected = Vec::new();
    params.visit(|name, _, shape, _| expected.push((name.to_string(), shape.to_vec())));
    if expected.len() != manifest.arrays.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} arrays, config implies {}",
            manifest.arrays.len(),
            expected.len()
        )));
    }
    let mut blobs = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.arrays) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Parse(format!(
                "array {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.file.contains(['/', '\\']) {
            return Err(Error::Parse(format!(
                "array file {:?} must be a plain name",
                entry.file
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        let n: usize = shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Parse(format!(
                "{} holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                4 * n
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        blobs.push(values);
    }
    let mut it = blobs.into_iter();
    params.visit_mut(|_, _, a| {
        if let Some(v) = it.next() {
            a.copy_from_slice(&v);
        }
    });
    if !params.all_finite() {
        return Err(Error::NonFinite(
            "checkpoint contains non-finite values".into(),
        ));
    }
    Ok(params)
}

/// Rounds every parameter to `f32`, matching what a save/load round trip yields.
pub fn round_to_storage(params: &mut ModelParameters) {
    params.visit_mut(|_, _, a| a.iter_mut().for_each(|x| *x = *x as f32 as f64));
}
