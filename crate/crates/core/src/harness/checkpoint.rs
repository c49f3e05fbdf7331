//! On-disk checkpoint: `manifest.json` describing every tensor, plus
//! `model.bin` and `offsets.bin` in the tensor wire format.
//!
//! Values are stored as 32-bit floats, so a reloaded model equals the saved
//! one only up to `f32` rounding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dualnet::{Alpha, Architecture, Channels, ModelParams, Offset};
use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub alpha: f64,
    pub channels: Channels,
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub offsets: Vec<TensorEntry>,
}

pub fn save(dir: &Path, model: &ModelParams, offsets: &[Offset], alpha: Alpha) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        alpha: alpha.value(),
        channels: model.channels,
        architecture: model.architecture(),
        tensors: model
            .tensor_names()
            .into_iter()
            .zip(model.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        offsets: offsets
            .iter()
            .enumerate()
            .map(|(i, o)| TensorEntry {
                name: format!("offset.{i}"),
                shape: o.shape().to_vec(),
            })
            .collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut w = BufWriter::new(File::create(dir.join("model.bin"))?);
    write_tensors(&mut w, model.tensors().into_iter())?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("offsets.bin"))?);
    write_tensors(&mut w, offsets.iter().map(Offset::tensor))?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub offsets: Vec<Offset>,
    pub alpha: Alpha,
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let tensors = read_tensors(&mut BufReader::new(File::open(dir.join("model.bin"))?))?;
    let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
    let declared: Vec<&[usize]> = manifest
        .tensors
        .iter()
        .map(|e| e.shape.as_slice())
        .collect();
    if shapes != declared {
        return Err(Error::Format(
            "model.bin does not match manifest.json".into(),
        ));
    }
    let model = ModelParams::from_tensors(&manifest.architecture, tensors)?;
    let offsets = read_tensors(&mut BufReader::new(File::open(dir.join("offsets.bin"))?))?;
    if offsets.len() != manifest.offsets.len() {
        return Err(Error::Format(
            "offsets.bin does not match manifest.json".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        offsets: offsets
            .into_iter()
            .map(Offset::new)
            .collect::<Result<_>>()?,
        alpha: Alpha::new(manifest.alpha)
            .map_err(|_| Error::Format(format!("alpha {} in manifest", manifest.alpha)))?,
    })
}
