//! Checkpoint directory format: `manifest.json` (config, step counter,
//! ordered parameter names with shapes) and `params.bin` (concatenated
//! little-endian 64-bit floats in manifest order).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    params: Vec<ParamInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(
    dir: &Path,
    config: &ModelConfig,
    step: u64,
    params: &ModelParameters,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        config: config.clone(),
        step,
        params: params
            .iter()
            .map(|(name, t)| ParamInfo {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut w = fs::File::create(dir.join("params.bin"))?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Optional optimizer sidecar so an interrupted run resumes exactly. Tagged
/// with the training method: a fine-tune that switches methods starts its
/// optimizer fresh.
#[derive(Debug, Serialize, Deserialize)]
struct OptimState {
    method: String,
    adam: crate::optim::Adam,
}

pub fn save_optimizer(dir: &Path, method: &str, adam: &crate::optim::Adam) -> Result<()> {
    let state = OptimState {
        method: method.to_string(),
        adam: adam.clone(),
    };
    fs::write(dir.join("optim.json"), serde_json::to_string(&state)?)?;
    Ok(())
}

/// Returns the saved optimizer if one exists and was written by the same
/// training method.
pub fn load_optimizer(dir: &Path, method: &str) -> Result<Option<crate::optim::Adam>> {
    let path = dir.join("optim.json");
    if !path.exists() {
        return Ok(None);
    }
    let state: OptimState = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok((state.method == method).then_some(state.adam))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, u64, ModelParameters)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.config.validate()?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join("params.bin"))?.read_to_end(&mut bytes)?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Config(format!(
            "corrupt checkpoint: params.bin holds {} bytes, manifest expects {}",
            bytes.len(),
            expected * 8
        )));
    }
    let mut params = ModelParameters::empty();
    let mut off = 0usize;
    for info in &manifest.params {
        let n: usize = info.shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let s = off + i * 8;
                f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap())
            })
            .collect();
        off += n * 8;
        params.insert(&info.name, Tensor::new(info.shape.clone(), data)?)?;
    }
    if params.total_len() != manifest.config.param_count() {
        return Err(Error::Config(
            "checkpoint parameters do not match its model config".into(),
        ));
    }
    Ok((manifest.config, manifest.step, params))
}
