//! Checkpoint directories.
//!
//! ```text
//! <dir>/meta.json               format version, config echo, iteration, RNG state
//! <dir>/networks.safetensors    parameters named `<group>/<parameter>`
//! <dir>/optimizer.safetensors   Adam moments and step counts
//! ```
//!
//! A checkpoint is written into a sibling temporary directory and renamed
//! into place, so readers never observe a partial checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::datasets::BatchSampler;
use crate::error::{Error, Result};
use crate::networks::{NetworkBundle, GROUPS};
use crate::optim::AdamConfig;
use crate::trainer::TrainingConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const NETWORKS_FILE: &str = "networks.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainingConfig,
    pub iteration: u64,
    pub attribute_names: Vec<String>,
    pub optimizer: AdamConfig,
    pub noise_rng: ChaCha8Rng,
    pub sampler: BatchSampler,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub parameters: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.tmp"))
}

pub fn save(
    dir: &Path,
    meta: &CheckpointMeta,
    nets: &NetworkBundle,
    optimizer: &[(String, Tensor)],
) -> Result<()> {
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let meta_path = tmp.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Tensor::write_safetensors(&nets.named_parameters(&GROUPS), tmp.join(NETWORKS_FILE))?;
    if !optimizer.is_empty() {
        Tensor::write_safetensors(optimizer, tmp.join(OPTIMIZER_FILE))?;
    }

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} is missing", path.display())));
    }
    Ok(Tensor::read_safetensors(path)?.into_iter().collect())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let meta_path = dir.join(META_FILE);
    let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

pub fn load(dir: &Path) -> Result<LoadedCheckpoint> {
    let meta = load_meta(dir)?;
    let parameters = read_tensors(&dir.join(NETWORKS_FILE))?;
    let opt_path = dir.join(OPTIMIZER_FILE);
    let optimizer = if opt_path.exists() {
        read_tensors(&opt_path)?
    } else {
        BTreeMap::new()
    };
    Ok(LoadedCheckpoint {
        meta,
        parameters,
        optimizer,
    })
}

/// Rebuilds the networks stored in a checkpoint, for inference.
pub fn load_networks(dir: &Path) -> Result<(CheckpointMeta, NetworkBundle)> {
    let loaded = load(dir)?;
    let nets = NetworkBundle::new(&loaded.meta.config.net, loaded.meta.config.seed)?;
    nets.load_parameters(&GROUPS, &loaded.parameters)?;
    Ok((loaded.meta, nets))
}
