//! Checkpoint directories: a JSON manifest plus one tensor blob per
//! parameter and per OIM buffer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::OimState;
use crate::reid::{ReIDConfig, ReIDModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const PARAM_DIR: &str = "params";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OimRecord {
    lut: String,
    queue: Option<String>,
    capacity: usize,
    momentum: f64,
    temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    scheme: String,
    model: ReIDConfig,
    /// Resolved configuration of the run that produced the checkpoint.
    config: serde_json::Value,
    params: Vec<ParamRecord>,
    oim: Vec<OimRecord>,
}

/// A model with its OIM states and the configuration echo of its run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ReIDModel,
    pub oim: Vec<OimState>,
    pub config: serde_json::Value,
}

fn file_name(name: &str) -> String {
    name.replace(|c: char| !c.is_ascii_alphanumeric() && c != '_', "-")
}

pub fn save_checkpoint(dir: &Path, model: &ReIDModel, oim: &[OimState], config: &serde_json::Value) -> Result<()> {
    let pdir = dir.join(PARAM_DIR);
    std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut params = Vec::new();
    for (_, name, t) in model.store().iter() {
        let file = format!("{PARAM_DIR}/{}.bin", file_name(name));
        t.save(&dir.join(&file))?;
        params.push(ParamRecord {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let mut states = Vec::new();
    for (i, s) in oim.iter().enumerate() {
        let lut = format!("{PARAM_DIR}/oim{i}_lut.bin");
        s.lut().save(&dir.join(&lut))?;
        let queue = match s.queue_tensor() {
            Some(q) => {
                let f = format!("{PARAM_DIR}/oim{i}_queue.bin");
                q.save(&dir.join(&f))?;
                Some(f)
            }
            None => None,
        };
        states.push(OimRecord {
            lut,
            queue,
            capacity: s.capacity(),
            momentum: s.momentum(),
            temperature: s.temperature(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        scheme: model.config().scheme.to_string(),
        model: model.config().clone(),
        config: config.clone(),
        params,
        oim: states,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Rebuilds the model from the stored configuration and loads every
/// parameter by name.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != CHECKPOINT_FORMAT {
        return Err(Error::format(&path, format!("unsupported format version {}", m.format_version)));
    }
    if m.scheme != m.model.scheme.as_str() {
        return Err(Error::format(&path, "scheme disagrees with the model section"));
    }
    let mut model = ReIDModel::new(m.model.clone(), 0)?;
    if m.params.len() != model.store().len() {
        return Err(Error::format(
            &path,
            format!("{} parameters stored, model has {}", m.params.len(), model.store().len()),
        ));
    }
    for rec in &m.params {
        let id = model
            .store()
            .find(&rec.name)
            .ok_or_else(|| Error::format(&path, format!("unknown parameter {}", rec.name)))?;
        let t = Tensor::load(&dir.join(&rec.file))?;
        if t.shape() != model.store().get(id).shape() || t.shape() != rec.shape.as_slice() {
            return Err(Error::format(
                dir.join(&rec.file),
                format!("shape {:?} does not fit parameter {}", t.shape(), rec.name),
            ));
        }
        *model.store_mut().get_mut(id) = t;
    }
    let mut oim = Vec::with_capacity(m.oim.len());
    for rec in &m.oim {
        let lut = Tensor::load(&dir.join(&rec.lut))?;
        let queue = match &rec.queue {
            Some(f) => {
                let q = Tensor::load(&dir.join(f))?;
                (0..q.rows()).map(|r| q.row(r).to_vec()).collect()
            }
            None => Vec::new(),
        };
        oim.push(OimState::from_parts(lut, queue, rec.capacity, rec.momentum, rec.temperature)?);
    }
    Ok(Checkpoint {
        model,
        oim,
        config: m.config,
    })
}
