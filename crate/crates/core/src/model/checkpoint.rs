//! Checkpoint directories: `index.json` plus one raw little-endian f64 file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    groups: Vec<GroupEntry>,
    state_hash: String,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    frozen: bool,
    hash: String,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

const FORMAT: u32 = 1;

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir)?;
    let mut groups: Vec<GroupEntry> = model
        .group_names()
        .into_iter()
        .map(|g| GroupEntry { frozen: model.is_frozen(&g), hash: model.group_hash(&g), name: g, params: Vec::new() })
        .collect();
    let mut result = Ok(());
    model.visit(&mut |g, n, p| {
        if result.is_err() {
            return;
        }
        let file = format!("params/{g}.{n}.f64");
        let mut bytes = Vec::with_capacity(p.len() * 8);
        for v in &p.value {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        result = fs::write(dir.join(&file), bytes).map_err(Error::from);
        let entry = groups.iter_mut().find(|e| e.name == g).expect("known group");
        entry.params.push(ParamEntry { name: n.to_string(), shape: p.shape(), file });
    });
    result?;
    let index = Index { format: FORMAT, config: model.config.clone(), meta: meta.clone(), groups, state_hash: model.state_hash() };
    crate::lab::store::write_json(&dir.join("index.json"), &index)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::Missing(format!("no checkpoint at {}", dir.display())));
    }
    let index: Index = crate::lab::store::read_json(&index_path)?;
    if index.format != FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {}", index.format)));
    }
    let mut model = Model::new(index.config, 0)?;
    let mut values: BTreeMap<(String, String), Array2<f64>> = BTreeMap::new();
    for g in &index.groups {
        for p in &g.params {
            let bytes = fs::read(dir.join(&p.file))?;
            let [r, c] = p.shape;
            if bytes.len() != r * c * 8 {
                return Err(Error::Config(format!("{} holds {} bytes, expected {}", p.file, bytes.len(), r * c * 8)));
            }
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            values.insert((g.name.clone(), p.name.clone()), Array2::from_shape_vec((r, c), data).expect("shape checked"));
        }
    }
    let mut missing = None;
    model.visit_mut(&mut |g, n, p| match values.remove(&(g.to_string(), n.to_string())) {
        Some(v) if v.dim() == p.value.dim() => p.value = v,
        _ => missing = Some(format!("{g}/{n}")),
    });
    if let Some(name) = missing {
        return Err(Error::Config(format!("checkpoint lacks parameter {name} or its shape differs")));
    }
    if let Some(((g, n), _)) = values.into_iter().next() {
        return Err(Error::Config(format!("checkpoint has unexpected parameter {g}/{n}")));
    }
    for g in &index.groups {
        model.set_frozen(&g.name, g.frozen)?;
    }
    if model.state_hash() != index.state_hash {
        return Err(Error::Config("checkpoint contents do not match their recorded hash".into()));
    }
    Ok((model, index.meta))
}
