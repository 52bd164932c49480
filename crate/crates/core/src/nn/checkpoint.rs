//! Parameter checkpoints: a `model.json` manifest plus `params.f64`, a flat
//! little-endian `f64` array in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::MlpSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.f64";
const FORMAT: &str = "cs3d-params-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    #[serde(flatten)]
    pub spec: MlpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    #[serde(default)]
    pub tags: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub layers: Vec<LayerRecord>,
    pub params: Vec<ParamRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub tags: BTreeMap<String, serde_json::Value>,
    pub layers: Vec<LayerRecord>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            tags: BTreeMap::new(),
            layers: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn tag(mut self, key: &str, value: impl Serialize) -> Self {
        self.tags
            .insert(key.to_string(), serde_json::to_value(value).expect("tag serializes"));
        self
    }

    pub fn get_tag<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .tags
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint has no '{key}' tag")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("checkpoint tag '{key}': {e}")))
    }

    /// Appends parameters with a name prefix.
    pub fn add_params(&mut self, prefix: &str, named: Vec<(String, Tensor)>) {
        self.params
            .extend(named.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
    }

    /// Parameters whose name starts with `prefix`, with the prefix removed.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: FORMAT.to_string(),
            kind: self.kind.clone(),
            tags: self.tags.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamRecord {
                    name: n.clone(),
                    shape: [t.rows, t.cols],
                })
                .collect(),
        };
        let mpath = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let mut bytes = Vec::with_capacity(8 * self.params.iter().map(|(_, t)| t.len()).sum::<usize>());
        for (_, t) in &self.params {
            for x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let ppath = dir.join(PARAMS_FILE);
        fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::format(&mpath, format!("unknown format '{}'", manifest.format)));
        }
        let ppath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let expected: usize = manifest.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
        if bytes.len() != 8 * expected {
            return Err(Error::format(
                &ppath,
                format!("expected {} bytes for {expected} values, found {}", 8 * expected, bytes.len()),
            ));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let params = manifest
            .params
            .iter()
            .map(|p| {
                let n = p.shape[0] * p.shape[1];
                let data: Vec<f64> = values.by_ref().take(n).collect();
                (p.name.clone(), Tensor::from_vec(p.shape[0], p.shape[1], data))
            })
            .collect();
        Ok(Self {
            kind: manifest.kind,
            tags: manifest.tags,
            layers: manifest.layers,
            params,
        })
    }
}
