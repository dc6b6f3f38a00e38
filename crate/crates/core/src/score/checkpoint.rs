//! Toy network checkpoints.
//!
//! A checkpoint is a UTF-8 JSON document:
//!
//! ```json
//! {
//!   "format": "lrdiff-toy-checkpoint",
//!   "version": 1,
//!   "config": { "height": 12, "width": 12, "channels": 3, "hidden": 16, ... },
//!   "vocabulary": ["red", "green", ...],
//!   "tensors": { "conv1.weight": [...], ... }
//! }
//! ```
//!
//! Tensor layouts are documented on [`ToyNetwork`]; every name listed by
//! [`ToyNetwork::tensor_names`] must be present with the exact length the
//! config implies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::network::{NetworkConfig, ToyNetwork, TENSOR_NAMES};
use crate::score::tokens::Vocabulary;
use crate::score::train::ToyScoreNet;

pub const CHECKPOINT_FORMAT: &str = "lrdiff-toy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: NetworkConfig,
    vocabulary: Vec<String>,
    tensors: BTreeMap<String, Vec<f64>>,
}

pub fn save_checkpoint(est: &ToyScoreNet, path: &Path) -> Result<()> {
    let tensors = TENSOR_NAMES
        .iter()
        .zip(est.net.tensors())
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: est.net.config,
        vocabulary: est.vocab.names().to_vec(),
        tensors,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyScoreNet> {
    let text = std::fs::read_to_string(path)?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unexpected format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", file.version)));
    }
    file.config.validate()?;
    let mut net = ToyNetwork::zeros(file.config);
    let mut tensors = file.tensors;
    for (name, slot) in TENSOR_NAMES.iter().zip(net.tensors_mut()) {
        let values = tensors
            .remove(*name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        if values.len() != slot.len() {
            return Err(bad(format!(
                "tensor `{name}` has {} values, expected {}",
                values.len(),
                slot.len()
            )));
        }
        *slot = values;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unknown tensor `{extra}`")));
    }
    ToyScoreNet::new(net, Vocabulary::new(file.vocabulary)?)
}
