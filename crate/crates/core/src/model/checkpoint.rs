//! Checkpoint container.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "csl-checkpoint", "version": 1,
//!   "stage": "pretrain" | "finetune" | "init",
//!   "step": <completed optimizer updates>,
//!   "total_steps": <planned updates for the stage>,
//!   "config_hash": "<sha256 hex of the stage config JSON>",
//!   "params": { "config": {...}, "encoder": [{"weight": {...}, "bias": [...]}, ...],
//!               "projection_hidden": ..., "projection_out": ..., "prediction": ... },
//!   "optimizer": { "kind": {...}, "step": n, "first_moment": [[...]], "second_moment": [[...]] },
//!   "rng": { "<stream name>": {"seed": s, "stream": k, "word_pos": "<u128>"} }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelParams, OptimizerState};
use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const CHECKPOINT_FORMAT: &str = "csl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub step: usize,
    pub total_steps: usize,
    pub config_hash: String,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    #[serde(default)]
    pub rng: BTreeMap<String, RngState>,
}

impl Checkpoint {
    pub fn new(stage: &str, params: ModelParams, optimizer: OptimizerState, config_hash: String) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: stage.into(),
            step: 0,
            total_steps: 0,
            config_hash,
            params,
            optimizer,
            rng: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if !ck.params.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// SHA-256 (hex) of the JSON serialisation of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
