//! Versioned model checkpoints: the full parameter and buffer state plus
//! the config that produced it, serialized as one JSON document.
//!
//! f64 values round-trip bit-exactly through the JSON encoder, so a
//! save/load cycle restores the model to the identical state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::TensorState;

/// Format tag checked on load.
pub const CHECKPOINT_VERSION: &str = "man-ckpt-v1";

/// Conventional checkpoint filename inside a run directory.
pub const CHECKPOINT_FILENAME: &str = "best.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    /// Echo of the config that produced this model, so the artifact is
    /// self-describing.
    pub config: Config,
    /// Cross-validation fold the model was trained on (0 outside CV).
    #[serde(default)]
    pub fold: usize,
    /// Iteration whose parameters these are.
    pub iteration: usize,
    /// Mean dev accuracy at that iteration.
    pub dev_accuracy: f64,
    pub state: BTreeMap<String, TensorState>,
}

impl Checkpoint {
    pub fn new(
        config: Config,
        fold: usize,
        iteration: usize,
        dev_accuracy: f64,
        state: BTreeMap<String, TensorState>,
    ) -> Checkpoint {
        Checkpoint { version: CHECKPOINT_VERSION.to_string(), config, fold, iteration, dev_accuracy, state }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| Error::Checkpoint(format!("cannot parse {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?} (expected {CHECKPOINT_VERSION:?})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
