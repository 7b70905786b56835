//! Versioned JSON container for parameter tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GeoError, Result};
use crate::params::{ParamStore, TensorRecord};

pub const CHECKPOINT_FORMAT: &str = "geowalk-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// What the tensors parameterize, e.g. `encoder` or `model`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta,
            tensors: store.to_records(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads a checkpoint and checks its format, version and kind.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| GeoError::from(e).context(path.display().to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(GeoError::Validation(format!(
                "{}: not a checkpoint (format `{}`)",
                path.display(),
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(GeoError::Version {
                found: ck.version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        if ck.kind != kind {
            return Err(GeoError::Validation(format!(
                "{}: holds a `{}` checkpoint, expected `{kind}`",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }

    pub fn store(&self) -> Result<ParamStore> {
        ParamStore::from_records(self.tensors.clone())
    }
}
