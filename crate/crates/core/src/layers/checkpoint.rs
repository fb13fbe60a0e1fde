use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::param::Parameter;

use super::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "dnsd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing model snapshot: configuration plus every named
/// parameter as shape and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub parameters: Vec<Parameter>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            parameters: model.params().iter().cloned().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::json("checkpoint", e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ck.version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        Ok(ck)
    }

    /// Rebuild the model; parameter names and shapes must match the
    /// configuration exactly.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.config)?;
        let store = model.params();
        if store.len() != self.parameters.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, configuration needs {}",
                self.parameters.len(),
                store.len()
            )));
        }
        for (have, want) in self.parameters.iter().zip(store.iter()) {
            if have.name != want.name {
                return Err(Error::Format(format!(
                    "parameter {:?} where {:?} was expected",
                    have.name, want.name
                )));
            }
        }
        let values: Vec<_> = self.parameters.into_iter().map(|p| p.value).collect();
        model.params_mut().restore(&values)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text)
    }
}
