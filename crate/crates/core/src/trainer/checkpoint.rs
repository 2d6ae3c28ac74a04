use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::annotator::{BugType, CallVocabulary};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::tokenizer::SubtokenModel;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON snapshot: configuration, subtoken model, parameters,
/// optimizer moments, step counter and random stream positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub bug_type: BugType,
    pub subtokens: SubtokenModel,
    #[serde(default)]
    pub call_vocabulary: Option<CallVocabulary>,
    pub state: TrainState,
    /// Validation metrics at the time of the snapshot.
    #[serde(default)]
    pub validation: Option<MetricsReport>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(header.version));
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
