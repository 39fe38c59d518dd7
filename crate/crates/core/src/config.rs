//! Run configuration: every tunable of a run in one JSON document.
//! Missing fields take their defaults; the resolved document is echoed next
//! to each run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BatchConfig, DataConfig};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::features::BackboneConfig;
use crate::loss::LossConfig;
use crate::proposals::{NcConfig, OracleConfig};
use crate::refine::RefinerConfig;
use crate::train::TrainSchedule;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub heldout_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream of a run derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub refiner: RefinerConfig,
    pub loss: LossConfig,
    pub batch: BatchConfig,
    pub nc: NcConfig,
    pub oracle: OracleConfig,
    pub train: TrainSchedule,
    pub eval: EvalOptions,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.refiner.validate()?;
        self.loss.validate()?;
        if self.refiner.depth != self.backbone.depth() {
            return Err(Error::Config(format!(
                "refiner depth {} does not match the backbone's {} levels",
                self.refiner.depth,
                self.backbone.depth()
            )));
        }
        if self.batch.batch_size == 0 || self.batch.per_pair_proposals == 0 {
            return Err(Error::Config("batch size and proposals per pair must be positive".into()));
        }
        self.train.validate()
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
