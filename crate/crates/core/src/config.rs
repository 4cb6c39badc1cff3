//! Run configuration: one strict JSON document covering both stages, the
//! codec block size and the study/oracle settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FaarError, Result};
use crate::micronet::Stage2Config;
use crate::nvfp4::DEFAULT_BLOCK_SIZE;
use crate::oracle::{StudyConfig, DEFAULT_MAX_N};
use crate::stage1::Stage1Config;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    pub n_samples: usize,
    pub max_n: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            n_samples: 100,
            max_n: DEFAULT_MAX_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub block_size: usize,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub study: StudySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            block_size: DEFAULT_BLOCK_SIZE,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            study: StudySettings::default(),
        }
    }
}

impl RunConfig {
    /// Strict parse: unknown keys are errors.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| FaarError::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FaarError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Propagates run-level settings into the stage configs and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.block_size == 0 {
            return Err(FaarError::Config("block_size must be ≥ 1".into()));
        }
        self.stage1.block_size = self.block_size;
        self.stage2.block_size = self.block_size;
        self.stage2.seed = self.seed;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.study.n_samples == 0 {
            return Err(FaarError::Config("study.n_samples must be ≥ 1".into()));
        }
        Ok(self)
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            n_samples: self.study.n_samples,
            seed: self.seed,
            block_size: self.block_size,
            max_n: self.study.max_n,
        }
    }
}
