//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::ObjectiveConfig;
use super::model::BackboneModel;
use super::nodes::{CategoryPriors, SizeHistogram};
use super::train::{OptimConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: BackboneModel,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub priors: CategoryPriors,
    pub size_histogram: SizeHistogram,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(model: BackboneModel, objective: ObjectiveConfig, optim: OptimConfig, priors: CategoryPriors, sizes: SizeHistogram) -> Self {
        let state = TrainState::new(model.n_params());
        Self { format_version: FORMAT_VERSION, model, objective, optim, priors, size_histogram: sizes, state }
    }

    /// Version, parameter count and optimizer state agree with the architecture.
    pub fn check(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.model.check_consistent()?;
        if self.state.momentum.len() != self.model.n_params() {
            return Err(Error::CheckpointMismatch("optimizer state size differs from parameter count".into()));
        }
        self.priors
            .validate(&self.model.vocab)
            .map_err(|e| Error::CheckpointMismatch(format!("priors: {e}")))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Reads and checks a checkpoint. Unparseable files are reported as mismatches.
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = match read_json(path) {
            Ok(c) => c,
            Err(Error::Config(msg)) => return Err(Error::CheckpointMismatch(msg)),
            Err(e) => return Err(e),
        };
        ck.check()?;
        Ok(ck)
    }
}
