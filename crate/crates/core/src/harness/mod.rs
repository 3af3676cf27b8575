//! Training and evaluation on synthetic tasks.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod histogram;
pub mod metrics;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use data::{generate_synthetic, Dataset, Example, SyntheticData, TaskConfig};
pub use histogram::{export_mask_histogram, MaskHistogram};
pub use metrics::MetricsRow;
pub use train::{evaluate, train, train_on, EvalResult, TrainConfig, TrainOutcome, TrainRun};

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        let pairs = [
            ("task.seq_len", self.task.seq_len, self.model.seq_len),
            ("task.vocab", self.task.vocab, self.model.vocab),
            ("task.classes", self.task.classes, self.model.classes),
        ];
        for (field, task, model) in pairs {
            if task != model {
                return Err(Error::config(
                    field,
                    format!("{task} disagrees with the model setting {model}"),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
