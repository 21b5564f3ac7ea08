//! Run reports: the JSON record a training run leaves behind — config echo,
//! per-epoch statistics, final accuracy, timing, and the seed. Reports are
//! deterministic except for the wall-clock field, and comparisons exclude it.

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{DmkdError, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_task_loss: f64,
    pub train_accuracy: f64,
    pub test_task_loss: f64,
    pub test_accuracy: f64,
    /// Per-image mean of the reconstruction loss; 0 for purely supervised runs.
    pub mean_distill_loss: f64,
    pub mean_mask_ratio_s: f64,
    pub mean_mask_ratio_c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// `"train-teacher"`, `"supervised"`, or `"distill"`.
    pub mode: String,
    pub seed: u64,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: f64,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| DmkdError::CheckpointInvalid(format!("report {}: {e}", path.display())))
    }

    /// Structural equality with the wall-clock field blanked on both sides.
    pub fn equals_ignoring_wall_clock(&self, other: &RunReport) -> bool {
        let normalize = |r: &RunReport| {
            let mut v = serde_json::to_value(r).expect("reports hold only finite values");
            v["wall_clock_seconds"] = 0.into();
            v
        };
        normalize(self) == normalize(other)
    }

    /// The structural invariants every finished run must satisfy.
    pub fn validate(&self, configured_epochs: usize) -> Result<()> {
        if self.epochs.len() != configured_epochs {
            return Err(DmkdError::ConfigInvalid(format!(
                "report holds {} epochs, configured {}",
                self.epochs.len(),
                configured_epochs
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.final_test_accuracy)
            || self.epochs.iter().any(|e| !unit(e.train_accuracy) || !unit(e.test_accuracy))
        {
            return Err(DmkdError::ConfigInvalid("accuracy outside [0, 1]".to_string()));
        }
        Ok(())
    }
}
