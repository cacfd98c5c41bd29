use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;

fn default_long_side() -> u32 {
    1024
}

/// A region-specific detector: its label vocabulary and input geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub region: String,
    pub labels: Vec<String>,
    #[serde(default = "default_long_side")]
    pub input_long_side: u32,
    #[serde(default)]
    pub default_min_confidence: f64,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.labels.is_empty() {
            return Err(PipelineError::Config("profile has no labels".into()));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                return Err(PipelineError::Config(format!("duplicate label `{l}`")));
            }
        }
        if self.input_long_side < 32 {
            return Err(PipelineError::Config(format!(
                "input_long_side {} below 32",
                self.input_long_side
            )));
        }
        if !(0.0..=1.0).contains(&self.default_min_confidence) {
            return Err(PipelineError::Config(format!(
                "default_min_confidence {} outside [0, 1]",
                self.default_min_confidence
            )));
        }
        Ok(())
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let p: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        p.validate()?;
        Ok(p)
    }

    /// Demonstration profile for savanna camera traps. Includes the
    /// `human` and `vehicle` classes that drive poaching alerts.
    pub fn savanna_demo() -> Self {
        let labels = [
            "elephant", "zebra", "giraffe", "lion", "leopard", "cheetah", "buffalo", "rhino",
            "hippo", "impala", "wildebeest", "hyena", "warthog", "kudu", "baboon", "pangolin",
            "human", "vehicle",
        ];
        Self {
            model_id: "savanna-demo-v1".into(),
            region: "sub-saharan-africa".into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            input_long_side: 1024,
            default_min_confidence: 0.0,
        }
    }
}
