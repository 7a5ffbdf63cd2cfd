//! Grounding samples: a tokenized command, candidate regions, and the target.

use crate::error::{Error, Result};
use crate::grounding::{iou, Box2D};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandTokens {
    pub ids: Vec<usize>,
}

impl CommandTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, max_tokens: usize) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() > max_tokens {
            return Err(Error::InvalidSample(format!(
                "command length {} outside [1, {max_tokens}]",
                self.ids.len()
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::InvalidSample(format!(
                "token id {bad} outside vocab of size {vocab_size}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub features: Vec<f64>,
}

impl RegionProposal {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        self.bbox.validate()?;
        if self.features.len() != feature_dim {
            return Err(Error::InvalidSample(format!(
                "region has {} features, expected {feature_dim}",
                self.features.len()
            )));
        }
        if let Some(f) = self.features.iter().find(|f| !f.is_finite()) {
            return Err(Error::InvalidSample(format!("non-finite feature {f}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub id: u64,
    pub regions: Vec<RegionProposal>,
    pub command: CommandTokens,
    pub target_index: usize,
    pub seed: u64,
}

impl GroundingSample {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.command.len()
    }

    /// The ground-truth box is the target region's box by construction.
    pub fn target_box(&self) -> &Box2D {
        &self.regions[self.target_index].bbox
    }

    /// IoU of every region against the ground truth; the training targets.
    pub fn iou_targets(&self) -> Result<Vec<f64>> {
        let gt = *self.target_box();
        self.regions.iter().map(|r| iou(&r.bbox, &gt)).collect()
    }

    pub fn validate(&self, vocab_size: usize, max_tokens: usize, feature_dim: usize) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::InvalidSample("sample with no regions".into()));
        }
        if self.target_index >= self.regions.len() {
            return Err(Error::InvalidSample(format!(
                "target index {} out of range for {} regions",
                self.target_index,
                self.regions.len()
            )));
        }
        self.command.validate(vocab_size, max_tokens)?;
        for r in &self.regions {
            r.validate(feature_dim)?;
        }
        Ok(())
    }
}
