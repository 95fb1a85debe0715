//! Encoder hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    /// Side length of the (square) global input.
    pub image_size: usize,
    /// Side length of one stem patch in pixels.
    pub stem_patch: usize,
    pub stages: usize,
    /// Embedding dim per stage.
    pub stage_dims: Vec<usize>,
    /// VSS blocks per stage.
    pub depths: Vec<usize>,
    /// SSM state size N.
    pub state_dim: usize,
    /// 1 (forward), 2 (+reverse) or 4 (+column-major pair).
    pub scan_directions: usize,
    pub mlp_ratio: f64,
    /// Attention map from the w-weighted form (true) or plain QK^T (false).
    pub weighted_attention_map: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            stem_patch: 4,
            stages: 2,
            stage_dims: vec![32, 64],
            depths: vec![2, 2],
            state_dim: 8,
            scan_directions: 2,
            mlp_ratio: 4.0,
            weighted_attention_map: true,
        }
    }
}

impl EncoderConfig {
    /// Tiny configuration used by gradient-check suites.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 16,
            stem_patch: 4,
            stages: 2,
            stage_dims: vec![8, 16],
            depths: vec![1, 1],
            state_dim: 4,
            scan_directions: 2,
            mlp_ratio: 2.0,
            weighted_attention_map: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("stages must be >= 1"));
        }
        if self.stage_dims.len() != self.stages || self.depths.len() != self.stages {
            return Err(Error::config(format!(
                "stage_dims/depths lengths {}/{} must equal stages {}",
                self.stage_dims.len(),
                self.depths.len(),
                self.stages
            )));
        }
        if self.stem_patch == 0 || self.image_size % self.stem_patch != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by stem_patch {}",
                self.image_size, self.stem_patch
            )));
        }
        let total_down = self.total_downsample();
        if self.image_size % total_down != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by total downsampling {}",
                self.image_size, total_down
            )));
        }
        if self.stage_dims.iter().any(|&d| d < self.state_dim) {
            return Err(Error::config("every stage dim must be >= state_dim"));
        }
        if !matches!(self.scan_directions, 1 | 2 | 4) {
            return Err(Error::config("scan_directions must be 1, 2 or 4"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        // each 2x2 merge needs an even grid
        let mut side = self.image_size / self.stem_patch;
        for _ in 1..self.stages {
            if side % 2 != 0 {
                return Err(Error::config("stem grid not divisible by stage merges"));
            }
            side /= 2;
        }
        Ok(())
    }

    /// Pixels per final-stage token side: stem_patch * 2^(stages-1).
    pub fn total_downsample(&self) -> usize {
        self.stem_patch << (self.stages - 1)
    }

    /// Stem-grid side for a given input side length.
    pub fn stem_grid_side(&self, image_side: usize) -> usize {
        image_side / self.stem_patch
    }

    pub fn final_grid_side(&self, image_side: usize) -> usize {
        image_side / self.total_downsample()
    }

    pub fn last_dim(&self) -> usize {
        *self.stage_dims.last().expect("at least one stage")
    }

    /// Width of the summary token: mean and std halves over the last stage.
    pub fn cls_dim(&self) -> usize {
        2 * self.last_dim()
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round() as usize
    }

    /// Check that an input of the given side length is compatible.
    pub fn validate_input_side(&self, side: usize) -> Result<()> {
        if side == 0 || side % self.total_downsample() != 0 {
            return Err(Error::shape(format!(
                "input side {} not divisible by total downsampling {}",
                side,
                self.total_downsample()
            )));
        }
        Ok(())
    }
}
