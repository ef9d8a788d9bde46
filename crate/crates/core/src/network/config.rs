use crate::error::{Error, Result};
use crate::tensor::Padding;
use serde::{Deserialize, Serialize};

/// Number of scales produced by the feature extractor (/2 … /64).
pub const EXTRACTOR_SCALES: usize = 6;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Extractor widths at /2, /4, /8, /16, /32, /64.
    pub extractor_widths: [usize; EXTRACTOR_SCALES],
    /// Width of every Fourier block and W-Conv.
    pub block_width: usize,
    /// Intermediate width of the two output branches.
    pub branch_width: usize,
    pub alpha_global: f64,
    pub prelu_init: f64,
    pub skip_init: f64,
    /// How many of the last decoder outputs feed each branch.
    pub semantic_fusion: usize,
    pub depth_fusion: usize,
    pub padding: Padding,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Initial bias of the depth output, before the final ReLU.
    pub depth_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 512,
            num_classes: 7,
            extractor_widths: [16, 32, 64, 64, 64, 64],
            block_width: 64,
            branch_width: 32,
            alpha_global: 0.5,
            prelu_init: 0.25,
            skip_init: 1.0,
            semantic_fusion: 5,
            depth_fusion: 3,
            padding: Padding::CircularHReplicateV,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            depth_bias_init: 1.0,
        }
    }
}

fn bad(field: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        detail: detail.into(),
    }
}

impl ModelConfig {
    /// Same architecture at a different input extent.
    pub fn with_extent(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width != 2 * self.height {
            return Err(bad("width", format!("must equal 2 x height ({}), got {}", 2 * self.height, self.width)));
        }
        if !self.height.is_power_of_two() || self.height % 64 != 0 {
            return Err(bad("height", format!("must be a power of two divisible by 64, got {}", self.height)));
        }
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least two classes"));
        }
        if self.block_width < 4 || self.block_width % 4 != 0 {
            return Err(bad("block_width", format!("must be a positive multiple of 4, got {}", self.block_width)));
        }
        for (i, &w) in self.extractor_widths.iter().enumerate() {
            if w == 0 {
                return Err(bad("extractor_widths", format!("entry {i} is zero")));
            }
        }
        for (i, &w) in self.extractor_widths[2..].iter().enumerate() {
            if w != self.block_width {
                return Err(bad(
                    "extractor_widths",
                    format!("width at /{} is {w} but encoder outputs are added to it with width {}", 8 << i, self.block_width),
                ));
            }
        }
        if self.branch_width == 0 {
            return Err(bad("branch_width", "must be positive"));
        }
        if !(self.alpha_global > 0.0 && self.alpha_global < 1.0) {
            return Err(bad("alpha_global", format!("must lie in (0, 1), got {}", self.alpha_global)));
        }
        if !(1..=6).contains(&self.semantic_fusion) {
            return Err(bad("semantic_fusion", "must be between 1 and 6"));
        }
        if !(1..=6).contains(&self.depth_fusion) {
            return Err(bad("depth_fusion", "must be between 1 and 6"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(bad("bn_momentum", "must lie in (0, 1]"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(bad("bn_eps", "must be positive"));
        }
        Ok(())
    }
}
