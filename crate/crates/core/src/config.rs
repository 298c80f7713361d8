//! Architectural hyperparameters and their validation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenizerPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    None,
}

/// Convolution stem used by the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerVariant {
    /// (7,1) stride (2,1) then (1,7) stride (1,2), both depthwise-separable.
    Factorized7,
    /// One dense 7x7 convolution at stride 2.
    Full7,
    /// One dense 5x5 convolution at stride 2.
    Full5,
}

/// Complete model description. Field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_hw: [usize; 2],
    pub in_channels: usize,
    pub d0: usize,
    pub stage_dims: [usize; 2],
    pub depths: [usize; 2],
    /// Patch tokens per attention block; 0 means global attention.
    pub partition_size: usize,
    /// Per-stage block sizes overriding `partition_size`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_partition: Option<[usize; 2]>,
    /// Per-head width; heads = stage_dim / head_dim.
    pub head_dim: usize,
    pub ffn_kernel: usize,
    pub merge_k: usize,
    pub num_classes: usize,
    pub use_partition: bool,
    pub append_cls: bool,
    pub use_merging: bool,
    pub use_maxpool_tok: bool,
    pub use_bn_tok: bool,
    pub activation: Activation,
    pub tokenizer_variant: TokenizerVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_hw: [56, 56],
            in_channels: 3,
            d0: 32,
            stage_dims: [224, 256],
            depths: [8, 8],
            partition_size: 7,
            stage_partition: None,
            head_dim: 32,
            ffn_kernel: 3,
            merge_k: 4,
            num_classes: 10,
            use_partition: true,
            append_cls: true,
            use_merging: true,
            use_maxpool_tok: true,
            use_bn_tok: true,
            activation: Activation::Gelu,
            tokenizer_variant: TokenizerVariant::Factorized7,
        }
    }
}

/// Token grid of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub grid: (usize, usize),
    pub dim: usize,
}

impl StageGeometry {
    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Spatial bookkeeping derived from a valid config.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub tokenizer: TokenizerPlan,
    pub stages: [StageGeometry; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn integer_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl ModelConfig {
    /// The micro configuration used for end-to-end gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            input_hw: [8, 8],
            d0: 8,
            stage_dims: [8, 8],
            depths: [1, 1],
            partition_size: 2,
            head_dim: 4,
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical text form; stable field order, used inside checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn heads(&self, stage: usize) -> usize {
        self.stage_dims[stage] / self.head_dim
    }

    /// Block size in effect for stage index 0 or 1, `None` for global attention.
    pub fn partition(&self, stage: usize) -> Option<usize> {
        let m = self.stage_partition.map_or(self.partition_size, |p| p[stage]);
        (self.use_partition && m > 0).then_some(m)
    }

    /// Every violated invariant, not just the first.
    pub fn validate(&self) -> Vec<Violation> {
        match self.geometry_inner() {
            Ok(_) => Vec::new(),
            Err(v) => v,
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        self.geometry_inner().map_err(Error::InvalidConfig)
    }

    fn geometry_inner(&self) -> std::result::Result<Geometry, Vec<Violation>> {
        let mut v = Vec::new();
        let mut bad = |msg: String| v.push(Violation(msg));
        let [h, w] = self.input_hw;
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            bad(format!("input_hw {h}x{w} must be positive and even"));
        }
        if self.in_channels == 0 {
            bad("in_channels must be positive".into());
        }
        if self.d0 < 2 || !self.d0.is_multiple_of(2) {
            bad(format!("d0 {} must be an even number >= 2", self.d0));
        }
        if self.head_dim == 0 {
            bad("head_dim must be positive".into());
        }
        for (i, &d) in self.stage_dims.iter().enumerate() {
            if d == 0 {
                bad(format!("stage_dims[{i}] must be positive"));
            } else if self.head_dim > 0 && d % self.head_dim != 0 {
                bad(format!("stage_dims[{i}] {d} not divisible by head_dim {}", self.head_dim));
            }
        }
        if self.stage_dims[1] < self.stage_dims[0] {
            bad(format!(
                "stage_dims {:?} must be nondecreasing",
                self.stage_dims
            ));
        }
        if self.num_classes == 0 {
            bad("num_classes must be positive".into());
        }
        if self.ffn_kernel == 0 || self.ffn_kernel.is_multiple_of(2) {
            bad(format!("ffn_kernel {} must be odd", self.ffn_kernel));
        }

        let tokenizer = if h > 0 && w > 0 && self.in_channels > 0 && self.d0 >= 2 {
            match TokenizerPlan::new(self) {
                Ok(plan) => Some(plan),
                Err(msgs) => {
                    for m in msgs {
                        bad(m);
                    }
                    None
                }
            }
        } else {
            None
        };

        let mut stages = None;
        if let Some(plan) = &tokenizer {
            let s2 = StageGeometry {
                grid: plan.grid,
                dim: self.stage_dims[0],
            };
            self.check_partition(0, s2.patches(), &mut bad);
            let grid3 = if self.use_merging {
                self.merged_grid(s2.grid, &mut bad)
            } else {
                Some(s2.grid)
            };
            if let Some(grid3) = grid3 {
                let s3 = StageGeometry {
                    grid: grid3,
                    dim: self.stage_dims[1],
                };
                self.check_partition(1, s3.patches(), &mut bad);
                stages = Some([s2, s3]);
            }
        }
        match (v.is_empty(), tokenizer, stages) {
            (true, Some(tokenizer), Some(stages)) => Ok(Geometry { tokenizer, stages }),
            _ => Err(v),
        }
    }

    fn check_partition(&self, stage: usize, n: usize, bad: &mut impl FnMut(String)) {
        if let Some(m) = self.partition(stage) {
            if n > m && !n.is_multiple_of(m) {
                bad(format!(
                    "stage {}: {n} not divisible by {m} (patch count vs partition_size)",
                    stage + 2
                ));
            }
        }
    }

    fn merged_grid(
        &self,
        grid: (usize, usize),
        bad: &mut impl FnMut(String),
    ) -> Option<(usize, usize)> {
        let n = grid.0 * grid.1;
        let k = self.merge_k;
        if k == 0 {
            bad("merge_k must be positive".into());
            return None;
        }
        let mut ok = true;
        if !n.is_multiple_of(k) {
            bad(format!("merge: {n} not divisible by {k} (patch count vs merge_k)"));
            ok = false;
        }
        match integer_sqrt(k) {
            Some(s) if grid.0.is_multiple_of(s) && grid.1.is_multiple_of(s) => {
                if ok {
                    return Some((grid.0 / s, grid.1 / s));
                }
            }
            _ => bad(format!(
                "merge: grid {}x{} cannot shrink by merge_k {k} (needs k = s*s with s dividing rows and cols)",
                grid.0, grid.1
            )),
        }
        None
    }
}
