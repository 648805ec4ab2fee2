use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    UNet,
    UNetPlus,
    ResUNetPP,
    DenseUNet,
    BridgedUNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::UNet,
        Variant::ResUNetPP,
        Variant::UNetPlus,
        Variant::DenseUNet,
        Variant::BridgedUNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::UNet => "UNet",
            Variant::UNetPlus => "UNetPlus",
            Variant::ResUNetPP => "ResUNetPP",
            Variant::DenseUNet => "DenseUNet",
            Variant::BridgedUNet => "BridgedUNet",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    fn uses_attention_blocks(self) -> bool {
        matches!(self, Variant::UNetPlus | Variant::ResUNetPP)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Number of encoder levels below the bridge.
    pub depth: usize,
    /// Channels at the first level; doubled per level.
    pub base_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    pub growth_rate: usize,
    pub layers_per_dense_block: usize,
    pub se_reduction: usize,
    pub aspp_rates: Vec<usize>,
    /// Expected foreground fraction; the output bias starts at its log-odds.
    pub output_prior: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            variant: Variant::UNet,
            depth: 4,
            base_channels: 16,
            input_size: 256,
            growth_rate: 4,
            layers_per_dense_block: 3,
            se_reduction: 8,
            aspp_rates: vec![1, 6, 12, 18],
            output_prior: 0.1,
        }
    }
}

impl ModelSpec {
    /// Depth 2, base 8: the configuration used for CPU-scale tests.
    pub fn tiny(variant: Variant, input_size: usize) -> Self {
        Self {
            variant,
            depth: 2,
            base_channels: 8,
            input_size,
            ..Self::default()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.depth < 2 {
            return fail(format!("depth must be ≥ 2, got {}", self.depth));
        }
        if self.depth > 16 {
            return fail(format!("depth {} is unreasonably large", self.depth));
        }
        if self.base_channels < 1 {
            return fail("base_channels must be ≥ 1".into());
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of 2^depth = {stride}",
                self.input_size
            ));
        }
        if !(self.output_prior > 0.0 && self.output_prior < 1.0) {
            return fail(format!("output_prior {} outside (0, 1)", self.output_prior));
        }
        if self.variant.uses_attention_blocks() {
            if self.se_reduction == 0 || self.base_channels / self.se_reduction < 1 {
                return fail(format!(
                    "se_reduction {} leaves < 1 channel at base width {}",
                    self.se_reduction, self.base_channels
                ));
            }
            if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
                return fail(format!("aspp_rates must be non-empty and ≥ 1, got {:?}", self.aspp_rates));
            }
        }
        if self.variant == Variant::DenseUNet && (self.growth_rate < 1 || self.layers_per_dense_block < 1) {
            return fail("growth_rate and layers_per_dense_block must be ≥ 1".into());
        }
        Ok(())
    }
}
