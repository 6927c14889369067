use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::is_supported_bits;

/// Axis along which one scale is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
    /// Groups of `g` consecutive input rows within each output channel;
    /// weights only.
    PerGroup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub mode: Mode,
}

impl QuantScheme {
    pub fn symmetric(bits: u8, granularity: Granularity) -> Self {
        Self {
            bits,
            symmetric: true,
            granularity,
            mode: Mode::Static,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_supported_bits(self.bits) {
            return Err(Error::invalid(format!("unsupported bit-width {}", self.bits)));
        }
        if let Granularity::PerGroup(0) = self.granularity {
            return Err(Error::invalid("group size must be positive"));
        }
        Ok(())
    }

    /// Validation for activation quantizers, which never use groups.
    pub fn validate_activation(&self) -> Result<()> {
        self.validate()?;
        if matches!(self.granularity, Granularity::PerGroup(_)) {
            return Err(Error::invalid("per-group granularity is for weights only"));
        }
        Ok(())
    }
}
