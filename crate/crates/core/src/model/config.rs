use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variants compared by the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Element-wise and patch-wise attention, top-down decoder, diagonal masks.
    Full,
    /// Element attention over the whole un-patched sequence; no pyramid.
    PointWiseOnly,
    /// Element-wise blocks removed.
    PatchWiseOnly,
    /// Decoder starts at the finest resolution and merges upward.
    BottomUpDecoder,
    /// Decoder removed; the forecast is the encoder projection alone.
    LinearDecoder,
    /// Encoder self-attention without diagonal masks.
    NoDM,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::PointWiseOnly,
        Variant::PatchWiseOnly,
        Variant::BottomUpDecoder,
        Variant::LinearDecoder,
        Variant::NoDM,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PointWiseOnly => "point_wise_only",
            Variant::PatchWiseOnly => "patch_wise_only",
            Variant::BottomUpDecoder => "bottom_up_decoder",
            Variant::LinearDecoder => "linear_decoder",
            Variant::NoDM => "no_dm",
        }
    }

    pub fn code(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.get(code as usize).copied()
    }

    pub(crate) fn has_element_blocks(self) -> bool {
        self != Variant::PatchWiseOnly
    }

    pub(crate) fn has_patch_blocks(self) -> bool {
        self != Variant::PointWiseOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.label()).collect();
                Error::config(format!("unknown variant '{}' (expected one of {})", s, names.join(", ")))
            })
    }
}

/// Longest sequence the point-wise variant accepts (its attention is
/// quadratic in the whole input length).
pub const POINT_WISE_MAX_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_len: usize,
    pub pred_len: usize,
    pub stages: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub variant: Variant,
    /// Feed-forward sub-block inside every attention block.
    pub feed_forward: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 96,
            pred_len: 96,
            stages: 3,
            patch_size: 6,
            embed_dim: 32,
            dropout: 0.1,
            variant: Variant::Full,
            feed_forward: true,
        }
    }
}

impl ModelConfig {
    /// Patch length at the coarsest stage, `patch_size · 2^(stages-1)`.
    pub fn coarse_patch(&self) -> usize {
        self.stage_patch(self.stages - 1)
    }

    /// Patch length at 0-based encoder stage `i`.
    pub fn stage_patch(&self, i: usize) -> usize {
        self.patch_size << i
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_len", self.input_len),
            ("pred_len", self.pred_len),
            ("stages", self.stages),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{} must be positive", name)));
            }
        }
        if self.stages > 16 {
            return Err(Error::config(format!("stages = {} is unreasonably deep", self.stages)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        let coarse = self.coarse_patch();
        for (name, len) in [("input_len", self.input_len), ("pred_len", self.pred_len)] {
            if len % coarse != 0 {
                return Err(Error::config(format!(
                    "{} = {} must be divisible by patch_size * 2^(stages-1) = {}",
                    name, len, coarse
                )));
            }
            if len / coarse < 2 {
                return Err(Error::config(format!(
                    "{} / (patch_size * 2^(stages-1)) = {} / {} must be at least 2",
                    name, len, coarse
                )));
            }
        }
        if self.variant == Variant::PointWiseOnly && self.input_len > POINT_WISE_MAX_LEN {
            return Err(Error::config(format!(
                "point_wise_only attends over the whole input; input_len = {} exceeds {}",
                self.input_len, POINT_WISE_MAX_LEN
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().coarse_patch(), 24);
    }

    #[test]
    fn divisibility_is_enforced() {
        let c = ModelConfig {
            input_len: 100,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible"), "{msg}");
    }

    #[test]
    fn at_least_two_coarse_patches() {
        let c = ModelConfig {
            pred_len: 24,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("at least 2"), "{msg}");
    }

    #[test]
    fn point_wise_length_guard() {
        let c = ModelConfig {
            input_len: 528,
            variant: Variant::PointWiseOnly,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let ok = ModelConfig {
            variant: Variant::PointWiseOnly,
            ..Default::default()
        };
        ok.validate().unwrap();
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
