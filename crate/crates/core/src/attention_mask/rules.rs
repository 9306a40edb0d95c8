use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Named attention rule-sets. `Standard` is the five-rule region mask, the
/// others are the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum RuleSet {
    Standard,
    /// Image/latent patches only see patches of the same region class:
    /// two patches interact iff both are background or they share a region.
    CutRegionBgImage,
    /// Image and latent segments are decoupled except that cross-modal keys
    /// must lie inside `region`.
    LatentRegionReference {
        region: usize,
    },
    /// Background patches lose access to the global text group.
    NoTextForBackground,
}

impl RuleSet {
    pub const NAMES: [&'static str; 4] =
        ["standard", "cut_region_bg_image", "latent_region_reference", "no_text_for_background"];

    pub fn name(&self) -> &'static str {
        match self {
            RuleSet::Standard => "standard",
            RuleSet::CutRegionBgImage => "cut_region_bg_image",
            RuleSet::LatentRegionReference { .. } => "latent_region_reference",
            RuleSet::NoTextForBackground => "no_text_for_background",
        }
    }

    /// Header flag word: rule code in the low byte, reference region in the
    /// high byte.
    pub fn flag_bits(&self) -> u16 {
        match *self {
            RuleSet::Standard => 0,
            RuleSet::CutRegionBgImage => 1,
            RuleSet::LatentRegionReference { region } => 2 | ((region.min(0xff) as u16) << 8),
            RuleSet::NoTextForBackground => 3,
        }
    }

    pub fn from_flag_bits(bits: u16) -> Option<Self> {
        match bits & 0xff {
            0 => Some(RuleSet::Standard),
            1 => Some(RuleSet::CutRegionBgImage),
            2 => Some(RuleSet::LatentRegionReference { region: usize::from(bits >> 8) }),
            3 => Some(RuleSet::NoTextForBackground),
            _ => None,
        }
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSet::LatentRegionReference { region } => write!(f, "{}:{region}", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown rule-set {0:?}; expected one of standard, cut_region_bg_image, latent_region_reference:<k>, no_text_for_background")]
pub struct ParseRuleSetError(pub String);

impl FromStr for RuleSet {
    type Err = ParseRuleSetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseRuleSetError(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name.replace('-', "_").as_str(), arg) {
            ("standard", None) => Ok(RuleSet::Standard),
            ("cut_region_bg_image", None) => Ok(RuleSet::CutRegionBgImage),
            ("no_text_for_background", None) => Ok(RuleSet::NoTextForBackground),
            ("latent_region_reference", Some(a)) => {
                let region = a.parse().map_err(|_| err())?;
                Ok(RuleSet::LatentRegionReference { region })
            }
            _ => Err(err()),
        }
    }
}
