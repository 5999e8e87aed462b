//! Architecture hyperparameters and ablation presets.

use serde::{Deserialize, Serialize};

use crate::error::{DcamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Click,
    Trimap,
}

impl GuidanceMode {
    /// Auxiliary heads predict trimap logits for coarse guidance and alpha
    /// for trimap guidance.
    pub fn predicts_trimap(self) -> bool {
        !matches!(self, GuidanceMode::Trimap)
    }

    pub fn aux_channels(self) -> usize {
        if self.predicts_trimap() {
            3
        } else {
            1
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Click => "click",
            GuidanceMode::Trimap => "trimap",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = DcamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "click" => Ok(Self::Click),
            "trimap" => Ok(Self::Trimap),
            other => Err(DcamError::Config(format!("unknown guidance mode {other:?}"))),
        }
    }
}

/// Global object aggregator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoaVariant {
    Off,
    /// Attention over object features only.
    Object,
    /// Object features fused with backbone semantic features first.
    ObjectSemantics,
}

/// Local appearance aggregator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaaVariant {
    Off,
    /// Window attention only.
    Transformer,
    /// Window attention plus a convolutional high-frequency path.
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub guidance_mode: GuidanceMode,
    pub width_multiplier: f64,
    /// Number of cascaded aggregation rounds.
    pub nca: usize,
    pub use_gem: bool,
    pub goa_variant: GoaVariant,
    pub laa_variant: LaaVariant,
    pub window_s: usize,
    pub pyramid_levels_j: usize,
    pub epsilon: f64,
    pub focal_gamma: f64,
    /// Largest token count a global attention map may cover.
    pub token_cap: usize,
}

/// Rows of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    B8,
}

impl ModelConfig {
    pub fn full(mode: GuidanceMode) -> Self {
        Self {
            guidance_mode: mode,
            width_multiplier: 1.0,
            nca: 2,
            use_gem: true,
            goa_variant: GoaVariant::ObjectSemantics,
            laa_variant: LaaVariant::Hybrid,
            window_s: 7,
            pyramid_levels_j: 4,
            epsilon: 1e-6,
            focal_gamma: 2.0,
            token_cap: 4096,
        }
    }

    /// Desk-scale configuration: full topology at a quarter of the width.
    pub fn tiny(mode: GuidanceMode) -> Self {
        Self {
            width_multiplier: 0.25,
            ..Self::full(mode)
        }
    }

    pub fn ablation(row: Ablation, mode: GuidanceMode, width_multiplier: f64) -> Self {
        use Ablation::*;
        use GoaVariant as G;
        use LaaVariant as L;
        let (nca, use_gem, goa, laa) = match row {
            B1 => (0, false, G::Off, L::Off),
            B2 => (1, false, G::ObjectSemantics, L::Hybrid),
            B3 => (1, true, G::ObjectSemantics, L::Hybrid),
            B4 => (2, true, G::Object, L::Off),
            B5 => (2, true, G::ObjectSemantics, L::Off),
            B6 => (2, true, G::Off, L::Transformer),
            B7 => (2, true, G::Off, L::Hybrid),
            B8 => (2, true, G::ObjectSemantics, L::Hybrid),
        };
        Self {
            width_multiplier,
            nca,
            use_gem,
            goa_variant: goa,
            laa_variant: laa,
            ..Self::full(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0) {
            return Err(DcamError::Config("width_multiplier must be positive".into()));
        }
        if self.nca > 2 {
            return Err(DcamError::Config(format!("nca must be 0, 1 or 2, got {}", self.nca)));
        }
        if self.window_s < 1 {
            return Err(DcamError::Config("window size s must be at least 1".into()));
        }
        if self.pyramid_levels_j < 1 {
            return Err(DcamError::Config("pyramid needs at least one level".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(DcamError::Config("epsilon must be positive".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(DcamError::Config("focal gamma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> Widths {
        Widths::new(self.width_multiplier)
    }
}

/// Channel counts derived from the width multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub stem_mid: usize,
    pub stem_out: usize,
    /// Bottleneck inner widths of the four residual stages.
    pub stage_mid: [usize; 4],
    /// Output widths of the four residual stages.
    pub stage_out: [usize; 4],
    /// Compressed context channels.
    pub context: usize,
    pub dec_semantic: usize,
    pub dec_appearance: usize,
    pub dec_quarter: usize,
    pub dec_matte: usize,
    pub dec_final: usize,
}

impl Widths {
    pub fn new(m: f64) -> Self {
        let ch = |base: f64| -> usize { (((base * m) / 8.0).round() as usize).max(1) * 8 };
        Self {
            stem_mid: ch(32.0),
            stem_out: ch(64.0),
            stage_mid: [ch(64.0), ch(128.0), ch(256.0), ch(512.0)],
            stage_out: [ch(256.0), ch(512.0), ch(1024.0), ch(2048.0)],
            context: ch(256.0),
            dec_semantic: ch(512.0),
            dec_appearance: ch(512.0),
            dec_quarter: ch(128.0),
            dec_matte: ch(64.0),
            dec_final: ch(32.0),
        }
    }
}
