use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::pooled_extent;

/// Every layer output the backbone exposes as a tap, in evaluation order.
pub const TAP_REGISTRY: [&str; 12] = [
    "stem",
    "layer1.0",
    "layer1.1",
    "layer2.0.downsample",
    "layer2.0",
    "layer2.1",
    "layer3.0.downsample",
    "layer3.0",
    "layer3.1",
    "layer4.0.downsample",
    "layer4.0",
    "layer4.1",
];

/// Stem output, the last block of the first three stages, the three
/// projection shortcuts and both blocks of the last stage.
pub const DEFAULT_TAPS: [&str; 9] = [
    "stem",
    "layer1.1",
    "layer2.0.downsample",
    "layer2.1",
    "layer3.0.downsample",
    "layer3.1",
    "layer4.0.downsample",
    "layer4.0",
    "layer4.1",
];

const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const STEM_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    Hypercolumn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Hypercolumn => "hypercolumn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "hypercolumn" => Ok(ModelKind::Hypercolumn),
            other => Err(format!("unknown model kind `{other}` (expected baseline or hypercolumn)")),
        }
    }
}

/// ResNet-18 layout: 7×7/2 stem, 3×3/2 max pool, four stages of two basic
/// blocks. `width_multiplier` scales every channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub width_multiplier: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { width_multiplier: 1.0 }
    }
}

impl BackboneSpec {
    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(STEM_WIDTH)
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        BASE_WIDTHS.map(|c| self.scaled(c))
    }

    pub fn final_width(&self) -> usize {
        self.stage_widths()[3]
    }

    /// Channel count and downsampling factor of a registered tap.
    pub fn tap_geometry(&self, name: &str) -> Option<(usize, usize)> {
        let w = self.stage_widths();
        let stage = |s: usize| (w[s - 1], 4 << (s - 1));
        match name {
            "stem" => Some((self.stem_width(), 4)),
            _ => {
                let rest = name.strip_prefix("layer")?;
                let s: usize = rest.get(..1)?.parse().ok()?;
                TAP_REGISTRY.contains(&name).then(|| stage(s))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapSpec {
    pub tap_points: Vec<String>,
    pub reduce_channels: usize,
    /// `None` resamples to the input resolution.
    pub upsample_to: Option<(usize, usize)>,
    pub pool_kernel: (usize, usize),
    pub pool_stride: (usize, usize),
    /// Whether the 1×1 reduction convolutions carry a bias.
    pub bias: bool,
}

impl Default for TapSpec {
    fn default() -> Self {
        Self {
            tap_points: DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
            reduce_channels: 16,
            upsample_to: None,
            pool_kernel: (56, 56),
            pool_stride: (26, 26),
            bias: true,
        }
    }
}

impl TapSpec {
    /// Default tap set with pooling scaled so a 64×64 input also pools to 7×7.
    pub fn desk_scale() -> Self {
        Self { pool_kernel: (16, 16), pool_stride: (8, 8), ..Self::default() }
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub backbone: BackboneSpec,
    pub taps: TapSpec,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Model(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if !(self.backbone.width_multiplier > 0.0 && self.backbone.width_multiplier.is_finite()) {
            return Err(Error::Model("width_multiplier must be positive".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Model(format!("input size {h}x{w} must be a positive multiple of 32")));
        }
        if self.kind == ModelKind::Hypercolumn {
            self.pooled_size()?;
            let taps = &self.taps;
            if taps.tap_points.is_empty() {
                return Err(Error::Model("hypercolumn head needs at least one tap".into()));
            }
            if taps.reduce_channels == 0 {
                return Err(Error::Model("reduce_channels must be positive".into()));
            }
            for t in &taps.tap_points {
                if !TAP_REGISTRY.contains(&t.as_str()) {
                    return Err(Error::Model(format!("unknown tap `{t}`; known taps: {}", TAP_REGISTRY.join(", "))));
                }
            }
        }
        Ok(())
    }

    pub fn upsample_size(&self) -> (usize, usize) {
        self.taps.upsample_to.unwrap_or(self.input_size)
    }

    /// Spatial size of each pooled tap.
    pub fn pooled_size(&self) -> Result<(usize, usize)> {
        let (uh, uw) = self.upsample_size();
        let t = &self.taps;
        match (pooled_extent(uh, t.pool_kernel.0, t.pool_stride.0), pooled_extent(uw, t.pool_kernel.1, t.pool_stride.1)) {
            (Some(ph), Some(pw)) => Ok((ph, pw)),
            _ => Err(Error::Model(format!(
                "pool kernel {:?} / stride {:?} does not fit the {uh}x{uw} upsampled taps",
                t.pool_kernel, t.pool_stride
            ))),
        }
    }

    /// Input width of the classifier.
    pub fn head_in_features(&self) -> Result<usize> {
        match self.kind {
            ModelKind::Baseline => Ok(self.backbone.final_width()),
            ModelKind::Hypercolumn => {
                let (ph, pw) = self.pooled_size()?;
                Ok(self.taps.tap_points.len() * self.taps.reduce_channels * ph * pw)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_size_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Hypercolumn,
            backbone: BackboneSpec::default(),
            taps: TapSpec::default(),
            num_classes: 19,
            input_size: (224, 224),
        }
    }

    #[test]
    fn full_size_geometry() {
        let cfg = full_size_config();
        cfg.validate().unwrap();
        assert_eq!(cfg.pooled_size().unwrap(), (7, 7));
        assert_eq!(cfg.head_in_features().unwrap(), 7056);
    }

    #[test]
    fn desk_geometry_matches_full_size_head() {
        let cfg = ModelConfig { taps: TapSpec::desk_scale(), input_size: (64, 64), ..full_size_config() };
        assert_eq!(cfg.pooled_size().unwrap(), (7, 7));
        assert_eq!(cfg.head_in_features().unwrap(), 7056);
    }

    #[test]
    fn baseline_head_width() {
        let cfg = ModelConfig {
            kind: ModelKind::Baseline,
            backbone: BackboneSpec { width_multiplier: 0.25 },
            ..full_size_config()
        };
        assert_eq!(cfg.head_in_features().unwrap(), 128);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = full_size_config();
        cfg.taps.tap_points.push("layer5.0".into());
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { input_size: (100, 100), ..full_size_config() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { num_classes: 1, ..full_size_config() };
        assert!(cfg.validate().is_err());
        let mut cfg = full_size_config();
        cfg.taps.upsample_to = Some((32, 32));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tap_geometry_halves_per_stage() {
        let b = BackboneSpec::default();
        assert_eq!(b.tap_geometry("stem"), Some((64, 4)));
        assert_eq!(b.tap_geometry("layer2.0.downsample"), Some((128, 8)));
        assert_eq!(b.tap_geometry("layer4.1"), Some((512, 32)));
        assert_eq!(b.tap_geometry("layer9.1"), None);
    }
}
