use serde::{Deserialize, Serialize};

use crate::error::{HpnetError, Result};

/// One convolution stage of the backbone (followed by ReLU).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl StageConfig {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        StageConfig {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stages: Vec<StageConfig>,
    /// Channels D' of the patch vectors after the two 1×1 adapter convolutions.
    pub adapter_channels: usize,
}

impl BackboneConfig {
    /// Four stages on 64×64 RGB inputs giving an 8×8×64 latent, reduced to D' = 32.
    pub fn desk() -> Self {
        BackboneConfig {
            in_channels: 3,
            input_size: 64,
            stages: vec![
                StageConfig::new(8, 3, 2, 1),
                StageConfig::new(16, 3, 2, 1),
                StageConfig::new(32, 3, 2, 1),
                StageConfig::new(64, 3, 1, 1),
            ],
            adapter_channels: 32,
        }
    }

    /// The VGG-16 feature extractor geometry (224 → 7×7×512) with pooling
    /// folded into strided convolutions.
    pub fn vgg16_shape() -> Self {
        let mut stages = Vec::new();
        for (reps, ch) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)] {
            for r in 0..reps {
                let stride = if r + 1 == reps { 2 } else { 1 };
                stages.push(StageConfig::new(ch, 3, stride, 1));
            }
        }
        BackboneConfig {
            in_channels: 3,
            input_size: 224,
            stages,
            adapter_channels: 32,
        }
    }

    /// Small geometry for tests: `input_size`² inputs, two stages, 4×4 latent at 8×8 input.
    pub fn tiny(input_size: usize) -> Self {
        BackboneConfig {
            in_channels: 3,
            input_size,
            stages: vec![StageConfig::new(4, 3, 1, 1), StageConfig::new(6, 3, 2, 1)],
            adapter_channels: 3,
        }
    }

    /// Channels D of the backbone output.
    pub fn latent_channels(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.out_channels)
            .unwrap_or(self.in_channels)
    }

    /// Spatial size (H, W) of the latent grid.
    pub fn latent_grid(&self) -> (usize, usize) {
        let mut size = self.input_size;
        for s in &self.stages {
            if size + 2 * s.padding < s.kernel {
                return (0, 0);
            }
            size = (size + 2 * s.padding - s.kernel) / s.stride.max(1) + 1;
        }
        (size, size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_size == 0 || self.stages.is_empty() {
            return Err(HpnetError::Config(
                "backbone needs input channels, an input size and at least one stage".into(),
            ));
        }
        if self
            .stages
            .iter()
            .any(|s| s.out_channels == 0 || s.kernel == 0 || s.stride == 0)
        {
            return Err(HpnetError::Config(
                "backbone stages need positive channels, kernel and stride".into(),
            ));
        }
        let d = self.latent_channels();
        if self.adapter_channels == 0 || self.adapter_channels >= d {
            return Err(HpnetError::Config(format!(
                "adapter channels D'={} must satisfy 0 < D' < D={d}",
                self.adapter_channels
            )));
        }
        let (h, w) = self.latent_grid();
        if h < 2 || w < 2 {
            return Err(HpnetError::Config(format!(
                "latent grid {h}x{w} is smaller than 2x2"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub prototypes_per_class: usize,
    /// ε in the similarity score `log(1 + 1/(d² + ε))`.
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            prototypes_per_class: 8,
            epsilon: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.prototypes_per_class == 0 {
            return Err(HpnetError::Config(
                "at least one prototype per class is required".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(HpnetError::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry() {
        let b = BackboneConfig::desk();
        b.validate().unwrap();
        assert_eq!(b.latent_grid(), (8, 8));
        assert_eq!(b.latent_channels(), 64);
    }

    #[test]
    fn vgg_geometry_is_expressible() {
        let b = BackboneConfig::vgg16_shape();
        b.validate().unwrap();
        assert_eq!(b.latent_grid(), (7, 7));
        assert_eq!(b.latent_channels(), 512);
        assert_eq!(b.stages.len(), 13);
    }

    #[test]
    fn adapter_must_reduce_channels() {
        let mut b = BackboneConfig::desk();
        b.adapter_channels = 64;
        assert!(b.validate().is_err());
    }

    #[test]
    fn latent_grid_must_hold_patches() {
        let mut b = BackboneConfig::desk();
        b.input_size = 8;
        assert!(b.validate().is_err());
        assert_eq!(BackboneConfig::tiny(8).latent_grid(), (4, 4));
    }
}
