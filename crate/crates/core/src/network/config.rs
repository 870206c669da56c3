use serde::{Deserialize, Serialize};

use super::detect::AnchorGrid;
use crate::error::{Error, Result};

/// How the 7×7 scene-general feature is enlarged for the detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Enlarge {
    /// Pixel shuffle: channels shrink by r².
    Defocus,
    /// Nearest-neighbour interpolation ablation: channels are kept.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_size: usize,
    /// Width of the two input-specific convolutions.
    pub input_channels: usize,
    /// Output widths of the stride-2 backbone convolutions; the last is `C_b`.
    pub backbone_widths: Vec<usize>,
    /// One backbone serves both streams; `false` is the separate-backbone ablation.
    pub share_backbone: bool,
    pub defocus_ratio: usize,
    pub enlarge: Enlarge,
    pub num_classes: usize,
    pub object_anchors: Vec<[f64; 2]>,
    pub head_anchors: Vec<[f64; 2]>,
    pub detector_hidden: usize,
    pub heatmap_size: usize,
    pub attention_grid: usize,
    pub head_map_widths: Vec<usize>,
    pub gaze_reduce: usize,
    pub attention_hidden: usize,
    pub regressor_bottleneck: usize,
    pub decoder_widths: Vec<usize>,
    pub object_conf_threshold: f64,
    pub head_conf_threshold: f64,
    pub nms_threshold: f64,
    pub max_persons: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 224,
            input_channels: 8,
            backbone_widths: vec![16, 32, 64, 128, 128],
            share_backbone: true,
            defocus_ratio: 2,
            enlarge: Enlarge::Defocus,
            num_classes: 24,
            object_anchors: vec![[32.0, 32.0], [40.0, 40.0], [48.0, 48.0]],
            head_anchors: vec![[20.0, 20.0], [26.0, 26.0], [32.0, 32.0]],
            detector_hidden: 64,
            heatmap_size: 64,
            attention_grid: 7,
            head_map_widths: vec![16, 32, 32, 64, 64],
            gaze_reduce: 16,
            attention_hidden: 256,
            regressor_bottleneck: 512,
            decoder_widths: vec![64, 32, 16],
            object_conf_threshold: 0.05,
            head_conf_threshold: 0.5,
            nms_threshold: 0.5,
            max_persons: 8,
        }
    }
}

impl NetworkConfig {
    pub fn backbone_channels(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&self.input_channels)
    }

    pub fn backbone_spatial(&self) -> usize {
        self.input_size >> self.backbone_widths.len()
    }

    pub fn detection_grid(&self) -> usize {
        self.backbone_spatial() * self.defocus_ratio
    }

    pub fn detector_channels(&self) -> usize {
        match self.enlarge {
            Enlarge::Defocus => self.backbone_channels() / (self.defocus_ratio * self.defocus_ratio),
            Enlarge::Nearest => self.backbone_channels(),
        }
    }

    /// Spatial size entering the three ×2 deconvolutions.
    pub fn decoder_entry(&self) -> usize {
        self.heatmap_size >> self.decoder_widths.len()
    }

    pub fn head_pool_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn object_grid(&self) -> AnchorGrid {
        AnchorGrid {
            grid: self.detection_grid(),
            stride: self.input_size as f64 / self.detection_grid() as f64,
            sizes: self.object_anchors.clone(),
        }
    }

    pub fn head_grid(&self) -> AnchorGrid {
        AnchorGrid { sizes: self.head_anchors.clone(), ..self.object_grid() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("network config: {m}")));
        let cb = self.backbone_channels();
        let r = self.defocus_ratio;
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) || self.input_channels == 0 {
            return fail("backbone widths must be non-empty and positive".into());
        }
        if r == 0 || cb % (r * r) != 0 {
            return fail(format!("backbone channels {cb} not divisible by r²={}", r * r));
        }
        let depth = self.backbone_widths.len();
        if self.input_size == 0 || self.input_size % (1 << depth) != 0 {
            return fail(format!("input size {} not divisible by 2^{depth}", self.input_size));
        }
        if self.backbone_spatial() != self.attention_grid {
            return fail(format!(
                "backbone output {} must equal the attention grid {}",
                self.backbone_spatial(),
                self.attention_grid
            ));
        }
        if self.head_map_widths.len() != depth {
            return fail(format!("{} head-map convolutions but backbone depth {depth}", self.head_map_widths.len()));
        }
        if self.input_size % 8 != 0 {
            return fail("input size must allow three 2×2 max pools".into());
        }
        if self.decoder_widths.is_empty() || self.heatmap_size % (1 << self.decoder_widths.len()) != 0 {
            return fail(format!("heatmap size {} incompatible with the decoder", self.heatmap_size));
        }
        if self.num_classes == 0 || self.object_anchors.is_empty() || self.head_anchors.is_empty() {
            return fail("need at least one class and one anchor per detector".into());
        }
        if self
            .object_anchors
            .iter()
            .chain(&self.head_anchors)
            .any(|[w, h]| !(*w > 0.0 && *h > 0.0))
        {
            return fail("anchor sizes must be positive".into());
        }
        Ok(())
    }
}
