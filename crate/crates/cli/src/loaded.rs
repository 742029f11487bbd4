use std::path::Path;

use anyhow::Context;
use dynrad::checkpoint::{self, CheckpointMeta};
use dynrad::render::{render_image, Mat4};
use dynrad::{Camera, FeatureKind, ImageF, MaskVolume, Model, RenderConfig};

/// Samples per ray when a checkpoint records none.
pub const FALLBACK_SAMPLES: usize = 96;
/// Focal length over image width when a checkpoint records none.
pub const FALLBACK_FOCAL_RATIO: f64 = 1.1;

/// A checkpoint ready for rendering: weights, metadata, and its occupancy mask.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub mask: Option<MaskVolume>,
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let (model, meta) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        Ok(Self::from_parts(model, meta)?)
    }

    pub fn from_parts(model: Model<f32>, meta: CheckpointMeta) -> dynrad::Result<Self> {
        let mask = meta.rebuild_mask(&model)?;
        Ok(Self { model, meta, mask })
    }

    pub fn param_ranges(&self) -> &[(f64, f64)] {
        &self.model.field.params(FeatureKind::Density).ranges
    }

    /// Middle of every parameter range.
    pub fn default_params(&self) -> Vec<f64> {
        self.param_ranges().iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Deterministic render settings: checkpoint defaults unless overridden.
    pub fn render_config(&self, samples: Option<usize>, background: Option<[f64; 3]>) -> RenderConfig {
        let recorded = (self.meta.render_samples > 0).then_some(self.meta.render_samples);
        let importance = self
            .meta
            .schedule
            .as_ref()
            .filter(|s| s.voxelskip_iter.is_some())
            .map_or(0, |s| s.importance_extra);
        RenderConfig {
            n_samples: samples.or(recorded).unwrap_or(FALLBACK_SAMPLES),
            n_importance: importance,
            background: background.unwrap_or(self.meta.background),
            sigma_threshold: self.meta.sigma_threshold,
            jitter: false,
            ..RenderConfig::default()
        }
    }

    pub fn camera(&self, pose: Mat4, width: usize, height: usize) -> dynrad::Result<Camera> {
        let ratio = self.meta.focal_ratio.unwrap_or(FALLBACK_FOCAL_RATIO);
        Camera::new(pose, ratio * width as f64, width, height)
    }

    pub fn render(&self, camera: &Camera, params: &[f64], config: &RenderConfig) -> dynrad::Result<ImageF> {
        render_image(&self.model, camera, params, config, self.mask.as_ref())
    }
}
