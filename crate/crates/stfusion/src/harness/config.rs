//! Experiment configuration: one flat TOML file, every field addressable,
//! unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::GridSpec;
use crate::error::{Error, Result};
use crate::scene::{default_class_mix, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Newest frame only.
    Single,
    /// All frames' points stacked into one cloud before encoding.
    Data,
    /// Per-frame features concatenated and mixed by a 1×1 convolution.
    Feature,
    /// Spatial aggregation + temporal merging.
    St,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMode::Single => "single",
            FusionMode::Data => "data",
            FusionMode::Feature => "feature",
            FusionMode::St => "st",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,

    // scene generation
    pub num_objects: usize,
    pub clutter_density: f64,
    pub sigma_noise: f64,
    pub area_extent: f64,
    pub frame_interval: f64,

    // model geometry
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_p: usize,
    pub c: usize,
    /// Total frames per sequence (current + preceding).
    pub k: usize,
    pub num_classes: usize,

    // objective weights
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_gauss: f64,

    // optimization
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub teacher_lr: f64,
    pub teacher_epochs: usize,

    // method selection
    pub fusion_mode: FusionMode,
    pub use_sa: bool,
    pub use_tm: bool,
    pub use_sup: bool,

    // evaluation
    pub score_thresh: f64,
    pub max_dets: usize,
    pub iou_thresh: f64,

    /// Teacher's semantic channel as a one-hot block instead of a raw id.
    pub teacher_one_hot: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            train_scenes: 200,
            eval_scenes: 50,
            num_objects: 5,
            clutter_density: 0.2,
            sigma_noise: 0.02,
            area_extent: 16.0,
            frame_interval: 0.5,
            grid_h: 64,
            grid_w: 64,
            c_p: 8,
            c: 8,
            k: 4,
            num_classes: 2,
            lambda: 0.5,
            alpha: 1.0,
            beta: 0.1,
            sigma_gauss: 7.0,
            lr: 0.01,
            momentum: 0.9,
            epochs: 16,
            batch: 4,
            teacher_lr: 0.005,
            teacher_epochs: 24,
            fusion_mode: FusionMode::St,
            use_sa: true,
            use_tm: true,
            use_sup: true,
            score_thresh: 0.25,
            max_dets: 50,
            iou_thresh: 0.5,
            teacher_one_hot: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("lambda, alpha, beta must be non-negative".into()));
        }
        if self.sigma_gauss <= 0.0 {
            return Err(Error::Config("sigma_gauss must be positive".into()));
        }
        if self.epochs == 0 || self.batch == 0 || self.teacher_epochs == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("need at least one train and one eval scene".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        GridSpec::centered(self.area_extent, self.grid_h, self.grid_w)?;
        Ok(())
    }

    /// Frames actually consumed: single-frame mode forces k = 1.
    pub fn effective_k(&self) -> usize {
        if self.fusion_mode == FusionMode::Single {
            1
        } else {
            self.k
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::centered(self.area_extent, self.grid_h, self.grid_w)
    }

    /// Scene-generator parameters for one scene; `preceding` follows the
    /// effective frame count.
    pub fn scene_config(&self, scene_seed: u64) -> SceneConfig {
        SceneConfig {
            num_objects: self.num_objects,
            class_mix: default_class_mix(),
            area_extent: self.area_extent,
            clutter_density: self.clutter_density,
            preceding: self.effective_k() - 1,
            frame_interval: self.frame_interval,
            seed: scene_seed,
            sigma_noise: self.sigma_noise,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
