//! End-to-end orchestration shared by the command-line driver and the
//! acceptance harness: run configuration, dataset loading, the two training
//! stages, evaluation and diagnostics.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::anchors::{partition_grid, SelectorConfig};
use crate::corrnet::{CorrNetConfig, TransformerConfig};
use crate::data::SyntheticSceneConfig;
use crate::diffusion::{DenoiserConfig, ScheduleConfig};
use crate::distill::DistillConfig;
use crate::error::{GazeError, Result};
use crate::geom::ScreenGeometry;
use crate::nn::OptimizerConfig;
use crate::tokenizer::{TokenizerConfig, VoxelGridSpec};

pub mod artifacts;
pub mod dataset;
pub mod eval;
pub mod heatmap;
pub mod stages;

pub use artifacts::ArtifactLayout;
pub use dataset::Dataset;
pub use eval::{evaluate, EvalReport, Prediction, Predictor, Router};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Manifest read by the training and evaluation commands.
    pub manifest: PathBuf,
    pub grid: usize,
    pub repeats: usize,
    pub screen: ScreenGeometry,
    pub scene: SyntheticSceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorsConfig {
    /// Number of anchors `N`; the layout follows from `N` and the grid size.
    pub count: usize,
    pub selector: SelectorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousConfig {
    pub hidden: usize,
    /// Also update the student trunk instead of only the head.
    pub unfreeze: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOptimizers {
    pub expert: OptimizerConfig,
    pub selector: OptimizerConfig,
    pub denoiser: OptimizerConfig,
    pub distill: OptimizerConfig,
    /// Single-anchor full-grid reference model.
    pub baseline: OptimizerConfig,
    pub continuous: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub transformer: TransformerConfig,
    pub anchors: AnchorsConfig,
    pub diffusion: DiffusionConfig,
    pub distill: DistillConfig,
    pub continuous: ContinuousConfig,
    pub optim: StageOptimizers,
}

fn opt(learning_rate: f64, epochs: usize, batch_size: usize, weight_decay: f64) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate,
        epochs,
        batch_size,
        weight_decay,
        ..OptimizerConfig::default()
    }
}

impl RunConfig {
    pub const PROFILES: [&'static str; 3] = ["desk", "compact", "paper"];

    /// 64×64 frames, depth-2 width-128 transformer, 30 expert and 60
    /// distillation epochs.
    pub fn desk() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            data: DataConfig {
                manifest: PathBuf::from("data/manifest.json"),
                grid: 11,
                repeats: 5,
                screen: ScreenGeometry::default(),
                scene: SyntheticSceneConfig::default(),
            },
            tokenizer: TokenizerConfig::default(),
            transformer: TransformerConfig::default(),
            anchors: AnchorsConfig {
                count: 5,
                selector: SelectorConfig::default(),
            },
            diffusion: DiffusionConfig {
                schedule: ScheduleConfig::default(),
                denoiser: DenoiserConfig::default(),
            },
            distill: DistillConfig::default(),
            continuous: ContinuousConfig {
                hidden: 64,
                unfreeze: false,
            },
            optim: StageOptimizers {
                expert: opt(1e-3, 30, 16, 0.0),
                selector: opt(1e-3, 30, 16, 0.0),
                denoiser: opt(1e-3, 30, 16, 0.0),
                distill: opt(5e-4, 60, 16, 0.01),
                baseline: opt(1e-3, 60, 16, 0.0),
                continuous: opt(1e-3, 30, 16, 0.0),
            },
        }
    }

    /// Reduced geometry sized for a full multi-seed benchmark on one CPU
    /// core: 48×32 sensor, 80-token sequences, a 10-step reverse chain and a
    /// fixed reconstruction pool per training sample.
    pub fn compact() -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from("runs/compact");
        c.data.scene = SyntheticSceneConfig {
            width: 48,
            height: 32,
            pupil_radius_px: [2.5, 3.0],
            iris_radius_ratio: 2.2,
            eye_radius_px: 30.0,
            dwell_ms: 40.0,
            saccade_ms: 15.0,
            ..SyntheticSceneConfig::default()
        };
        c.tokenizer = TokenizerConfig {
            frame_width: 48,
            frame_height: 32,
            patch: 8,
            voxel: VoxelGridSpec {
                cell_w: 8,
                cell_h: 8,
                cell_t_us: 10_000,
                top_k: 16,
            },
            dim: 32,
            standardize_frames: true,
        };
        c.transformer = TransformerConfig {
            depth: 2,
            heads: 2,
            ff_dim: 64,
            classes: 121,
            dropout: 0.0,
            head_channels: 16,
        };
        c.anchors.selector = SelectorConfig {
            embed_dim: 32,
            hidden: 64,
        };
        c.diffusion.schedule.reverse_start = 40;
        c.diffusion.denoiser = DenoiserConfig { width: 32, blocks: 2 };
        c.distill.bank_size = Some(32);
        c.continuous.hidden = 32;
        c.optim = StageOptimizers {
            expert: opt(2e-3, 40, 8, 0.0),
            selector: opt(2e-3, 40, 8, 0.0),
            denoiser: opt(1e-3, 30, 8, 0.0),
            distill: opt(2e-3, 80, 8, 0.01),
            baseline: opt(2e-3, 40, 8, 0.0),
            continuous: opt(1e-3, 30, 8, 0.0),
        };
        c
    }

    /// Reference values at the published scale (224×224 inputs, ViT-B
    /// width, batch 80 / 4, 350 / 500 epochs). Not practical on a CPU.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from("runs/paper");
        c.data.scene = SyntheticSceneConfig {
            width: 224,
            height: 224,
            pupil_radius_px: [16.0, 20.0],
            eye_radius_px: 140.0,
            dwell_ms: 1500.0,
            ..SyntheticSceneConfig::default()
        };
        c.tokenizer = TokenizerConfig {
            frame_width: 224,
            frame_height: 224,
            patch: 16,
            voxel: VoxelGridSpec {
                cell_w: 16,
                cell_h: 16,
                cell_t_us: 100_000,
                top_k: 64,
            },
            dim: 768,
            standardize_frames: true,
        };
        c.transformer = TransformerConfig {
            depth: 2,
            heads: 12,
            ff_dim: 3072,
            classes: 121,
            dropout: 0.1,
            head_channels: 256,
        };
        c.optim.expert = opt(1e-4, 350, 80, 0.0);
        c.optim.selector = opt(1e-4, 350, 80, 0.0);
        c.optim.baseline = opt(1e-4, 500, 80, 0.0);
        c.optim.distill = opt(1e-5, 500, 4, 0.01);
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "compact" => Ok(Self::compact()),
            "paper" => Ok(Self::paper()),
            other => Err(GazeError::Config(format!(
                "unknown profile {other:?}; expected one of {:?}",
                Self::PROFILES
            ))),
        }
    }

    pub fn corrnet(&self) -> CorrNetConfig {
        CorrNetConfig {
            tokenizer: self.tokenizer.clone(),
            transformer: self.transformer.clone(),
        }
    }

    /// Checks every block before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(GazeError::Config(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.data;
        if d.grid < 2 || d.repeats == 0 {
            return Err(GazeError::Config("data.grid must be >= 2 and data.repeats >= 1".into()));
        }
        d.screen.validate()?;
        d.scene.validate()?;
        if (d.scene.width, d.scene.height) != (self.tokenizer.frame_width, self.tokenizer.frame_height) {
            return Err(GazeError::Config(format!(
                "scene sensor {}x{} differs from tokenizer frame {}x{}",
                d.scene.width, d.scene.height, self.tokenizer.frame_width, self.tokenizer.frame_height
            )));
        }
        self.corrnet().with_classes(d.grid * d.grid).validate()?;
        partition_grid(d.grid, self.anchors.count)?;
        let sel = &self.anchors.selector;
        if sel.embed_dim == 0 || sel.hidden == 0 {
            return Err(GazeError::Config("selector sizes must be positive".into()));
        }
        self.diffusion.schedule.build()?;
        let den = &self.diffusion.denoiser;
        if den.width < 2 || den.blocks == 0 {
            return Err(GazeError::Config("denoiser width >= 2 and blocks >= 1 required".into()));
        }
        self.distill.validate()?;
        if self.continuous.hidden == 0 {
            return Err(GazeError::Config("continuous.hidden must be positive".into()));
        }
        let o = &self.optim;
        for (name, c) in [
            ("expert", &o.expert),
            ("selector", &o.selector),
            ("denoiser", &o.denoiser),
            ("distill", &o.distill),
            ("baseline", &o.baseline),
            ("continuous", &o.continuous),
        ] {
            c.validate()
                .map_err(|e| GazeError::Config(format!("optim.{name}: {e}")))?;
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in RunConfig::PROFILES {
            RunConfig::profile(p).unwrap().validate().unwrap();
        }
        assert!(RunConfig::profile("huge").is_err());
    }

    #[test]
    fn compact_sequence_length() {
        let c = RunConfig::compact();
        assert_eq!(c.tokenizer.num_patches(), 24);
        assert_eq!(c.tokenizer.sequence_len(), 80);
    }

    #[test]
    fn invalid_blocks_are_rejected() {
        let mut c = RunConfig::desk();
        c.schema_version = 9;
        assert!(matches!(c.validate(), Err(GazeError::Config(_))));
        let mut c = RunConfig::desk();
        c.transformer.heads = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.data.scene.width = 32;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.anchors.count = 12;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.distill.samples = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.optim.distill.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::compact();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
    }
}
