//! Pipeline configuration: one JSON document with per-stage sections.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lidarsplat::camera_geom::DepthProjectionConfig;
use lidarsplat::complexity::AllocationConfig;
use lidarsplat::depth_render::RenderOptions;
use lidarsplat::splat_model::NormalOrientation;
use lidarsplat::synth::SynthConfig;
use lidarsplat::trainer::{InitConfig, TrainConfig};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input point cloud (PLY).
    pub cloud: Option<PathBuf>,
    /// Cameras as JSON, or a directory with COLMAP `cameras.txt`/`images.txt`.
    pub cameras: Option<PathBuf>,
    /// Directory of `<camera name>.png` target images.
    pub images: Option<PathBuf>,
    /// Directory of `<camera name>.pfm` + `<camera name>_mask.png` depth maps.
    pub depth: Option<PathBuf>,
    /// Splat checkpoint (PLY).
    pub splats: Option<PathBuf>,
    /// Directory of predicted images compared by `eval` instead of a render.
    pub predictions: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            cloud: None,
            cameras: None,
            images: None,
            depth: None,
            splats: None,
            predictions: None,
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Canonical,
    Toward([f64; 3]),
    Away([f64; 3]),
}

impl Orientation {
    pub fn to_core(self) -> NormalOrientation {
        match self {
            Orientation::Canonical => NormalOrientation::Canonical,
            Orientation::Toward(v) => NormalOrientation::TowardViewpoint(Vector3::from(v)),
            Orientation::Away(v) => NormalOrientation::AwayFromViewpoint(Vector3::from(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalsConfig {
    pub k: usize,
    pub orientation: Orientation,
}

impl Default for NormalsConfig {
    fn default() -> Self {
        NormalsConfig {
            k: 16,
            orientation: Orientation::Canonical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Gaussians allocated from the cloud; all points when absent.
    pub budget: Option<usize>,
    pub steps: usize,
    pub checkpoint_every: usize,
    /// Use uniform depth confidence instead of image-derived weights.
    pub uniform_confidence: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            budget: Some(200),
            steps: 200,
            checkpoint_every: 50,
            uniform_confidence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub allocation: AllocationConfig,
    pub normals: NormalsConfig,
    pub depth_projection: DepthProjectionConfig,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub toy: ToyConfig,
    pub render: RenderOptions,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            allocation: AllocationConfig::default(),
            normals: NormalsConfig::default(),
            depth_projection: DepthProjectionConfig::default(),
            init: InitConfig::default(),
            train: TrainConfig::default(),
            toy: ToyConfig::default(),
            render: RenderOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn stage_seed(root: u64, stage: u64) -> u64 {
    let mut z = root ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Fan the root seed out to the stages.
    pub fn resolve_seeds(&mut self) {
        self.allocation.seed = stage_seed(self.seed, 1);
        self.train.seed = stage_seed(self.seed, 2);
        self.synth.seed = stage_seed(self.seed, 3);
    }

    pub fn validate(&self) -> Result<()> {
        self.allocation.validate()?;
        self.train.validate()?;
        if self.normals.k < 3 {
            anyhow::bail!(lidarsplat::Error::Config("normals.k must be at least 3".into()));
        }
        if !(self.depth_projection.z_tolerance >= 0.0) {
            anyhow::bail!(lidarsplat::Error::Config("depth_projection.z_tolerance must be non-negative".into()));
        }
        if self.toy.checkpoint_every == 0 {
            anyhow::bail!(lidarsplat::Error::Config("toy.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
