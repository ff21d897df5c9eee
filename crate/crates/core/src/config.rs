//! TOML run configuration with a documented default for every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::network::NetworkConfig;
use crate::optim::TrainSchedule;
use crate::synth::{CorruptionSpec, DatasetSpec, GtNoiseSpec, SceneDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training samples use seeds `first_seed ..`.
    pub first_seed: u64,
    pub train_samples: usize,
    /// Validation samples use seeds `validation_first_seed ..`.
    pub validation_first_seed: u64,
    pub validation_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { first_seed: 0, train_samples: 64, validation_first_seed: 1_000_000, validation_samples: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub scene: SceneDistribution,
    pub corruption: CorruptionSpec,
    /// Absent: targets are the analytic normals.
    pub gt_noise: Option<GtNoiseSpec>,
    pub network: NetworkConfig,
    pub schedule: TrainSchedule,
    pub loss: LossSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            data: DataSection::default(),
            scene: SceneDistribution::default(),
            corruption: CorruptionSpec::default(),
            gt_noise: None,
            network: NetworkConfig::desk(),
            schedule: TrainSchedule::default(),
            loss: LossSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.corruption.validate()?;
        self.network.validate()?;
        self.schedule.validate()?;
        self.loss.weights.validate()?;
        if (self.scene.width, self.scene.height) != (self.network.width, self.network.height) {
            return Err(Error::Config(format!(
                "scene extent {}x{} differs from network extent {}x{}",
                self.scene.width, self.scene.height, self.network.width, self.network.height
            )));
        }
        if self.data.train_samples == 0 {
            return Err(Error::Config("data.train_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec { scene: self.scene.clone(), corruption: self.corruption.clone(), gt_noise: self.gt_noise.clone() }
    }
}

/// Every key with its default and meaning; printed by `--help-config`.
pub const REFERENCE: &str = r#"# Run configuration. Every key is optional; unknown keys are rejected.

# Directory for checkpoints, logs and reports.
output_dir = "run"

[data]
first_seed = 0                    # training samples use seeds first_seed ..
train_samples = 64
validation_first_seed = 1000000   # validation samples use seeds validation_first_seed ..
validation_samples = 8

[scene]
width = 64                        # must equal network.width
height = 64                       # must equal network.height
hfov_deg = 60.0                   # horizontal field of view
pitch_deg = [12.0, 30.0]          # downward camera pitch range
camera_height = [1.0, 1.6]        # metres above the floor
wall_distance = [3.5, 6.0]        # metres to the back wall
side_wall_probability = 0.5
boxes = [1, 3]                    # inclusive count range
spheres = [0, 2]
box_half_extent = [0.2, 0.6]      # metres
sphere_radius = [0.2, 0.5]        # metres
checker_probability = 0.5         # chance a surface has checkerboard albedo
glossy_probability = 0.3          # chance a box or sphere is glossy
ambient = 0.25                    # ambient shading term

[corruption]
hole_count = 2                    # elliptical holes per frame
hole_radius = [2.0, 6.0]          # semi-axis range, pixels
glossy_dropout = 0.5              # chance a glossy surface loses all depth
max_depth = 5.5                   # metres; farther depth is dropped
edge_dilation = 1                 # band around discontinuities, pixels
edge_jitter = 0.03                # std. dev. of jitter in the band, metres
edge_threshold = 0.05             # neighbour gap counted as a discontinuity, metres
quantization = 0.001              # metres; 0 disables

# Ground-truth noise is off by default; add this section to enable it.
# [gt_noise]
# cell_size = 4                   # patch edge, pixels
# misalignment = 2                # maximum patch displacement, pixels

[network]
height = 64
width = 64
rgb_widths = [16, 32, 64, 64, 64] # last two must be equal
rgb_convs = [1, 1, 1, 1, 1]       # convolutions per block; decoders mirror them
depth_widths = [16, 32, 64, 64]
depth_convs = [1, 1, 1, 1]
confidence_widths = [8, 8, 8, 8, 1]
variant = "hierarchical"          # hierarchical | early | late
reweighting = "confidence_map"    # confidence_map | binary_mask | none
normalize_heads = true            # losses act on unit-normalized outputs

[schedule]
learning_rate = 0.001
decay_epochs = [2, 4, 6, 9, 12]   # strictly increasing
decay_factor = 0.5
epochs = 15
warmup_epochs = 4                 # all-L2 epochs before the hybrid loss
batch_size = 4
seed = 0                          # initialization and shuffling

[loss]
weights = [0.2, 0.4, 0.8, 1.0]    # per scale, coarse to fine
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_documents_the_defaults() {
        assert_eq!(RunConfig::parse(REFERENCE).unwrap(), RunConfig::default());
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = RunConfig::parse("[schedule]\nepochs = 7\n").unwrap();
        assert_eq!(cfg.schedule.epochs, 7);
        assert_eq!(cfg.schedule.learning_rate, 1e-3);
        assert_eq!(cfg.network, NetworkConfig::desk());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[schedule]\nlearning_rat = 0.1").is_err());
        assert!(RunConfig::parse("[nope]\n").is_err());
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        assert!(RunConfig::parse("[scene]\nwidth = 32\n").is_err());
        assert!(RunConfig::parse("[scene]\nwidth = 32\n[network]\nwidth = 32\n").is_ok());
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.gt_noise = Some(GtNoiseSpec::default());
        cfg.network.variant = crate::network::FusionVariant::Late;
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
