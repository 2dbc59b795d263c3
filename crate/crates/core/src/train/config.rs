use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cnn3d::TemporalArch;
use crate::error::{Error, Result};
use crate::graph_build::{Extent, GraphParams};
use crate::graph_pool::PoolParams;
use crate::sampling::SamplingParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One graph per stream, graph fully-connected head.
    Object,
    /// `S` graphs per stream, grid mapping and 3-d convolutional head.
    Action,
}

/// One stage of the spatial graph chain; channel counts are before width scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialSpec {
    Conv { out: usize },
    Res { out: usize },
    Pool { size: [usize; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadSpec {
    /// Graph FC layers of the given widths, then `FC(Q)`.
    Fc {
        hidden: Vec<usize>,
    },
    Temporal {
        arch: TemporalArch,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    pub width: usize,
    pub height: usize,
}

impl Sensor {
    pub fn extent(&self) -> Extent {
        Extent::new(self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    /// Dropout after the first fully-connected layer (object task).
    #[serde(default = "defaults::dropout")]
    pub dropout_p: f64,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad("lr and lr_decay must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// Learning rate during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m < epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    /// Scale factor range `[lo, hi)`; `lo == hi` fixes the factor.
    #[serde(default = "defaults::scale")]
    pub scale: [f64; 2],
    /// Probability of mirroring `x`.
    #[serde(default = "defaults::half")]
    pub flip_x: f64,
    /// Probability of mirroring `y`.
    #[serde(default = "defaults::half")]
    pub flip_y: f64,
    /// In-plane rotation angle range `[0, rotate_deg]` in degrees.
    #[serde(default = "defaults::rotate")]
    pub rotate_deg: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            scale: defaults::scale(),
            flip_x: 0.5,
            flip_y: 0.5,
            rotate_deg: defaults::rotate(),
        }
    }
}

impl AugmentParams {
    /// No-op augmentation.
    pub fn identity() -> Self {
        AugmentParams {
            scale: [1.0, 1.0],
            flip_x: 0.0,
            flip_y: 0.0,
            rotate_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "scale range {:?} must satisfy 0 < lo <= hi <= 1",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_x) || !(0.0..=1.0).contains(&self.flip_y) {
            return Err(Error::Config(
                "flip probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(self.rotate_deg >= 0.0) {
            return Err(Error::Config("rotate_deg must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model and its data pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub sensor: Sensor,
    /// Graphs per stream.
    #[serde(default = "defaults::one")]
    pub s_count: usize,
    #[serde(default = "defaults::width")]
    pub width_multiplier: f64,
    #[serde(default = "defaults::kernel_size")]
    pub kernel_size: [usize; 2],
    #[serde(default = "defaults::one")]
    pub degree: usize,
    pub spatial: Vec<SpatialSpec>,
    pub head: HeadSpec,
    #[serde(default)]
    pub graph: GraphParams,
    #[serde(default)]
    pub sampling: SamplingParams,
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentParams,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serialises")
    }

    pub fn task(&self) -> Task {
        self.train.task
    }

    pub fn pools(&self) -> Vec<PoolParams> {
        self.spatial
            .iter()
            .filter_map(|s| match *s {
                SpatialSpec::Pool { size } => Some(PoolParams {
                    s_h: size[0],
                    s_w: size[1],
                }),
                _ => None,
            })
            .collect()
    }

    /// Spatial extent after the whole pooling chain.
    pub fn final_extent(&self) -> Extent {
        self.pools()
            .iter()
            .fold(self.sensor.extent(), |e, p| e.pooled(p.s_h, p.s_w))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.sensor.width == 0 || self.sensor.height == 0 || self.s_count == 0 {
            return bad("sensor dims and s_count must be positive".into());
        }
        if !(self.width_multiplier > 0.0) {
            return bad("width_multiplier must be positive".into());
        }
        if self.spatial.is_empty() {
            return bad("spatial chain is empty".into());
        }
        for s in &self.spatial {
            match *s {
                SpatialSpec::Conv { out } | SpatialSpec::Res { out } if out == 0 => {
                    return bad("layer width must be positive".into())
                }
                SpatialSpec::Pool { size } if size[0] == 0 || size[1] == 0 => {
                    return bad("pool size must be positive".into())
                }
                _ => {}
            }
        }
        if matches!(self.spatial[0], SpatialSpec::Pool { .. }) {
            return bad("spatial chain must start with a convolution".into());
        }
        match (&self.head, self.train.task) {
            (HeadSpec::Fc { .. }, Task::Object) => {
                if self.s_count != 1 {
                    return bad("object task uses one graph per stream (s_count = 1)".into());
                }
            }
            (HeadSpec::Temporal { .. }, Task::Action) => {}
            _ => return bad("object task needs an fc head, action task a temporal head".into()),
        }
        self.graph.validate()?;
        self.sampling.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }
}

mod defaults {
    pub fn epochs() -> usize {
        150
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn lr_decay() -> f64 {
        0.1
    }
    pub fn dropout() -> f64 {
        0.5
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
    pub fn scale() -> [f64; 2] {
        [0.95, 1.0]
    }
    pub fn half() -> f64 {
        0.5
    }
    pub fn rotate() -> f64 {
        10.0
    }
    pub fn one() -> usize {
        1
    }
    pub fn width() -> f64 {
        1.0
    }
    pub fn kernel_size() -> [usize; 2] {
        [5, 5]
    }
}
