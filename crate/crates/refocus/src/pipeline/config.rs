use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::falm::FalmConfig;
use crate::feedbackgen::SubsetDropProbs;
use crate::labelgen::LabelConfig;
use crate::localizer::HostConfig;
use crate::refsample::FailureMode;
use crate::synthworld::WorldConfig;
use crate::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 60,
            val: 30,
            test: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetunePhase {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mixed_sampling: bool,
    pub temporal_aug_rate: f64,
    pub falm_frozen: bool,
}

impl Default for FinetunePhase {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 1e-4,
            mixed_sampling: true,
            temporal_aug_rate: 0.20,
            falm_frozen: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QnfSection {
    pub train_random: usize,
    pub train_similar: usize,
    pub train_other: usize,
    pub train_failure: usize,
    pub train_simple_temporal: usize,
    pub drop_probs: SubsetDropProbs,
    pub failure_mode: FailureMode,
}

impl Default for QnfSection {
    fn default() -> Self {
        Self {
            train_random: 1,
            train_similar: 1,
            train_other: 0,
            train_failure: 1,
            train_simple_temporal: 1,
            drop_probs: SubsetDropProbs::default(),
            failure_mode: FailureMode::Recall5,
        }
    }
}

/// Top-level run configuration; every stage derives its inputs from this
/// plus the artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub splits: SplitSizes,
    pub qnf: QnfSection,
    pub labels: LabelConfig,
    pub falm: FalmConfig,
    pub host: HostConfig,
    pub train_falm: PhaseConfig,
    pub train_host: PhaseConfig,
    pub finetune: FinetunePhase,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            world: WorldConfig::default(),
            splits: SplitSizes::default(),
            qnf: QnfSection::default(),
            labels: LabelConfig::default(),
            falm: FalmConfig::default(),
            host: HostConfig::default(),
            train_falm: PhaseConfig::default(),
            train_host: PhaseConfig {
                epochs: 20,
                ..PhaseConfig::default()
            },
            finetune: FinetunePhase::default(),
        }
    }
}

pub const CONFIG_ENV_DIR: &str = "REFOCUS_CONFIG_DIR";
pub const CONFIG_FILE_NAME: &str = "refocus.toml";

impl RunConfig {
    /// World slice for one split: same seed (and so the same vocabulary and
    /// token table), a disjoint episode window.
    pub fn world_for(&self, split: Split) -> WorldConfig {
        let sizes = self.splits;
        let (episodes, offset) = match split {
            Split::Train => (sizes.train, 0),
            Split::Val => (sizes.val, sizes.train as u64),
            Split::Test => (sizes.test, (sizes.train + sizes.val) as u64),
        };
        WorldConfig {
            seed: self.seed,
            episodes,
            episode_offset: offset,
            ..self.world.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.qnf.drop_probs.validate()?;
        self.falm.validate()?;
        self.host.validate()?;
        if self.splits.train == 0 || self.splits.val == 0 || self.splits.test == 0 {
            return Err(Error::Config("all splits need at least one episode".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolve the effective config: an explicit file, else
    /// `$REFOCUS_CONFIG_DIR/refocus.toml` when present, else defaults.
    pub fn resolve(explicit: Option<&std::path::Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV_DIR).and_then(|dir| {
                let p = std::path::PathBuf::from(dir).join(CONFIG_FILE_NAME);
                p.exists().then_some(p)
            }),
        };
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                Self::from_toml(&text)
            }
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    /// Stable content hash over the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
