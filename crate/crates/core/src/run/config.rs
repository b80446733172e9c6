use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, Family};
use crate::detector::{DetectorConfig, DetectorTrainConfig, InputKind};
use crate::error::{Error, Result};
use crate::hsr::{HsrConfig, HsrTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_scenes: usize,
    pub size: usize,
    pub kinds: Vec<Family>,
    pub splits: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_scenes: 400,
            size: 32,
            kinds: Family::ALL.to_vec(),
            splits: [0.5, 0.1, 0.4],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsrSection {
    pub model: HsrConfig,
    pub train: HsrTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub model: DetectorConfig,
    pub train: DetectorTrainConfig,
    /// A loss row is logged every this many steps, plus the last step.
    pub log_every: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            model: DetectorConfig::default(),
            train: DetectorTrainConfig::default(),
            log_every: 10,
        }
    }
}

/// Cross-manipulation protocol: one detector per train kind, each scored
/// on every test kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub train_kinds: Vec<Family>,
    pub test_kinds: Vec<Family>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            train_kinds: Family::ALL.to_vec(),
            test_kinds: Family::ALL.to_vec(),
        }
    }
}

/// Where runs are written. Not part of the config hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Relative paths resolve against the directory of the config file.
    pub runs_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            runs_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub hsr: HsrSection,
    pub detector: DetectorSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads, parses and validates a config file, resolving `runs_dir`
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.paths.runs_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.paths.runs_dir = base.join(&cfg.paths.runs_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_scenes: self.data.n_scenes,
            size: self.data.size,
            kinds: self.data.kinds.clone(),
            splits: self.data.splits,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.hsr.model.validate()?;
        self.detector.model.validate()?;
        self.detector.train.validate()?;
        if self.hsr.train.batch == 0 || !(self.hsr.train.lr > 0.0) {
            return Err(Error::Config(format!("hsr training: invalid settings {:?}", self.hsr.train)));
        }
        let m = self.hsr.model.spatial_multiple();
        if !self.hsr.train.crop.is_multiple_of(m) {
            return Err(Error::Config(format!("hsr crop {} must be a multiple of {m}", self.hsr.train.crop)));
        }
        if self.detector.model.input == InputKind::Hsi && !self.data.size.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of {m} to run reconstruction",
                self.data.size
            )));
        }
        if self.detector.log_every == 0 {
            return Err(Error::Config("detector.log_every must be >= 1".into()));
        }
        if self.eval.train_kinds.is_empty() || self.eval.test_kinds.is_empty() {
            return Err(Error::Config("eval needs at least one train and one test kind".into()));
        }
        Ok(())
    }

    /// 64-bit digest of the canonical JSON form with `paths` left out, so
    /// the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> u64 {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("paths");
        }
        // serde_json maps are ordered by key, which makes this canonical.
        let text = serde_json::to_string(&value).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn run_dir(&self) -> RunDir {
        RunDir {
            root: self.paths.runs_dir.join(format!("{:016x}", self.hash())),
        }
    }
}

/// Layout of `runs/<hash>/`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn hsr_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("hsr.ck")
    }

    pub fn detector_checkpoint(&self, kind: Family) -> PathBuf {
        self.checkpoints().join(format!("det_{}.ck", kind.name()))
    }

    pub fn hsr_log(&self) -> PathBuf {
        self.logs().join("hsr_loss.csv")
    }

    pub fn detector_log(&self, kind: Family) -> PathBuf {
        self.logs().join(format!("det_{}_loss.csv", kind.name()))
    }
}
