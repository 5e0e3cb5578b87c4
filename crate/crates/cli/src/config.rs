use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toothloc::data::{SplitFractions, SynthConfig};
use toothloc::gradcheck::GradcheckConfig;
use toothloc::pipeline::TrainConfig;

use crate::CliError;

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub split: SplitFractions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 818, split: SplitFractions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    /// Overlay PNGs written per evaluation; the first scenes of the split.
    pub overlays: usize,
    /// Untimed passes before the throughput measurement.
    pub fps_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: "test".into(), overlays: 16, fps_warmup: 3 }
    }
}

/// Everything a command reads, one section per concern.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    /// Seed of the gradient checker's draws.
    pub gradcheck_seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// One seed for every random source.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.gradcheck_seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = CliError::Validation;
        self.synth.validate().map_err(|e| v(e.to_string()))?;
        self.dataset.split.counts(self.dataset.count).map_err(|e| v(e.to_string()))?;
        self.train.validate().map_err(v)?;
        if self.eval.split.is_empty() {
            return Err(v("eval.split must name a split".into()));
        }
        // TOML integers are signed
        for (name, s) in [("synth.seed", self.synth.seed), ("train.seed", self.train.seed), ("gradcheck_seed", self.gradcheck_seed)] {
            if i64::try_from(s).is_err() {
                return Err(v(format!("{name} {s} exceeds {}", i64::MAX)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the resolved configuration into `out`.
    pub fn snapshot(&self, out: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}
