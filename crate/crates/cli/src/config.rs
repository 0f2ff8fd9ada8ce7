//! Run configuration: every component config plus evaluation and sweep
//! settings, one JSON document. A run directory always holds the resolved
//! copy that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use scar_core::cmrs::{EvalSettings, ReferenceConfig};
use scar_core::corpus::CorpusConfig;
use scar_core::inference::ProbeConfig;
use scar_core::missingness::{MaskGeometry, MaskKind};
use scar_core::model::ModelConfig;
use scar_core::training::{TrainConfig, Variant};
use scar_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub settings: EvalSettings,
    /// Missingness kinds the decomposition covers.
    pub kinds: Vec<MaskKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: EvalSettings::default(),
            kinds: MaskKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub lambda_cons: Vec<f64>,
    pub lambda_mask: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_cons: vec![0.5, 1.0],
            lambda_mask: vec![0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; `resolve` copies it into every component that draws.
    pub seed: u64,
    pub variant: String,
    pub out_dir: Option<PathBuf>,
    /// Corpus to train on; generated in memory from `corpus` when absent.
    pub corpus_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reference: ReferenceConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::FullModel.slug().into(),
            out_dir: None,
            corpus_dir: None,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            reference: ReferenceConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Loads the snapshot stored in a run directory.
    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        if !path.exists() {
            return Err(Error::Dependency(format!("{} has no {CONFIG_FILE}", dir.display())));
        }
        Self::load(Some(&path))
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    /// Propagates the global seed and the variant switches, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.reference.seed = self.seed;
        self.eval.settings.seed = self.seed;
        let variant = self.variant()?;
        variant.apply(&mut self.model, &mut self.train);
        self.variant = variant.slug().into();
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.resolve_eval()
    }

    /// Validates only the evaluation settings; used when a stored run is
    /// re-evaluated with overrides.
    pub fn resolve_eval(self) -> Result<Self> {
        self.eval.settings.mask.validate()?;
        if let Some(b) = self.eval.settings.budget {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("budget {b} outside [0, 1)")));
            }
        }
        if self.eval.settings.candidates == 0 {
            return Err(Error::Config("candidate pool must hold at least one mask".into()));
        }
        Ok(self)
    }

    pub fn geometry(&self) -> MaskGeometry {
        MaskGeometry {
            leads: self.corpus.num_leads,
            samples: self.corpus.signal_length,
            patch_length: self.corpus.patch_length,
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
    }
}
