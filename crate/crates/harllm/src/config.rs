//! Experiment configuration: one JSON document drives every subcommand.
//! Every field has a default, so `{}` is a valid config; CLI flags override
//! the corresponding keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, LoraConfig};
use crate::data::synth::{synth_label_names, SynthSpec};
use crate::data::SplitSpec;
use crate::frontend::FrontendConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Built-in generator; labels come from the generator's vocabulary.
    Synth {
        #[serde(default)]
        spec: SynthSpec,
    },
    /// Directory of recording CSVs sharing one declared label vocabulary.
    Csv { dir: PathBuf, labels: Vec<String> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth { spec: SynthSpec::default() }
    }
}

impl DataSource {
    pub fn label_names(&self) -> Vec<String> {
        match self {
            DataSource::Synth { spec } => synth_label_names(spec.n_classes),
            DataSource::Csv { labels, .. } => labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Window length in samples.
    pub w: usize,
    pub overlap: f64,
    /// Resample CSV recordings to this rate before windowing.
    pub rate: Option<f64>,
    pub split: SplitSpec,
    /// Directory written by `prepare` and read by the other commands.
    pub prepared: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::default(),
            w: 128,
            overlap: 0.5,
            rate: None,
            split: SplitSpec::default(),
            prepared: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: vec![1.0, 0.2, 0.1, 0.01],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LodoConfig {
    /// Domain held out of stage-1 training.
    pub target: String,
    /// Training domains; defaults to every domain except the target.
    #[serde(default)]
    pub sources: Option<Vec<String>>,
    #[serde(default = "default_lodo_fractions")]
    pub fractions: Vec<f64>,
}

fn default_lodo_fractions() -> Vec<f64> {
    vec![0.01, 0.1, 0.2, 0.5, 0.8]
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub backbone: BackboneConfig,
    /// Tensor archive holding pretrained backbone weights under published
    /// GPT-2 names. Fresh random weights otherwise.
    pub backbone_weights: Option<PathBuf>,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub lodo: Option<LodoConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.backbone.validate()?;
        self.lora.validate()?;
        self.train.validate()?;
        if self.frontend.d_llm != self.backbone.d_model {
            return Err(Error::config(format!(
                "token width {} does not match backbone width {}",
                self.frontend.d_llm, self.backbone.d_model
            )));
        }
        if self.data.w == 0 {
            return Err(Error::config("data.w must be positive"));
        }
        if self.data.w % self.frontend.l != 0 {
            return Err(Error::config(format!(
                "window length {} is not divisible by frame length {}",
                self.data.w, self.frontend.l
            )));
        }
        if !(0.0..1.0).contains(&self.data.overlap) {
            return Err(Error::config("data.overlap must lie in [0, 1)"));
        }
        let labels = self.data.source.label_names();
        if labels.len() < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        for list in [&self.sweep.fractions, &self.lodo.as_ref().map(|l| l.fractions.clone()).unwrap_or_default()] {
            for &f in list {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config(format!(
                        "fraction {f} outside (0, 1]"
                    )));
                }
            }
        }
        if self.sweep.fractions.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::config("sweep needs at least one fraction and one seed"));
        }
        if let Some(lodo) = &self.lodo {
            if lodo.target.is_empty() {
                return Err(Error::config("lodo.target must name a domain"));
            }
            if let Some(sources) = &lodo.sources {
                if sources.iter().any(|s| s == &lodo.target) {
                    return Err(Error::config(format!(
                        "target domain `{}` appears in the source list",
                        lodo.target
                    )));
                }
                if sources.is_empty() {
                    return Err(Error::config("lodo.sources must not be empty"));
                }
            }
            if lodo.fractions.is_empty() {
                return Err(Error::config("lodo.fractions must not be empty"));
            }
        }
        Ok(())
    }

    /// Digest of the effective config, flag overrides included. The output
    /// directory is where results land, not what they are, so it is left
    /// out: the same experiment hashes the same wherever it is written.
    pub fn sha256_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut identity = self.clone();
        identity.out = None;
        let bytes = serde_json::to_vec(&identity).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
