//! Run configuration: every hyperparameter of an experiment in one JSON
//! document, with command-line overrides layered on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, Modalities};
use crate::spectral::FgoMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Training is always single-threaded with a fixed reduction order; the
    /// flag is recorded so that artifacts state how they were produced.
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub ablate: Vec<String>,
    pub modalities: Option<String>,
    pub mode: Option<String>,
    pub depth: Option<usize>,
}

/// Turns on one ablation switch by its short name.
pub fn apply_ablation(ablation: &mut Ablation, name: &str) -> Result<()> {
    match name {
        "se" => ablation.no_speaker = true,
        "cl" => ablation.no_contrastive = true,
        "fgn" => ablation.spatial_baseline = true,
        "high" => ablation.no_high_band = true,
        other => {
            return Err(Error::invalid_config(format!(
                "unknown ablation '{other}' (expected se, cl, fgn or high)"
            )))
        }
    }
    Ok(())
}

pub fn parse_mode(s: &str) -> Result<FgoMode> {
    match s {
        "circulant" => Ok(FgoMode::Circulant),
        "free" => Ok(FgoMode::Free),
        other => Err(Error::invalid_config(format!("unknown mode '{other}' (expected circulant or free)"))),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::invalid_config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::invalid_config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies command-line values; flags win over the file.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if o.deterministic {
            self.deterministic = true;
        }
        for name in &o.ablate {
            apply_ablation(&mut self.model.ablation, name)?;
        }
        if let Some(m) = &o.modalities {
            self.model.modalities = m.parse::<Modalities>()?;
        }
        if let Some(mode) = &o.mode {
            self.model.mode = parse_mode(mode)?;
        }
        if let Some(depth) = o.depth {
            self.model.depth = depth;
        }
        self.validate()
    }
}
