use std::path::Path;

use anyhow::Context;
use demandcast::cubist::CubistConfig;
use demandcast::dataset::{GeneratorConfig, Week};
use demandcast::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub train_ends: Vec<Week>,
    pub horizon: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            train_ends: vec![68, 72, 74],
            horizon: 4,
        }
    }
}

/// Everything a run can be configured with. Sections mirror the library
/// configs; a top-level `seed` applies to every section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub generate: GeneratorConfig,
    pub train: TrainConfig,
    pub cubist: CubistConfig,
    pub evaluate: EvaluateSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = toml::from_str(&text).map_err(demandcast::Error::from)?;
        Ok(config)
    }

    /// Applies the seed precedence: flag or `DEMANDCAST_SEED`, then the
    /// file's top-level `seed`, then each section's own value.
    pub fn resolve_seed(&mut self, cli_seed: Option<u64>) {
        if let Some(seed) = cli_seed.or(self.seed) {
            self.seed = Some(seed);
            self.generate.seed = seed;
            self.train.seed = seed;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }
}

pub fn parse_weeks(text: &str) -> anyhow::Result<Vec<Week>> {
    text.split(',')
        .map(|w| {
            w.trim()
                .parse::<Week>()
                .map_err(|e| demandcast::Error::Config(format!("bad week {w:?}: {e}")).into())
        })
        .collect()
}
