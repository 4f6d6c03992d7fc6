//! Flat TOML run configuration: every model and training field at top level.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sgdiff::model::ModelConfig;
use sgdiff::trainer::TrainConfig;
use toml::Table;

/// Data-generation knobs that sit alongside the model and training fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scenes: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scenes: 2000, val: 200, test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("config structs serialize to tables")
}

impl RunConfig {
    /// Desk-scale defaults used when no file is given.
    pub fn desk() -> Self {
        Self { model: ModelConfig::desk(), train: TrainConfig::desk(), data: DataConfig::default() }
    }

    /// Overlays `text` on `self`. Unknown keys, duplicated keys and nested
    /// tables are errors.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let file: Table = text.parse().context("config is not valid TOML")?;
        let (mut m, mut t, mut d) = (table(&self.model), table(&self.train), table(&self.data));
        for (k, v) in file {
            if v.is_table() {
                bail!("config key `{k}`: nested tables are not supported");
            }
            let slot = [&mut m, &mut t, &mut d].into_iter().find(|tb| tb.contains_key(&k));
            match slot {
                Some(tb) => {
                    tb.insert(k, v);
                }
                None => bail!("unknown config key `{k}`"),
            }
        }
        Ok(Self {
            model: m.try_into().context("model settings")?,
            train: t.try_into().context("training settings")?,
            data: d.try_into().context("data settings")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::desk().overlay(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every field as flat TOML.
    pub fn to_toml(&self) -> String {
        let mut all = table(&self.model);
        all.extend(table(&self.train));
        all.extend(table(&self.data));
        toml::to_string(&all).expect("flat table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sgdiff::trainer::Objective;

    #[test]
    fn round_trips_every_field() {
        let mut c = RunConfig::desk();
        c.model.d = 48;
        c.model.filter = false;
        c.train.objective = Objective::MaskOnly;
        c.train.lambda2 = 0.0;
        c.data.scenes = 10;
        let back = RunConfig::default().overlay(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_mistyped_keys() {
        let base = RunConfig::desk();
        assert!(base.overlay("learning_rate = 0.1").unwrap_err().to_string().contains("learning_rate"));
        assert!(base.overlay("d = \"wide\"").is_err());
        assert!(base.overlay("[model]\nd = 3").is_err());
        let c = base.overlay("lr = 0.01\nobjective = \"caption-only\"").unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.objective, Objective::CaptionOnly);
    }
}
