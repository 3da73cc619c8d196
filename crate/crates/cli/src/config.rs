//! Run configuration file.

use std::path::{Path, PathBuf};

use mosnet::alignment::AlignConfig;
use mosnet::datasets::{SceneLayout, SplitSpec};
use mosnet::inference::PostprocessConfig;
use mosnet::labelspace::{AnnotationSource, RawAnnotationCodec};
use mosnet::model::ModelConfig;
use mosnet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub source: AnnotationSource,
    /// Overrides the source's default directory layout.
    pub layout: Option<SceneLayout>,
    /// Resize frames and masks to the model input size on load.
    pub resize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            source: AnnotationSource::Cdnet,
            layout: None,
            resize: true,
        }
    }
}

impl DatasetConfig {
    pub fn layout(&self) -> SceneLayout {
        self.layout.clone().unwrap_or_else(|| match self.source {
            AnnotationSource::Lasiesta => SceneLayout::lasiesta(),
            _ => SceneLayout::cdnet(),
        })
    }

    pub fn codec(&self) -> RawAnnotationCodec {
        RawAnnotationCodec::for_source(self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSection {
    pub enabled: bool,
    pub params: AlignConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// VGG-16 weights (`.npz`) for the encoder; random init when absent.
    pub pretrained: Option<PathBuf>,
    /// Mini-batch size used at prediction time.
    pub predict_batch_size: usize,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alignment: AlignmentSection,
    pub postprocess: PostprocessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            pretrained: None,
            predict_batch_size: 4,
            dataset: DatasetConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            alignment: AlignmentSection::default(),
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML file, applying `key.path=value` overrides first.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, String> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks that need no data on disk.
    pub fn validate(&self) -> CliResult<()> {
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.postprocess.validate()?;
        if self.predict_batch_size == 0 {
            return Err(CliError::Config("predict_batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Resolve a scene name (e.g. `baseline/highway`) under the dataset root.
    pub fn scene_path(&self, scene: &str) -> PathBuf {
        self.dataset.root.join(scene)
    }

    pub fn resize_to(&self) -> Option<(usize, usize)> {
        self.dataset.resize.then_some(self.model.input_hw)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not key=value"))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("override `{spec}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.split.development_scenes = vec!["baseline/highway".into()];
        cfg.alignment.enabled = true;
        cfg.model.input_hw = (64, 96);
        let back = RunConfig::parse(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse(
            "output_dir = \"x\"\n",
            &["train.max_epochs=2".into(), "output_dir=runs/y".into(), "model.input_hw=[8, 8]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.max_epochs, 2);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/y"));
        assert_eq!(cfg.model.input_hw, (8, 8));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nepochs = 3\n", &[]).is_err());
    }
}
