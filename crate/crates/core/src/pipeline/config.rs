use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::read_input;
use crate::error::{Error, Result};
use crate::eval_stats::Pairing;
use crate::models::{ModelSpec, Variant};
use crate::phantom::PhantomConfig;
use crate::preprocess::AugmentConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Center,
    #[default]
    Smart,
    Oracle,
}

impl CropMode {
    pub const ALL: [CropMode; 3] = [CropMode::Center, CropMode::Smart, CropMode::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            CropMode::Center => "center",
            CropMode::Smart => "smart",
            CropMode::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for CropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Frame in which segmentations are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalFrame {
    #[default]
    Cropped,
    /// Predictions are pasted back into the center-cropped frame.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    /// Side of the centered window cut from every slice first.
    pub center_crop: usize,
    /// Growth of label boxes used as coarse targets, pixels.
    pub margin: usize,
    /// Probability at which coarse maps count as foreground.
    pub threshold: f32,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            center_crop: 96,
            margin: 16,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::tiny(Variant::UNet, 32),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldConfig {
    pub k: usize,
    pub seed: u64,
    /// Share of each fold's training patients held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            validation_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pairing: Pairing,
    pub frame: EvalFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Path of the dataset manifest.
    pub dataset: PathBuf,
    pub phantom: PhantomConfig,
    pub geometry: Geometry,
    pub crop_mode: CropMode,
    /// Augment training slices of the segmenter.
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    /// Min-max normalize after augmentation (otherwise before).
    pub normalize_after_augment: bool,
    pub coarse: CoarseConfig,
    /// Segmenter layout; `variant` is replaced by each entry of
    /// `architectures`.
    pub segmenter: ModelSpec,
    pub architectures: Vec<Variant>,
    pub train: TrainConfig,
    pub folds: FoldConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/manifest.json"),
            phantom: PhantomConfig::default(),
            geometry: Geometry::default(),
            crop_mode: CropMode::default(),
            augment_enabled: true,
            augment: AugmentConfig::default(),
            normalize_after_augment: true,
            coarse: CoarseConfig::default(),
            segmenter: ModelSpec {
                depth: 3,
                input_size: 32,
                ..ModelSpec::default()
            },
            architectures: Variant::ALL.to_vec(),
            train: TrainConfig::default(),
            folds: FoldConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn field_err(field: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {e}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        let g = &self.geometry;
        if g.center_crop == 0 {
            return Err(field_err("geometry.center_crop", "must be ≥ 1"));
        }
        if !(g.threshold > 0.0 && g.threshold < 1.0) {
            return Err(field_err("geometry.threshold", format!("{} outside (0, 1)", g.threshold)));
        }
        if !(0.0..=1.0).contains(&self.augment.copy_fraction) {
            return Err(field_err("augment.copy_fraction", "outside [0, 1]"));
        }
        if !(self.augment.shift_fraction > 0.0 && self.augment.shift_fraction < 1.0) {
            return Err(field_err("augment.shift_fraction", "outside (0, 1)"));
        }
        self.coarse.model.validate().map_err(|e| field_err("coarse.model", e))?;
        self.coarse.train.validate().map_err(|e| field_err("coarse.train", e))?;
        self.segmenter.validate().map_err(|e| field_err("segmenter", e))?;
        for &v in &self.architectures {
            ModelSpec {
                variant: v,
                ..self.segmenter.clone()
            }
            .validate()
            .map_err(|e| field_err("architectures", e))?;
        }
        if self.architectures.is_empty() {
            return Err(field_err("architectures", "must list at least one"));
        }
        let mut sorted = self.architectures.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.architectures.len() {
            return Err(field_err("architectures", "duplicate entry"));
        }
        self.train.validate().map_err(|e| field_err("train", e))?;
        if self.folds.k < 2 {
            return Err(field_err("folds.k", "must be ≥ 2"));
        }
        if !(0.0..1.0).contains(&self.folds.validation_fraction) {
            return Err(field_err("folds.validation_fraction", "outside [0, 1)"));
        }
        Ok(())
    }

    /// Segmenter spec for one architecture.
    pub fn segmenter_for(&self, variant: Variant) -> ModelSpec {
        ModelSpec {
            variant,
            ..self.segmenter.clone()
        }
    }
}

/// Sets `path` (dot-separated) in a JSON object tree. The value is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} is malformed")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "override {path}: {} is not an object",
                keys[..i].join(".")
            )));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}

/// Parses a config tree, reporting the offending field on failure.
pub fn config_from_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the optional config file and applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let bytes = read_input(p)?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    config_from_value(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load_config(None, &["train.epochs=3".into(), "crop_mode=center".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.crop_mode, CropMode::Center);
    }

    #[test]
    fn errors_name_the_field() {
        let e = load_config(None, &["train.epochs=\"many\"".into()]).unwrap_err();
        assert!(e.to_string().contains("train.epochs"), "{e}");
        let e = load_config(None, &["geometry.sizes=3".into()]).unwrap_err();
        assert!(e.to_string().contains("sizes"), "{e}");
        let e = load_config(None, &["folds.k=1".into()]).unwrap_err();
        assert!(e.to_string().contains("folds.k"), "{e}");
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(config_from_value(v).unwrap(), cfg);
    }
}
