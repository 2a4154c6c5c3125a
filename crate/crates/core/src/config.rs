//! Run configuration: one TOML document with `dataset`, `sampler`, `mining`,
//! `curriculum`, `trainer` and `downstream` sections.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Overrides are dotted `KEY=VALUE` pairs applied after the file; unknown keys
//! are rejected with their full path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumConfig;
use crate::dataset::{AugConfig, SyntheticSpec};
use crate::downstream::FinetuneConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::trainer::{MiningConfig, PretrainConfig, PretrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Frame-directory manifest. When unset the synthetic corpus is used.
    pub manifest: Option<PathBuf>,
    /// Root that manifest directories are relative to (defaults to the manifest's directory).
    pub root: Option<PathBuf>,
    /// Labeled images for fine-tuning (`path,label,patient_id` CSV). When
    /// unset, labeled frames are cut from the synthetic corpus.
    pub labels: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Held-out synthetic videos used only for the downstream task.
    pub downstream_synthetic: SyntheticSpec,
    /// Labeled synthetic frames per class per video.
    pub labeled_per_class: usize,
    pub augment: AugConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            root: None,
            labels: None,
            synthetic: SyntheticSpec::default(),
            downstream_synthetic: SyntheticSpec {
                num_videos: 20,
                seed: 1001,
                ..SyntheticSpec::default()
            },
            labeled_per_class: 6,
            augment: AugConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds sampling, initialization, training order and fold assignment.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub sampler: SamplerConfig,
    pub mining: MiningConfig,
    pub curriculum: CurriculumConfig,
    pub trainer: PretrainConfig,
    pub downstream: FinetuneConfig,
}

/// Parses a command-line value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::config(key, "empty key segment"));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    Ok(())
}

/// Overlays `user` onto `base`, descending into sections present in both.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// First key path in `user` that is absent from `known`.
fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (toml::Value::Table(u), Some(toml::Value::Table(d))) => {
                if let Some(p) = unknown_key(u, d, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

impl RunConfig {
    /// Parses a TOML document on top of the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let defaults = toml::Table::try_from(Self::default()).expect("defaults serialize");
        let mut merged = defaults.clone();
        merge(&mut merged, table.clone());
        match merged.try_into::<Self>() {
            Ok(cfg) => {
                cfg.validate()?;
                Ok(cfg)
            }
            Err(e) => {
                let msg = e.message().to_string();
                match unknown_key(&table, &defaults, "") {
                    Some(path) if msg.contains("unknown field") => Err(Error::config(path, "unknown key")),
                    _ => Err(Error::config(field_from_message(&msg).unwrap_or_default(), msg)),
                }
            }
        }
    }

    /// Reads `path` (if any) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    reason: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        Self::from_table(table)
    }

    /// The effective configuration as TOML; loading it yields `self` again.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_setup().validate()?;
        self.dataset.synthetic.validate()?;
        self.dataset.downstream_synthetic.validate()?;
        self.finetune_config().validate()
    }

    pub fn pretrain_setup(&self) -> PretrainSetup {
        PretrainSetup {
            trainer: PretrainConfig {
                seed: self.seed,
                ..self.trainer.clone()
            },
            sampler: SamplerConfig {
                seed: self.seed,
                ..self.sampler.clone()
            },
            curriculum: self.curriculum.clone(),
            mining: self.mining.clone(),
            augment: self.dataset.augment.clone(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed,
            ..self.downstream.clone()
        }
    }
}

/// Pulls a field name out of serde messages like "invalid type ... for key `trainer.epochs`".
fn field_from_message(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::CurriculumMode;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.mining.tau, 0.07);
        assert_eq!(cfg.trainer.momentum, 0.999);
        assert_eq!(cfg.downstream.optimizer.weight_decay, 5e-4);
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.curriculum.mode = CurriculumMode::Anti;
        cfg.dataset.augment.crop = Some((12, 12));
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[trainer]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("trainer.epochz"), "{err}");
        let err = RunConfig::from_toml("[curriculum]\ndelta_low = 3\n").unwrap_err();
        assert!(err.to_string().contains("curriculum.delta_low"), "{err}");
    }

    #[test]
    fn overrides_win() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[sampler]\nk = 2\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[
                ("sampler.k".into(), "5".into()),
                ("curriculum.mode".into(), "control".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.sampler.k, 5);
        assert_eq!(cfg.curriculum.mode, CurriculumMode::Control);
        assert_eq!(cfg.pretrain_setup().trainer.seed, 1);
    }

    #[test]
    fn partial_section_keeps_parent_defaults() {
        let cfg = RunConfig::load(None, &[("dataset.downstream_synthetic.noise".into(), "0.1".into())]).unwrap();
        let d = DatasetConfig::default().downstream_synthetic;
        assert_eq!(cfg.dataset.downstream_synthetic.seed, d.seed);
        assert_eq!(cfg.dataset.downstream_synthetic.num_videos, d.num_videos);
        assert_eq!(cfg.dataset.downstream_synthetic.noise, 0.1);
    }

    #[test]
    fn invalid_value_reports_key() {
        let err = RunConfig::load(None, &[("trainer.epochs".into(), "0".into())]).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("trainer.epochs"), "{err}");
    }
}
