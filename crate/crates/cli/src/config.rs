//! Run configuration: defaults, then a TOML file, then `--section.key=value`
//! overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tft_core::audio::FeatureConfig;
use tft_core::evaluation::FoldMode;
use tft_core::model::Ablation;
use tft_core::training::TrainConfig;
use tft_core::{LabelSet, ModelConfig};

pub const SECTIONS: [&str; 5] = ["features", "model", "train", "eval", "io"];
pub const RESOLVED_NAME: &str = "resolved_config.toml";

/// `(section.key, raw value)` pairs from the command line.
pub type Overrides = Vec<(String, String)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: FoldMode,
    /// Folds trained concurrently.
    pub jobs: usize,
    pub ablations: Vec<Ablation>,
    /// Also export one attention matrix per head.
    pub per_head: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: FoldMode::Speaker,
            jobs: 1,
            ablations: Ablation::ALL.to_vec(),
            per_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub labels: LabelSet,
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            labels: LabelSet::iemocap(),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Merges `file` (if any) and `overrides` over the defaults.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialise");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user = toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut table, user);
        }
        for (key, value) in overrides {
            set_path(&mut table, key, parse_value(value))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.n_classes != self.io.labels.len() {
            bail!(
                "model.n_classes = {} but io.labels has {} entries",
                self.model.n_classes,
                self.io.labels.len()
            );
        }
        if self.model.n_bands != self.features.n_mels || self.model.n_frames != self.features.segment_frames {
            bail!(
                "model input {}x{} does not match features ({} mels x {} frames)",
                self.model.n_bands,
                self.model.n_frames,
                self.features.n_mels,
                self.features.segment_frames
            );
        }
        if self.eval.jobs == 0 {
            bail!("eval.jobs must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Tables merge key by key; anything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal if it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        bail!("override {key:?} must look like section.key");
    }
    if !SECTIONS.contains(&parts[0]) {
        bail!("unknown config section {:?} (expected one of {})", parts[0], SECTIONS.join(", "));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key:?}: {p} is not a table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// Pulls `--section.key=value` and `--section.key value` out of `args`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_owned())),
            None => (body, None),
        };
        let is_override = key
            .split_once('.')
            .is_some_and(|(section, _)| SECTIONS.contains(&section));
        if !is_override {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{key} needs a value"))?,
        };
        overrides.push((key.to_owned(), value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed_and_nested() {
        let o = vec![
            ("train.epochs".to_owned(), "7".to_owned()),
            ("train.lr".to_owned(), "0.5".to_owned()),
            ("eval.mode".to_owned(), "session".to_owned()),
            ("model.time_conv.out_channels".to_owned(), "32".to_owned()),
            ("io.labels".to_owned(), r#"["a", "b", "c", "d"]"#.to_owned()),
        ];
        let c = RunConfig::load(None, &o).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.eval.mode, FoldMode::Session);
        assert_eq!(c.model.time_conv.out_channels, 32);
        assert_eq!(c.model.time_conv.kernel, (5, 1));
        assert_eq!(c.io.labels.names()[3], "d");
    }

    #[test]
    fn partial_file_sections_keep_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepochs = 3\n[model.fusion_conv]\nout_channels = 8\n").unwrap();
        let c = RunConfig::load(Some(&path), &[("train.epochs".into(), "4".into())]).unwrap();
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.model.fusion_conv.out_channels, 8);
        assert_eq!(c.model.fusion_conv.stride, (2, 2));
        std::fs::write(&path, "[features]\nn_mel = 3\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &[("train.epoch".into(), "3".into())]).is_err());
        assert!(RunConfig::load(None, &[("bogus.x".into(), "3".into())]).is_err());
        assert!(RunConfig::load(None, &[("train".into(), "3".into())]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.train.seed = 9;
        c.train.checkpoint_dir = Some(dir.path().join("ck"));
        c.eval.ablations = vec![Ablation::TimeFusion];
        let path = c.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn split_recognises_sections_only() {
        let args = ["tft", "train", "--train.epochs=2", "--seed", "3", "--model.dropout", "0.1", "--out", "x"]
            .map(String::from)
            .to_vec();
        let (rest, o) = split_overrides(args).unwrap();
        assert_eq!(rest, ["tft", "train", "--seed", "3", "--out", "x"]);
        assert_eq!(o, [("train.epochs".into(), "2".into()), ("model.dropout".into(), "0.1".into())]);
    }

    #[test]
    fn mismatched_shapes_fail_validation() {
        let mut c = RunConfig::default();
        c.features.n_mels = 64;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.io.labels = LabelSet::casia();
        assert!(c.validate().is_err());
        c.model.n_classes = 6;
        c.validate().unwrap();
    }
}
