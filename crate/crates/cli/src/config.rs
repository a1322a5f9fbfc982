use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use ribcam::metrics::HitRule;
use ribcam::postprocess::PostprocessConfig;
use ribcam::sampling::SamplingConfig;
use ribcam::training::TrainConfig;

use crate::Failure;

pub const OUTPUT_ROOT_ENV: &str = "RIBCAM_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub stride: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            stride: ribcam::inference::DEFAULT_STRIDE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub hit_rule: HitRule,
}

/// Everything a run needs; one file drives train, infer and eval.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub postprocess: PostprocessConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Read `path` (or start from defaults) and apply `key.path=value`
    /// overrides, where `value` is a TOML literal or a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))
                    .map_err(Failure::Validation)?;
                let mut t: toml::Table = text
                    .parse()
                    .with_context(|| format!("parsing config {}", p.display()))
                    .map_err(Failure::Validation)?;
                rebase_paths(&mut t, p.parent().unwrap_or(Path::new(".")));
                t
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o).map_err(Failure::Validation)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .context("invalid config")
            .map_err(Failure::Validation)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Report every problem at once.
    pub fn validate(&self) -> Result<(), Failure> {
        let mut problems = self.train.problems();
        if let Err(e) = self.sampling.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.postprocess.validate() {
            problems.push(e.to_string());
        }
        if self.infer.stride == 0 {
            problems.push("infer.stride must be >= 1".into());
        }
        if self.sampling.patch_edge != self.train.model.patch_edge {
            problems.push(format!(
                "sampling.patch_edge {} differs from train.model.patch_edge {}",
                self.sampling.patch_edge, self.train.model.patch_edge
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Failure::Validation(anyhow!(
                "config has {} problem(s):\n  - {}",
                problems.len(),
                problems.join("\n  - ")
            )))
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Relative input paths in a config file are taken relative to the file.
fn rebase_paths(doc: &mut toml::Table, base: &Path) {
    let Some(toml::Value::Table(train)) = doc.get_mut("train") else {
        return;
    };
    for key in ["cache_manifest", "val_manifest"] {
        if let Some(toml::Value::String(s)) = train.get_mut(key) {
            if Path::new(s).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        }
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let value = parse_literal(raw.trim());
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Relative output paths land under the output root when one is set.
pub fn output_path(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}
