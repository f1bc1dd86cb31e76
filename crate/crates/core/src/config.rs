//! The merged run configuration: defaults, then a TOML file, then dotted
//! `key=value` overrides, with the origin of every field recorded.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::geometry::{HomographyConfig, PhotometricConfig};
use crate::ionet::IoNetConfig;
use crate::losses::LossConfig;
use crate::model::KeypointNetConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub homography: HomographyConfig,
    pub photometric: PhotometricConfig,
    pub model: KeypointNetConfig,
    pub loss: LossConfig,
    pub ionet: IoNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Where a field's value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Model fields that the ablation variant controls.
const VARIANT_FIELDS: [&str; 2] = ["model.cross_border", "model.descriptor_upsample"];

impl RunConfig {
    /// Sets the model flags implied by `train.ablation_variant`.
    pub fn apply_variant(&mut self) {
        let v = self.train.ablation_variant;
        self.model.cross_border = v.cross_border();
        self.model.descriptor_upsample = v.descriptor_upsample();
    }

    pub fn validate(&self) -> Result<()> {
        self.homography.validate()?;
        self.photometric.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.ionet.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let v = self.train.ablation_variant;
        for (field, actual, wanted) in [
            (VARIANT_FIELDS[0], self.model.cross_border, v.cross_border()),
            (VARIANT_FIELDS[1], self.model.descriptor_upsample, v.descriptor_upsample()),
        ] {
            if actual != wanted {
                return Err(Error::config(field, format!("{actual} conflicts with train.ablation_variant {v}, which requires {wanted}")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// A validated configuration plus per-field provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

impl ResolvedConfig {
    pub fn source(&self, field: &str) -> Option<Source> {
        self.provenance.get(field).copied()
    }

    /// `field = value  # source` lines, one per leaf field.
    pub fn describe(&self) -> Result<String> {
        let value = toml::Value::try_from(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut leaves = BTreeMap::new();
        collect_leaves(&value, "", &mut leaves);
        Ok(leaves
            .iter()
            .map(|(k, v)| format!("{k} = {v}  # {}\n", self.provenance.get(k).copied().unwrap_or(Source::Default)))
            .collect())
    }
}

fn collect_leaves(v: &toml::Value, prefix: &str, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_leaves(child, &path, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value, prefix: &str, provenance: &mut BTreeMap<String, Source>) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v, &path, provenance),
                    _ => {
                        let mut leaves = BTreeMap::new();
                        collect_leaves(&v, &path, &mut leaves);
                        for leaf in leaves.into_keys() {
                            provenance.insert(leaf, Source::File);
                        }
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| Error::config(path, "not a table"))?;
        if i + 1 == parts.len() {
            match table.get(*part) {
                Some(existing) if existing.is_table() => return Err(Error::config(path, "names a section, not a field")),
                Some(_) => {
                    table.insert(part.to_string(), value);
                    return Ok(());
                }
                None => return Err(Error::config(path, "unknown field")),
            }
        }
        node = table.get_mut(*part).ok_or_else(|| Error::config(path, "unknown field"))?;
    }
    Err(Error::config(path, "empty field path"))
}

fn deserialize(value: toml::Value) -> Result<RunConfig> {
    value.try_into().map_err(|e: toml::de::Error| {
        let msg = e.to_string();
        Error::config("config", msg.trim().to_string())
    })
}

/// Merges defaults, an optional TOML file and `key=value` overrides. Model
/// flags left at their defaults follow the ablation variant; explicit
/// values that contradict it are rejected.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
    let text = match file {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    resolve_str(text.as_deref(), overrides)
}

/// [`resolve`] on in-memory TOML text.
pub fn resolve_str(file_text: Option<&str>, overrides: &[String]) -> Result<ResolvedConfig> {
    let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Format(e.to_string()))?;
    let mut provenance = BTreeMap::new();
    let mut defaults = BTreeMap::new();
    collect_leaves(&value, "", &mut defaults);
    for k in defaults.into_keys() {
        provenance.insert(k, Source::Default);
    }
    if let Some(text) = file_text {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("config file", e.to_string().trim().to_string()))?;
        merge(&mut value, toml::Value::Table(table), "", &mut provenance);
        // Reject unknown keys from the file with their full path.
        deserialize(value.clone())?;
    }
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.as_str(), "override must look like section.field=value"))?;
        let key = key.trim();
        set_path(&mut value, key, parse_override_value(raw.trim()))?;
        provenance.insert(key.to_string(), Source::Flag);
    }
    let mut config = deserialize(value)?;
    let v = config.train.ablation_variant;
    if provenance.get(VARIANT_FIELDS[0]) == Some(&Source::Default) {
        config.model.cross_border = v.cross_border();
    }
    if provenance.get(VARIANT_FIELDS[1]) == Some(&Source::Default) {
        config.model.descriptor_upsample = v.descriptor_upsample();
    }
    config.validate()?;
    Ok(ResolvedConfig { config, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::AblationVariant;

    #[test]
    fn defaults_validate_and_round_trip() {
        let r = resolve_str(None, &[]).unwrap();
        assert_eq!(r.config, RunConfig::default());
        assert_eq!(r.source("train.learning_rate"), Some(Source::Default));
        let text = r.config.to_toml().unwrap();
        assert_eq!(resolve_str(Some(&text), &[]).unwrap().config, r.config);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = "[train]\nepochs = 7\nlr_halve_epoch = 3\n";
        let r = resolve_str(Some(file), &["train.epochs=9".into()]).unwrap();
        assert_eq!(r.config.train.epochs, 9);
        assert_eq!(r.config.train.lr_halve_epoch, 3);
        assert_eq!(r.source("train.epochs"), Some(Source::Flag));
        assert_eq!(r.source("train.lr_halve_epoch"), Some(Source::File));
        assert_eq!(r.source("train.batch_size"), Some(Source::Default));
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = resolve_str(Some("[train]\nepochz = 3\n"), &[]).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = resolve_str(None, &["train.nope=1".into()]).unwrap_err().to_string();
        assert!(err.contains("train.nope"), "{err}");
    }

    #[test]
    fn variant_sets_model_flags_and_rejects_conflicts() {
        let r = resolve_str(None, &["train.ablation_variant=\"V0\"".into()]).unwrap();
        assert!(!r.config.model.cross_border && !r.config.model.descriptor_upsample);
        assert_eq!(r.config.train.ablation_variant, AblationVariant::V0);
        let bad = resolve_str(None, &["train.ablation_variant=V0".into(), "model.cross_border=true".into()]);
        let err = bad.unwrap_err().to_string();
        assert!(err.contains("model.cross_border"), "{err}");
    }

    #[test]
    fn validation_failures_name_the_field() {
        let err = resolve_str(None, &["train.lr_halve_epoch=60".into()]).unwrap_err().to_string();
        assert!(err.contains("train.lr_halve_epoch"), "{err}");
        let err = resolve_str(None, &["eval.resolution=[241, 320]".into()]).unwrap_err().to_string();
        assert!(err.contains("eval.resolution"), "{err}");
    }
}
