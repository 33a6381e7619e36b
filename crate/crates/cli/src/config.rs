//! TOML config loading.
//!
//! Train and benchmark configs are partial: keys present in the file
//! override the built-in defaults, unknown keys are rejected. Corpus specs
//! must be complete so a missing field is reported by name.

use std::path::Path;

use mdssl_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}

/// Parses `text` strictly into `T`.
pub fn parse_strict<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse(format!("{what}: {}", e.message())))
}

/// Overlays the keys of `text` onto `T::default()`, recursing into tables.
pub fn parse_over_default<T: Serialize + DeserializeOwned + Default>(text: &str, what: &str) -> Result<T> {
    let mut base = toml::Value::try_from(T::default()).map_err(|e| Error::Parse(format!("{what} defaults: {e}")))?;
    let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(format!("{what}: {}", e.message())))?;
    merge(&mut base, toml::Value::Table(overlay));
    base.try_into().map_err(|e: toml::de::Error| Error::Parse(format!("{what}: {}", e.message())))
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Parse(format!("cannot render config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdssl_core::data::CorpusSpec;
    use mdssl_core::trainer::TrainConfig;

    #[test]
    fn partial_train_config_keeps_defaults() {
        let cfg: TrainConfig = parse_over_default("steps = 7\n[loss]\ntau = 0.1\n", "train").unwrap();
        let d = TrainConfig::default();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.loss.tau, 0.1);
        assert_eq!(cfg.loss.lambda, d.loss.lambda);
        assert_eq!(cfg.batch, d.batch);
    }

    #[test]
    fn unknown_train_key_is_named() {
        let err = parse_over_default::<TrainConfig>("stepz = 7\n", "train").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(err.is_usage());
    }

    #[test]
    fn default_configs_round_trip_through_toml() {
        let text = to_toml(&TrainConfig::default()).unwrap();
        let back: TrainConfig = parse_over_default(&text, "train").unwrap();
        assert_eq!(back, TrainConfig::default());
        let text = to_toml(&CorpusSpec::default()).unwrap();
        let back: CorpusSpec = parse_strict(&text, "spec").unwrap();
        assert_eq!(back, CorpusSpec::default());
    }

    #[test]
    fn strict_spec_names_missing_field() {
        let full = to_toml(&CorpusSpec::default()).unwrap();
        let partial: String = full.lines().filter(|l| !l.starts_with("num_domains")).map(|l| format!("{l}\n")).collect();
        let err = parse_strict::<CorpusSpec>(&partial, "corpus spec").unwrap_err();
        assert!(err.to_string().contains("num_domains"), "{err}");
    }
}
