//! Strict JSON loading of training configurations.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Parses a training configuration. Unknown keys and type errors are reported with the
/// JSON path of the offending value; keys that are absent take their desk defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { "top level".to_string() } else { format!("`{path}`") };
        Error::Config(format!("at {at}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_train_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn to_json(cfg: &TrainConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for cfg in [TrainConfig::desk(), TrainConfig::paper()] {
            assert_eq!(parse_train_config(&to_json(&cfg).unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_train_config(r#"{"learning_rat": 0.1}"#).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
        let err = parse_train_config(r#"{"pin": {"d": 32, "depth": 2}}"#).unwrap_err().to_string();
        assert!(err.contains("depth") && err.contains("pin"), "{err}");
    }

    #[test]
    fn type_errors_carry_paths() {
        let err = parse_train_config(r#"{"prior": {"n_min": "many"}}"#).unwrap_err().to_string();
        assert!(err.contains("prior.n_min"), "{err}");
    }

    #[test]
    fn partial_documents_fill_defaults_and_validate() {
        let cfg = parse_train_config(r#"{"steps": 50, "warmup_steps": 5, "pin_loss": "match_ce"}"#).unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.batch_tasks, TrainConfig::desk().batch_tasks);
        assert!(parse_train_config(r#"{"steps": 5, "warmup_steps": 10}"#).is_err());
    }
}
