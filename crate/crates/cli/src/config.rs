use std::fs;
use std::path::{Path, PathBuf};

use gadt3::pipeline::RunConfig;
use gadt3::{Error, Result};
use serde_json::Value;

/// Config file contents: a `RunConfig` plus the path keys below.
#[derive(Debug, Clone, Default)]
pub struct CliConfig {
    pub run: RunConfig,
    pub source_graph: Option<PathBuf>,
    pub target_graph: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

const PATH_KEYS: [&str; 3] = ["source_graph", "target_graph", "output_dir"];

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::Config(format!("cannot read {}: {e}", path.display())),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let mut paths: [Option<PathBuf>; 3] = Default::default();
        for (slot, key) in paths.iter_mut().zip(PATH_KEYS) {
            *slot = match map.remove(key) {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(PathBuf::from(s)),
                Some(other) => return Err(Error::Config(format!("{key} must be a string, got {other}"))),
            };
        }
        let run: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        let [source_graph, target_graph, output_dir] = paths;
        Ok(CliConfig {
            run,
            source_graph,
            target_graph,
            output_dir,
        })
    }
}

/// Process exit status for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        gadt3::ErrorKind::Config => 1,
        gadt3::ErrorKind::Data => 2,
        gadt3::ErrorKind::Numerical => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_keys_are_split_off() {
        let c = CliConfig::parse(r#"{"lr": 0.01, "source_graph": "g/src", "output_dir": "runs/a"}"#).unwrap();
        assert_eq!(c.run.lr, 0.01);
        assert_eq!(c.source_graph, Some(PathBuf::from("g/src")));
        assert_eq!(c.target_graph, None);
        assert_eq!(c.output_dir, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = CliConfig::parse(r#"{"learning_rate": 0.01}"#).unwrap_err();
        assert_eq!(exit_code(&err), 1);
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(CliConfig::parse("[1]").is_err());
        assert!(CliConfig::parse(r#"{"target_graph": 3}"#).is_err());
    }
}
