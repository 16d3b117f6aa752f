use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Error;

pub const TOOL: &str = "omni-embed";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const BUILD_HASH: &str = env!("OMNI_EMBED_BUILD_HASH");

/// Every report shares this envelope. `generated_at` is the only field
/// that differs between two runs with the same inputs and seed.
#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub build: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub config_hash: String,
    pub config: &'a C,
    pub result: &'a R,
    pub generated_at: String,
}

pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn render_report<C: Serialize, R: Serialize>(command: &str, seed: u64, config: &C, result: &R) -> String {
    let report = Report {
        tool: TOOL,
        version: VERSION,
        build: BUILD_HASH,
        command,
        seed,
        config_hash: config_hash(config),
        config,
        result,
        generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    text
}

/// Writes the report to `out`, or to stdout when no path is given.
pub fn emit_report<C: Serialize, R: Serialize>(
    out: Option<&Path>,
    command: &str,
    seed: u64,
    config: &C,
    result: &R,
) -> Result<(), CliError> {
    let text = render_report(command, seed, config, result);
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// A failure reported as JSON on stderr. Code 2 marks bad input (usage,
/// config, missing or malformed files); code 1 a failed run.
#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(skip)]
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Location of the offending field inside a JSON config.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage",
            message: message.into(),
            path: None,
            field: None,
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "runtime",
            message: message.into(),
            path: None,
            field: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (code, kind, path) = match e {
            Error::Io { path, .. } => (2, "io", Some(path)),
            Error::Format { path, .. } => (2, "format", Some(path)),
            Error::Json(_) => (2, "json", None),
            Error::InvalidArgument(_) | Error::UnknownId(_) | Error::DuplicateId(_) => (2, "invalid", None),
            Error::DimensionMismatch { .. } => (2, "dimension", None),
            Error::Empty(_) | Error::NonFinite(_) => (1, "runtime", None),
        };
        Self {
            code,
            kind,
            message,
            path,
            field: None,
        }
    }
}

/// Reads a JSON config, naming the failing field path on error.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError {
            code: 2,
            kind: "config",
            message: e.into_inner().to_string(),
            path: Some(path.to_path_buf()),
            field: Some(field),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"seed": 1, "k": [1, 2]}));
        assert_eq!(a, config_hash(&serde_json::json!({"seed": 1, "k": [1, 2]})));
        assert_ne!(a, config_hash(&serde_json::json!({"seed": 2, "k": [1, 2]})));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn config_error_names_field() {
        #[derive(Debug, serde::Deserialize)]
        #[allow(dead_code)]
        struct Inner {
            steps: usize,
        }
        #[derive(Debug, serde::Deserialize)]
        #[allow(dead_code)]
        struct Outer {
            stages: Vec<Inner>,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"stages": [{"steps": 3}, {"steps": "many"}]}"#).unwrap();
        let err = load_config::<Outer>(&path).unwrap_err();
        assert_eq!(err.code, 2);
        assert_eq!(err.field.as_deref(), Some("stages[1].steps"));
    }
}
