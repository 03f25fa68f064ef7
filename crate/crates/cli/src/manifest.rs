//! Run manifests: everything needed to reproduce a command.

use std::path::Path;

use cspm::{Error, ExperimentConfig, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: &'a [String],
    seed: u64,
    build: Build,
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    extra: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct Build {
    version: &'static str,
    /// SHA-256 of the running executable.
    hash: String,
}

fn build_hash() -> String {
    std::env::current_exe()
        .and_then(std::fs::read)
        .map(|bytes| format!("{:x}", Sha256::digest(bytes)))
        .unwrap_or_else(|_| "unknown".into())
}

pub fn write(
    dir: &Path,
    command: &str,
    args: &[String],
    seed: u64,
    config: &ExperimentConfig,
    extra: serde_json::Value,
) -> Result<()> {
    let m = Manifest {
        command,
        args,
        seed,
        build: Build {
            version: env!("CARGO_PKG_VERSION"),
            hash: build_hash(),
        },
        config,
        extra,
    };
    let path = dir.join(format!("manifest_{command}.json"));
    let text = serde_json::to_string_pretty(&m)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
