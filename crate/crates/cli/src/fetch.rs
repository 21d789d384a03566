//! `fetch-data`: a thin wrapper around the bundled download script.

use std::path::Path;
use std::process::Command;

use crate::error::CliError;

const SCRIPT: &str = include_str!("../../../scripts/fetch_data.sh");

pub fn fetch(root: &Path, dataset: &str) -> Result<(), CliError> {
    if !matches!(dataset, "mnist" | "cifar10" | "all") {
        return Err(CliError::Config(format!(
            "unknown dataset `{dataset}` (expected mnist, cifar10 or all)"
        )));
    }
    let status = Command::new("bash")
        .arg("-c")
        .arg(SCRIPT)
        .arg("fetch_data.sh")
        .arg(root)
        .arg(dataset)
        .status()
        .map_err(|e| CliError::io("running bash", e))?;
    if status.success() {
        Ok(())
    } else {
        Err(staer_core::Error::Dataset(format!("download script failed ({status})")).into())
    }
}
