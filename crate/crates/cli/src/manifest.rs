use std::path::Path;

use serde::Serialize;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Provenance record written next to every set of artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config_path: Option<String>,
    pub config_contents: Option<String>,
    pub seed: u64,
    /// Artifact file names, relative to the output directory.
    pub artifacts: Vec<String>,
    pub version: String,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_NAME), json + "\n")
    }
}
