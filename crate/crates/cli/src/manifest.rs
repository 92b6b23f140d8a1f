use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

/// Written to `<out>/manifest.json` before the command starts its work and
/// rewritten when it completes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: &'static str,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(
        command: &str,
        out: &Path,
        config_hash: Option<String>,
        seed: Option<u64>,
    ) -> anyhow::Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let m = RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_hash,
            seed,
            version: format!(
                "v{}-{}",
                env!("CARGO_PKG_VERSION"),
                env!("ROBUDEPTH_DESCRIBE")
            ),
            started_unix: now(),
            finished_unix: None,
            status: "running",
            outputs: Vec::new(),
            path: out.join("manifest.json"),
        };
        m.write()?;
        Ok(m)
    }

    pub fn finish(&mut self) -> anyhow::Result<()> {
        self.finished_unix = Some(now());
        self.status = "completed";
        self.write()
    }

    fn write(&self) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&self.path, text + "\n")
            .with_context(|| format!("writing {}", self.path.display()))
    }
}
