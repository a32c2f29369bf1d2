//! Artifact output with a checksum chain.
//!
//! The chain starts from the hash of the effective configuration and seed.
//! Each artifact embeds the chain value current when it was written, then
//! the chain advances to `sha256(previous || sha256(artifact))`. The
//! manifest lists every artifact with its hash and the final chain value.
//! Wall-clock timings go to `timing.json`, outside the chain, so that a
//! rerun reproduces every other file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "cfl";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub chain: String,
}

#[derive(Debug, Clone, Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    chain: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    provenance: &'a Provenance,
    config: &'a serde_json::Value,
    artifacts: &'a [ManifestEntry],
    final_chain: &'a str,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    provenance: &'a Provenance,
    data: &'a T,
}

#[derive(Serialize)]
struct StageTime {
    stage: String,
    seconds: f64,
}

pub struct ArtifactWriter {
    dir: PathBuf,
    command: String,
    config: serde_json::Value,
    config_sha256: String,
    seed: Option<u64>,
    chain: String,
    entries: Vec<ManifestEntry>,
    started: Instant,
    stage_started: Instant,
    stages: Vec<StageTime>,
    quiet: bool,
}

impl ArtifactWriter {
    pub fn new(
        dir: &Path,
        command: &str,
        config: &impl Serialize,
        seed: Option<u64>,
        quiet: bool,
    ) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let config = serde_json::to_value(config)?;
        let config_sha256 = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        let chain = sha256_hex(format!("{config_sha256}:{seed:?}").as_bytes());
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config,
            config_sha256,
            seed,
            chain,
            entries: Vec::new(),
            started: Instant::now(),
            stage_started: Instant::now(),
            stages: Vec::new(),
            quiet,
        })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool: TOOL,
            version: VERSION,
            command: self.command.clone(),
            config_sha256: self.config_sha256.clone(),
            seed: self.seed,
            chain: self.chain.clone(),
        }
    }

    /// Closes the timing of the current stage.
    pub fn stage_done(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages.push(StageTime {
            stage: stage.to_string(),
            seconds: (now - self.stage_started).as_secs_f64(),
        });
        self.stage_started = now;
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let digest = sha256_hex(bytes);
        self.chain = sha256_hex(format!("{}{}", self.chain, digest).as_bytes());
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            sha256: digest,
            chain: self.chain.clone(),
        });
        if !self.quiet {
            println!("wrote {}", path.display());
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, data: &T) -> anyhow::Result<()> {
        let provenance = self.provenance();
        let mut text = serde_json::to_string_pretty(&Envelope {
            provenance: &provenance,
            data,
        })?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes rows under a header, preceded by a `#` provenance line.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
        let p = self.provenance();
        let mut buf = format!(
            "# {} {} {} config={} chain={}\n",
            p.tool, p.version, p.command, p.config_sha256, p.chain
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        self.write(name, &buf)
    }

    /// `svg` must contain the `{{provenance}}` placeholder, which is replaced
    /// by a metadata element.
    pub fn svg(&mut self, name: &str, svg: &str) -> anyhow::Result<()> {
        let meta = format!(
            "<metadata id=\"provenance\">{}</metadata>",
            serde_json::to_string(&self.provenance())?
        );
        self.write(name, svg.replace("{{provenance}}", &meta).as_bytes())
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        let provenance = self.provenance();
        let manifest = Manifest {
            provenance: &provenance,
            config: &self.config,
            artifacts: &self.entries,
            final_chain: &self.chain,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        let timing = serde_json::json!({
            "command": self.command,
            "wall_seconds": self.started.elapsed().as_secs_f64(),
            "stages": std::mem::take(&mut self.stages),
        });
        fs::write(
            self.dir.join("timing.json"),
            serde_json::to_string_pretty(&timing)? + "\n",
        )?;
        Ok(())
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}
