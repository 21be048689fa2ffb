//! Output directory plumbing: every file is written temp-then-rename so a
//! crash never leaves a partial file, and existing files are refused
//! unless --force is passed.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use crate::config::RunConfig;

pub struct OutWriter {
    dir: PathBuf,
    force: bool,
    /// `# config=<hash>` + `# seed=<seed>` lines stamped onto every text
    /// output. Binary model files carry the same pair in their meta block.
    header: String,
}

impl OutWriter {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Ok(OutWriter {
            dir: cfg.out_dir.clone(),
            force: cfg.force,
            header: format!("# config={}\n# seed={}\n", cfg.hash, cfg.seed),
        })
    }

    /// Write a text file with the provenance header prepended.
    pub fn write_text(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.put(name, format!("{}{body}", self.header).into_bytes())
    }

    /// Write bytes as-is (model files record provenance in their meta).
    pub fn write_bytes(&self, name: &str, bytes: Vec<u8>) -> Result<PathBuf> {
        self.put(name, bytes)
    }

    fn put(&self, name: &str, bytes: Vec<u8>) -> Result<PathBuf> {
        let target = self.dir.join(name);
        if target.exists() && !self.force {
            bail!(
                "refusing to overwrite {} (pass --force to replace it)",
                target.display()
            );
        }
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &target)
            .with_context(|| format!("renaming {} into place", tmp.display()))?;
        Ok(target)
    }
}
