//! Flat key=value run configuration with a content hash that makes runs
//! auditable: two runs with the same hash and seed saw the same knobs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

/// Environment variable naming the default data root for relative paths.
pub const DATA_ROOT_ENV: &str = "ZSBENCH_DATA";

#[derive(Debug, Clone)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
    /// SHA-256 over the sorted `key=value` lines, excluding `run.seed`.
    /// Paths are hashed as written, so moving a data directory does not
    /// change the hash.
    pub hash: String,
    /// Root for resolving relative paths: $ZSBENCH_DATA if set, else the
    /// config file's directory, else the working directory.
    root: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub force: bool,
}

impl RunConfig {
    /// Assemble the effective configuration: file contents, then `--set`
    /// overrides, then the flag-level seed/out/force switches.
    pub fn load(
        file: Option<&Path>,
        sets: &[String],
        seed_flag: Option<u64>,
        out_flag: Option<&Path>,
        force: bool,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    bail!(
                        "{}:{}: expected key=value, got `{line}`",
                        path.display(),
                        lineno + 1
                    );
                };
                entries.insert(k.trim().to_owned(), v.trim().to_owned());
            }
        }
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set {s}: expected KEY=VALUE");
            };
            entries.insert(k.trim().to_owned(), v.trim().to_owned());
        }

        let mut hasher = Sha256::new();
        for (k, v) in &entries {
            if k == "run.seed" {
                continue;
            }
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let mut hash = String::new();
        for b in hasher.finalize() {
            write!(hash, "{b:02x}").expect("writing to a String cannot fail");
        }

        let root = match std::env::var(DATA_ROOT_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => file
                .and_then(Path::parent)
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_owned)
                .unwrap_or_else(|| PathBuf::from(".")),
        };

        let seed = match seed_flag {
            Some(s) => s,
            None => match entries.get("run.seed") {
                Some(v) => v
                    .parse()
                    .with_context(|| format!("config key run.seed: `{v}` is not a u64"))?,
                None => 0,
            },
        };

        let out_dir = match out_flag {
            Some(p) => p.to_owned(),
            None => {
                let raw = entries.get("out.dir").map_or("out", String::as_str);
                resolve(&root, raw)
            }
        };

        Ok(RunConfig {
            entries,
            hash,
            root,
            seed,
            out_dir,
            force,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn str_key(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_owned()
    }

    pub fn u64_key(&self, key: &str, default: u64) -> Result<u64> {
        parse_key(self.get(key), key, default)
    }

    pub fn usize_key(&self, key: &str, default: usize) -> Result<usize> {
        parse_key(self.get(key), key, default)
    }

    pub fn f64_key(&self, key: &str, default: f64) -> Result<f64> {
        parse_key(self.get(key), key, default)
    }

    /// The configured path, resolved against the data root. None when the
    /// key is absent; existence is not checked.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|raw| resolve(&self.root, raw))
    }

    /// Like `path`, but the key must be present and the file must exist.
    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        let Some(p) = self.path(key) else {
            bail!("missing config key {key}");
        };
        if !p.exists() {
            bail!("{key}: {} does not exist", p.display());
        }
        Ok(p)
    }

    /// The `eval.ks` list, e.g. "1,5" -> [1, 5].
    pub fn ks(&self) -> Result<Vec<usize>> {
        let raw = self.str_key("eval.ks", "1,5");
        let mut ks = Vec::new();
        for part in raw.split(',') {
            let part = part.trim();
            let k: usize = part
                .parse()
                .with_context(|| format!("config key eval.ks: `{part}` is not a usize"))?;
            if k == 0 {
                bail!("config key eval.ks: k must be positive");
            }
            ks.push(k);
        }
        if ks.is_empty() {
            bail!("config key eval.ks: empty list");
        }
        Ok(ks)
    }
}

fn parse_key<T: std::str::FromStr>(raw: Option<&str>, key: &str, default: T) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    match raw {
        None => Ok(default),
        Some(v) => v
            .parse()
            .with_context(|| format!("config key {key}: cannot parse `{v}`")),
    }
}

fn resolve(root: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_owned()
    } else {
        root.join(p)
    }
}
