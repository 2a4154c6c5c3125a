//! Run directories: `<root>/<timestamp>-<command>-<hash>` holding the effective config.

use std::path::{Path, PathBuf};

use anyhow::Context;
use sha2::{Digest, Sha256};
use vidcl_core::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";

/// First 8 hex digits of the SHA-256 of the command name and effective config.
pub fn config_hash(command: &str, config_toml: &str) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(config_toml.as_bytes());
    h.finalize().iter().take(4).map(|b| format!("{b:02x}")).collect()
}

/// Creates the run directory and writes the effective config into it.
///
/// `explicit` is used as is; otherwise a fresh directory is made under `root`.
pub fn create(explicit: Option<&Path>, root: &Path, command: &str, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let toml = cfg.to_toml();
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = format!("{stamp}-{command}-{}", config_hash(command, &toml));
            let mut dir = root.join(&base);
            let mut n = 2;
            while dir.exists() {
                dir = root.join(format!("{base}-{n}"));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, toml).with_context(|| format!("writing {}", path.display()))?;
    Ok(dir)
}

pub fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
