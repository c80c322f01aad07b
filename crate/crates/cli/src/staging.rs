//! Outputs are written to a hidden sibling directory and moved into place only
//! when the command succeeds, so a failed run leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct Staging {
    out: PathBuf,
    tmp: PathBuf,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self> {
        let name = out
            .file_name()
            .with_context(|| format!("output path {} has no final component", out.display()))?;
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self { out: out.to_path_buf(), tmp })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    /// Moves every staged entry into the output directory, replacing
    /// entries of the same name.
    pub fn commit(self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let mut entries: Vec<PathBuf> = fs::read_dir(&self.tmp)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for src in entries {
            let dst = self.out.join(src.file_name().unwrap_or_default());
            if dst.is_dir() {
                fs::remove_dir_all(&dst)?;
            } else if dst.exists() {
                fs::remove_file(&dst)?;
            }
            fs::rename(&src, &dst).with_context(|| format!("moving output to {}", dst.display()))?;
        }
        fs::remove_dir_all(&self.tmp)?;
        Ok(())
    }

    pub fn discard(self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}
