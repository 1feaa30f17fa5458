//! On-disk teammate archive: one JSON checkpoint per frozen group plus a
//! manifest, inside a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teammate::FrozenGroup;

pub const ARCHIVE_DIR: &str = "archive";
pub const MANIFEST: &str = "manifest.json";
pub const RUN_INFO: &str = "run.json";

/// Identity of the run that produced an archive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub algo: String,
    pub env: String,
    pub seed: u64,
    /// sha256 of the canonical config echo.
    pub run_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub generation: usize,
    pub lineage: Option<u64>,
    pub sp_return: Option<(f64, f64)>,
    pub xp_return: Option<(f64, f64)>,
    pub file: String,
    pub tm_hash: String,
    pub comp_hash: String,
}

fn entry_for(g: &FrozenGroup) -> ManifestEntry {
    ManifestEntry {
        id: g.id,
        generation: g.generation,
        lineage: g.lineage,
        sp_return: g.sp_return,
        xp_return: g.xp_return,
        file: format!("group_{:05}.json", g.id),
        tm_hash: format!("{}{}", g.tm.backbone.hash_hex(), g.tm.head.hash_hex()),
        comp_hash: format!("{}{}", g.comp_ego.backbone.hash_hex(), g.comp_ego.head.hash_hex()),
    }
}

pub fn write_run_info(run_dir: &Path, info: &RunInfo) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(RUN_INFO), serde_json::to_string_pretty(info)?)?;
    Ok(())
}

pub fn read_run_info(run_dir: &Path) -> Result<RunInfo> {
    let path = run_dir.join(RUN_INFO);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write the complete archive, replacing any previous manifest. Group ids
/// must be unique.
pub fn write_archive(run_dir: &Path, groups: &[FrozenGroup]) -> Result<()> {
    let dir = run_dir.join(ARCHIVE_DIR);
    fs::create_dir_all(&dir)?;
    let mut entries: Vec<ManifestEntry> = Vec::with_capacity(groups.len());
    for g in groups {
        if entries.iter().any(|e| e.id == g.id) {
            return Err(Error::InvalidArgument(format!("duplicate group id {} in archive", g.id)));
        }
        let e = entry_for(g);
        fs::write(dir.join(&e.file), serde_json::to_string(g)?)?;
        entries.push(e);
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&entries)?)?;
    Ok(())
}

/// Load and verify every archived group of a run directory.
pub fn read_archive(run_dir: &Path) -> Result<(RunInfo, Vec<FrozenGroup>)> {
    let info = read_run_info(run_dir)?;
    let dir: PathBuf = run_dir.join(ARCHIVE_DIR);
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let mut groups = Vec::with_capacity(entries.len());
    for e in entries {
        let path = dir.join(&e.file);
        let text = fs::read_to_string(&path).map_err(|err| Error::Checkpoint(format!("{}: {err}", path.display())))?;
        let g: FrozenGroup =
            serde_json::from_str(&text).map_err(|err| Error::Checkpoint(format!("{}: {err}", path.display())))?;
        let check = entry_for(&g);
        if g.id != e.id || check.tm_hash != e.tm_hash || check.comp_hash != e.comp_hash {
            return Err(Error::Checkpoint(format!("{}: parameters do not match manifest", path.display())));
        }
        groups.push(g);
    }
    Ok((info, groups))
}
