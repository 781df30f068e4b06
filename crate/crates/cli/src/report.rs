//! Machine-readable run reports and the checksums that pin their inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use strokeforge::pipeline::{CaseScore, CvReport, EpochRecord, TrainConfig, Variant};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Every regular file under `root` (recursively), keyed by its `/`-joined
/// path relative to `root`. Sorted, so equal trees give equal maps.
pub fn tree_checksums(root: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let dir = root.join(&rel);
        let entries = fs::read_dir(&dir).map_err(|e| CliError::validation(format!("cannot list {}: {e}", dir.display())))?;
        for entry in entries {
            let entry = entry?;
            let rel_child = rel.join(entry.file_name());
            let kind = entry.file_type()?;
            if kind.is_dir() {
                stack.push(rel_child);
            } else if kind.is_file() {
                let key = rel_child
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(key, sha256_file(&entry.path())?);
            }
        }
    }
    Ok(out)
}

/// Checksums of `files` relative to `root`; missing files are skipped.
pub fn file_checksums(root: &Path, files: &[String]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for f in files {
        let p = root.join(f);
        if p.is_file() {
            out.insert(f.clone(), sha256_file(&p)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    /// SHA-256 of the effective configuration serialized as TOML.
    pub config: String,
    /// Input data files.
    pub inputs: BTreeMap<String, String>,
    /// Files written under `--out`, excluding the report itself.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub mean_dice: f64,
    pub cases: Vec<CaseScore>,
}

/// Everything needed to reproduce and judge one cross-validated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub variant: Variant,
    pub seed: u64,
    pub config: TrainConfig,
    pub folds: Vec<FoldSummary>,
    pub mean_dice: f64,
    pub loss_table: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
    /// Cases whose time-point detection fell back to the full acquisition.
    pub fallbacks: Vec<String>,
    pub checksums: Checksums,
}

impl RunReport {
    pub fn from_cv(command: &str, cv: &CvReport, wall_clock_seconds: f64, checksums: Checksums) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            variant: cv.variant,
            seed: cv.config.seed,
            config: cv.config.clone(),
            folds: cv
                .folds
                .iter()
                .map(|f| FoldSummary {
                    fold: f.fold,
                    mean_dice: f.mean_dice,
                    cases: f.scores.clone(),
                })
                .collect(),
            mean_dice: cv.mean_dice,
            loss_table: cv.history.clone(),
            wall_clock_seconds,
            fallbacks: cv.fallbacks.clone(),
            checksums,
        }
    }
}

/// Smallest Dice gain of the full pipeline over the segmentor alone.
pub const ABLATION_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: Variant,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    /// `full ≥ gen ≥ segonly` and `full − segonly ≥ ABLATION_MARGIN`.
    pub holds: bool,
    pub full_minus_segonly: Option<f64>,
    pub required_margin: f64,
    /// Human-readable list of every violated relation.
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
    /// Absent unless all three variants ran.
    pub ordering: Option<Ordering>,
}

pub fn ordering(entries: &[AblationEntry]) -> Option<Ordering> {
    let get = |v: Variant| entries.iter().find(|e| e.variant == v).map(|e| e.mean_dice);
    let (full, gen, seg) = (get(Variant::Full)?, get(Variant::Gen)?, get(Variant::SegOnly)?);
    let mut violations = Vec::new();
    if !(full >= gen) {
        violations.push(format!("full {full:.4} < gen {gen:.4}"));
    }
    if !(gen >= seg) {
        violations.push(format!("gen {gen:.4} < segonly {seg:.4}"));
    }
    if !(full - seg >= ABLATION_MARGIN) {
        violations.push(format!(
            "full - segonly = {:.4} below the required {ABLATION_MARGIN}",
            full - seg
        ));
    }
    Some(Ordering {
        holds: violations.is_empty(),
        full_minus_segonly: Some(full - seg),
        required_margin: ABLATION_MARGIN,
        violations,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(variant: Variant, mean_dice: f64) -> AblationEntry {
        AblationEntry { variant, mean_dice }
    }

    #[test]
    fn ordering_flags_each_violation() {
        let ok = ordering(&[entry(Variant::SegOnly, 0.7), entry(Variant::Gen, 0.71), entry(Variant::Full, 0.73)]).unwrap();
        assert!(ok.holds, "{:?}", ok.violations);
        let bad = ordering(&[entry(Variant::SegOnly, 0.7), entry(Variant::Gen, 0.69), entry(Variant::Full, 0.71)]).unwrap();
        assert!(!bad.holds);
        assert_eq!(bad.violations.len(), 2);
        assert!(ordering(&[entry(Variant::Full, 0.9)]).is_none());
    }

    #[test]
    fn tree_checksums_track_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.bin"), b"one").unwrap();
        fs::write(dir.path().join("top.txt"), b"two").unwrap();
        let first = tree_checksums(dir.path()).unwrap();
        assert_eq!(first.keys().collect::<Vec<_>>(), ["a/x.bin", "top.txt"]);
        assert_eq!(first, tree_checksums(dir.path()).unwrap());
        fs::write(dir.path().join("a/x.bin"), b"One").unwrap();
        let second = tree_checksums(dir.path()).unwrap();
        assert_ne!(first["a/x.bin"], second["a/x.bin"]);
        assert_eq!(first["top.txt"], second["top.txt"]);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
