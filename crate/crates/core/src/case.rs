//! Per-case records and their on-disk layout.
//!
//! A case directory holds `ctp.sfv` `[T,H,W]`, `cbf.sfv`, `cbv.sfv`,
//! `mtt.sfv`, `tmax.sfv` (each `[H,W]`), optionally `dwi.sfv` and `mask.sfv`,
//! and a `case.json` manifest. [`CaseLoader`] is the single point where other
//! data sources plug in.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LesionMask;
use crate::perfusion::CtpVolume;
use crate::tensor::NdArray;
use crate::volume::{read_volume, write_volume};

pub const MANIFEST: &str = "case.json";
pub const MAP_NAMES: [&str; 4] = ["cbf", "cbv", "mtt", "tmax"];

/// CBF, CBV, MTT and Tmax, each `[H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfusionMaps {
    pub cbf: NdArray,
    pub cbv: NdArray,
    pub mtt: NdArray,
    pub tmax: NdArray,
}

impl PerfusionMaps {
    /// In [`MAP_NAMES`] order.
    pub fn as_array(&self) -> [&NdArray; 4] {
        [&self.cbf, &self.cbv, &self.mtt, &self.tmax]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub ctp: CtpVolume,
    pub maps: PerfusionMaps,
    /// Present on training cases.
    pub dwi: Option<NdArray>,
    /// Present on training cases.
    pub mask: Option<LesionMask>,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        ctp: CtpVolume,
        maps: PerfusionMaps,
        dwi: Option<NdArray>,
        mask: Option<LesionMask>,
    ) -> Result<Self> {
        let hw = [ctp.height(), ctp.width()];
        for (name, m) in MAP_NAMES.iter().zip(maps.as_array()) {
            if m.shape() != hw {
                return Err(Error::Input(format!(
                    "{name} map is {:?}, CTP frames are {hw:?}",
                    m.shape()
                )));
            }
        }
        if let Some(d) = &dwi {
            if d.shape() != hw {
                return Err(Error::Input(format!("dwi is {:?}, CTP frames are {hw:?}", d.shape())));
            }
        }
        if let Some(m) = &mask {
            if [m.height(), m.width()] != hw {
                return Err(Error::Input(format!(
                    "mask is {}x{}, CTP frames are {hw:?}",
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(Self {
            case_id: case_id.into(),
            ctp,
            maps,
            dwi,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.ctp.height()
    }

    pub fn width(&self) -> usize {
        self.ctp.width()
    }

    /// `(dwi, mask)` or an input error naming the case.
    pub fn targets(&self) -> Result<(&NdArray, &LesionMask)> {
        match (&self.dwi, &self.mask) {
            (Some(d), Some(m)) => Ok((d, m)),
            _ => Err(Error::Input(format!("case {} lacks dwi or mask", self.case_id))),
        }
    }
}

/// Contents of `case.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub frame_interval: f64,
    pub files: Vec<String>,
    /// Free-form provenance, e.g. phantom parameters.
    #[serde(default)]
    pub attributes: BTreeMap<String, serde_json::Value>,
}

/// Write every present modality plus the manifest into `dir`.
pub fn write_case(
    dir: &Path,
    case: &CaseRecord,
    attributes: BTreeMap<String, serde_json::Value>,
) -> Result<CaseManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, a: &NdArray| -> Result<()> {
        let file = format!("{name}.sfv");
        write_volume(&dir.join(&file), a, &[])?;
        files.push(file);
        Ok(())
    };
    put("ctp", case.ctp.frames())?;
    for (name, m) in MAP_NAMES.iter().zip(case.maps.as_array()) {
        put(name, m)?;
    }
    if let Some(d) = &case.dwi {
        put("dwi", d)?;
    }
    if let Some(m) = &case.mask {
        put("mask", &m.to_array())?;
    }
    let manifest = CaseManifest {
        case_id: case.case_id.clone(),
        height: case.height(),
        width: case.width(),
        n_frames: case.ctp.n_frames(),
        frame_interval: case.ctp.frame_interval,
        files,
        attributes,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CaseManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Load a case directory written by [`write_case`]. `dwi.sfv` and
/// `mask.sfv` are optional.
pub fn read_case(dir: &Path) -> Result<CaseRecord> {
    let manifest = read_manifest(dir)?;
    let load = |name: &str| -> Result<NdArray> { Ok(read_volume(&dir.join(format!("{name}.sfv")))?.data) };
    let optional = |name: &str| -> Result<Option<NdArray>> {
        if dir.join(format!("{name}.sfv")).exists() {
            load(name).map(Some)
        } else {
            Ok(None)
        }
    };
    let ctp = CtpVolume::new(load("ctp")?, manifest.frame_interval)?;
    let maps = PerfusionMaps {
        cbf: load("cbf")?,
        cbv: load("cbv")?,
        mtt: load("mtt")?,
        tmax: load("tmax")?,
    };
    let mask = optional("mask")?.map(|m| LesionMask::from_array(&m)).transpose()?;
    CaseRecord::new(manifest.case_id, ctp, maps, optional("dwi")?, mask)
}

/// Source of cases addressed by id.
pub trait CaseLoader {
    fn case_ids(&self) -> Result<Vec<String>>;
    fn load(&self, case_id: &str) -> Result<CaseRecord>;

    fn load_all(&self) -> Result<Vec<CaseRecord>> {
        self.case_ids()?.iter().map(|id| self.load(id)).collect()
    }
}

/// Every immediate subdirectory of `root` that holds a manifest, in sorted
/// order.
#[derive(Debug, Clone)]
pub struct DirectoryLoader {
    pub root: PathBuf,
}

impl DirectoryLoader {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn dirs(&self) -> Result<Vec<PathBuf>> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&self.root)
            .map_err(|e| Error::Input(format!("cannot list {}: {e}", self.root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST).is_file())
            .collect();
        dirs.sort();
        Ok(dirs)
    }
}

impl CaseLoader for DirectoryLoader {
    fn case_ids(&self) -> Result<Vec<String>> {
        self.dirs()?
            .iter()
            .map(|d| read_manifest(d).map(|m| m.case_id))
            .collect()
    }

    fn load(&self, case_id: &str) -> Result<CaseRecord> {
        for d in self.dirs()? {
            if read_manifest(&d)?.case_id == case_id {
                return read_case(&d);
            }
        }
        Err(Error::Input(format!("case {case_id} not found under {}", self.root.display())))
    }

    fn load_all(&self) -> Result<Vec<CaseRecord>> {
        self.dirs()?.iter().map(|d| read_case(d)).collect()
    }
}
