//! On-disk layout of a sequence directory and of a dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FlowField, Mask, SceneSequence, SceneSpec};
use crate::error::{Error, Result};
use crate::image::{HdrImage, read_mask_png, read_pfm, read_pfm_raw, write_mask_png, write_pfm, write_pfm_raw, PfmImage};

/// Writes `frame_%03d.pfm`, `flow_%03d.pfm` (dx, dy, 0), `occ_%03d.png`
/// and `spec.json` into `dir`, creating it if needed.
pub fn export_sequence(seq: &SceneSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in seq.frames.iter().enumerate() {
        write_pfm(frame, dir.join(format!("frame_{t:03}.pfm")))?;
    }
    for (t, flow) in seq.flow.iter().enumerate() {
        let data = flow.data.chunks_exact(2).flat_map(|v| [v[0], v[1], 0.0]).collect();
        let raw = PfmImage {
            width: flow.width,
            height: flow.height,
            data,
        };
        write_pfm_raw(&raw, dir.join(format!("flow_{t:03}.pfm")))?;
    }
    for (t, mask) in seq.occlusion.iter().enumerate() {
        write_mask_png(mask.width, mask.height, &mask.data, dir.join(format!("occ_{t:03}.png")))?;
    }
    let spec_path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(&SpecFile {
        reference_index: seq.reference_index,
        spec: seq.spec.clone(),
    })?;
    fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    reference_index: usize,
    spec: SceneSpec,
}

pub fn import_sequence(dir: impl AsRef<Path>) -> Result<SceneSequence> {
    let dir = dir.as_ref();
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let SpecFile { reference_index, spec } = serde_json::from_str(&text)?;
    let n = spec.num_frames;
    if reference_index >= n {
        return Err(Error::Format(format!("reference_index {reference_index} >= num_frames {n}")));
    }
    let frames = (0..n)
        .map(|t| read_pfm(dir.join(format!("frame_{t:03}.pfm"))))
        .collect::<Result<Vec<_>>>()?;
    let mut flow = Vec::with_capacity(n - 1);
    let mut occlusion = Vec::with_capacity(n - 1);
    for t in 0..n - 1 {
        let raw = read_pfm_raw(dir.join(format!("flow_{t:03}.pfm")))?;
        if raw.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite flow in pair {t}")));
        }
        flow.push(FlowField {
            width: raw.width,
            height: raw.height,
            data: raw.data.chunks_exact(3).flat_map(|v| [v[0], v[1]]).collect(),
        });
        let (width, height, data) = read_mask_png(dir.join(format!("occ_{t:03}.png")))?;
        occlusion.push(Mask { width, height, data });
    }
    Ok(SceneSequence {
        frames,
        flow,
        occlusion,
        reference_index,
        spec,
    })
}

/// Loads only the ground-truth frame of an exported sequence.
pub fn read_reference_frame(dir: impl AsRef<Path>) -> Result<HdrImage> {
    let dir = dir.as_ref();
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let file: SpecFile = serde_json::from_str(&text)?;
    read_pfm(dir.join(format!("frame_{:03}.pfm", file.reference_index)))
}

/// One sequence directory, relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the manifest was loaded from; entry paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Entries tagged with `domain`, keeping manifest order.
    pub fn filter_domain(&self, domain: &str) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| e.domain == domain).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}
