//! Dataset diversity statistics, their 2-D embedding, and temporal
//! consistency of videos against ground-truth flow.

mod embed;
mod features;
mod warp;

pub use embed::{embed_2d, standardize};
pub use features::{
    all, cf, dr, dr_with_epsilon, ehl, feature_vector, fhlp, si, stdl, DynamicRange, FeatureVector, DR_EPSILON,
    HIGHLIGHT_THRESHOLD,
};
pub use warp::{backward_warp, pair_warp_error, warp_error};

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_pfm, HdrImage};
use crate::scene::{read_reference_frame, DatasetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub names: Vec<String>,
    pub per_image: Vec<FeatureVector>,
    pub means: FeatureVector,
    pub embedding: Vec<[f64; 2]>,
    pub size: usize,
}

impl MetricsReport {
    /// Builds a report from already loaded images, in the given order.
    pub fn from_images(names: Vec<String>, images: &[HdrImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Input("no images to analyze".into()));
        }
        let per_image: Vec<FeatureVector> = images.par_iter().map(feature_vector).collect();
        let n = per_image.len() as f64;
        let mut sums = [0.0; 7];
        for v in &per_image {
            for (s, x) in sums.iter_mut().zip(v.to_array()) {
                *s += x;
            }
        }
        let means = FeatureVector::from_array(sums.map(|s| s / n));
        let embedding = if per_image.len() >= 2 {
            embed_2d(&per_image)?
        } else {
            vec![[0.0, 0.0]]
        };
        Ok(Self {
            names,
            size: per_image.len(),
            per_image,
            means,
            embedding,
        })
    }

    /// One header line and one row of dataset means.
    pub fn to_csv(&self, dataset: &str) -> String {
        let m = self.means.to_array();
        let row: Vec<String> = m.iter().map(|v| format!("{v:.4}")).collect();
        format!("dataset,{}\n{dataset},{}\n", FeatureVector::NAMES.join(","), row.join(","))
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, dataset: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv(dataset)).map_err(|e| Error::io(&csv, e))
    }
}

/// Feature vectors of every entry's reference frame (bracket entries use
/// their ground truth).
pub fn analyze(manifest: &DatasetManifest) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(Error::Input("manifest lists no sequences".into()));
    }
    let images = manifest
        .entries
        .par_iter()
        .map(|e| {
            let dir = manifest.resolve(e);
            if dir.join("meta.json").exists() {
                read_pfm(dir.join("gt.pfm"))
            } else {
                read_reference_frame(dir)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let names = manifest.entries.iter().map(|e| e.path.clone()).collect();
    MetricsReport::from_images(names, &images)
}
