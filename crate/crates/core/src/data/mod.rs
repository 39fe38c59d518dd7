//! Training pairs: synthetic homography pairs, preprocessing, dataset
//! manifests and batch sampling.

mod batch;
mod preprocess;
mod synth;

pub use batch::{sample_batch, BatchConfig, TrainingBatch};
pub use preprocess::{preprocess, remap_homography, remap_pose, Preprocessed};
pub use synth::{generate_scene, random_homography, synth_pair, warp_image};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fundamental_from_pose, GroundTruth, Homography, PoseRecord, Supervision};
use crate::image::Image;
use crate::seed::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Geometric ground truth attached to a pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSupervision {
    Homography(Homography),
    Pose(PoseRecord),
}

impl PairSupervision {
    /// Supervision used by the training loss.
    pub fn supervision(&self) -> Result<Supervision> {
        match self {
            PairSupervision::Homography(h) => Supervision::from_homography(*h),
            PairSupervision::Pose(p) => Ok(Supervision::Fundamental(fundamental_from_pose(&p.to_pose()?)?)),
        }
    }

    /// Point-transfer ground truth, available for homography pairs.
    pub fn ground_truth(&self) -> Option<GroundTruth> {
        match self {
            PairSupervision::Homography(h) => Some(GroundTruth::Homography(*h)),
            PairSupervision::Pose(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub image_a: Image,
    pub image_b: Image,
    pub supervision: PairSupervision,
    pub overlap_tag: Option<f64>,
}

impl TrainingPair {
    pub fn size(&self) -> (usize, usize) {
        (self.image_a.width, self.image_a.height)
    }
}

/// Parameters of a generated synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_pairs: usize,
    pub width: usize,
    pub height: usize,
    /// Maximum corner displacement as a fraction of the image size.
    pub warp_magnitude: f64,
    pub photometric_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_pairs: 100,
            width: 480,
            height: 320,
            warp_magnitude: 0.15,
            photometric_jitter: 0.1,
        }
    }
}

/// Generates `num_pairs` synthetic pairs; pair `i` depends only on
/// `(seed, i)`.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Vec<TrainingPair>> {
    (0..config.num_pairs)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let base = generate_scene(config.width, config.height, s);
            let mut pair = synth_pair(&base, config.warp_magnitude, config.photometric_jitter, derive_seed(s, 1))?;
            pair.id = format!("pair_{i:05}");
            Ok(pair)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_a: String,
    pub image_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<Homography>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub pairs: Vec<ManifestEntry>,
}

/// Writes PNG images and `manifest.json` into `dir`.
pub fn write_manifest(dir: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (fa, fb) = (format!("{}_a.png", p.id), format!("{}_b.png", p.id));
        p.image_a.save(dir.join(&fa))?;
        p.image_b.save(dir.join(&fb))?;
        let (homography, pose) = match &p.supervision {
            PairSupervision::Homography(h) => (Some(*h), None),
            PairSupervision::Pose(r) => (None, Some(r.clone())),
        };
        entries.push(ManifestEntry {
            id: p.id.clone(),
            image_a: fa,
            image_b: fb,
            homography,
            pose,
            overlap: p.overlap_tag,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        pairs: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Accepts either the manifest file or the directory containing it.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(PathBuf, Manifest)> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((root, manifest))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let (root, manifest) = read_manifest(path)?;
    manifest
        .pairs
        .into_iter()
        .map(|e| {
            let supervision = match (e.homography, e.pose) {
                (Some(h), None) => PairSupervision::Homography(h),
                (None, Some(p)) => PairSupervision::Pose(p),
                _ => {
                    return Err(Error::Config(format!(
                        "pair '{}' needs exactly one of 'homography' or 'pose'",
                        e.id
                    )))
                }
            };
            let image_a = Image::load(root.join(&e.image_a))?;
            let image_b = Image::load(root.join(&e.image_b))?;
            if (image_a.width, image_a.height) != (image_b.width, image_b.height) {
                return Err(Error::Shape(format!("pair '{}' has images of different sizes", e.id)));
            }
            Ok(TrainingPair {
                id: e.id,
                image_a,
                image_b,
                supervision,
                overlap_tag: e.overlap,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let cfg = DataConfig {
            num_pairs: 3,
            width: 48,
            height: 32,
            ..DataConfig::default()
        };
        let pairs = generate_dataset(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &pairs).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back, pairs);
    }

    #[test]
    fn pose_pairs_supervise_with_sampson() {
        let rec = PoseRecord {
            k_a: [100.0, 0.0, 24.0, 0.0, 100.0, 16.0, 0.0, 0.0, 1.0],
            k_b: [100.0, 0.0, 24.0, 0.0, 100.0, 16.0, 0.0, 0.0, 1.0],
            r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [1.0, 0.0, 0.0],
        };
        let s = PairSupervision::Pose(rec).supervision().unwrap();
        assert!(matches!(s, Supervision::Fundamental(_)));
        let m = crate::geometry::Match::new(3.0, 7.0, 30.0, 7.0);
        assert!(s.distance(&m).unwrap() < 1e-12);
    }

    #[test]
    fn entry_requires_one_supervision() {
        let json = r#"{"version":1,"pairs":[{"id":"x","image_a":"a.png","image_b":"b.png"}]}"#;
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), json).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Config(_))));
    }
}
