//! Evaluation: matching accuracy, homography correctness, match
//! quantization and match plots.

mod metrics;
mod quantize;
mod viz;

pub use metrics::{
    default_thresholds, homography_benchmark, mean_mma, mma, HomographyBenchmark, HomographyOutcome,
    HOMOGRAPHY_THRESHOLDS,
};
pub use quantize::{cluster_points, confidence_order, quantize_matches};
pub use viz::{confidence_color, line_points, render_matches, visualize_matches};

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GroundTruth, Match, RansacConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Matches of one pair with its ground truth.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub matches: Vec<Match>,
    pub gt: GroundTruth,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub mma: bool,
    pub homography: bool,
    pub ransac_threshold: f64,
    pub seed: u64,
    pub ransac: RansacConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mma: true,
            homography: true,
            ransac_threshold: 2.0,
            seed: 0,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub match_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mma: Option<Vec<f64>>,
    /// `None` when homography estimation failed or was not run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corner_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inliers: Option<usize>,
    #[serde(default)]
    pub estimation_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub thresholds: Vec<f64>,
    pub mma: Option<Vec<f64>>,
    pub homography_thresholds: Vec<f64>,
    pub homography_acc: Option<Vec<f64>>,
    pub match_count: usize,
    /// Mean number of distinct keypoints per image.
    pub feature_count_equivalent: f64,
    /// Pairs without any match (they score zero).
    pub empty_pairs: usize,
    pub pairs: Vec<PairRecord>,
    pub runtime_seconds: f64,
}

fn distinct(points: impl Iterator<Item = (f64, f64)>) -> usize {
    points.map(|(x, y)| (x.to_bits(), y.to_bits())).collect::<HashSet<_>>().len()
}

/// Runs the enabled metric suites over `pairs`; records keep input order.
pub fn evaluate_pairs(label: &str, pairs: &[EvalPair], options: &EvalOptions) -> EvalReport {
    let start = Instant::now();
    let thresholds = default_thresholds();
    let mut records: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            id: p.id.clone(),
            match_count: p.matches.len(),
            mma: None,
            corner_error: None,
            inliers: None,
            estimation_failed: false,
        })
        .collect();
    let mma_curve = options.mma.then(|| {
        let refs: Vec<(&[Match], &GroundTruth)> = pairs.iter().map(|p| (&p.matches[..], &p.gt)).collect();
        let (mean, per) = mean_mma(&refs, &thresholds);
        for (r, c) in records.iter_mut().zip(per) {
            r.mma = Some(c);
        }
        mean
    });
    let homography_acc = if options.homography {
        let with_h: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].gt.homography().is_some()).collect();
        let mut acc = [0.0; 3];
        for size in with_h.iter().map(|&i| pairs[i].image_size).collect::<std::collections::BTreeSet<_>>() {
            let idx: Vec<usize> = with_h.iter().copied().filter(|&i| pairs[i].image_size == size).collect();
            let inputs: Vec<_> = idx
                .iter()
                .map(|&i| (&pairs[i].matches[..], pairs[i].gt.homography().expect("filtered")))
                .collect();
            let bench = homography_benchmark(&inputs, size, options.ransac_threshold, options.seed, &options.ransac);
            for (&i, o) in idx.iter().zip(&bench.outcomes) {
                records[i].estimation_failed = o.failed;
                records[i].corner_error = o.corner_error.is_finite().then_some(o.corner_error);
                records[i].inliers = (!o.failed).then_some(o.inliers);
            }
            for (a, b) in acc.iter_mut().zip(bench.accuracy) {
                *a += b * idx.len() as f64;
            }
        }
        let n = with_h.len().max(1) as f64;
        Some(acc.iter().map(|a| a / n).collect())
    } else {
        None
    };
    let match_count = pairs.iter().map(|p| p.matches.len()).sum();
    let feature_count_equivalent = if pairs.is_empty() {
        0.0
    } else {
        pairs
            .iter()
            .map(|p| {
                let a = distinct(p.matches.iter().map(|m| m.a()));
                let b = distinct(p.matches.iter().map(|m| m.b()));
                (a + b) as f64 / 2.0
            })
            .sum::<f64>()
            / pairs.len() as f64
    };
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label: label.to_string(),
        thresholds,
        mma: mma_curve,
        homography_thresholds: HOMOGRAPHY_THRESHOLDS.to_vec(),
        homography_acc,
        match_count,
        feature_count_equivalent,
        empty_pairs: pairs.iter().filter(|p| p.matches.is_empty()).count(),
        pairs: records,
        runtime_seconds: start.elapsed().as_secs_f64(),
    }
}

impl EvalReport {
    /// Report with the timing field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            runtime_seconds: 0.0,
            ..self.clone()
        }
    }

    /// MMA is non-decreasing and every fraction lies in `[0, 1]`.
    pub fn check_invariants(&self) -> bool {
        let in_unit = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x));
        let mma_ok = self
            .mma
            .as_ref()
            .is_none_or(|c| in_unit(c) && c.windows(2).all(|w| w[0] <= w[1]));
        mma_ok && self.homography_acc.as_ref().is_none_or(|a| in_unit(a))
    }

    pub fn mma_csv(&self) -> String {
        let mut out = String::from("threshold_px,mma\n");
        if let Some(c) = &self.mma {
            for (t, v) in self.thresholds.iter().zip(c) {
                out.push_str(&format!("{t},{v}\n"));
            }
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported report schema {}", r.schema_version)));
        }
        Ok(r)
    }

    pub fn write_mma_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.mma_csv()).map_err(|e| Error::io(path, e))
    }
}
