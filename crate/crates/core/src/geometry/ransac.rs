use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_homography, Homography, Match};
use crate::error::{Error, Result};

/// Locally-optimized RANSAC settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub confidence: f64,
    /// Refit-on-inliers rounds run after every new best model.
    pub local_optimization_rounds: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            confidence: 0.999,
            local_optimization_rounds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// A minimal sample is usable when no three points are collinear in either
/// image and every triple keeps its orientation across the two images.
fn sample_is_degenerate(s: &[Match; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    for t in TRIPLES {
        let ca = cross(s[t[0]].a(), s[t[1]].a(), s[t[2]].a());
        let cb = cross(s[t[0]].b(), s[t[1]].b(), s[t[2]].b());
        if ca.abs() < 1e-6 || cb.abs() < 1e-6 || ca.signum() != cb.signum() {
            return true;
        }
    }
    false
}

/// (inlier count, sum of inlier errors) under `threshold`.
fn score(h: &Homography, matches: &[Match], threshold: f64, mask: &mut [bool]) -> (usize, f64) {
    let mut count = 0;
    let mut err = 0.0;
    for (m, slot) in matches.iter().zip(mask.iter_mut()) {
        let e = h.transfer_error(m);
        *slot = e < threshold;
        if *slot {
            count += 1;
            err += e;
        }
    }
    (count, err)
}

fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w4 = inlier_ratio.powi(4);
    if w4 >= 1.0 {
        return 1;
    }
    if w4 <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w4).ln();
    if n.is_finite() {
        (n.ceil() as usize).min(cap)
    } else {
        cap
    }
}

/// Robust homography fit. Inliers are matches with forward transfer error
/// below `threshold` pixels. Deterministic for a fixed `seed`.
pub fn estimate_homography_ransac(
    matches: &[Match],
    threshold: f64,
    seed: u64,
    config: &RansacConfig,
) -> Result<RansacResult> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::EstimationFailure(format!(
            "need at least 4 matches, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    let mut best: Option<(Homography, Vec<bool>, (usize, f64))> = None;
    let mut budget = config.max_iterations;
    let mut iter = 0;
    while iter < budget {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let s = [
            matches[idx.index(0)],
            matches[idx.index(1)],
            matches[idx.index(2)],
            matches[idx.index(3)],
        ];
        if sample_is_degenerate(&s) {
            continue;
        }
        let Ok(h) = fit_homography(&s) else { continue };
        let sc = score(&h, matches, threshold, &mut mask);
        if best.as_ref().is_some_and(|b| !better(sc, b.2)) {
            continue;
        }
        let mut cand = (h, mask.clone(), sc);
        for _ in 0..config.local_optimization_rounds {
            let inl: Vec<Match> = matches
                .iter()
                .zip(&cand.1)
                .filter(|(_, &b)| b)
                .map(|(m, _)| *m)
                .collect();
            let Ok(refit) = fit_homography(&inl) else { break };
            let sc2 = score(&refit, matches, threshold, &mut mask);
            if better(sc2, cand.2) {
                cand = (refit, mask.clone(), sc2);
            } else {
                break;
            }
        }
        let ratio = cand.2 .0 as f64 / n as f64;
        budget = required_iterations(ratio, config.confidence, config.max_iterations);
        best = Some(cand);
    }
    let (homography, inliers, _) = best.ok_or_else(|| {
        Error::EstimationFailure("every minimal sample was degenerate".into())
    })?;
    Ok(RansacResult {
        homography,
        inliers,
        iterations: iter,
    })
}
