use rayon::prelude::*;

use crate::geometry::{corner_error, estimate_homography_ransac, GroundTruth, Homography, Match, RansacConfig};
use crate::seed::derive_seed;

/// Pixel thresholds 1..=10.
pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(|t| t as f64).collect()
}

/// Corner-error thresholds for homography correctness.
pub const HOMOGRAPHY_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

/// Fraction of matches with transfer error `<= t`, per threshold. An empty
/// match list scores zero everywhere.
pub fn mma(matches: &[Match], gt: &GroundTruth, thresholds: &[f64]) -> Vec<f64> {
    if matches.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let errs: Vec<f64> = matches.iter().map(|m| gt.transfer_error(m)).collect();
    thresholds
        .iter()
        .map(|&t| errs.iter().filter(|&&e| e <= t).count() as f64 / errs.len() as f64)
        .collect()
}

/// Per-pair MMA curves and their mean. Empty pairs count as zero.
pub fn mean_mma(pairs: &[(&[Match], &GroundTruth)], thresholds: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let per: Vec<Vec<f64>> = pairs.iter().map(|(m, g)| mma(m, g, thresholds)).collect();
    let mut mean = vec![0.0; thresholds.len()];
    for c in &per {
        for (a, v) in mean.iter_mut().zip(c) {
            *a += v;
        }
    }
    if !per.is_empty() {
        mean.iter_mut().for_each(|v| *v /= per.len() as f64);
    }
    (mean, per)
}

/// Per-pair homography estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct HomographyOutcome {
    /// Corner error, infinite when estimation failed.
    pub corner_error: f64,
    pub inliers: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyBenchmark {
    /// Fraction of pairs with corner error below 1, 3 and 5 px.
    pub accuracy: [f64; 3],
    pub outcomes: Vec<HomographyOutcome>,
}

/// RANSAC homography per pair, scored by corner error against the ground
/// truth. Pair `i` uses seed `derive_seed(seed, i)`; pairs run in parallel
/// and results keep input order.
pub fn homography_benchmark(
    pairs: &[(&[Match], &Homography)],
    image_size: (usize, usize),
    ransac_threshold: f64,
    seed: u64,
    config: &RansacConfig,
) -> HomographyBenchmark {
    let outcomes: Vec<HomographyOutcome> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (matches, gt))| {
            match estimate_homography_ransac(matches, ransac_threshold, derive_seed(seed, i as u64), config) {
                Ok(r) => HomographyOutcome {
                    corner_error: corner_error(&r.homography, gt, image_size),
                    inliers: r.inlier_count(),
                    failed: false,
                },
                Err(_) => HomographyOutcome {
                    corner_error: f64::INFINITY,
                    inliers: 0,
                    failed: true,
                },
            }
        })
        .collect();
    let n = outcomes.len().max(1) as f64;
    let accuracy = HOMOGRAPHY_THRESHOLDS
        .map(|t| outcomes.iter().filter(|o| o.corner_error < t).count() as f64 / n);
    HomographyBenchmark { accuracy, outcomes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gt_correspondences_from_homography;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h() -> Homography {
        Homography::new(nalgebra::Matrix3::new(1.01, 0.02, 3.0, -0.01, 0.99, -2.0, 1e-5, -2e-5, 1.0)).unwrap()
    }

    #[test]
    fn exact_matches_score_one() {
        let gt = GroundTruth::Homography(h());
        let ms = gt_correspondences_from_homography(&h(), 10, (100, 80));
        assert_eq!(mma(&ms, &gt, &default_thresholds()), vec![1.0; 10]);
    }

    #[test]
    fn two_pixel_offset_is_a_step() {
        let gt = GroundTruth::Homography(Homography::identity());
        let ms: Vec<Match> = (0..20).map(|i| Match::new(i as f64, 3.0, i as f64 + 2.0, 3.0)).collect();
        let c = mma(&ms, &gt, &default_thresholds());
        assert_eq!(c[0], 0.0);
        assert!(c[1..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_mixture_matches_recount() {
        let gt = GroundTruth::Homography(h());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ms: Vec<Match> = (0..300)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..80.0));
                let (u, v) = h().transfer(x, y);
                Match::new(x, y, u + rng.gen_range(-8.0..8.0), v + rng.gen_range(-8.0..8.0))
            })
            .collect();
        let c = mma(&ms, &gt, &default_thresholds());
        for (t, v) in c.iter().enumerate() {
            let mut hits = 0;
            for m in &ms {
                let (u, w) = h().transfer(m.xa, m.ya);
                if ((u - m.xb).powi(2) + (w - m.yb).powi(2)).sqrt() <= (t + 1) as f64 {
                    hits += 1;
                }
            }
            assert_eq!(*v, hits as f64 / 300.0);
        }
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn empty_pairs_count_as_zero() {
        let gt = GroundTruth::Homography(Homography::identity());
        let ok = [Match::new(1.0, 1.0, 1.0, 1.0)];
        let (mean, _) = mean_mma(&[(&ok[..], &gt), (&[][..], &gt)], &default_thresholds());
        assert_eq!(mean, vec![0.5; 10]);
    }

    #[test]
    fn perfect_and_random_matches() {
        let hh = h();
        let good = gt_correspondences_from_homography(&hh, 8, (120, 80));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bad: Vec<Match> = (0..100)
            .map(|_| Match::new(rng.gen_range(0.0..120.0), rng.gen_range(0.0..80.0), rng.gen_range(0.0..120.0), rng.gen_range(0.0..80.0)))
            .collect();
        let cfg = RansacConfig::default();
        let b = homography_benchmark(&[(&good[..], &hh)], (120, 80), 2.0, 0, &cfg);
        assert_eq!(b.accuracy, [1.0, 1.0, 1.0]);
        let b = homography_benchmark(&[(&bad[..], &hh)], (120, 80), 2.0, 0, &cfg);
        assert_eq!(b.accuracy, [0.0, 0.0, 0.0]);
        let few = &good[..3];
        let b = homography_benchmark(&[(few, &hh)], (120, 80), 2.0, 0, &cfg);
        assert!(b.outcomes[0].failed);
        assert_eq!(b.accuracy, [0.0; 3]);
    }
}
