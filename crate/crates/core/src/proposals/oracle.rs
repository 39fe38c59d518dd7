use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MatchProposal, ProposalSet, ProposalSource};
use crate::error::{Error, Result};
use crate::geometry::{GroundTruth, Match};

/// Oracle sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Ground-truth matches sampled per pair.
    pub n: usize,
    /// Side of the square box each endpoint is moved within.
    pub jitter: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { n: 500, jitter: 12 }
    }
}

/// Samples `n` ground-truth correspondences (fewer if not enough exist) and
/// moves each endpoint by an independent integer offset drawn uniformly from
/// the `jitter x jitter` box `[-floor(j/2), ceil(j/2) - 1]^2`, clamped to the
/// image.
pub fn oracle_match(
    gt: &GroundTruth,
    n: usize,
    jitter: usize,
    image_size: (usize, usize),
    seed: u64,
) -> Result<ProposalSet> {
    if n == 0 {
        return Err(Error::Config("oracle needs n >= 1".into()));
    }
    let candidates = gt.pixel_correspondences(image_size);
    if candidates.is_empty() {
        return Err(Error::EmptyOracle);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, candidates.len(), n.min(candidates.len())).into_vec();
    chosen.sort_unstable();
    let lo = -((jitter / 2) as i64);
    let hi = (jitter as i64 + 1) / 2 - 1;
    let (xm, ym) = ((image_size.0 - 1) as f64, (image_size.1 - 1) as f64);
    let offset = |rng: &mut ChaCha8Rng| -> f64 {
        if jitter == 0 {
            0.0
        } else {
            rng.gen_range(lo..=hi) as f64
        }
    };
    let proposals = chosen
        .into_iter()
        .map(|i| {
            let g = candidates[i];
            let m = Match::new(
                (g.xa + offset(&mut rng)).clamp(0.0, xm),
                (g.ya + offset(&mut rng)).clamp(0.0, ym),
                (g.xb + offset(&mut rng)).clamp(0.0, xm),
                (g.yb + offset(&mut rng)).clamp(0.0, ym),
            );
            MatchProposal::new(m, None)
        })
        .collect();
    Ok(ProposalSet::new(proposals, ProposalSource::Oracle, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::patch_anchor;
    use crate::geometry::Homography;

    fn gt() -> GroundTruth {
        GroundTruth::Homography(Homography::identity())
    }

    #[test]
    fn zero_jitter_returns_ground_truth() {
        let set = oracle_match(&gt(), 50, 0, (64, 48), 1).unwrap();
        assert_eq!(set.len(), 50);
        for p in &set.proposals {
            assert_eq!(p.m.a(), p.m.b());
        }
    }

    #[test]
    fn jitter_stays_in_box() {
        let set = oracle_match(&gt(), 2000, 12, (192, 128), 2).unwrap();
        let mut seen_lo = false;
        let mut seen_hi = false;
        for p in &set.proposals {
            let dx = p.m.xb - p.m.xa;
            let dy = p.m.yb - p.m.ya;
            assert!(dx.abs() <= 11.0 && dy.abs() <= 11.0);
            seen_lo |= dx == -11.0;
            seen_hi |= dx == 11.0;
        }
        assert!(seen_lo && seen_hi);
    }

    #[test]
    fn sixteen_pixel_patches_contain_ground_truth() {
        let set = oracle_match(&gt(), 2500, 12, (480, 320), 3).unwrap();
        let inside = |v: f64, anchor: i64| v >= anchor as f64 && v <= (anchor + 15) as f64;
        for p in &set.proposals {
            let (ax, ay) = patch_anchor(p.m.a(), 16);
            let (bx, by) = patch_anchor(p.m.b(), 16);
            // Identity ground truth: some pixel (x, y) must sit in both patches.
            let hit = (-7..=7).any(|dx| {
                (-7..=7).any(|dy| {
                    let x = p.m.xa + dx as f64;
                    let y = p.m.ya + dy as f64;
                    (0.0..480.0).contains(&x)
                        && (0.0..320.0).contains(&y)
                        && inside(x, ax)
                        && inside(y, ay)
                        && inside(x, bx)
                        && inside(y, by)
                })
            });
            assert!(hit, "{:?}", p.m);
        }
    }

    #[test]
    fn reproducible_per_seed() {
        let a = oracle_match(&gt(), 100, 12, (64, 48), 9).unwrap();
        let b = oracle_match(&gt(), 100, 12, (64, 48), 9).unwrap();
        let c = oracle_match(&gt(), 100, 12, (64, 48), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let far = GroundTruth::Homography(Homography::translation(1000.0, 0.0));
        assert!(matches!(oracle_match(&far, 10, 12, (64, 48), 0), Err(Error::EmptyOracle)));
    }
}
