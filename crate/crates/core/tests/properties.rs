use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;

use refinematch::eval::{default_thresholds, mma, quantize_matches};
use refinematch::geometry::{
    fundamental_from_pose, sampson_distance, FundamentalMatrix, GroundTruth, Homography, Match, RelativePose,
};
use refinematch::loss::{balance_weight, weighted_bce};
use refinematch::proposals::{oracle_match, ProposalSet, ProposalSource};
use refinematch::refine::{expand_proposals, filter_by_confidence, RefinedMatch};

fn coord() -> impl Strategy<Value = f64> {
    -200.0..200.0f64
}

fn a_match() -> impl Strategy<Value = Match> {
    (coord(), coord(), coord(), coord()).prop_map(|(a, b, c, d)| Match::new(a, b, c, d))
}

fn fundamental() -> impl Strategy<Value = FundamentalMatrix> {
    proptest::array::uniform9(-1.0..1.0f64)
        .prop_filter_map("degenerate", |v| FundamentalMatrix::new(Matrix3::from_row_slice(&v)).ok())
}

fn intrinsics(f: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
}

fn pose() -> impl Strategy<Value = RelativePose> {
    (
        proptest::array::uniform3(-0.5..0.5f64),
        proptest::array::uniform3(-1.0..1.0f64),
        50.0..500.0f64,
        50.0..500.0f64,
    )
        .prop_filter_map("zero translation", |(r, t, fa, fb)| {
            let t = Vector3::from(t);
            (t.norm() > 1e-3).then(|| {
                let rot = Rotation3::new(Vector3::from(r)).into_inner();
                RelativePose::new(rot, t, intrinsics(fa, 64.0, 48.0), intrinsics(fb, 60.0, 50.0)).unwrap()
            })
        })
}

fn refined(conf: f64, xa: f64, ya: f64, xb: f64, yb: f64) -> RefinedMatch {
    RefinedMatch::unrefined(Match::new(xa, ya, xb, yb), conf, conf)
}

fn refined_set() -> impl Strategy<Value = Vec<RefinedMatch>> {
    proptest::collection::vec((0.0..1.0f64, 0.0..40.0f64, 0.0..40.0f64, 0.0..40.0f64, 0.0..40.0f64), 0..60)
        .prop_map(|v| v.into_iter().map(|(c, a, b, d, e)| refined(c, a, b, d, e)).collect())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sampson_is_symmetric_under_swap_and_transpose(m in a_match(), f in fundamental()) {
        if let (Ok(d), Ok(s)) = (sampson_distance(&m, &f), sampson_distance(&m.swapped(), &f.transpose())) {
            prop_assert!((d - s).abs() <= 1e-9 * d.abs().max(1.0));
        }
    }

    #[test]
    fn sampson_ignores_the_scale_of_f(m in a_match(), f in fundamental()) {
        if let Ok(d) = sampson_distance(&m, &f) {
            for s in [1e-3, 1e3] {
                let scaled = sampson_distance(&m, &f.scaled(s)).unwrap();
                prop_assert!(rel_err(d, scaled) <= 1e-7 || (d - scaled).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fundamental_from_pose_has_rank_two(p in pose()) {
        let f = fundamental_from_pose(&p).unwrap();
        let sv = f.matrix().svd(false, false).singular_values;
        prop_assert!(sv[2] < 1e-8 * sv[0]);
    }

    #[test]
    fn projected_points_lie_on_epipolar_lines(p in pose(), x in -1.0..1.0f64, y in -1.0..1.0f64, z in 2.0..10.0f64) {
        let f = fundamental_from_pose(&p).unwrap();
        if let Some(m) = p.project(&Vector3::new(x, y, z)) {
            if let Ok(d) = sampson_distance(&m, &f) {
                prop_assert!(d < 1e-6, "sampson {d}");
            }
        }
    }

    #[test]
    fn expansion_children_move_one_endpoint_diagonally(ms in proptest::collection::vec(a_match(), 1..20), d in 1.0..16.0f64) {
        let set = ProposalSet::from_matches(&ms, ProposalSource::Oracle);
        let ex = expand_proposals(&set, d);
        let parents = ex.parents.as_ref().unwrap();
        prop_assert_eq!(ex.len(), 8 * ms.len());
        for (child, &pi) in ex.proposals.iter().zip(parents) {
            let (c, p) = (child.m.to_array(), ms[pi].to_array());
            let diff: Vec<f64> = c.iter().zip(p).map(|(a, b)| a - b).collect();
            let moved_a = diff[0] != 0.0 || diff[1] != 0.0;
            let moved_b = diff[2] != 0.0 || diff[3] != 0.0;
            prop_assert!(moved_a != moved_b);
            let (dx, dy) = if moved_a { (diff[0], diff[1]) } else { (diff[2], diff[3]) };
            prop_assert!(((dx.abs() - d).abs() < 1e-9) && ((dy.abs() - d).abs() < 1e-9));
        }
    }

    #[test]
    fn raising_the_threshold_only_removes_matches(set in refined_set(), c1 in 0.0..1.0f64, c2 in 0.0..1.0f64) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let loose = filter_by_confidence(&set, lo);
        let strict = filter_by_confidence(&set, hi);
        prop_assert!(strict.iter().all(|m| loose.contains(m)));
        prop_assert!(strict.iter().all(|m| m.fine_conf >= hi));
    }

    #[test]
    fn mma_grows_with_the_threshold(ms in proptest::collection::vec(a_match(), 0..50), tx in -5.0..5.0f64, ty in -5.0..5.0f64) {
        let gt = GroundTruth::Homography(Homography::translation(tx, ty));
        let curve = mma(&ms, &gt, &default_thresholds());
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quantization_is_idempotent(set in refined_set(), radius in 0.5..8.0f64) {
        let once = quantize_matches(&set, radius);
        prop_assert_eq!(quantize_matches(&once, radius), once.clone());
        prop_assert!(once.len() <= set.len());
    }

    #[test]
    fn quantization_moves_keypoints_at_most_two_radii(set in refined_set(), radius in 0.5..8.0f64) {
        // Survivors keep their proposal and confidence, which identifies the source.
        let out = quantize_matches(&set, radius);
        let mut consumed = vec![false; set.len()];
        for q in &out {
            let i = (0..set.len())
                .find(|&i| !consumed[i] && set[i].fine_conf == q.fine_conf && set[i].proposal == q.proposal)
                .unwrap();
            consumed[i] = true;
            let (o, n) = (set[i].fine, q.fine);
            let da = ((o.xa - n.xa).powi(2) + (o.ya - n.ya).powi(2)).sqrt();
            let db = ((o.xb - n.xb).powi(2) + (o.yb - n.yb).powi(2)).sqrt();
            prop_assert!(da <= 2.0 * radius && db <= 2.0 * radius, "moved {da} / {db} with radius {radius}");
        }
    }

    #[test]
    fn balance_weight_is_the_class_ratio(labels in proptest::collection::vec(any::<bool>(), 1..200)) {
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        let (w, fallback) = balance_weight(&labels);
        if pos == 0 || neg == 0 {
            prop_assert!(fallback && w == 1.0);
        } else {
            prop_assert_eq!(w, neg as f64 / pos as f64);
        }
    }

    #[test]
    fn bce_is_finite_and_nonnegative(pairs in proptest::collection::vec((0.0..=1.0f64, any::<bool>()), 1..100)) {
        let (conf, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let out = weighted_bce(&conf, &labels);
        prop_assert!(out.loss.is_finite() && out.loss >= 0.0);
    }

    #[test]
    fn oracle_is_reproducible_and_bounded(tx in -8.0..8.0f64, ty in -8.0..8.0f64, jitter in 0usize..16, seed in any::<u64>()) {
        let gt = GroundTruth::Homography(Homography::translation(tx.round(), ty.round()));
        let a = oracle_match(&gt, 30, jitter, (48, 32), seed).unwrap();
        let b = oracle_match(&gt, 30, jitter, (48, 32), seed).unwrap();
        prop_assert_eq!(&a.proposals, &b.proposals);
        for p in &a.proposals {
            let m: Match = p.m;
            prop_assert!(m.xa >= 0.0 && m.xa <= 47.0 && m.yb >= 0.0 && m.yb <= 31.0);
            let (u, v) = gt.transfer(m.xa, m.ya).unwrap_or((m.xb, m.yb));
            let half = (jitter as f64 / 2.0).ceil() * 2.0 + 1.0;
            prop_assert!((m.xb - u).abs() <= half && (m.yb - v).abs() <= half);
        }
    }
}
