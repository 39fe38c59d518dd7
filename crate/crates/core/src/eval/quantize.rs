use std::collections::HashMap;

use crate::geometry::Match;
use crate::refine::RefinedMatch;

#[derive(Debug, Clone, Copy)]
struct Cluster {
    mean: (f64, f64),
    count: usize,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Greedy clustering of `points` visited in `order`: each point joins the
/// first cluster whose running mean is closer than `radius`, otherwise it
/// starts a new one. Clusters whose means end up closer than `radius` are
/// then merged until none remain. Returns the cluster mean for each point.
pub fn cluster_points(points: &[(f64, f64)], order: &[usize], radius: f64) -> Vec<(f64, f64)> {
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut assign = vec![0usize; points.len()];
    for &i in order {
        let p = points[i];
        match clusters.iter().position(|c| dist(c.mean, p) < radius) {
            Some(k) => {
                let c = &mut clusters[k];
                c.count += 1;
                let n = c.count as f64;
                c.mean = (c.mean.0 + (p.0 - c.mean.0) / n, c.mean.1 + (p.1 - c.mean.1) / n);
                assign[i] = k;
            }
            None => {
                assign[i] = clusters.len();
                clusters.push(Cluster { mean: p, count: 1 });
            }
        }
    }
    // Consolidate: merge the first close pair until all means are at least
    // `radius` apart.
    let mut alias: Vec<usize> = (0..clusters.len()).collect();
    let mut alive: Vec<usize> = (0..clusters.len()).collect();
    'outer: loop {
        for x in 0..alive.len() {
            for y in x + 1..alive.len() {
                let (i, j) = (alive[x], alive[y]);
                if dist(clusters[i].mean, clusters[j].mean) < radius {
                    let (ci, cj) = (clusters[i], clusters[j]);
                    let n = (ci.count + cj.count) as f64;
                    let w = cj.count as f64 / n;
                    clusters[i] = Cluster {
                        mean: (ci.mean.0 + (cj.mean.0 - ci.mean.0) * w, ci.mean.1 + (cj.mean.1 - ci.mean.1) * w),
                        count: ci.count + cj.count,
                    };
                    alias[j] = i;
                    alive.remove(y);
                    continue 'outer;
                }
            }
        }
        break;
    }
    let root = |mut k: usize| {
        while alias[k] != k {
            k = alias[k];
        }
        k
    };
    assign.iter().map(|&k| clusters[root(k)].mean).collect()
}

/// Visiting order: descending fine confidence, ties by input position.
pub fn confidence_order(matches: &[RefinedMatch]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.sort_by(|&a, &b| matches[b].fine_conf.total_cmp(&matches[a].fine_conf).then(a.cmp(&b)));
    order
}

/// Snaps keypoints closer than `radius` (independently in each image) to
/// their cluster mean, then collapses matches with identical endpoints,
/// keeping the most confident. Survivors keep their input order.
pub fn quantize_matches(matches: &[RefinedMatch], radius: f64) -> Vec<RefinedMatch> {
    let order = confidence_order(matches);
    let pa: Vec<(f64, f64)> = matches.iter().map(|m| m.fine.a()).collect();
    let pb: Vec<(f64, f64)> = matches.iter().map(|m| m.fine.b()).collect();
    let qa = cluster_points(&pa, &order, radius);
    let qb = cluster_points(&pb, &order, radius);
    let mut best: HashMap<[u64; 4], usize> = HashMap::new();
    for &i in &order {
        let key = [qa[i].0, qa[i].1, qb[i].0, qb[i].1].map(f64::to_bits);
        best.entry(key).or_insert(i);
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter()
        .map(|i| {
            let mut m = matches[i];
            m.fine = Match::new(qa[i].0, qa[i].1, qb[i].0, qb[i].1);
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rm(xa: f64, ya: f64, xb: f64, yb: f64, c: f64) -> RefinedMatch {
        RefinedMatch::unrefined(Match::new(xa, ya, xb, yb), c, 0.0)
    }

    #[test]
    fn shared_keypoint_is_averaged() {
        let ms = [rm(10.0, 10.0, 50.0, 50.0, 0.9), rm(12.0, 10.0, 80.0, 80.0, 0.8)];
        let q = quantize_matches(&ms, 4.0);
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].fine.a(), (11.0, 10.0));
        assert_eq!(q[1].fine.a(), (11.0, 10.0));
        assert_eq!(q[1].fine.b(), (80.0, 80.0));
    }

    #[test]
    fn separated_keypoints_are_untouched() {
        let ms: Vec<RefinedMatch> = (0..10)
            .map(|i| rm(i as f64 * 4.0, 0.0, 100.0 - i as f64 * 5.0, 3.0, 0.5))
            .collect();
        assert_eq!(quantize_matches(&ms, 4.0), ms);
    }

    #[test]
    fn duplicates_keep_highest_confidence() {
        let ms = [rm(0.0, 0.0, 5.0, 5.0, 0.3), rm(1.0, 0.0, 6.0, 5.0, 0.7), rm(30.0, 0.0, 9.0, 9.0, 0.1)];
        let q = quantize_matches(&ms, 4.0);
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].fine_conf, 0.7);
        assert_eq!(q[0].fine.to_array(), [0.5, 0.0, 5.5, 5.0]);
    }
}
