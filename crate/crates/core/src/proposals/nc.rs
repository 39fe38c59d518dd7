use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MatchProposal, ProposalSet, ProposalSource};
use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::geometry::Homography;
use crate::nn::{gemm, Adam, Param, Parameterized, Tensor};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcConfig {
    /// Max-pool window applied to each of the four correlation axes.
    pub pool: usize,
    /// Inference score threshold.
    pub score_threshold: f64,
}

impl Default for NcConfig {
    fn default() -> Self {
        Self {
            pool: 2,
            score_threshold: 0.9,
        }
    }
}

/// Neighborhood-consensus filter: one 3x3x3x3 kernel applied symmetrically
/// (as itself and with the A and B axes swapped), plus a bias, then ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct NcMatcher {
    pub kernel: Param,
    pub bias: Param,
    pub config: NcConfig,
}

impl Default for NcMatcher {
    fn default() -> Self {
        Self::new(NcConfig::default())
    }
}

impl Parameterized for NcMatcher {
    fn params(&self) -> Vec<&Param> {
        vec![&self.kernel, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

/// Pooled correlation volume between two last-level feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    /// Pooled sizes `[h_a, w_a, h_b, w_b]`.
    pub dims: [usize; 4],
    pub values: Vec<f64>,
    /// Winning offset inside each pooling window, row-major over
    /// `(dy_a, dx_a, dy_b, dx_b)`.
    pub argmax: Vec<u16>,
    pub pool: usize,
    pub downscale: usize,
}

impl Correlation {
    pub fn cells_a(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn cells_b(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// Image coordinates (upper-left corners of last-level cells) of the
    /// full-resolution pair behind pooled entry `(a, b)`.
    fn unpooled_coords(&self, a: usize, b: usize) -> [f64; 4] {
        let k = self.pool;
        let off = self.argmax[a * self.cells_b() + b] as usize;
        let (dya, dxa, dyb, dxb) = (off / (k * k * k), (off / (k * k)) % k, (off / k) % k, off % k);
        let (ya, xa) = (a / self.dims[1], a % self.dims[1]);
        let (yb, xb) = (b / self.dims[3], b % self.dims[3]);
        let s = self.downscale as f64;
        [
            ((xa * k + dxa) as f64) * s,
            ((ya * k + dya) as f64) * s,
            ((xb * k + dxb) as f64) * s,
            ((yb * k + dyb) as f64) * s,
        ]
    }
}

fn normalized_columns(t: &Tensor) -> Vec<f64> {
    let (c, n) = (t.channels(), t.height() * t.width());
    let mut out = t.sample(0).to_vec();
    for i in 0..n {
        let norm = (0..c).map(|ch| out[ch * n + i].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for ch in 0..c {
                out[ch * n + i] /= norm;
            }
        }
    }
    out
}

/// Cosine correlation of every last-level cell of A with every cell of B,
/// max-pooled over `pool^4` windows.
pub fn correlate(pyr_a: &FeaturePyramid, pyr_b: &FeaturePyramid, pool: usize) -> Result<Correlation> {
    let (fa, fb) = (pyr_a.last(), pyr_b.last());
    if fa.channels() != fb.channels() {
        return Err(Error::Shape("last-level channel counts differ".into()));
    }
    let k = pool.max(1);
    let (ha, wa, hb, wb) = (fa.height(), fa.width(), fb.height(), fb.width());
    if ha < k || wa < k || hb < k || wb < k {
        return Err(Error::Shape(format!(
            "matching maps {ha}x{wa} and {hb}x{wb} are smaller than the {k}x{k} pooling window"
        )));
    }
    let (na, nb, c) = (ha * wa, hb * wb, fa.channels());
    let a = normalized_columns(fa);
    let b = normalized_columns(fb);
    let mut corr = vec![0.0; na * nb];
    gemm(na, c, nb, &a, 1, na, &b, nb, 1, 0.0, &mut corr);

    let dims = [ha / k, wa / k, hb / k, wb / k];
    let (pa, pb) = (dims[0] * dims[1], dims[2] * dims[3]);
    let mut values = vec![f64::NEG_INFINITY; pa * pb];
    let mut argmax = vec![0u16; pa * pb];
    for ya in 0..dims[0] {
        for xa in 0..dims[1] {
            let pidx_a = ya * dims[1] + xa;
            for yb in 0..dims[2] {
                for xb in 0..dims[3] {
                    let pidx = pidx_a * pb + yb * dims[3] + xb;
                    let mut off = 0u16;
                    for dya in 0..k {
                        for dxa in 0..k {
                            let ia = (ya * k + dya) * wa + xa * k + dxa;
                            let row = &corr[ia * nb..(ia + 1) * nb];
                            for dyb in 0..k {
                                for dxb in 0..k {
                                    let v = row[(yb * k + dyb) * wb + xb * k + dxb];
                                    if v > values[pidx] {
                                        values[pidx] = v;
                                        argmax[pidx] = off;
                                    }
                                    off += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Correlation {
        dims,
        values,
        argmax,
        pool: k,
        downscale: pyr_a.downscale[pyr_a.depth()],
    })
}

/// For each tap `k` (offset `k - 1` per axis), the output index ranges
/// along each axis for which the shifted input index is in bounds.
fn tap_ranges(dims: [usize; 4], tap: [usize; 4]) -> Option<[(usize, usize); 4]> {
    let mut r = [(0, 0); 4];
    for d in 0..4 {
        let lo = 1usize.saturating_sub(tap[d]);
        let hi = (dims[d] + 1).saturating_sub(tap[d]).min(dims[d]);
        if lo >= hi {
            return None;
        }
        r[d] = (lo, hi);
    }
    Some(r)
}

fn taps() -> impl Iterator<Item = (usize, [usize; 4])> {
    (0..TAPS).map(|i| (i, [i / 27, (i / 9) % 3, (i / 3) % 3, i % 3]))
}

/// Visits every `(output_index, input_index)` pair of a same-size 4D
/// convolution for one tap.
fn for_each_tap_pair(dims: [usize; 4], tap: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let Some(r) = tap_ranges(dims, tap) else { return };
    let [_, d1, d2, d3] = dims;
    for o0 in r[0].0..r[0].1 {
        let i0 = o0 + tap[0] - 1;
        for o1 in r[1].0..r[1].1 {
            let i1 = o1 + tap[1] - 1;
            let ob = (o0 * d1 + o1) * d2;
            let ib = (i0 * d1 + i1) * d2;
            for o2 in r[2].0..r[2].1 {
                let i2 = o2 + tap[2] - 1;
                let orow = (ob + o2) * d3;
                let irow = (ib + i2) * d3;
                for o3 in r[3].0..r[3].1 {
                    f(orow + o3, irow + o3 + tap[3] - 1);
                }
            }
        }
    }
}

/// Output of the consensus stage for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NcOutput {
    pub correlation: Correlation,
    /// Filtered scores, same layout as the pooled correlation.
    pub consensus: Vec<f64>,
    /// Mutual nearest neighbours `(a, b, score)` over pooled cells.
    pub mutual: Vec<(usize, usize, f64)>,
}

impl NcMatcher {
    /// Starts as the identity filter so untrained scores are plain
    /// correlations.
    pub fn new(config: NcConfig) -> Self {
        let mut kernel = Param::zeros("nc.kernel", &[KERNEL, KERNEL, KERNEL, KERNEL]);
        kernel.value[TAPS / 2] = 0.5;
        Self {
            kernel,
            bias: Param::zeros("nc.bias", &[1]),
            config,
        }
    }

    /// `K + K` with the A and B axes exchanged.
    fn effective_kernel(&self) -> [f64; TAPS] {
        let k = &self.kernel.value;
        let mut out = [0.0; TAPS];
        for (i, t) in taps() {
            let swapped = ((t[2] * 3 + t[3]) * 3 + t[0]) * 3 + t[1];
            out[i] = k[i] + k[swapped];
        }
        out
    }

    fn filter_pre(&self, corr: &Correlation) -> Vec<f64> {
        let ke = self.effective_kernel();
        let mut out = vec![self.bias.value[0]; corr.values.len()];
        for (i, tap) in taps() {
            let w = ke[i];
            if w == 0.0 {
                continue;
            }
            for_each_tap_pair(corr.dims, tap, |o, x| out[o] += w * corr.values[x]);
        }
        out
    }

    pub fn consensus(&self, corr: &Correlation) -> Vec<f64> {
        let mut s = self.filter_pre(corr);
        s.iter_mut().for_each(|v| *v = v.max(0.0));
        s
    }

    pub fn forward(&self, pyr_a: &FeaturePyramid, pyr_b: &FeaturePyramid) -> Result<NcOutput> {
        let correlation = correlate(pyr_a, pyr_b, self.config.pool)?;
        let consensus = self.consensus(&correlation);
        let mutual = mutual_matches(&consensus, correlation.cells_a(), correlation.cells_b());
        Ok(NcOutput {
            correlation,
            consensus,
            mutual,
        })
    }

    fn zero_grad(&mut self) {
        self.kernel.grad.iter_mut().for_each(|g| *g = 0.0);
        self.bias.grad[0] = 0.0;
    }

    /// Cross entropy of the row and column softmaxes against ground-truth
    /// pooled-cell targets; accumulates parameter gradients.
    fn supervised_step(&mut self, corr: &Correlation, targets: &CellTargets) -> f64 {
        let (na, nb) = (corr.cells_a(), corr.cells_b());
        let pre = self.filter_pre(corr);
        let s: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let terms = targets.row.iter().flatten().count() + targets.col.iter().flatten().count();
        if terms == 0 {
            return 0.0;
        }
        let inv = 1.0 / terms as f64;
        let mut loss = 0.0;
        let mut ds = vec![0.0; s.len()];
        for (a, t) in targets.row.iter().enumerate() {
            let Some(t) = *t else { continue };
            let idx = |b: usize| a * nb + b;
            let m = (0..nb).map(|b| s[idx(b)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..nb).map(|b| (s[idx(b)] - m).exp()).sum();
            loss += -(s[idx(t)] - m - z.ln()) * inv;
            for b in 0..nb {
                ds[idx(b)] += ((s[idx(b)] - m).exp() / z - (b == t) as u8 as f64) * inv;
            }
        }
        for (b, t) in targets.col.iter().enumerate() {
            let Some(t) = *t else { continue };
            let idx = |a: usize| a * nb + b;
            let m = (0..na).map(|a| s[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..na).map(|a| (s[idx(a)] - m).exp()).sum();
            loss += -(s[idx(t)] - m - z.ln()) * inv;
            for a in 0..na {
                ds[idx(a)] += ((s[idx(a)] - m).exp() / z - (a == t) as u8 as f64) * inv;
            }
        }
        for (d, p) in ds.iter_mut().zip(&pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        self.bias.grad[0] += ds.iter().sum::<f64>();
        let mut dke = [0.0; TAPS];
        for (i, tap) in taps() {
            let mut acc = 0.0;
            for_each_tap_pair(corr.dims, tap, |o, x| acc += ds[o] * corr.values[x]);
            dke[i] = acc;
        }
        for (i, t) in taps() {
            let swapped = ((t[2] * 3 + t[3]) * 3 + t[0]) * 3 + t[1];
            self.kernel.grad[i] += dke[i] + dke[swapped];
        }
        loss
    }
}

/// Pairs `(a, b)` where `b` is the row argmax of `a` and `a` the column
/// argmax of `b`; ties go to the lowest index. Score is the geometric mean
/// of the row and column softmax probabilities.
pub fn mutual_matches(scores: &[f64], na: usize, nb: usize) -> Vec<(usize, usize, f64)> {
    let mut row_best = vec![(0usize, f64::NEG_INFINITY); na];
    let mut col_best = vec![(0usize, f64::NEG_INFINITY); nb];
    for a in 0..na {
        for b in 0..nb {
            let v = scores[a * nb + b];
            if v > row_best[a].1 {
                row_best[a] = (b, v);
            }
            if v > col_best[b].1 {
                col_best[b] = (a, v);
            }
        }
    }
    let mut out = Vec::new();
    for a in 0..na {
        let (b, v) = row_best[a];
        if col_best[b].0 != a {
            continue;
        }
        let zr: f64 = (0..nb).map(|j| (scores[a * nb + j] - v).exp()).sum();
        let zc: f64 = (0..na).map(|i| (scores[i * nb + b] - v).exp()).sum();
        out.push((a, b, (1.0 / (zr * zc)).sqrt()));
    }
    out
}

/// Correlation matcher: pooled cosine correlation of the last-level maps,
/// consensus filtering, mutual nearest neighbours, then the pooling argmax
/// mapped back to image coordinates (upper-left corners of last-level
/// cells). Proposals scoring below `score_threshold` are dropped; pass 0 to
/// keep all of them.
pub fn nc_match(
    matcher: &NcMatcher,
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    score_threshold: f64,
) -> Result<ProposalSet> {
    if pyr_a.depth() != pyr_b.depth() {
        return Err(Error::Shape("pyramids differ in depth".into()));
    }
    let out = matcher.forward(pyr_a, pyr_b)?;
    let corr = &out.correlation;
    let proposals = out
        .mutual
        .iter()
        .filter(|(_, _, s)| *s >= score_threshold)
        .map(|&(a, b, s)| {
            MatchProposal::new(
                crate::geometry::Match::from_array(corr.unpooled_coords(a, b)),
                Some(s.clamp(0.0, 1.0)),
            )
        })
        .collect();
    Ok(ProposalSet::new(proposals, ProposalSource::Nc, corr.downscale))
}

/// Ground-truth pooled cell in the other image for each pooled cell.
struct CellTargets {
    row: Vec<Option<usize>>,
    col: Vec<Option<usize>>,
}

fn cell_targets(corr: &Correlation, h: &Homography) -> Option<CellTargets> {
    let cell = (corr.pool * corr.downscale) as f64;
    let inv = h.inverse()?;
    let map = |h: &Homography, y: usize, x: usize, rows: usize, cols: usize| -> Option<usize> {
        let (u, v) = h.transfer((x as f64 + 0.5) * cell - 0.5, (y as f64 + 0.5) * cell - 0.5);
        let (cx, cy) = ((u + 0.5) / cell, (v + 0.5) / cell);
        (cx >= 0.0 && cy >= 0.0 && cx < cols as f64 && cy < rows as f64)
            .then(|| cy.floor() as usize * cols + cx.floor() as usize)
    };
    let [ha, wa, hb, wb] = corr.dims;
    let row = (0..ha * wa).map(|a| map(h, a / wa, a % wa, hb, wb)).collect();
    let col = (0..hb * wb).map(|b| map(&inv, b / wb, b % wb, ha, wa)).collect();
    Some(CellTargets { row, col })
}

/// Fits the consensus filter on pairs with known homographies, with the
/// features held fixed. Returns the per-step loss.
pub fn fit_nc_matcher(
    matcher: &mut NcMatcher,
    pairs: &[(FeaturePyramid, FeaturePyramid, Homography)],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut prepared = Vec::new();
    for (a, b, h) in pairs {
        let corr = correlate(a, b, matcher.config.pool)?;
        if let Some(t) = cell_targets(&corr, h) {
            prepared.push((corr, t));
        }
    }
    if prepared.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if step % order.len() == 0 {
            order.shuffle(&mut rng);
        }
        let (corr, t) = &prepared[order[step % order.len()]];
        matcher.zero_grad();
        losses.push(matcher.supervised_step(corr, t));
        adam.update(matcher, lr);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pyramid_with_last(last: Tensor) -> FeaturePyramid {
        let (h, w) = (last.height() * 8, last.width() * 8);
        FeaturePyramid {
            maps: vec![Tensor::zeros([1, 3, h, w]), last],
            downscale: vec![1, 8],
        }
    }

    fn one_hot_map(h: usize, w: usize, c: usize, hot: &[(usize, usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros([1, c, h, w]);
        for &(y, x, ch) in hot {
            t.data[(ch * h + y) * w + x] = 1.0;
        }
        t
    }

    #[test]
    fn tiny_instance_has_single_mutual_match() {
        let a = pyramid_with_last(one_hot_map(4, 4, 4, &[(0, 0, 0)]));
        let b = pyramid_with_last(one_hot_map(4, 4, 4, &[(3, 3, 0)]));
        let set = nc_match(&NcMatcher::default(), &a, &b, 0.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.proposals[0].m.to_array(), [0.0, 0.0, 24.0, 24.0]);
        assert_eq!(set.downscale, 8);
    }

    #[test]
    fn pooled_correlation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng, h, w| {
            let n = 5 * h * w;
            Tensor::from_vec([1, 5, h, w], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let (fa, fb) = (mk(&mut rng, 6, 5), mk(&mut rng, 4, 6));
        let corr = correlate(&pyramid_with_last(fa.clone()), &pyramid_with_last(fb.clone()), 2).unwrap();
        assert_eq!(corr.dims, [3, 2, 2, 3]);
        let cos = |ya: usize, xa: usize, yb: usize, xb: usize| {
            let va: Vec<f64> = (0..5).map(|c| fa.at(0, c, ya, xa)).collect();
            let vb: Vec<f64> = (0..5).map(|c| fb.at(0, c, yb, xb)).collect();
            let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
            va.iter().zip(&vb).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        for a in 0..6 {
            for b in 0..6 {
                let (ya, xa, yb, xb) = (a / 2, a % 2, b / 3, b % 3);
                let mut best = f64::NEG_INFINITY;
                for dya in 0..2 {
                    for dxa in 0..2 {
                        for dyb in 0..2 {
                            for dxb in 0..2 {
                                best = best.max(cos(2 * ya + dya, 2 * xa + dxa, 2 * yb + dyb, 2 * xb + dxb));
                            }
                        }
                    }
                }
                assert!((corr.values[a * 6 + b] - best).abs() < 1e-12);
                let c = corr.unpooled_coords(a, b);
                let v = cos(c[1] as usize / 8, c[0] as usize / 8, c[3] as usize / 8, c[2] as usize / 8);
                assert!((v - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_small_maps_are_rejected() {
        let a = pyramid_with_last(Tensor::zeros([1, 4, 1, 4]));
        assert!(matches!(nc_match(&NcMatcher::default(), &a, &a, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn consensus_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = NcMatcher::default();
        m.kernel.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        m.bias.value[0] = 0.1;
        let dims = [3, 4, 2, 3];
        let n: usize = dims.iter().product();
        let corr = Correlation {
            dims,
            values: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            argmax: vec![0; n],
            pool: 2,
            downscale: 8,
        };
        let got = m.consensus(&corr);
        let k = |a: usize, b: usize, c: usize, d: usize| m.kernel.value[((a * 3 + b) * 3 + c) * 3 + d];
        let at = |i: [isize; 4]| -> f64 {
            if (0..4).all(|d| i[d] >= 0 && (i[d] as usize) < dims[d]) {
                let i = i.map(|v| v as usize);
                corr.values[((i[0] * dims[1] + i[1]) * dims[2] + i[2]) * dims[3] + i[3]]
            } else {
                0.0
            }
        };
        for o0 in 0..dims[0] {
            for o1 in 0..dims[1] {
                for o2 in 0..dims[2] {
                    for o3 in 0..dims[3] {
                        let mut s = 0.1;
                        for (_, t) in taps() {
                            let src = [
                                o0 as isize + t[0] as isize - 1,
                                o1 as isize + t[1] as isize - 1,
                                o2 as isize + t[2] as isize - 1,
                                o3 as isize + t[3] as isize - 1,
                            ];
                            s += (k(t[0], t[1], t[2], t[3]) + k(t[2], t[3], t[0], t[1])) * at(src);
                        }
                        let idx = ((o0 * dims[1] + o1) * dims[2] + o2) * dims[3] + o3;
                        assert!((got[idx] - s.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn mutual_matches_are_row_and_column_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (na, nb) = (rng.gen_range(1..12), rng.gen_range(1..12));
            let s: Vec<f64> = (0..na * nb).map(|_| rng.gen_range(0..5) as f64).collect();
            let mm = mutual_matches(&s, na, nb);
            for a in 0..na {
                let row: Vec<f64> = s[a * nb..(a + 1) * nb].to_vec();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let b = row.iter().position(|&v| v == mx).unwrap();
                let col: Vec<f64> = (0..na).map(|i| s[i * nb + b]).collect();
                let cmx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let a2 = col.iter().position(|&v| v == cmx).unwrap();
                let expected = a2 == a;
                assert_eq!(mm.iter().any(|&(x, y, _)| x == a && y == b), expected);
            }
            for &(_, _, sc) in &mm {
                assert!((0.0..=1.0).contains(&sc));
            }
        }
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [3, 4, 3, 4];
        let n: usize = dims.iter().product();
        let corr = Correlation {
            dims,
            values: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            argmax: vec![0; n],
            pool: 2,
            downscale: 8,
        };
        let targets = cell_targets(&corr, &Homography::translation(16.0, 0.0)).unwrap();
        let mut m = NcMatcher::default();
        m.kernel.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        m.bias.value[0] = 0.3;
        m.zero_grad();
        m.supervised_step(&corr, &targets);
        let grad = m.kernel.grad.clone();
        let e = 1e-6;
        for (i, &g) in grad.iter().enumerate().take(TAPS) {
            let o = m.kernel.value[i];
            m.kernel.value[i] = o + e;
            let up = m.clone().supervised_step(&corr, &targets);
            m.kernel.value[i] = o - e;
            let dn = m.clone().supervised_step(&corr, &targets);
            m.kernel.value[i] = o;
            let fd = (up - dn) / (2.0 * e);
            assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "tap {i}: {fd} vs {g}");
        }
    }

    #[test]
    fn fitting_reduces_loss_on_translated_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w, c) = (8, 10, 8);
        let base: Vec<f64> = (0..c * h * (w + 2)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let crop = |x0: usize| {
            let mut t = Tensor::zeros([1, c, h, w]);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[(ch * h + y) * w + x] = base[(ch * h + y) * (w + 2) + x + x0];
                    }
                }
            }
            t
        };
        let pa = pyramid_with_last(crop(2));
        let pb = pyramid_with_last(crop(0));
        let pairs = vec![(pa, pb, Homography::translation(16.0, 0.0))];
        let mut m = NcMatcher::default();
        let losses = fit_nc_matcher(&mut m, &pairs, 60, 0.05, 0).unwrap();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
    }
}
