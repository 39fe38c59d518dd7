//! Patch expansion and the mid- and fine-level regressors that turn
//! patch-level proposals into pixel-level matches with confidences.

mod regressor;

pub use regressor::{Regressor, RegressorConfig, RegressorTrace};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{gather_pair_into, scatter_pair_grad, FeaturePyramid};
use crate::geometry::Match;
use crate::loss::LossGrads;
use crate::nn::{Param, Parameterized, Tensor};
use crate::proposals::{MatchProposal, ProposalSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    /// Patch size `S` in pixels.
    pub patch_size: usize,
    /// Expansion offset `d`.
    pub expand_offset: f64,
    /// Pyramid depth `L`.
    pub depth: usize,
    pub regressor: RegressorConfig,
    /// Fine-confidence threshold applied to inference output.
    pub confidence: f64,
    /// Expand proposals at inference as well as in training.
    pub expand_at_inference: bool,
    /// Proposals per forward block.
    pub chunk_size: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            expand_offset: 8.0,
            depth: 4,
            regressor: RegressorConfig::toy(),
            confidence: 0.25,
            expand_at_inference: false,
            chunk_size: 256,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.patch_size <= 1 << (self.depth - 1) {
            return Err(Error::Config(format!(
                "patch size {} must exceed 2^(L-1) = {}",
                self.patch_size,
                1usize << self.depth.saturating_sub(1)
            )));
        }
        if !self.patch_size.is_multiple_of(4) {
            return Err(Error::Config("patch size must be a multiple of 4".into()));
        }
        if self.expand_offset.is_nan() || self.expand_offset <= 0.0 {
            return Err(Error::Config("expansion offset must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk size must be positive".into()));
        }
        Ok(())
    }
}

/// A proposal after both refinement levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinedMatch {
    pub proposal: Match,
    pub mid: Match,
    pub mid_conf: f64,
    pub fine: Match,
    pub fine_conf: f64,
    pub mid_delta: [f64; 4],
    pub fine_delta: [f64; 4],
}

impl RefinedMatch {
    /// A match read back from a file, with no refinement history.
    pub fn unrefined(m: Match, fine_conf: f64, mid_conf: f64) -> Self {
        Self {
            proposal: m,
            mid: m,
            mid_conf,
            fine: m,
            fine_conf,
            mid_delta: [0.0; 4],
            fine_delta: [0.0; 4],
        }
    }
}

/// Eight children per proposal: the four diagonal corners of the A point
/// at distance `d` paired with the original B point, then the same for B.
/// Children follow their parent's position and record its index.
pub fn expand_proposals(set: &ProposalSet, d: f64) -> ProposalSet {
    const CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
    let mut proposals = Vec::with_capacity(set.len() * 8);
    let mut parents = Vec::with_capacity(set.len() * 8);
    for (i, p) in set.proposals.iter().enumerate() {
        for (sx, sy) in CORNERS {
            proposals.push(MatchProposal::new(p.m.offset([sx * d, sy * d, 0.0, 0.0]), p.score));
            parents.push(i);
        }
        for (sx, sy) in CORNERS {
            proposals.push(MatchProposal::new(p.m.offset([0.0, 0.0, sx * d, sy * d]), p.score));
            parents.push(i);
        }
    }
    ProposalSet {
        proposals,
        source: set.source,
        downscale: set.downscale,
        parents: Some(parents),
    }
}

/// Keeps matches with `fine_conf >= c`, preserving order.
pub fn filter_by_confidence(matches: &[RefinedMatch], c: f64) -> Vec<RefinedMatch> {
    matches.iter().filter(|m| m.fine_conf >= c).copied().collect()
}

/// Mid- and fine-level regressors with separate weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Refiner {
    pub config: RefinerConfig,
    /// Channels of one gathered stack (both images).
    pub in_channels: usize,
    pub mid: Regressor,
    pub fine: Regressor,
}

/// Per-match outputs of both levels for a flat batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchOutputs {
    pub mid: Vec<Match>,
    pub mid_conf: Vec<f64>,
    pub fine: Vec<Match>,
    pub fine_conf: Vec<f64>,
    pub mid_delta: Vec<[f64; 4]>,
    pub fine_delta: Vec<[f64; 4]>,
}

impl BatchOutputs {
    pub fn refined(&self, proposals: &[Match]) -> Vec<RefinedMatch> {
        (0..proposals.len())
            .map(|i| RefinedMatch {
                proposal: proposals[i],
                mid: self.mid[i],
                mid_conf: self.mid_conf[i],
                fine: self.fine[i],
                fine_conf: self.fine_conf[i],
                mid_delta: self.mid_delta[i],
                fine_delta: self.fine_delta[i],
            })
            .collect()
    }
}

/// Feature pyramids of one image pair.
pub type PairPyramids = (FeaturePyramid, FeaturePyramid);

/// Per-level pyramid gradient buffers for one image pair.
pub type PairPyramidGrads = (Vec<Vec<f64>>, Vec<Vec<f64>>);

impl Refiner {
    /// `gather_channels` is the per-image channel sum of levels `0..L-1`.
    pub fn new(config: RefinerConfig, gather_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let in_channels = 2 * gather_channels;
        let s = config.patch_size;
        let mid = Regressor::new("refine.mid", in_channels, s, &config.regressor, rng)?;
        let fine = Regressor::new("refine.fine", in_channels, s, &config.regressor, rng)?;
        Ok(Self {
            config,
            in_channels,
            mid,
            fine,
        })
    }

    /// Runs convolution products in `f32`; see [`crate::nn::Conv2d`].
    pub fn set_reduced_precision(&mut self, on: bool) {
        self.mid.set_reduced_precision(on);
        self.fine.set_reduced_precision(on);
    }

    fn check_pyramids(&self, pyramids: &[PairPyramids]) -> Result<()> {
        for (a, b) in pyramids {
            let c = a.gather_channels() + b.gather_channels();
            if c != self.in_channels || a.depth() != self.config.depth || b.depth() != self.config.depth {
                return Err(Error::Config(format!(
                    "pyramid gives {c} channels over depth {}, refiner expects {} over depth {}",
                    a.depth(),
                    self.in_channels,
                    self.config.depth
                )));
            }
        }
        Ok(())
    }

    fn gather(&self, pyramids: &[PairPyramids], centers: &[Match], pair_index: &[usize]) -> Tensor {
        let s = self.config.patch_size;
        let len = self.in_channels * s * s;
        let mut t = Tensor::zeros([centers.len(), self.in_channels, s, s]);
        for (i, (m, &p)) in centers.iter().zip(pair_index).enumerate() {
            let (a, b) = &pyramids[p];
            gather_pair_into(a, b, m, s, &mut t.data[i * len..(i + 1) * len]);
        }
        t
    }

    fn forward_chunk(
        &self,
        pyramids: &[PairPyramids],
        proposals: &[Match],
        pair_index: &[usize],
    ) -> Result<(RegressorTrace, Vec<Match>, RegressorTrace)> {
        let mid_tr = self.mid.forward(self.gather(pyramids, proposals, pair_index))?;
        let mid: Vec<Match> = proposals.iter().zip(&mid_tr.delta).map(|(m, d)| m.offset(*d)).collect();
        let fine_tr = self.fine.forward(self.gather(pyramids, &mid, pair_index))?;
        Ok((mid_tr, mid, fine_tr))
    }

    /// Runs both levels over a flat batch whose match `i` belongs to pair
    /// `pair_index[i]`.
    pub fn forward_batch(
        &self,
        pyramids: &[PairPyramids],
        proposals: &[Match],
        pair_index: &[usize],
    ) -> Result<BatchOutputs> {
        Ok(self.run_batch(pyramids, proposals, pair_index, false)?.0)
    }

    /// Like [`Self::forward_batch`], also keeping the activations needed by
    /// [`Self::backward_batch`].
    pub fn forward_batch_traced(
        &self,
        pyramids: &[PairPyramids],
        proposals: &[Match],
        pair_index: &[usize],
    ) -> Result<(BatchOutputs, BatchTraces)> {
        self.run_batch(pyramids, proposals, pair_index, true)
    }

    fn run_batch(
        &self,
        pyramids: &[PairPyramids],
        proposals: &[Match],
        pair_index: &[usize],
        keep: bool,
    ) -> Result<(BatchOutputs, BatchTraces)> {
        self.check_pyramids(pyramids)?;
        let mut out = BatchOutputs::default();
        let mut traces = BatchTraces::default();
        let cs = self.config.chunk_size;
        for (props, idx) in proposals.chunks(cs).zip(pair_index.chunks(cs)) {
            let (mid_tr, mid, fine_tr) = self.forward_chunk(pyramids, props, idx)?;
            out.fine.extend(mid.iter().zip(&fine_tr.delta).map(|(m, d)| m.offset(*d)));
            out.mid.extend(mid.iter().copied());
            out.mid_conf.extend(mid_tr.conf.iter().copied());
            out.mid_delta.extend(mid_tr.delta.iter().copied());
            out.fine_conf.extend(fine_tr.conf.iter().copied());
            out.fine_delta.extend(fine_tr.delta.iter().copied());
            if keep {
                traces.chunks.push((mid_tr, mid, fine_tr));
            }
        }
        traces.len = proposals.len();
        Ok((out, traces))
    }

    /// Backpropagates loss gradients on the batch outputs into both
    /// regressors, and into the pyramid gradient buffers when given. Without
    /// `traces` the activations are recomputed one chunk at a time.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch(
        &mut self,
        pyramids: &[PairPyramids],
        proposals: &[Match],
        pair_index: &[usize],
        traces: Option<BatchTraces>,
        grads: &LossGrads,
        mut pyramid_grads: Option<&mut [PairPyramidGrads]>,
    ) -> Result<()> {
        self.check_pyramids(pyramids)?;
        let cs = self.config.chunk_size;
        let s = self.config.patch_size;
        let want_input = pyramid_grads.is_some();
        let mut kept = match traces {
            Some(t) if t.len == proposals.len() => t.chunks.into_iter(),
            Some(_) => return Err(Error::Shape("traces do not match the batch".into())),
            None => Vec::new().into_iter(),
        };
        for start in (0..proposals.len()).step_by(cs) {
            let end = (start + cs).min(proposals.len());
            let props = &proposals[start..end];
            let idx = &pair_index[start..end];
            let (mid_tr, mid, fine_tr) = match kept.next() {
                Some(t) => t,
                None => self.forward_chunk(pyramids, props, idx)?,
            };
            let d_fine = &grads.fine[start..end];
            let d_mid: Vec<[f64; 4]> = (start..end)
                .map(|i| std::array::from_fn(|k| grads.mid[i][k] + grads.fine[i][k]))
                .collect();
            let dx_fine = self.fine.backward(&fine_tr, d_fine, &grads.fine_conf[start..end], want_input);
            drop(fine_tr);
            let dx_mid = self.mid.backward(&mid_tr, &d_mid, &grads.mid_conf[start..end], want_input);
            drop(mid_tr);
            if let (Some(pg), Some(dxf), Some(dxm)) = (pyramid_grads.as_deref_mut(), dx_fine, dx_mid) {
                for (j, &p) in idx.iter().enumerate() {
                    let (pa, pb) = &pyramids[p];
                    let (ga, gb) = &mut pg[p];
                    scatter_pair_grad(pa, pb, &mid[j], s, dxf.sample(j), ga, gb);
                    scatter_pair_grad(pa, pb, &props[j], s, dxm.sample(j), ga, gb);
                }
            }
        }
        Ok(())
    }
}

/// Per-chunk activations of a traced forward pass.
#[derive(Debug, Default)]
pub struct BatchTraces {
    chunks: Vec<(RegressorTrace, Vec<Match>, RegressorTrace)>,
    len: usize,
}

impl Parameterized for Refiner {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.mid.params();
        v.extend(self.fine.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.mid.params_mut();
        v.extend(self.fine.params_mut());
        v
    }
}

/// Refines every proposal of one image pair (no filtering). With
/// `expand_at_inference` set, proposals are expanded first.
pub fn refine_matches(
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    proposals: &ProposalSet,
    refiner: &Refiner,
) -> Result<Vec<RefinedMatch>> {
    let set = if refiner.config.expand_at_inference {
        expand_proposals(proposals, refiner.config.expand_offset)
    } else {
        proposals.clone()
    };
    let matches = set.matches();
    let pyramids = [(pyr_a.clone(), pyr_b.clone())];
    let idx = vec![0; matches.len()];
    let out = refiner.forward_batch(&pyramids, &matches, &idx)?;
    Ok(out.refined(&matches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Backbone, BackboneConfig};
    use crate::image::Image;
    use crate::proposals::ProposalSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Backbone, Refiner, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bb = Backbone::new(BackboneConfig::toy(), &mut rng).unwrap();
        let cfg = RefinerConfig {
            regressor: RegressorConfig {
                conv_channels: [4, 4],
                fc_width: 8,
            },
            chunk_size: 5,
            ..RefinerConfig::default()
        };
        let r = Refiner::new(cfg, bb.config.gather_channels(), &mut rng).unwrap();
        (bb, r, rng)
    }

    fn textured(rng: &mut ChaCha8Rng) -> Image {
        let mut img = Image::new(64, 48);
        img.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        img
    }

    #[test]
    fn expansion_children() {
        let set = ProposalSet::from_matches(&[Match::new(100.0, 100.0, 200.0, 200.0)], ProposalSource::Oracle);
        let e = expand_proposals(&set, 8.0);
        assert_eq!(e.len(), 8);
        let ms = e.matches();
        assert!(ms.contains(&Match::new(92.0, 92.0, 200.0, 200.0)));
        assert!(ms.contains(&Match::new(100.0, 100.0, 208.0, 208.0)));
        assert_eq!(e.parents, Some(vec![0; 8]));
    }

    #[test]
    fn patch_size_must_exceed_coarsest_stride() {
        let cfg = RefinerConfig {
            patch_size: 8,
            ..RefinerConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(RefinerConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_weights_leave_matches_unchanged() {
        let (bb, mut r, mut rng) = setup();
        for p in r.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let (ia, ib) = (textured(&mut rng), textured(&mut rng));
        let (pa, pb) = (bb.extract(&ia).unwrap(), bb.extract(&ib).unwrap());
        let ms: Vec<Match> = (0..7).map(|i| Match::new(i as f64 * 5.0, 3.0, 10.0, i as f64)).collect();
        let out = refine_matches(&pa, &pb, &ProposalSet::from_matches(&ms, ProposalSource::Oracle), &r).unwrap();
        assert_eq!(out.len(), 7);
        for (o, m) in out.iter().zip(&ms) {
            assert_eq!(o.mid, *m);
            assert_eq!(o.fine, *m);
            assert_eq!(o.fine_conf, 0.5);
        }
    }

    #[test]
    fn refinement_composes_and_stays_bounded() {
        let (bb, r, mut rng) = setup();
        let (ia, ib) = (textured(&mut rng), textured(&mut rng));
        let (pa, pb) = (bb.extract(&ia).unwrap(), bb.extract(&ib).unwrap());
        let ms: Vec<Match> = (0..12)
            .map(|_| Match::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0), rng.gen_range(0.0..64.0), 5.0))
            .collect();
        let out = refine_matches(&pa, &pb, &ProposalSet::from_matches(&ms, ProposalSource::Oracle), &r).unwrap();
        for o in &out {
            let f = o.fine.to_array();
            let p = o.proposal.to_array();
            for k in 0..4 {
                assert!((f[k] - (p[k] + o.mid_delta[k] + o.fine_delta[k])).abs() < 1e-6);
                assert!((f[k] - p[k]).abs() <= 16.0);
                assert!(o.mid_delta[k].abs() <= 8.0 && o.fine_delta[k].abs() <= 8.0);
            }
        }
    }

    #[test]
    fn filtering_is_monotone() {
        let ms: Vec<RefinedMatch> = (0..10)
            .map(|i| RefinedMatch::unrefined(Match::default(), i as f64 / 10.0, 0.0))
            .collect();
        assert_eq!(filter_by_confidence(&ms, 0.0).len(), 10);
        assert_eq!(filter_by_confidence(&ms, 1.0 + 1e-9).len(), 0);
        assert_eq!(filter_by_confidence(&ms, 0.45).len(), 5);
    }
}
