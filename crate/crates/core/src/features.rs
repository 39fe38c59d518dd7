//! Trainable convolutional backbone, the multi-resolution feature pyramid it
//! produces, and patch-feature gathering for the regressors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Match;
use crate::image::Image;
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, Param, Parameterized, Tensor};

/// Channel plan of the backbone: `channels[0]` is the input (3), level `l`
/// has `channels[l]` activation maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub profile: String,
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            profile: "toy".into(),
            channels: vec![3, 16, 16, 32, 64],
        }
    }

    pub fn large() -> Self {
        Self {
            profile: "large".into(),
            channels: vec![3, 64, 64, 128, 256],
        }
    }

    pub fn from_profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown backbone profile '{other}'"))),
        }
    }

    /// Number of convolutional levels `L`.
    pub fn depth(&self) -> usize {
        self.channels.len() - 1
    }

    /// Channels gathered per image for refinement (levels `0..L-1`).
    pub fn gather_channels(&self) -> usize {
        self.channels[..self.depth()].iter().sum()
    }

    /// Spatial factor of the deepest strided level, `2^(L-1)`.
    pub fn max_downscale(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 3 || self.channels[0] != 3 || self.channels.contains(&0) {
            return Err(Error::Config(
                "backbone channels need at least [3, c1, c2] with positive entries".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image activation maps `f_0..f_L`; `f_0` is the image itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
    pub downscale: Vec<usize>,
}

impl FeaturePyramid {
    pub fn depth(&self) -> usize {
        self.maps.len() - 1
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.maps[0].width(), self.maps[0].height())
    }

    pub fn last(&self) -> &Tensor {
        &self.maps[self.depth()]
    }

    pub fn gather_channels(&self) -> usize {
        self.maps[..self.depth()].iter().map(|m| m.channels()).sum()
    }

    /// Zero gradient buffers with one entry per level.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.maps.iter().map(|m| vec![0.0; m.data.len()]).collect()
    }
}

/// Plain strided-convolution backbone: levels `1..L-1` halve the
/// resolution, the last level keeps it (stride 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let depth = config.depth();
        let stages = (1..=depth)
            .map(|l| {
                let stride = if l < depth { 2 } else { 1 };
                Conv2d::new(
                    &format!("backbone.level{l}"),
                    config.channels[l - 1],
                    config.channels[l],
                    3,
                    stride,
                    1,
                    rng,
                )
            })
            .collect();
        Ok(Self { config, stages })
    }

    pub fn set_reduced_precision(&mut self, on: bool) {
        self.stages.iter_mut().for_each(|s| s.reduced_precision = on);
    }

    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let f = self.config.max_downscale();
        if !width.is_multiple_of(f) || !height.is_multiple_of(f) || width == 0 || height == 0 {
            let pw = (f - width % f) % f;
            let ph = (f - height % f) % f;
            return Err(Error::Shape(format!(
                "image {width}x{height} must be divisible by {f}; pad width by {pw} and height by {ph}"
            )));
        }
        Ok(())
    }

    pub fn extract(&self, image: &Image) -> Result<FeaturePyramid> {
        self.check_input(image.width, image.height)?;
        let input = Tensor::from_vec(
            [1, 3, image.height, image.width],
            image.data.iter().map(|&v| (v as f64 - INPUT_MEAN) / INPUT_SCALE).collect(),
        );
        let mut maps = vec![input];
        let mut downscale = vec![1];
        for (i, stage) in self.stages.iter().enumerate() {
            let mut y = stage.forward(&maps[i]);
            relu_inplace(&mut y.data);
            let factor = downscale[i] * stage.stride;
            maps.push(y);
            downscale.push(factor);
        }
        Ok(FeaturePyramid { maps, downscale })
    }

    /// Backpropagates per-level map gradients (as produced by gathering)
    /// into the stage parameters. `grads[0]` (the image) is ignored.
    pub fn backward(&mut self, pyramid: &FeaturePyramid, mut grads: Vec<Vec<f64>>) {
        for l in (1..=self.stages.len()).rev() {
            let mut g = std::mem::take(&mut grads[l]);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            relu_backward_inplace(&pyramid.maps[l].data, &mut g);
            let dy = Tensor::from_vec(pyramid.maps[l].shape, g);
            let dx = self.stages[l - 1].backward(&pyramid.maps[l - 1], &dy, l > 1);
            if let Some(dx) = dx {
                for (acc, v) in grads[l - 1].iter_mut().zip(dx.data) {
                    *acc += v;
                }
            }
        }
    }
}

impl Parameterized for Backbone {
    fn params(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }
}

/// Convenience wrapper matching the pipeline vocabulary.
pub(crate) const INPUT_MEAN: f64 = 0.5;
pub(crate) const INPUT_SCALE: f64 = 0.25;

pub fn extract_pyramid(image: &Image, backbone: &Backbone) -> Result<FeaturePyramid> {
    backbone.extract(image)
}

/// Gathered `C_sum x S x S` (channel-major) features of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureStack {
    pub size: usize,
    pub channels: usize,
    /// Top-left corner of the patch in image coordinates.
    pub anchor: (i64, i64),
    pub data: Vec<f64>,
}

impl PatchFeatureStack {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }
}

/// Top-left corner of the `size x size` patch centered at `(x, y)`; the
/// center is rounded to the nearest pixel first.
pub fn patch_anchor(center: (f64, f64), size: usize) -> (i64, i64) {
    let half = (size / 2) as i64;
    (center.0.round() as i64 - half, center.1.round() as i64 - half)
}

#[inline]
fn level_index(coord: i64, factor: usize, extent: usize) -> usize {
    coord.div_euclid(factor as i64).clamp(0, extent as i64 - 1) as usize
}

/// Visits `(level, source_offset, dest_offset)` for every gathered element.
fn for_each_gather(
    pyramid: &FeaturePyramid,
    anchor: (i64, i64),
    size: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut channel_base = 0;
    for l in 0..pyramid.depth() {
        let map = &pyramid.maps[l];
        let (c, h, w) = (map.channels(), map.height(), map.width());
        let factor = pyramid.downscale[l];
        let xs: Vec<usize> = (0..size).map(|x| level_index(anchor.0 + x as i64, factor, w)).collect();
        let ys: Vec<usize> = (0..size).map(|y| level_index(anchor.1 + y as i64, factor, h)).collect();
        for ch in 0..c {
            for (py, &iy) in ys.iter().enumerate() {
                let src_row = (ch * h + iy) * w;
                let dst_row = ((channel_base + ch) * size + py) * size;
                for (px, &ix) in xs.iter().enumerate() {
                    f(l, src_row + ix, dst_row + px);
                }
            }
        }
        channel_base += c;
    }
}

/// Collects the features of levels `0..L-1` over the patch centered at
/// `center`. Out-of-image positions clamp to the nearest valid index.
pub fn gather_patch_features(
    pyramid: &FeaturePyramid,
    center: (f64, f64),
    size: usize,
) -> PatchFeatureStack {
    let channels = pyramid.gather_channels();
    let anchor = patch_anchor(center, size);
    let mut data = vec![0.0; channels * size * size];
    for_each_gather(pyramid, anchor, size, |l, src, dst| {
        data[dst] = pyramid.maps[l].data[src];
    });
    PatchFeatureStack {
        size,
        channels,
        anchor,
        data,
    }
}

/// Writes the A-stack followed by the B-stack for `m` into `out`
/// (length `2 * C_sum * S * S`).
pub fn gather_pair_into(
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    m: &Match,
    size: usize,
    out: &mut [f64],
) {
    let half = pyr_a.gather_channels() * size * size;
    let (da, db) = out.split_at_mut(half);
    for_each_gather(pyr_a, patch_anchor(m.a(), size), size, |l, src, dst| {
        da[dst] = pyr_a.maps[l].data[src];
    });
    for_each_gather(pyr_b, patch_anchor(m.b(), size), size, |l, src, dst| {
        db[dst] = pyr_b.maps[l].data[src];
    });
}

/// Concatenated `(2 * C_sum) x S x S` stack for a match.
pub fn gather_pair(pyr_a: &FeaturePyramid, pyr_b: &FeaturePyramid, m: &Match, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; (pyr_a.gather_channels() + pyr_b.gather_channels()) * size * size];
    gather_pair_into(pyr_a, pyr_b, m, size, &mut out);
    out
}

/// Adjoint of [`gather_pair_into`]: accumulates `grad` into per-level
/// gradient buffers of both pyramids.
pub fn scatter_pair_grad(
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    m: &Match,
    size: usize,
    grad: &[f64],
    grads_a: &mut [Vec<f64>],
    grads_b: &mut [Vec<f64>],
) {
    let half = pyr_a.gather_channels() * size * size;
    let (ga, gb) = grad.split_at(half);
    for_each_gather(pyr_a, patch_anchor(m.a(), size), size, |l, src, dst| {
        grads_a[l][src] += ga[dst];
    });
    for_each_gather(pyr_b, patch_anchor(m.b(), size), size, |l, src, dst| {
        grads_b[l][src] += gb[dst];
    });
}
