use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, sigmoid, Conv2d, Linear, Param, Parameterized, Tensor};

/// Widths of one regressor: two stride-2 3x3 convolutions, then two
/// fully-connected layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub conv_channels: [usize; 2],
    pub fc_width: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RegressorConfig {
    pub fn toy() -> Self {
        Self {
            conv_channels: [16, 32],
            fc_width: 512,
        }
    }

    pub fn large() -> Self {
        Self {
            conv_channels: [128, 256],
            fc_width: 512,
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct RegressorTrace {
    pub input: Tensor,
    h1: Tensor,
    h2: Tensor,
    f1: Vec<f64>,
    f2: Vec<f64>,
    /// `tanh` of the offset head, `n x 4`.
    t: Vec<f64>,
    pub delta: Vec<[f64; 4]>,
    pub conf: Vec<f64>,
}

/// Maps a concatenated patch-feature stack to a bounded 4D offset and a
/// confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub offset_head: Linear,
    pub conf_head: Linear,
    pub in_channels: usize,
    pub patch_size: usize,
}

const HEAD_INIT: f64 = 1e-2;

impl Regressor {
    pub fn new(
        name: &str,
        in_channels: usize,
        patch_size: usize,
        config: &RegressorConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !patch_size.is_multiple_of(4) || patch_size < 4 {
            return Err(Error::Config(format!(
                "patch size {patch_size} must be a positive multiple of 4"
            )));
        }
        let [c1, c2] = config.conv_channels;
        let flat = c2 * (patch_size / 4) * (patch_size / 4);
        let w = config.fc_width;
        Ok(Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_channels, c1, 3, 2, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), c1, c2, 3, 2, 1, rng),
            fc1: Linear::new(&format!("{name}.fc1"), flat, w, rng),
            fc2: Linear::new(&format!("{name}.fc2"), w, w, rng),
            offset_head: Linear::with_bound(&format!("{name}.offset"), w, 4, HEAD_INIT, rng),
            conf_head: Linear::with_bound(&format!("{name}.conf"), w, 1, HEAD_INIT, rng),
            in_channels,
            patch_size,
        })
    }

    pub fn set_reduced_precision(&mut self, on: bool) {
        self.conv1.reduced_precision = on;
        self.conv2.reduced_precision = on;
    }

    pub fn half_range(&self) -> f64 {
        self.patch_size as f64 / 2.0
    }

    pub fn forward(&self, input: Tensor) -> Result<RegressorTrace> {
        let s = self.patch_size;
        if input.shape[1..] != [self.in_channels, s, s] {
            return Err(Error::Config(format!(
                "regressor expects {}x{s}x{s} stacks, got {:?}",
                self.in_channels,
                &input.shape[1..]
            )));
        }
        let n = input.n();
        let mut h1 = self.conv1.forward(&input);
        relu_inplace(&mut h1.data);
        let mut h2 = self.conv2.forward(&h1);
        relu_inplace(&mut h2.data);
        let mut f1 = self.fc1.forward(&h2.data, n);
        relu_inplace(&mut f1);
        let mut f2 = self.fc2.forward(&f1, n);
        relu_inplace(&mut f2);
        let t: Vec<f64> = self.offset_head.forward(&f2, n).into_iter().map(f64::tanh).collect();
        let r = self.half_range();
        let delta = t.chunks_exact(4).map(|c| [c[0] * r, c[1] * r, c[2] * r, c[3] * r]).collect();
        let conf = self.conf_head.forward(&f2, n).into_iter().map(sigmoid).collect();
        Ok(RegressorTrace {
            input,
            h1,
            h2,
            f1,
            f2,
            t,
            delta,
            conf,
        })
    }

    /// Single-stack convenience wrapper returning `(delta, conf)`.
    pub fn regress(&self, stack: &[f64]) -> Result<([f64; 4], f64)> {
        let s = self.patch_size;
        if stack.len() != self.in_channels * s * s {
            return Err(Error::Config(format!(
                "stack has {} values, expected {}",
                stack.len(),
                self.in_channels * s * s
            )));
        }
        let tr = self.forward(Tensor::from_vec([1, self.in_channels, s, s], stack.to_vec()))?;
        Ok((tr.delta[0], tr.conf[0]))
    }

    /// Accumulates parameter gradients for upstream gradients on `delta` and
    /// `conf`; returns the gradient on the input stack when requested.
    pub fn backward(
        &mut self,
        trace: &RegressorTrace,
        d_delta: &[[f64; 4]],
        d_conf: &[f64],
        want_input_grad: bool,
    ) -> Option<Tensor> {
        let n = trace.input.n();
        let r = self.half_range();
        let mut dz_off = vec![0.0; n * 4];
        for i in 0..n {
            for k in 0..4 {
                let t = trace.t[i * 4 + k];
                dz_off[i * 4 + k] = d_delta[i][k] * r * (1.0 - t * t);
            }
        }
        let dz_conf: Vec<f64> = (0..n).map(|i| d_conf[i] * trace.conf[i] * (1.0 - trace.conf[i])).collect();
        let mut df2 = self.offset_head.backward(&trace.f2, &dz_off, n);
        for (a, b) in df2.iter_mut().zip(self.conf_head.backward(&trace.f2, &dz_conf, n)) {
            *a += b;
        }
        relu_backward_inplace(&trace.f2, &mut df2);
        let mut df1 = self.fc2.backward(&trace.f1, &df2, n);
        relu_backward_inplace(&trace.f1, &mut df1);
        let mut dh2 = self.fc1.backward(&trace.h2.data, &df1, n);
        relu_backward_inplace(&trace.h2.data, &mut dh2);
        let dh2 = Tensor::from_vec(trace.h2.shape, dh2);
        let mut dh1 = self.conv2.backward(&trace.h1, &dh2, true).expect("input grad requested");
        relu_backward_inplace(&trace.h1.data, &mut dh1.data);
        self.conv1.backward(&trace.input, &dh1, want_input_grad)
    }
}

impl Parameterized for Regressor {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v.extend(self.offset_head.params());
        v.extend(self.conf_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v.extend(self.offset_head.params_mut());
        v.extend(self.conf_head.params_mut());
        v
    }
}
