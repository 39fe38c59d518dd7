use rand::Rng;

use super::{gemm, Param, Parameterized, Scalar, Tensor};

/// Samples processed per im2col block.
const CHUNK: usize = 8;

/// 2D convolution with square kernel, zero padding and integer stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Run the matrix products in `f32` (parameters and gradients stay
    /// `f64`).
    pub reduced_precision: bool,
}

impl Conv2d {
    /// He-uniform initialization.
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                bound,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            reduced_precision: false,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output columns `ox` whose input column `ox*stride + kx - padding`
    /// lies inside `[0, w)`.
    fn valid_range(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.padding);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Writes the im2col expansion of `x` (one sample, CHW) into columns
    /// `[col_offset, col_offset + oh*ow)` of a `rows x ld` matrix.
    fn im2col<T: Scalar>(&self, x: &[f64], h: usize, w: usize, col: &mut [T], ld: usize, col_offset: usize) {
        let (oh, ow) = self.output_size(h, w);
        let (k, st) = (self.kernel, self.stride);
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_range(kx, w, ow);
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ld + col_offset..row * ld + col_offset + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * st + ky) as isize - self.padding as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            out_row.fill(T::default());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out_row[..lo].fill(T::default());
                        out_row[hi..].fill(T::default());
                        let first = lo * st + kx - self.padding;
                        for (v, &x) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(st)) {
                            *v = T::from_f64(x);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], ld: usize, col_offset: usize, h: usize, w: usize, dx: &mut [f64]) {
        let (oh, ow) = self.output_size(h, w);
        let (k, st) = (self.kernel, self.stride);
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_range(kx, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ld + col_offset..row * ld + col_offset + oh * ow];
                    let first = lo * st + kx - self.padding;
                    for oy in 0..oh {
                        let iy = (oy * st + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let g = &src[oy * ow + lo..oy * ow + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(st).zip(g) {
                            *d += v.to_f64();
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        if self.reduced_precision {
            self.forward_as::<f32>(x)
        } else {
            self.forward_as::<f64>(x)
        }
    }

    fn forward_as<T: Scalar>(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.output_size(h, w);
        let p = oh * ow;
        let rows = self.col_rows();
        let weight: Vec<T> = self.weight.value.iter().map(|&v| T::from_f64(v)).collect();
        let mut y = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut col: Vec<T> = Vec::new();
        let mut tmp: Vec<T> = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let b = CHUNK.min(n - start);
            let ld = b * p;
            col.resize(rows * ld, T::default());
            tmp.resize(self.out_channels * ld, T::default());
            for s in 0..b {
                self.im2col(x.sample(start + s), h, w, &mut col, ld, s * p);
            }
            gemm(self.out_channels, rows, ld, &weight, rows, 1, &col, ld, 1, T::default(), &mut tmp);
            for s in 0..b {
                let out = y.sample_mut(start + s);
                for o in 0..self.out_channels {
                    let bias = self.bias.value[o];
                    let src = &tmp[o * ld + s * p..o * ld + (s + 1) * p];
                    for (d, v) in out[o * p..(o + 1) * p].iter_mut().zip(src) {
                        *d = v.to_f64() + bias;
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `want_input_grad` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, want_input_grad: bool) -> Option<Tensor> {
        if self.reduced_precision {
            self.backward_as::<f32>(x, dy, want_input_grad)
        } else {
            self.backward_as::<f64>(x, dy, want_input_grad)
        }
    }

    fn backward_as<T: Scalar>(&mut self, x: &Tensor, dy: &Tensor, want_input_grad: bool) -> Option<Tensor> {
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.output_size(h, w);
        assert_eq!(dy.shape, [n, self.out_channels, oh, ow], "conv grad shape");
        let p = oh * ow;
        let rows = self.col_rows();
        let weight: Vec<T> = self.weight.value.iter().map(|&v| T::from_f64(v)).collect();
        let mut dw = vec![T::default(); self.weight.len()];
        let mut dx = want_input_grad.then(|| Tensor::zeros(x.shape));
        let mut col: Vec<T> = Vec::new();
        let mut dyc: Vec<T> = Vec::new();
        let mut dcol: Vec<T> = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let b = CHUNK.min(n - start);
            let ld = b * p;
            col.resize(rows * ld, T::default());
            dyc.resize(self.out_channels * ld, T::default());
            for s in 0..b {
                self.im2col(x.sample(start + s), h, w, &mut col, ld, s * p);
                let g = dy.sample(start + s);
                for o in 0..self.out_channels {
                    let bias_grad: f64 = g[o * p..(o + 1) * p].iter().sum();
                    self.bias.grad[o] += bias_grad;
                    for (d, &v) in dyc[o * ld + s * p..o * ld + (s + 1) * p].iter_mut().zip(&g[o * p..(o + 1) * p]) {
                        *d = T::from_f64(v);
                    }
                }
            }
            // dW (out x rows) += dY (out x ld) * col^T (ld x rows)
            gemm(self.out_channels, ld, rows, &dyc, ld, 1, &col, 1, ld, T::from_f64(1.0), &mut dw);
            if let Some(dx) = dx.as_mut() {
                dcol.resize(rows * ld, T::default());
                // dcol (rows x ld) = W^T (rows x out) * dY (out x ld)
                gemm(rows, self.out_channels, ld, &weight, 1, rows, &dyc, ld, 1, T::default(), &mut dcol);
                for s in 0..b {
                    self.col2im(&dcol, ld, s * p, h, w, dx.sample_mut(start + s));
                }
            }
        }
        for (g, d) in self.weight.grad.iter_mut().zip(dw) {
            *g += d.to_f64();
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut y = Tensor::zeros([n, conv.out_channels, oh, ow]);
        for b in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += conv.weight.value[((o * c + ci) * k + ky) * k + kx]
                                            * x.at(b, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        y.data[((b * conv.out_channels + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut conv = Conv2d::new("c", 3, 4, 3, stride, pad, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor([35, 3, 7, 6], &mut rng);
            let a = conv.forward(&x);
            let b = naive(&conv, &x);
            assert_eq!(a.shape, b.shape);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = random_tensor([2, 2, 5, 6], &mut rng);
        let probe = random_tensor(conv.forward(&x).shape, &mut rng);
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let dx = conv.backward(&x, &probe, true).unwrap();
        let e = 1e-6;
        for i in 0..conv.weight.len() {
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + e;
            let up = loss(&conv, &x);
            conv.weight.value[i] = orig - e;
            let dn = loss(&conv, &x);
            conv.weight.value[i] = orig;
            assert!(((up - dn) / (2.0 * e) - conv.weight.grad[i]).abs() < 1e-6);
        }
        for i in 0..conv.bias.len() {
            let orig = conv.bias.value[i];
            conv.bias.value[i] = orig + e;
            let up = loss(&conv, &x);
            conv.bias.value[i] = orig - e;
            let dn = loss(&conv, &x);
            conv.bias.value[i] = orig;
            assert!(((up - dn) / (2.0 * e) - conv.bias.grad[i]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        for i in 0..x.data.len() {
            xp.data[i] = x.data[i] + e;
            let up = loss(&conv, &xp);
            xp.data[i] = x.data[i] - e;
            let dn = loss(&conv, &xp);
            xp.data[i] = x.data[i];
            assert!(((up - dn) / (2.0 * e) - dx.data[i]).abs() < 1e-6);
        }
    }
}
