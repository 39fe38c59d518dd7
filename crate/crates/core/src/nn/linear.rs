use rand::Rng;

use super::{gemm, Param, Parameterized};

/// Fully-connected layer over row-major `[n, in]` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_features as f64).sqrt();
        Self::with_bound(name, in_features, out_features, bound, rng)
    }

    pub fn with_bound(
        name: &str,
        in_features: usize,
        out_features: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[out_features, in_features], bound, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(x.len(), n * self.in_features, "linear input size");
        let mut y = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            y.extend_from_slice(&self.bias.value);
        }
        // y (n x out) += x (n x in) * W^T (in x out)
        gemm(
            n,
            self.in_features,
            self.out_features,
            x,
            self.in_features,
            1,
            &self.weight.value,
            1,
            self.in_features,
            1.0,
            &mut y,
        );
        y
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(dy.len(), n * self.out_features, "linear grad size");
        for row in dy.chunks_exact(self.out_features) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        // dW (out x in) += dy^T (out x n) * x (n x in)
        gemm(
            self.out_features,
            n,
            self.in_features,
            dy,
            1,
            self.out_features,
            x,
            self.in_features,
            1,
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = vec![0.0; n * self.in_features];
        // dx (n x in) = dy (n x out) * W (out x in)
        gemm(
            n,
            self.out_features,
            self.in_features,
            dy,
            self.out_features,
            1,
            &self.weight.value,
            self.in_features,
            1,
            0.0,
            &mut dx,
        );
        dx
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
