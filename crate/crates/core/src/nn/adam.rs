use super::Parameterized;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam optimizer (no weight decay). State is keyed by parameter order,
/// with names checked on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub states: Vec<AdamState>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            states: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update<P: Parameterized + ?Sized>(&mut self, module: &mut P, lr: f64) {
        let mut params = module.params_mut();
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|p| AdamState {
                    name: p.name.clone(),
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect();
        }
        assert_eq!(self.states.len(), params.len(), "optimizer/parameter mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            debug_assert_eq!(p.name, s.name);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = s.m[i] / c1;
                let vhat = s.v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
