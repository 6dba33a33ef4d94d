//! Adam over flat parameter slices.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn iterations(&self) -> i32 {
        self.t
    }

    /// Applies one update in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.advance(params, grads, |_, _| {});
    }

    /// Applies one update and returns each coordinate's effective step size
    /// `lr / (sqrt(v̂) + eps)`, for proximal terms handled outside the optimizer.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Vec<f64> {
        let mut sizes = vec![0.0; params.len()];
        self.advance(params, grads, |i, s| sizes[i] = s);
        sizes
    }

    fn advance(&mut self, params: &mut [f64], grads: &[f64], mut sizes: impl FnMut(usize, f64)) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let size = self.lr / ((self.v[i] / bc2).sqrt() + self.eps);
            params[i] -= size * self.m[i] / bc1;
            sizes(i, size);
        }
    }
}
