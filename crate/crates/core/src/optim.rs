//! Adam optimizer over slot-indexed parameter lists.

use ndarray::Array2;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment state is kept per parameter slot; callers must pass parameters in
/// the same order on every step.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step_count: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. Slots with a `None` gradient (e.g. an inactive
    /// hinge with zero regularization) are skipped.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Option<&Array2<f64>>]) {
        assert_eq!(params.len(), grads.len(), "param/grad slot count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer slot count changed");
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);

        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = grads[i] else { continue };
            assert_eq!(param.dim(), grad.dim(), "slot {i} shape");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((p, g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}
