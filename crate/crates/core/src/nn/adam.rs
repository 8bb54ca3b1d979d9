use serde::{Deserialize, Serialize};

/// Learning-rate multiplier as a function of the optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from 0 over `warmup` steps, then cosine decay to 0 at
    /// step `total`.
    CosineWarmup { warmup: u64, total: u64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::CosineWarmup { warmup, total } => {
                if step < warmup {
                    step as f64 / warmup as f64
                } else if step >= total || total <= warmup {
                    0.0
                } else {
                    let p = (step - warmup) as f64 / (total - warmup) as f64;
                    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Adam moments and step counter for one flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the next call to [`Adam::step`].
    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.step)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter buffer size changed");
        assert_eq!(grad.len(), self.m.len(), "gradient size mismatch");
        let lr = self.current_lr();
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}
