//! Decoupled-weight-decay Adam and the phased learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::diffmath::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step_count: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_shapes: &[(usize, usize)]) -> Self {
        let first = param_shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let second = param_shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        AdamW { cfg, first, second, step_count: 0 }
    }

    pub fn for_params(cfg: AdamWConfig, params: &[&Matrix]) -> Self {
        let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.shape()).collect();
        Self::new(cfg, &shapes)
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.first, &self.second)
    }

    /// Rebuilds optimizer state from a checkpoint.
    pub fn restore(cfg: AdamWConfig, first: Vec<Matrix>, second: Vec<Matrix>, step_count: u64) -> Self {
        AdamW { cfg, first, second, step_count }
    }

    /// One update: decoupled weight decay p *= (1 - lr*wd), then the
    /// bias-corrected moment step p -= lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step(&mut self, lr: f64, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                detail: format!(
                    "optimizer tracks {} parameters, got {} params / {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            if param.shape() != grad.shape() || param.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                });
            }
            let decay = 1.0 - lr * self.cfg.weight_decay;
            for idx in 0..param.data().len() {
                let g = grad.data()[idx];
                let m_new = self.cfg.beta1 * m.data()[idx] + (1.0 - self.cfg.beta1) * g;
                let v_new = self.cfg.beta2 * v.data()[idx] + (1.0 - self.cfg.beta2) * g * g;
                m.data_mut()[idx] = m_new;
                v.data_mut()[idx] = v_new;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                let p = param.data()[idx] * decay;
                param.data_mut()[idx] = p - lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule")]
pub enum LrRule {
    /// lr0 * 0.5 * (1 + cos(pi * progress)) across the phase.
    Cosine { lr: f64 },
    Constant { lr: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    #[serde(flatten)]
    pub rule: LrRule,
    /// Overrides the stream's inter-pair fraction for this phase.
    #[serde(default)]
    pub inter_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub phases: Vec<Phase>,
}

impl Schedule {
    /// An empty phase list is a zero-epoch schedule (training returns the
    /// initialized model); phases themselves must cover at least one epoch.
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        if phases.iter().any(|p| p.epochs == 0) {
            return Err(Error::Config("schedule phases need >= 1 epoch".into()));
        }
        for p in &phases {
            let lr = match p.rule {
                LrRule::Cosine { lr } | LrRule::Constant { lr } => lr,
            };
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        Ok(Schedule { phases })
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// The phase containing `epoch` and the epoch's offset within it.
    pub fn phase_at(&self, epoch: usize) -> Result<(&Phase, usize)> {
        let mut start = 0;
        for phase in &self.phases {
            if epoch < start + phase.epochs {
                return Ok((phase, epoch - start));
            }
            start += phase.epochs;
        }
        Err(Error::Param {
            op: "lr_at",
            detail: format!("epoch {epoch} outside schedule of {} epochs", self.total_epochs()),
        })
    }

    /// Learning rate at a fractional position inside an epoch (step_frac in [0,1)).
    pub fn lr_at(&self, epoch: usize, step_frac: f64) -> Result<f64> {
        let (phase, offset) = self.phase_at(epoch)?;
        Ok(match phase.rule {
            LrRule::Constant { lr } => lr,
            LrRule::Cosine { lr } => {
                let progress = (offset as f64 + step_frac) / phase.epochs as f64;
                lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        })
    }
}
