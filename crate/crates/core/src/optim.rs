//! Decoupled-weight-decay Adam and the warmup + cosine learning-rate rule.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamSet};

/// Linear warmup to `base_lr` over `warmup` steps, then cosine decay to
/// `min_lr` at `total` steps.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup: usize, total: usize) -> Result<Self> {
        if warmup >= total {
            return Err(Error::InvalidParam(format!(
                "warmup {warmup} must be < total {total}"
            )));
        }
        Ok(Schedule {
            base_lr,
            min_lr,
            warmup,
            total,
        })
    }

    pub fn from_stage(stage: &crate::config::StageConfig) -> Result<Self> {
        let warmup = ((stage.steps as f64) * stage.warmup_frac).floor() as usize;
        Self::new(stage.base_lr, stage.min_lr, warmup.min(stage.steps.saturating_sub(1)), stage.steps)
    }

    /// Learning rate at `step` (0-based, valid through `total`).
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(Error::InvalidParam(format!(
                "step {step} beyond total {}",
                self.total
            )));
        }
        if step < self.warmup {
            return Ok(self.base_lr * step as f64 / self.warmup as f64);
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        Ok(self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Adam moments plus the hyper-parameters of one optimization run.
pub struct Optimizer {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl Optimizer {
    pub fn new(weight_decay: f64) -> Self {
        Optimizer {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update: Adam moment updates with bias correction, plus decoupled
    /// decay `theta -= lr * wd * theta` applied independently of the gradient
    /// term (and only to `ParamKind::Decay` tensors). A non-finite gradient
    /// aborts the step before any parameter changes.
    pub fn apply<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        self.apply_inner(params, grads, lr, false)
    }

    /// Like [`Optimizer::apply`], but tensors whose gradient is identically
    /// zero are left untouched (no moments, no decay). Used when a step is
    /// meant to update only a subset of the networks behind one optimizer.
    pub fn apply_skipping_zero<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        self.apply_inner(params, grads, lr, true)
    }

    fn apply_inner<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64, skip_zero: bool) -> Result<()> {
        for g in grads.entries() {
            if g.view.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(g.name));
            }
        }
        let grad_entries = grads.entries();
        if self.moments.is_empty() {
            self.moments = grad_entries
                .iter()
                .map(|g| {
                    (
                        ArrayD::zeros(g.view.raw_dim()),
                        ArrayD::zeros(g.view.raw_dim()),
                    )
                })
                .collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for ((p, g), (m, v)) in params
            .entries_mut()
            .into_iter()
            .zip(grad_entries)
            .zip(self.moments.iter_mut())
        {
            debug_assert_eq!(p.name, g.name);
            if p.kind == ParamKind::State {
                continue;
            }
            if skip_zero && g.view.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut theta = p.view;
            ndarray::Zip::from(&mut theta)
                .and(&g.view)
                .and(m)
                .and(v)
                .for_each(|t_ij, &g_ij, m_ij, v_ij| {
                    *m_ij = self.beta1 * *m_ij + (1.0 - self.beta1) * g_ij;
                    *v_ij = self.beta2 * *v_ij + (1.0 - self.beta2) * g_ij * g_ij;
                    let mhat = *m_ij / bc1;
                    let vhat = *v_ij / bc2;
                    *t_ij -= lr * mhat / (vhat.sqrt() + self.eps);
                });
            if p.kind == ParamKind::Decay && self.weight_decay > 0.0 {
                theta.mapv_inplace(|x| x - lr * self.weight_decay * x);
            }
            debug_assert!(theta.iter().all(|x| x.is_finite()));
        }
        Ok(())
    }
}
