//! SGD with momentum, L2 weight decay and a triangular cyclic learning rate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor together with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub momentum: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad: None,
            momentum,
        }
    }

    /// Adds `g` into the gradient slot, creating it if empty.
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        match &mut self.grad {
            Some(existing) => existing.add_assign(g),
            None => {
                if g.shape() != self.value.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient for {} has shape {:?}, parameter is {:?}",
                        self.name,
                        g.shape(),
                        self.value.shape()
                    )));
                }
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CyclicSchedule {
    pub base_lr: f32,
    pub max_lr: f32,
    /// Iterations in each half cycle.
    pub step_size: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub cyclic: Option<CyclicSchedule>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-5,
            cyclic: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if let Some(c) = self.cyclic {
            if !(c.base_lr > 0.0) || c.base_lr > c.max_lr {
                return bad("cyclic bounds need 0 < base_lr <= max_lr");
            }
            if c.step_size == 0 {
                return bad("cyclic step_size must be >= 1");
            }
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration` (0-based optimizer step).
    pub fn lr_at(&self, iteration: u64) -> f32 {
        match self.cyclic {
            Some(c) => triangular(c, iteration),
            None => self.learning_rate,
        }
    }
}

fn triangular(c: CyclicSchedule, iteration: u64) -> f32 {
    let period = 2 * c.step_size;
    let phase = iteration % period;
    // Distance from the peak, 1 at cycle boundaries and 0 at the peak.
    let x = (phase as f64 - c.step_size as f64).abs() / c.step_size as f64;
    let lr = c.base_lr as f64 + (c.max_lr as f64 - c.base_lr as f64) * (1.0 - x).max(0.0);
    (lr as f32).clamp(c.base_lr, c.max_lr)
}

/// Triangular cyclic learning rate; fails if `config` has no cyclic bounds.
pub fn cyclic_lr(config: &SgdConfig, iteration: u64) -> Result<f32> {
    match config.cyclic {
        Some(c) => Ok(triangular(c, iteration)),
        None => Err(Error::Config("cyclic_lr called without a cyclic schedule".into())),
    }
}

/// One SGD step over every parameter, then clears the gradients.
///
/// `g = grad + wd * w; buf = momentum * buf + g; w -= lr(iteration) * buf`
pub fn sgd_step(params: &mut [Parameter], config: &SgdConfig, iteration: u64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::State(format!("parameter {} has no gradient", p.name)));
    }
    let lr = config.lr_at(iteration);
    let (mu, wd) = (config.momentum, config.weight_decay);
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let values = p.value.data_mut();
        let buf = p.momentum.data_mut();
        for ((w, b), &g) in values.iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
            let g = g + wd * *w;
            *b = mu * *b + g;
            *w -= lr * *b;
        }
    }
    Ok(())
}
