use super::tensor::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps_opt", "must be positive"));
        }
        Ok(())
    }
}

/// First/second moment estimates, allocated on the first step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }
}

/// One bias-corrected Adam update over `params` using their accumulated gradients.
/// Gradients are left untouched; the caller zeroes them.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.grad.len() != p.value.len() {
            return Err(Error::MissingGradient { index: i });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::shape(
            "adam_step",
            format!("{} moment groups", state.m.len()),
            format!("{} parameter groups", params.len()),
        ));
    }
    let c = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - (c.beta1 as f64).powi(t);
    let bc2 = 1.0 - (c.beta2 as f64).powi(t);
    let step_size = (c.lr as f64 / bc1) as f32;
    let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), mi), vi) in p
            .value
            .iter_mut()
            .zip(&p.grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            *w -= step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + c.eps);
        }
    }
    Ok(())
}
