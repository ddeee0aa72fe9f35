use super::tensor::Tensor;
use crate::error::{LabError, Result};

/// Bias-corrected Adam moments for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Forgets all moments; the next step starts a fresh bias correction.
    pub fn reset(&mut self) {
        self.step_count = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.m.get(i).map(Vec::as_slice)
    }

    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.v.get(i).map(Vec::as_slice)
    }
}

fn param_label(p: &Tensor, i: usize) -> String {
    p.name()
        .map(str::to_owned)
        .unwrap_or_else(|| format!("#{i}"))
}

/// One Adam update applied in place. Gradients are left for the caller to zero.
pub fn adam_step(params: &[Tensor], state: &mut AdamState) -> Result<()> {
    let grads = params
        .iter()
        .enumerate()
        .map(|(i, p)| p.grad().ok_or_else(|| LabError::MissingGrad(param_label(p, i))))
        .collect::<Result<Vec<_>>>()?;

    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(params).any(|(m, p)| m.len() != p.numel())
    {
        return Err(LabError::invalid(
            "adam_step: parameter list changed shape since the previous step",
        ));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let (lr, eps) = (state.learning_rate, state.epsilon);
        p.update_data(|data| {
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}
