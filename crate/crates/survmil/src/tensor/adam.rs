//! Adam with decoupled weight decay, plus global-norm gradient clipping.

use super::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, learning_rate: f64, weight_decay: f64) -> Self {
        let first_moment = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let second_moment = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            first_moment,
            second_moment,
        }
    }

    /// One update over every parameter, reading gradients in place.
    /// Weight decay is decoupled: theta -= lr * wd * theta before the Adam
    /// delta. Gradients are left untouched; the trainer zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let slot = id.0;
            let tensor = params.get_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let grad = match tensor.grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            if self.weight_decay != 0.0 {
                let decay = self.learning_rate * self.weight_decay;
                tensor.data.iter_mut().for_each(|w| *w -= decay * *w);
            }
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    let mut sq = 0.0;
    for &id in &ids {
        let t = params.get(id);
        if !t.requires_grad {
            continue;
        }
        if let Some(g) = t.grad.as_ref() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for &id in &ids {
            let t = params.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}
