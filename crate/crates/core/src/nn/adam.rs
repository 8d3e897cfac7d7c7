use serde::{Deserialize, Serialize};

/// Piecewise-constant step size: `(first_step, alpha)` pairs sorted by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub segments: Vec<(u64, f64)>,
}

impl StepSchedule {
    pub fn constant(alpha: f64) -> Self {
        Self {
            segments: vec![(0, alpha)],
        }
    }

    /// Spread `rates` over equal consecutive parts of a `total_steps` budget.
    pub fn equal_parts(total_steps: u64, rates: &[f64]) -> Self {
        assert!(!rates.is_empty());
        let segments = rates
            .iter()
            .enumerate()
            .map(|(i, &a)| (i as u64 * total_steps / rates.len() as u64, a))
            .collect();
        Self { segments }
    }

    /// Step size for the zero-based step `step`.
    pub fn alpha(&self, step: u64) -> f64 {
        self.segments
            .iter()
            .take_while(|(start, _)| *start <= step)
            .last()
            .map(|s| s.1)
            .unwrap_or(self.segments[0].1)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: StepSchedule,
}

impl AdamState {
    pub fn new(n_params: usize, schedule: StepSchedule) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let alpha = self.schedule.alpha(self.t);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= alpha * mhat / (vhat.sqrt() + eps);
        }
    }
}
