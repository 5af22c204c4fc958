//! Parameter update rules and learning-rate schedules.
//!
//! Vanilla SGD (theta <- theta - eta * g) and Adam with bias correction.
//! Stabilizers act purely on the loss or gradients before the optimizer sees
//! them; the optimizers themselves are unaware of clipping.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

/// One SGD step: theta' = theta - eta * g.
pub fn sgd_step<T: Element>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], eta: f64) {
    let lr = T::from_f64(eta);
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * gv;
        }
    }
}

/// Adam state: first/second moment estimates per parameter and the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Element> AdamState<T> {
    /// Fresh state with m = v = 0, t = 0 and the recommended beta2/epsilon.
    pub fn new(param_shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam step with bias correction. `beta1` may vary per step (it is
/// scheduled in some learning policies); the bias correction uses the current
/// value's power, matching the usual streaming implementation.
pub fn adam_step<T: Element>(
    state: &mut AdamState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    eta: f64,
    beta1: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powi(t));
    let corr2 = T::from_f64(1.0 - state.beta2.powi(t));
    let lr = T::from_f64(eta);
    let eps = T::from_f64(state.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((pv, &gv), (mv, vv)) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / corr1;
            let v_hat = *vv / corr2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Which update rule a trial uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer state for one trial.
#[derive(Clone, Debug)]
pub enum Optimizer<T: Element> {
    Sgd,
    Adam(AdamState<T>),
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, param_shapes: &[Vec<usize>]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(param_shapes)),
        }
    }

    pub fn apply(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        eta: f64,
        beta1: f64,
    ) {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, eta),
            Optimizer::Adam(state) => adam_step(state, params, grads, eta, beta1),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }
}

/// One schedule segment over steps [start, end), linearly interpolating
/// learning rate and Adam beta1 (constant when the endpoints agree).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    pub eta_start: f64,
    pub eta_end: f64,
    pub beta1_start: f64,
    pub beta1_end: f64,
}

impl Segment {
    fn constant(start: u64, end: u64, eta: f64, beta1: f64) -> Self {
        Segment { start, end, eta_start: eta, eta_end: eta, beta1_start: beta1, beta1_end: beta1 }
    }
}

/// Piecewise schedule mapping step -> (eta, adam beta1), covering
/// [0, total_steps) without gaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub segments: Vec<Segment>,
}

impl Schedule {
    /// Constant learning rate over the whole horizon.
    pub fn constant(eta: f64, total_steps: u64) -> Self {
        Schedule { segments: vec![Segment::constant(0, total_steps, eta, 0.9)] }
    }

    /// The batch-64 supersampling policy rescaled to `total_steps`: base rate
    /// 1/1280, dropped to 1/12800 after 54687/100000 of the horizon.
    pub fn supersampling_batch64(total_steps: u64) -> Self {
        let boundary = ((54_687u128 * total_steps as u128 + 50_000) / 100_000) as u64;
        let boundary = boundary.min(total_steps);
        let mut segments = Vec::new();
        if boundary > 0 {
            segments.push(Segment::constant(0, boundary, 1.0 / 1280.0, 0.9));
        }
        if boundary < total_steps {
            segments.push(Segment::constant(boundary, total_steps, 1.0 / 12800.0, 0.9));
        }
        Schedule { segments }
    }

    /// Constant `eta0` for the first half, then decayed to zero in eight equal
    /// staircase steps over the second half while beta1 decays 0.9 -> 0.5.
    pub fn staircase_decay(eta0: f64, total_steps: u64) -> Self {
        let half = total_steps / 2;
        let mut segments = vec![Segment::constant(0, half, eta0, 0.9)];
        let span = total_steps - half;
        let mut prev = half;
        for k in 1..=8u64 {
            let end = if k == 8 { total_steps } else { half + (span * k) / 8 };
            if end > prev {
                let frac = k as f64 / 8.0;
                segments.push(Segment::constant(
                    prev,
                    end,
                    eta0 * (1.0 - frac),
                    0.9 - 0.4 * frac,
                ));
                prev = end;
            }
        }
        Schedule { segments }
    }

    pub fn total_steps(&self) -> u64 {
        self.segments.last().map(|s| s.end).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = 0u64;
        for seg in &self.segments {
            if seg.start != expected || seg.end <= seg.start {
                return Err(Error::Config(format!(
                    "schedule segments must cover the horizon without gaps; found \
                     [{}, {}) when expecting a start of {expected}",
                    seg.start, seg.end
                )));
            }
            expected = seg.end;
        }
        Ok(())
    }

    /// Scheduled (eta, adam beta1) at a step inside the horizon.
    pub fn at(&self, step: u64) -> Result<(f64, f64)> {
        let seg = self
            .segments
            .iter()
            .find(|s| step >= s.start && step < s.end)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "step {step} is outside the schedule horizon [0, {})",
                    self.total_steps()
                ))
            })?;
        let span = (seg.end - seg.start) as f64;
        let frac = (step - seg.start) as f64 / span;
        Ok((
            seg.eta_start + (seg.eta_end - seg.eta_start) * frac,
            seg.beta1_start + (seg.beta1_end - seg.beta1_start) * frac,
        ))
    }
}
