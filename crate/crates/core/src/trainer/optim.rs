//! Update rules applied to the full-precision parameters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, no momentum.
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Bias-corrected ADAM step. Returns the additive update for every group.
pub fn adam_update(
    state: &mut AdamState,
    grads: &[&[f64]],
    lr: f64,
    p: &AdamParams,
) -> Vec<Vec<f64>> {
    assert_eq!(
        grads.len(),
        state.m.len(),
        "one gradient per parameter group"
    );
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - p.beta1.powi(t);
    let c2 = 1.0 - p.beta2.powi(t);
    grads
        .iter()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .map(|(g, (m, v))| {
            assert_eq!(g.len(), m.len(), "gradient shaped like its moments");
            g.iter()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|(&g, (m, v))| {
                    *m = p.beta1 * *m + (1.0 - p.beta1) * g;
                    *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    -lr * m_hat / (v_hat.sqrt() + p.eps)
                })
                .collect()
        })
        .collect()
}

pub fn sgd_update(grads: &[&[f64]], lr: f64) -> Vec<Vec<f64>> {
    grads
        .iter()
        .map(|g| g.iter().map(|&g| -lr * g).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    Sgd,
    Adam(AdamState),
}

impl OptState {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => OptState::Adam(AdamState::new(sizes)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptState::Sgd => OptimizerKind::Sgd,
            OptState::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn deltas(&mut self, grads: &[&[f64]], lr: f64) -> Vec<Vec<f64>> {
        match self {
            OptState::Sgd => sgd_update(grads, lr),
            OptState::Adam(s) => adam_update(s, grads, lr, &AdamParams::default()),
        }
    }
}
