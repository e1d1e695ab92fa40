//! Local optimizers: SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD only.
    pub momentum: f64,
    /// Adam only.
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub batch_size: usize,
    /// Clear velocity / moments at the start of every federated round.
    pub reset_each_round: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 1e-2,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            batch_size: 32,
            reset_each_round: true,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            ..Self::default()
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!(
                "optimizer.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            out.push("optimizer.batch_size must be positive".into());
        }
        match self.kind {
            OptimizerKind::SgdMomentum => {
                if !(0.0..1.0).contains(&self.momentum) {
                    out.push(format!(
                        "optimizer.momentum must be in [0, 1), got {}",
                        self.momentum
                    ));
                }
            }
            OptimizerKind::Adam => {
                for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        out.push(format!("optimizer.{name} must be in [0, 1), got {b}"));
                    }
                }
                if !(self.eps_hat > 0.0) {
                    out.push(format!(
                        "optimizer.eps_hat must be positive, got {}",
                        self.eps_hat
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Velocity (SGD) or first/second moments (Adam), shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn reset(&mut self) {
        self.first.iter_mut().for_each(|v| *v = 0.0);
        self.second.iter_mut().for_each(|v| *v = 0.0);
        self.steps = 0;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Applies one update to `params` in place.
pub fn step(
    params: &mut [f64],
    grads: &[f64],
    config: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, optimizer state {}",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.steps += 1;
    let lr = config.learning_rate;
    match config.kind {
        OptimizerKind::SgdMomentum => {
            let mu = config.momentum;
            for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
                *v = mu * *v - lr * g;
                *p += *v;
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (config.beta1, config.beta2);
            let t = state.steps as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for (((p, &g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(&mut state.first)
                .zip(&mut state.second)
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + config.eps_hat);
            }
        }
    }
    Ok(())
}
