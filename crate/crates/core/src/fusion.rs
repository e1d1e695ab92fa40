//! Server-side fusion operators.
//!
//! FedAvg averages client parameters weighted by shard size. FedCurv fuses the
//! weights the same way and additionally broadcasts every client's parameters
//! and Fisher diagonal, from which each client builds a quadratic penalty
//! anchoring its next round of local training to the other clients.
//!
//! The Fisher diagonal is the empirical estimate: the mean over the shard of
//! the squared per-sample gradient of the loss at the true label. Its scale
//! differs from the model-expectation Fisher, so penalty weights tuned for one
//! estimator do not transfer to the other.

use crate::error::{Error, Result};
use crate::nn::{mean_squared_sample_grads, Batch, ModelSpec, ParamVector};

/// What one client sends to the server at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPayload {
    pub params: ParamVector,
    pub shard_size: usize,
    pub fisher: Option<Vec<f64>>,
}

impl FusionPayload {
    pub fn new(params: ParamVector, shard_size: usize) -> Self {
        Self {
            params,
            shard_size,
            fisher: None,
        }
    }

    pub fn with_fisher(mut self, fisher: Vec<f64>) -> Self {
        self.fisher = Some(fisher);
        self
    }
}

/// A client's parameters and Fisher diagonal from the previous round.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub params: ParamVector,
    pub fisher: Vec<f64>,
}

/// Frozen penalty inputs for one client's local training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurvContext {
    pub lambda: f64,
    /// Previous-round anchors of every other client.
    pub anchors: Vec<Anchor>,
}

impl CurvContext {
    /// Context for client `client`: every broadcast anchor except its own.
    pub fn for_client(lambda: f64, broadcast: &[Anchor], client: usize) -> Self {
        Self {
            lambda,
            anchors: broadcast
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != client)
                .map(|(_, a)| a.clone())
                .collect(),
        }
    }

    pub fn is_inert(&self) -> bool {
        self.lambda == 0.0 || self.anchors.is_empty()
    }
}

fn check_payloads(payloads: &[FusionPayload]) -> Result<usize> {
    let first = payloads
        .first()
        .ok_or_else(|| Error::Empty("no payloads to fuse".into()))?;
    let len = first.params.len();
    for (k, p) in payloads.iter().enumerate() {
        if p.params.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "payload {k} has {} parameters, payload 0 has {len}",
                p.params.len()
            )));
        }
        if p.shard_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "payload {k} has an empty shard"
            )));
        }
        if let Some(f) = &p.fisher {
            if f.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "payload {k} fisher has {} entries, expected {len}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "payload {k} fisher has negative or non-finite entries"
                )));
            }
        }
    }
    Ok(len)
}

/// Shard-size weighted average of the client parameters.
pub fn fedavg_fuse(payloads: &[FusionPayload]) -> Result<ParamVector> {
    let len = check_payloads(payloads)?;
    let total: usize = payloads.iter().map(|p| p.shard_size).sum();
    let mut out = ParamVector::zeros(len);
    for p in payloads {
        let w = p.shard_size as f64 / total as f64;
        for (o, &v) in out.iter_mut().zip(p.params.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// FedAvg weights plus the `(θ̂_k, Î_k)` broadcast for next round's penalties.
pub fn fedcurv_fuse(payloads: &[FusionPayload]) -> Result<(ParamVector, Vec<Anchor>)> {
    check_payloads(payloads)?;
    let anchors = payloads
        .iter()
        .enumerate()
        .map(|(k, p)| {
            p.fisher
                .clone()
                .map(|fisher| Anchor {
                    params: p.params.clone(),
                    fisher,
                })
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("payload {k} is missing its fisher diagonal"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((fedavg_fuse(payloads)?, anchors))
}

/// Empirical Fisher diagonal of the cross-entropy on `shard`.
pub fn fisher_diag(params: &ParamVector, spec: &ModelSpec, shard: &Batch) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::Empty("fisher shard".into()));
    }
    Ok(mean_squared_sample_grads(params, spec, shard)?.into_vec())
}

/// Unscaled penalty `Σ_j Σ_i Î_ji (θ_i − θ̂_ji)²` and its gradient.
pub fn curv_penalty(theta: &[f64], anchors: &[Anchor]) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for (j, a) in anchors.iter().enumerate() {
        if a.params.len() != theta.len() || a.fisher.len() != theta.len() {
            return Err(Error::ShapeMismatch(format!(
                "anchor {j} has {}/{} entries, parameters have {}",
                a.params.len(),
                a.fisher.len(),
                theta.len()
            )));
        }
        for (((g, &t), &c), &f) in grad
            .iter_mut()
            .zip(theta)
            .zip(a.params.iter())
            .zip(&a.fisher)
        {
            let d = t - c;
            value += f * d * d;
            *g += 2.0 * f * d;
        }
    }
    Ok((value, grad))
}

/// Adds `λ · ∇R(θ)` to `grad` in place; a no-op for an inert context.
pub fn add_penalty_grad(grad: &mut [f64], theta: &[f64], ctx: &CurvContext) -> Result<()> {
    if ctx.is_inert() {
        return Ok(());
    }
    let (_, pg) = curv_penalty(theta, &ctx.anchors)?;
    for (g, p) in grad.iter_mut().zip(pg) {
        *g += ctx.lambda * p;
    }
    Ok(())
}
