//! l∞ projected gradient descent attack.
//!
//! Each step moves every input coordinate by `alpha` in the direction of the
//! sign of the loss gradient, clamps the result to the `epsilon` box around
//! the clean input, then clamps it to the valid input range. `sign(0) = 0`.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{loss_and_grads, Batch, ModelSpec, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub t_steps: usize,
    #[serde(deserialize_with = "deserialize_real")]
    pub epsilon: f64,
    #[serde(deserialize_with = "deserialize_real")]
    pub alpha: f64,
    pub input_range: [f64; 2],
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            t_steps: 10,
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            input_range: [0.0, 1.0],
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn new(t_steps: usize, epsilon: f64, alpha: f64) -> Self {
        Self {
            t_steps,
            epsilon,
            alpha,
            ..Self::default()
        }
    }

    pub fn lo(&self) -> f64 {
        self.input_range[0]
    }

    pub fn hi(&self) -> f64 {
        self.input_range[1]
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            out.push(format!(
                "{prefix}.epsilon must be positive, got {}",
                self.epsilon
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!(
                "{prefix}.alpha must be positive, got {}",
                self.alpha
            ));
        }
        if !(self.lo() < self.hi()) {
            out.push(format!(
                "{prefix}.input_range must satisfy lo < hi, got {:?}",
                self.input_range
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems("attack");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Parses a real written either as a decimal or as a fraction `p/q`.
pub fn parse_real(text: &str) -> Result<f64> {
    let text = text.trim();
    let bad = || Error::InvalidArgument(format!("cannot parse {text:?} as a number or fraction"));
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| bad())?;
            let den: f64 = den.trim().parse().map_err(|_| bad())?;
            if den == 0.0 {
                return Err(bad());
            }
            num / den
        }
        None => text.parse().map_err(|_| bad())?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(bad())
    }
}

fn deserialize_real<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Real {
        Num(f64),
        Int(i64),
        Text(String),
    }
    match Real::deserialize(d)? {
        Real::Num(v) => Ok(v),
        Real::Int(v) => Ok(v as f64),
        Real::Text(s) => parse_real(&s).map_err(serde::de::Error::custom),
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD against an arbitrary input-gradient function.
///
/// `input_grad` receives the current adversarial inputs and returns the
/// gradient of the loss with respect to them.
pub fn pgd_attack_with<R, F>(
    batch: &Batch,
    config: &AttackConfig,
    rng: &mut R,
    mut input_grad: F,
) -> Result<Batch>
where
    R: Rng + ?Sized,
    F: FnMut(&Matrix) -> Result<Matrix>,
{
    config.validate()?;
    let (lo, hi) = (config.lo(), config.hi());
    let eps = config.epsilon;
    let clean = batch.inputs.as_slice();
    if let Some(v) = clean.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "attack input {v} outside [{lo}, {hi}]"
        )));
    }

    let mut adv = batch.inputs.clone();
    if config.random_start {
        for (a, &x) in adv.as_mut_slice().iter_mut().zip(clean) {
            let (a_lo, a_hi) = ((x - eps).max(lo), (x + eps).min(hi));
            *a = rng.gen_range(a_lo..=a_hi);
        }
    }

    for step in 0..config.t_steps {
        let grad = input_grad(&adv)?;
        if grad.shape() != adv.shape() {
            return Err(Error::ShapeMismatch(format!(
                "input gradient {:?} vs inputs {:?}",
                grad.shape(),
                adv.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "input gradient at PGD step {step}"
            )));
        }
        for ((a, &x), &g) in adv
            .as_mut_slice()
            .iter_mut()
            .zip(clean)
            .zip(grad.as_slice())
        {
            let moved = *a + config.alpha * sign(g);
            *a = moved.clamp(x - eps, x + eps).clamp(lo, hi);
        }
    }

    Ok(Batch {
        inputs: adv,
        labels: batch.labels.clone(),
    })
}

/// PGD maximizing the network's cross-entropy on `batch`.
pub fn pgd_attack<R: Rng + ?Sized>(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<Batch> {
    pgd_attack_with(batch, config, rng, |x| {
        let probe = Batch {
            inputs: x.clone(),
            labels: batch.labels.clone(),
        };
        loss_and_grads(params, spec, &probe).map(|(_, g)| g.input_grad)
    })
}
