//! Loss along the line between two models.

use crate::adversary::{pgd_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelSpec, ParamVector};
use crate::seeds;

/// `(1 − w)·a + w·b`, evaluated as `a + w·(b − a)`. The endpoints return
/// exact copies.
pub fn interpolate_models(a: &ParamVector, b: &ParamVector, w: f64) -> Result<ParamVector> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "interpolating vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !w.is_finite() {
        return Err(Error::InvalidArgument(format!("interpolation weight {w}")));
    }
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    Ok(ParamVector::from_vec(
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x + w * (y - x))
            .collect(),
    ))
}

/// 29 points from −0.2 to 1.2 in steps of 0.05, including both endpoints.
pub fn default_grid() -> Vec<f64> {
    (0..29).map(|i| (i as f64 - 4.0) / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub w: f64,
    pub nat_loss: f64,
    pub adv_loss: Option<f64>,
}

/// Natural and (when `attack` is given) adversarial loss at every grid point.
/// Every point uses the same attack stream, so identical endpoints give a
/// constant table.
pub fn loss_sweep(
    a: &ParamVector,
    b: &ParamVector,
    spec: &ModelSpec,
    data: &Batch,
    attack: Option<&AttackConfig>,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if data.is_empty() {
        return Err(Error::Empty("interpolation dataset".into()));
    }
    grid.iter()
        .map(|&w| {
            let theta = interpolate_models(a, b, w)?;
            let nat_loss = nn::mean_loss(&theta, spec, data)?;
            let adv_loss = match attack {
                Some(cfg) => {
                    let mut rng = seeds::rng(seed, &[seeds::EVAL]);
                    let adv = pgd_attack(&theta, spec, data, cfg, &mut rng)?;
                    Some(nn::mean_loss(&theta, spec, &adv)?)
                }
                None => None,
            };
            Ok(SweepRow {
                w,
                nat_loss,
                adv_loss,
            })
        })
        .collect()
}

/// CSV text with columns `w,nat_loss,adv_loss`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("w,nat_loss,adv_loss\n");
    for r in rows {
        let adv = r.adv_loss.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.w, r.nat_loss, adv));
    }
    out
}
