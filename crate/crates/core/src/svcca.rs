//! SVCCA similarity between layers of two networks.
//!
//! A layer is represented by its activation matrix: one row per neuron, one
//! column per probe input, each row mean-centered. Each side is reduced to the
//! top singular directions that keep a fraction `variance_keep` of the squared
//! singular-value mass; canonical correlations between the two reduced
//! subspaces are then the singular values of the product of their whitened
//! bases. The score is the mean canonical correlation.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{forward, ModelSpec, ParamVector};

pub const DEFAULT_VARIANCE_KEEP: f64 = 0.99;

/// Added to singular values before inverting them during whitening.
const WHITEN_EPS: f64 = 1e-10;

/// Root-mean-square level below which a layer counts as all-zero.
const ZERO_RMS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    /// `neurons x probe_points`.
    pub data: DMatrix<f64>,
    pub layer: usize,
}

impl ActivationMatrix {
    /// Wraps a `neurons x probe_points` matrix, centering each row.
    pub fn new(mut data: DMatrix<f64>, layer: usize) -> Self {
        center_rows(&mut data);
        Self { data, layer }
    }

    pub fn neurons(&self) -> usize {
        self.data.nrows()
    }

    pub fn probe_points(&self) -> usize {
        self.data.ncols()
    }

    /// Fewer probe points than neurons; the subspace estimate is unreliable.
    pub fn is_underdetermined(&self) -> bool {
        self.probe_points() < self.neurons()
    }
}

pub fn center_rows(m: &mut DMatrix<f64>) {
    let cols = m.ncols();
    if cols == 0 {
        return;
    }
    for mut row in m.row_iter_mut() {
        let mean = row.sum() / cols as f64;
        row.add_scalar_mut(-mean);
    }
}

/// Activations of layer `layer` (hidden output, or logits for the last layer)
/// on the probe inputs.
pub fn layer_activations(
    params: &ParamVector,
    spec: &ModelSpec,
    probe: &Matrix,
    layer: usize,
) -> Result<ActivationMatrix> {
    if layer >= spec.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range; the model has {} layers",
            spec.num_layers()
        )));
    }
    let fwd = forward(params, spec, probe)?;
    let out = &fwd.post[layer];
    let data = DMatrix::from_fn(out.cols(), out.rows(), |n, p| out.get(p, n));
    Ok(ActivationMatrix::new(data, layer))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SvccaResult {
    pub score: f64,
    pub correlations: Vec<f64>,
    pub kept_a: usize,
    pub kept_b: usize,
    /// One side (or both) had no variance; the score is 1 if both did, else 0.
    pub degenerate: bool,
    pub underdetermined: bool,
}

/// Whitened basis (`rank x probe_points`) of the top singular directions.
fn reduced_basis(m: &DMatrix<f64>, keep: f64) -> Option<DMatrix<f64>> {
    let rms = (m.norm_squared() / (m.len().max(1) as f64)).sqrt();
    if rms <= ZERO_RMS {
        return None;
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let total: f64 = s.iter().map(|x| x * x).sum();
    let mut mass = 0.0;
    let mut rank = 0;
    for &i in &order {
        mass += s[i] * s[i];
        rank += 1;
        if mass >= keep * total {
            break;
        }
    }

    // The reduced data is diag(s)·Vᵀ; whitening it gives diag(s / (s + eps))·Vᵀ.
    let mut basis = DMatrix::zeros(rank, m.ncols());
    for (r, &i) in order.iter().take(rank).enumerate() {
        let scale = s[i] / (s[i] + WHITEN_EPS);
        for c in 0..m.ncols() {
            basis[(r, c)] = scale * v_t[(i, c)];
        }
    }
    Some(basis)
}

pub fn svcca_score(
    a: &ActivationMatrix,
    b: &ActivationMatrix,
    variance_keep: f64,
) -> Result<SvccaResult> {
    svcca_score_raw(&a.data, &b.data, variance_keep)
}

/// SVCCA on raw `neurons x probe_points` matrices; rows are centered here.
pub fn svcca_score_raw(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    variance_keep: f64,
) -> Result<SvccaResult> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "activation matrices have {} and {} probe points",
            a.ncols(),
            b.ncols()
        )));
    }
    if !(variance_keep > 0.0 && variance_keep <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance_keep must be in (0, 1], got {variance_keep}"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activation matrix".into()));
    }
    let underdetermined = a.ncols() < a.nrows() || b.ncols() < b.nrows();
    let (mut a, mut b) = (a.clone(), b.clone());
    center_rows(&mut a);
    center_rows(&mut b);

    match (
        reduced_basis(&a, variance_keep),
        reduced_basis(&b, variance_keep),
    ) {
        (Some(wa), Some(wb)) => {
            let cross = &wa * wb.transpose();
            let mut correlations: Vec<f64> = cross
                .singular_values()
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            correlations.sort_by(|x, y| y.total_cmp(x));
            let score = correlations.iter().sum::<f64>() / correlations.len() as f64;
            Ok(SvccaResult {
                score,
                correlations,
                kept_a: wa.nrows(),
                kept_b: wb.nrows(),
                degenerate: false,
                underdetermined,
            })
        }
        (wa, wb) => Ok(SvccaResult {
            score: if wa.is_none() && wb.is_none() {
                1.0
            } else {
                0.0
            },
            correlations: Vec::new(),
            kept_a: wa.map_or(0, |m| m.nrows()),
            kept_b: wb.map_or(0, |m| m.nrows()),
            degenerate: true,
            underdetermined,
        }),
    }
}

/// Per-layer scores for one unordered client pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScores {
    pub a: usize,
    pub b: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub layers: Vec<usize>,
    pub pairs: Vec<PairScores>,
    /// Per-layer mean over all pairs.
    pub mean: Vec<f64>,
}

impl DriftReport {
    /// Scores for the first two clients.
    pub fn primary(&self) -> &PairScores {
        &self.pairs[0]
    }
}

/// SVCCA between every unordered pair of client models on the given layers.
pub fn drift_report(
    clients: &[ParamVector],
    spec: &ModelSpec,
    probe: &Matrix,
    layers: &[usize],
    variance_keep: f64,
) -> Result<DriftReport> {
    if clients.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "drift needs at least two clients, got {}",
            clients.len()
        )));
    }
    let acts: Vec<Vec<ActivationMatrix>> = clients
        .iter()
        .map(|p| {
            layers
                .iter()
                .map(|&l| layer_activations(p, spec, probe, l))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut pairs = Vec::new();
    for a in 0..clients.len() {
        for b in a + 1..clients.len() {
            let scores = acts[a]
                .iter()
                .zip(&acts[b])
                .map(|(x, y)| svcca_score(x, y, variance_keep).map(|r| r.score))
                .collect::<Result<Vec<_>>>()?;
            pairs.push(PairScores { a, b, scores });
        }
    }
    let mean = (0..layers.len())
        .map(|l| pairs.iter().map(|p| p.scores[l]).sum::<f64>() / pairs.len() as f64)
        .collect();
    Ok(DriftReport {
        layers: layers.to_vec(),
        pairs,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        gaussian(n, n, rng).qr().q()
    }

    #[test]
    fn self_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(8, 200, &mut rng);
        let r = svcca_score_raw(&a, &a, 0.99).unwrap();
        assert!((r.score - 1.0).abs() < 1e-6, "{}", r.score);
        assert!(!r.degenerate);
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = gaussian(10, 300, &mut rng);
            let q = random_orthogonal(10, &mut rng);
            let r = svcca_score_raw(&a, &(&q * &a), 0.99).unwrap();
            assert!((r.score - 1.0).abs() < 1e-4, "{}", r.score);
        }
    }

    #[test]
    fn invertible_map_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(6, 400, &mut rng);
        let m = DMatrix::<f64>::identity(6, 6) + gaussian(6, 6, &mut rng) * 0.2;
        let full = svcca_score_raw(&a, &(&m * &a), 1.0).unwrap();
        assert!((full.score - 1.0).abs() < 1e-4, "{}", full.score);
    }

    #[test]
    fn independent_noise_scores_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(10, 2000, &mut rng);
        let b = gaussian(10, 2000, &mut rng);
        let r = svcca_score_raw(&a, &b, 0.99).unwrap();
        assert!(r.score < 0.5, "{}", r.score);
        assert!(r.score >= 0.0);
    }

    #[test]
    fn symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(7, 150, &mut rng);
        let b = &a * 0.5 + gaussian(7, 150, &mut rng);
        let ab = svcca_score_raw(&a, &b, 0.99).unwrap();
        let ba = svcca_score_raw(&b, &a, 0.99).unwrap();
        assert!((ab.score - ba.score).abs() < 1e-9);
    }

    #[test]
    fn degenerate_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zero = DMatrix::zeros(4, 50);
        let a = gaussian(4, 50, &mut rng);
        let both = svcca_score_raw(&zero, &zero, 0.99).unwrap();
        assert_eq!(both.score, 1.0);
        assert!(both.degenerate);
        let one = svcca_score_raw(&zero, &a, 0.99).unwrap();
        assert_eq!(one.score, 0.0);
        assert!(one.degenerate);
        // Constant rows vanish after centering.
        let constant = DMatrix::from_element(4, 50, 3.7);
        assert!(svcca_score_raw(&constant, &zero, 0.99).unwrap().degenerate);
    }

    #[test]
    fn shape_and_argument_errors() {
        let a = DMatrix::zeros(3, 10);
        let b = DMatrix::zeros(3, 11);
        assert!(svcca_score_raw(&a, &b, 0.99).is_err());
        assert!(svcca_score_raw(&a, &a, 0.0).is_err());
        assert!(svcca_score_raw(&a, &a, 1.5).is_err());
    }

    #[test]
    fn truncation_keeps_dominant_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Two strong directions plus faint noise in eight more.
        let signal = gaussian(2, 500, &mut rng);
        let mix = gaussian(10, 2, &mut rng);
        let a = &mix * &signal + gaussian(10, 500, &mut rng) * 1e-3;
        let r = svcca_score_raw(&a, &a, 0.99).unwrap();
        assert_eq!(r.kept_a, 2);
    }

    #[test]
    fn activations_shape_centering_and_layers() {
        let spec = ModelSpec::new(vec![3, 5, 4, 2], Activation::Tanh, 9).unwrap();
        let p = init_params(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe =
            Matrix::from_vec(20, 3, (0..60).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let act = layer_activations(&p, &spec, &probe, 1).unwrap();
        assert_eq!((act.neurons(), act.probe_points()), (4, 20));
        for row in act.data.row_iter() {
            assert!(row.sum().abs() < 1e-12);
        }
        let mut again = act.data.clone();
        center_rows(&mut again);
        assert!((&again - &act.data).amax() < 1e-15);
        assert_eq!(act, layer_activations(&p, &spec, &probe, 1).unwrap());
        assert_eq!(
            layer_activations(&p, &spec, &probe, 2).unwrap().neurons(),
            2
        );
        assert!(layer_activations(&p, &spec, &probe, 3).is_err());

        let zero = ParamVector::zeros(spec.param_count());
        let z = layer_activations(&zero, &spec, &probe, 0).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drift_pairs() {
        let spec = ModelSpec::new(vec![3, 6, 3], Activation::Relu, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probe =
            Matrix::from_vec(40, 3, (0..120).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let p = init_params(&spec).unwrap();
        let same = drift_report(&vec![p.clone(); 3], &spec, &probe, &[0, 1], 0.99).unwrap();
        assert_eq!(same.pairs.len(), 3);
        for s in same.pairs.iter().flat_map(|p| &p.scores) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        let clients: Vec<ParamVector> = (0..4)
            .map(|s| init_params(&spec.with_seed(s)).unwrap())
            .collect();
        let r = drift_report(&clients, &spec, &probe, &[1], 0.99).unwrap();
        assert_eq!(r.pairs.len(), 6);
        assert_eq!((r.primary().a, r.primary().b), (0, 1));
        assert!(r.mean[0] <= 1.0 + 1e-9 && r.mean[0] >= 0.0);
        assert!(drift_report(&clients[..1], &spec, &probe, &[1], 0.99).is_err());
    }
}
