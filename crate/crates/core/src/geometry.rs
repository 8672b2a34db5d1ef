//! Fisher sensitivity and compression-invariance matrices of the bottleneck
//! representation, plus its calibration mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_basis, Matrix};
use crate::model::{grad_bottleneck, representation, split_sequence, Corpus, ModelParams};

/// Relative ridge added to the invariance matrix, as a fraction of `trace/d`.
pub const RIDGE_FRACTION: f64 = 1e-4;
/// Absolute ridge floor added to the invariance matrix.
pub const RIDGE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    LinearProjection,
    QuantizationNoise,
    StructuralDropout,
}

/// One compression operator. Only the parameter of its own kind is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    #[serde(default = "default_rank_ratio")]
    pub rank_ratio: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_retention")]
    pub retention: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rank_ratio() -> f64 {
    0.25
}
fn default_sigma() -> f64 {
    0.1
}
fn default_retention() -> f64 {
    0.9
}

impl OperatorSpec {
    pub fn new(kind: OperatorKind, seed: u64) -> Self {
        Self { kind, rank_ratio: default_rank_ratio(), sigma: default_sigma(), retention: default_retention(), seed }
    }

    /// Projection, noise and dropout with their default parameters.
    pub fn default_family(seed: u64) -> Vec<Self> {
        vec![
            Self::new(OperatorKind::LinearProjection, seed),
            Self::new(OperatorKind::QuantizationNoise, seed.wrapping_add(1)),
            Self::new(OperatorKind::StructuralDropout, seed.wrapping_add(2)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            OperatorKind::LinearProjection => self.rank_ratio > 0.0 && self.rank_ratio <= 1.0,
            OperatorKind::QuantizationNoise => self.sigma >= 0.0 && self.sigma.is_finite(),
            OperatorKind::StructuralDropout => self.retention > 0.0 && self.retention <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid operator parameters: {self:?}")))
        }
    }

    fn rng(&self, draw: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(draw);
        rng
    }
}

/// Applies one stochastic draw of the operator to `r`. The randomness is a
/// pure function of `(spec.seed, draw)`.
pub fn apply_operator(spec: &OperatorSpec, r: &[f64], draw: u64) -> Vec<f64> {
    let d = r.len();
    let mut rng = spec.rng(draw);
    match spec.kind {
        OperatorKind::LinearProjection => {
            let rank = ((spec.rank_ratio * d as f64).ceil() as usize).clamp(1, d);
            let q = orthonormal_basis(rng.random(), d, rank).expect("rank never exceeds dimension");
            let mut out = vec![0.0; d];
            for col in &q {
                let c = crate::linalg::dot(col, r);
                out.iter_mut().zip(col).for_each(|(o, qi)| *o += c * qi);
            }
            out
        }
        OperatorKind::QuantizationNoise => {
            if spec.sigma == 0.0 {
                return r.to_vec();
            }
            let normal = Normal::new(0.0, spec.sigma).expect("finite sigma");
            r.iter().map(|v| v + normal.sample(&mut rng)).collect()
        }
        OperatorKind::StructuralDropout => {
            r.iter().map(|&v| if rng.random::<f64>() < spec.retention { v } else { 0.0 }).collect()
        }
    }
}

/// `F = mean g gᵀ` over precomputed gradients.
pub fn fisher_from_gradients(grads: &[Vec<f64>]) -> Result<Matrix> {
    let d = grads.first().ok_or(Error::EmptyCalibration)?.len();
    let mut f = Matrix::zeros(d, d);
    let w = 1.0 / grads.len() as f64;
    for g in grads {
        if g.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: g.len() });
        }
        f.add_outer(w, g);
    }
    Ok(f)
}

/// Fisher matrix of the bottleneck: mean outer product of `∇_r L_LM`.
pub fn estimate_fisher(params: &ModelParams, calib: &Corpus) -> Result<Matrix> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let grads = calib.sequences.iter().map(|s| grad_bottleneck(params, s)).collect::<Result<Vec<_>>>()?;
    fisher_from_gradients(&grads)
}

/// Bottleneck representations of the calibration inputs.
pub fn calibration_representations(params: &ModelParams, calib: &Corpus) -> Result<Vec<Vec<f64>>> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    calib.sequences.iter().map(|s| representation(params, split_sequence(s).0)).collect()
}

/// Adds `(RIDGE_FRACTION·trace/d + RIDGE_FLOOR)·I`; returns the ridge used.
pub fn add_ridge(c: &mut Matrix) -> f64 {
    let d = c.rows();
    let ridge = RIDGE_FRACTION * c.trace() / d as f64 + RIDGE_FLOOR;
    for i in 0..d {
        c[(i, i)] += ridge;
    }
    ridge
}

/// Pre-ridge invariance matrix `mean (r − a(r))(r − a(r))ᵀ` over
/// representations, `n_draws` draws each, with the operator for every draw
/// picked uniformly from `specs`.
pub fn invariance_from_representations(reps: &[Vec<f64>], specs: &[OperatorSpec], n_draws: usize) -> Result<Matrix> {
    let d = reps.first().ok_or(Error::EmptyCalibration)?.len();
    if specs.is_empty() {
        return Err(Error::InvalidConfig("no compression operators".into()));
    }
    if n_draws == 0 {
        return Err(Error::InvalidConfig("n_draws must be at least 1".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let mut chooser = ChaCha8Rng::seed_from_u64(specs[0].seed ^ 0x5e1e_c7);
    let mut c = Matrix::zeros(d, d);
    let w = 1.0 / (reps.len() * n_draws) as f64;
    let mut diff = vec![0.0; d];
    for (i, r) in reps.iter().enumerate() {
        for n in 0..n_draws {
            let draw = (i * n_draws + n) as u64;
            let spec = &specs[chooser.random_range(0..specs.len())];
            let a = apply_operator(spec, r, draw);
            diff.iter_mut().zip(r.iter().zip(&a)).for_each(|(o, (x, y))| *o = x - y);
            c.add_outer(w, &diff);
        }
    }
    Ok(c)
}

/// Ridge-regularized invariance matrix of the calibration representations.
pub fn estimate_invariance(params: &ModelParams, calib: &Corpus, specs: &[OperatorSpec], n_draws: usize) -> Result<Matrix> {
    let reps = calibration_representations(params, calib)?;
    let mut c = invariance_from_representations(&reps, specs, n_draws)?;
    add_ridge(&mut c);
    Ok(c)
}

pub fn mean_vector(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = vectors.first().ok_or(Error::EmptyCalibration)?.len();
    let mut mu = vec![0.0; d];
    for v in vectors {
        mu.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    let n = vectors.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    Ok(mu)
}

/// Mean bottleneck representation over the calibration set.
pub fn mean_representation(params: &ModelParams, calib: &Corpus) -> Result<Vec<f64>> {
    mean_vector(&calibration_representations(params, calib)?)
}

/// Everything the subspace construction needs, serializable for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryEstimate {
    pub fisher: Matrix,
    pub invariance: Matrix,
    pub mean: Vec<f64>,
    pub sample_count: usize,
    pub ridge: f64,
    pub operators: Vec<OperatorSpec>,
    pub n_draws: usize,
}

impl GeometryEstimate {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Same estimate with the invariance matrix replaced by the identity.
    pub fn with_identity_invariance(&self) -> Self {
        Self { invariance: Matrix::identity(self.dim()), ridge: 0.0, ..self.clone() }
    }
}

/// Fisher, invariance and mean from one pass over the calibration set.
pub fn estimate_geometry(params: &ModelParams, calib: &Corpus, specs: &[OperatorSpec], n_draws: usize) -> Result<GeometryEstimate> {
    let fisher = estimate_fisher(params, calib)?;
    let reps = calibration_representations(params, calib)?;
    let mut invariance = invariance_from_representations(&reps, specs, n_draws)?;
    let ridge = add_ridge(&mut invariance);
    let mean = mean_vector(&reps)?;
    Ok(GeometryEstimate {
        fisher,
        invariance,
        mean,
        sample_count: calib.len(),
        ridge,
        operators: specs.to_vec(),
        n_draws,
    })
}
