//! The functional backbone: generalized eigendirections of (Fisher,
//! invariance) selected from a band of the spectrum, and the anchored
//! projection onto them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryEstimate;
use crate::linalg::{gevp, EigenPairs, Matrix};
use crate::model::{representation, split_sequence, Corpus, ModelParams};

pub const DEFAULT_TAU_LOWER: f64 = 1e-4;
pub const DEFAULT_TAU_UPPER: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Adaptive,
    NaiveTopk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSubspace {
    /// `d x k`, columns are C-normalized generalized eigenvectors.
    pub basis: Matrix,
    /// Eigenvalues of the selected columns, descending.
    pub lambdas: Vec<f64>,
    pub lambda_max: f64,
    /// Positions of the selected directions in the full descending spectrum.
    pub selected_indices: Vec<usize>,
    /// The full descending spectrum.
    pub spectrum: Vec<f64>,
    /// Anchor subtracted before projecting; zero when `anchored` is false.
    pub mean: Vec<f64>,
    pub anchored: bool,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub k: usize,
    pub mode: SelectionMode,
}

fn solve(geom: &GeometryEstimate) -> Result<EigenPairs> {
    let pairs = gevp(&geom.fisher, &geom.invariance)?;
    let lambda_max = pairs.values.first().copied().unwrap_or(0.0);
    if !(lambda_max > 0.0) {
        return Err(Error::DegenerateSpectrum { lambda_max });
    }
    Ok(pairs)
}

fn assemble(geom: &GeometryEstimate, pairs: EigenPairs, chosen: Vec<usize>, tau: (f64, f64), mode: SelectionMode) -> FunctionalSubspace {
    let columns: Vec<Vec<f64>> = chosen.iter().map(|&i| pairs.vectors[i].clone()).collect();
    FunctionalSubspace {
        basis: Matrix::from_columns(&columns),
        lambdas: chosen.iter().map(|&i| pairs.values[i]).collect(),
        lambda_max: pairs.values[0],
        k: chosen.len(),
        selected_indices: chosen,
        spectrum: pairs.values,
        mean: geom.mean.clone(),
        anchored: true,
        tau_lower: tau.0,
        tau_upper: tau.1,
        mode,
    }
}

/// Indices `i` with `τ_lower·λ₁ ≤ λᵢ ≤ τ_upper·λ₁` in a descending spectrum.
pub fn band_indices(spectrum: &[f64], tau_lower: f64, tau_upper: f64) -> Vec<usize> {
    let top = spectrum[0];
    let (lo, hi) = (tau_lower * top, tau_upper * top);
    spectrum.iter().enumerate().filter(|(_, &l)| lo <= l && l <= hi).map(|(i, _)| i).collect()
}

/// Backbone from the `k` largest eigenvalues inside the spectral band.
pub fn build_backbone(geom: &GeometryEstimate, k: usize, tau_lower: f64, tau_upper: f64) -> Result<FunctionalSubspace> {
    let d = geom.dim();
    if !(0.0 < tau_lower && tau_lower < tau_upper && tau_upper <= 1.0) {
        return Err(Error::InvalidConfig(format!("thresholds must satisfy 0 < {tau_lower} < {tau_upper} <= 1")));
    }
    if k == 0 || k > d {
        return Err(Error::DimensionMismatch { expected: d, got: k });
    }
    let pairs = solve(geom)?;
    let band = band_indices(&pairs.values, tau_lower, tau_upper);
    if band.len() < k {
        return Err(Error::BandTooNarrow { available: band.len(), requested: k });
    }
    // The spectrum is sorted descending with ties in original order, so the
    // first k band members are the largest with lower index winning ties.
    let chosen = band[..k].to_vec();
    Ok(assemble(geom, pairs, chosen, (tau_lower, tau_upper), SelectionMode::Adaptive))
}

/// Backbone from the `k` largest eigenvalues with no band filter.
pub fn naive_topk_backbone(geom: &GeometryEstimate, k: usize) -> Result<FunctionalSubspace> {
    let d = geom.dim();
    if k == 0 || k > d {
        return Err(Error::DimensionMismatch { expected: d, got: k });
    }
    let pairs = solve(geom)?;
    Ok(assemble(geom, pairs, (0..k).collect(), (0.0, 1.0), SelectionMode::NaiveTopk))
}

/// Size of the adaptive band, for callers that want to shrink `k` to fit.
pub fn band_size(geom: &GeometryEstimate, tau_lower: f64, tau_upper: f64) -> Result<usize> {
    let pairs = solve(geom)?;
    Ok(band_indices(&pairs.values, tau_lower, tau_upper).len())
}

impl FunctionalSubspace {
    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    /// Same directions with the anchor removed, so `z = U*ᵀ·r`.
    pub fn unanchored(&self) -> Self {
        Self { mean: vec![0.0; self.dim()], anchored: false, ..self.clone() }
    }

    /// `z = U*ᵀ·(r − μ)`
    pub fn project(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: r.len() });
        }
        let centered: Vec<f64> = r.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self.basis.tr_mat_vec(&centered))
    }

    /// Maps a gradient with respect to `z` back to `r`: `U*·g`.
    pub fn pull_back(&self, dz: &[f64]) -> Vec<f64> {
        self.basis.mat_vec(dz)
    }

    /// `z(x)` for every sequence, using its `T` input tokens.
    pub fn project_batch(&self, params: &ModelParams, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
        if corpus.is_empty() {
            return Err(Error::EmptyChallenge);
        }
        corpus
            .sequences
            .iter()
            .map(|s| {
                let input = if s.len() > params.config.context_len { split_sequence(s).0 } else { s.as_slice() };
                self.project(&representation(params, input)?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{estimate_geometry, OperatorSpec};
    use crate::model::{gen_corpus, CorpusRole, ModelConfig};

    fn diag_geometry(fisher: &[f64]) -> GeometryEstimate {
        let d = fisher.len();
        GeometryEstimate {
            fisher: Matrix::from_diag(fisher),
            invariance: Matrix::identity(d),
            mean: vec![0.0; d],
            sample_count: 1,
            ridge: 0.0,
            operators: vec![],
            n_draws: 1,
        }
    }

    #[test]
    fn band_excludes_top_and_bottom() {
        let geom = diag_geometry(&[10.0, 6.0, 0.5, 1e-4]);
        let sub = build_backbone(&geom, 2, 1e-3, 0.6).unwrap();
        assert_eq!(sub.lambda_max, 10.0);
        assert_eq!(sub.selected_indices, vec![1, 2]);
        assert_eq!(sub.lambdas, vec![6.0, 0.5]);
        assert_eq!(sub.mode, SelectionMode::Adaptive);
        assert_eq!(sub.basis.column(0), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(sub.basis.column(1), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn band_too_narrow() {
        let geom = diag_geometry(&[10.0, 6.0, 0.5, 1e-4]);
        assert_eq!(build_backbone(&geom, 3, 1e-3, 0.6), Err(Error::BandTooNarrow { available: 2, requested: 3 }));
    }

    #[test]
    fn degenerate_spectrum() {
        let geom = diag_geometry(&[0.0, 0.0]);
        assert!(matches!(build_backbone(&geom, 1, 1e-3, 0.6), Err(Error::DegenerateSpectrum { .. })));
        assert!(matches!(naive_topk_backbone(&geom, 1), Err(Error::DegenerateSpectrum { .. })));
    }

    #[test]
    fn naive_topk_selection() {
        let geom = diag_geometry(&[10.0, 6.0, 0.5, 1e-4]);
        let sub = naive_topk_backbone(&geom, 2).unwrap();
        assert_eq!(sub.lambdas, vec![10.0, 6.0]);
        assert_eq!(sub.mode, SelectionMode::NaiveTopk);
        let all = naive_topk_backbone(&geom, 4).unwrap();
        assert_eq!(all.selected_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let geom = diag_geometry(&[10.0, 3.0, 3.0, 3.0]);
        let sub = build_backbone(&geom, 2, 1e-3, 0.6).unwrap();
        assert_eq!(sub.selected_indices, vec![1, 2]);
        assert_eq!(sub.basis.column(0), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_arithmetic() {
        let mut geom = diag_geometry(&[2.0, 1.0]);
        geom.mean = vec![1.0, 1.0];
        let sub = naive_topk_backbone(&geom, 2).unwrap();
        assert_eq!(sub.project(&[3.0, 2.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(sub.project(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(sub.project(&[1.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 }));
        assert_eq!(sub.unanchored().project(&[3.0, 2.0]).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn model_backbone_properties() {
        let cfg = ModelConfig { vocab_size: 8, hidden_dim: 6, num_layers: 4, bottleneck_layer: 2, context_len: 5, seed: 4 };
        let p = ModelParams::init(&cfg).unwrap();
        let calib = gen_corpus(1, 2, &cfg, 128, CorpusRole::Calibration);
        let geom = estimate_geometry(&p, &calib, &OperatorSpec::default_family(3), 3).unwrap();
        let sub = build_backbone(&geom, 3, 1e-4, 0.9).unwrap();
        let g = sub.basis.transpose().matmul(&geom.invariance).matmul(&sub.basis);
        for i in 0..3 {
            for j in 0..3 {
                assert!((g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-7);
            }
        }
        assert!(sub.project(&sub.mean).unwrap().iter().all(|&v| v == 0.0));
        let again = build_backbone(&geom, 3, 1e-4, 0.9).unwrap();
        assert_eq!(sub, again);

        let zs = sub.project_batch(&p, &calib).unwrap();
        assert_eq!(zs.len(), calib.len());
        let single = Corpus::new(CorpusRole::Challenge, vec![calib.sequences[7].clone()]);
        assert_eq!(sub.project_batch(&p, &single).unwrap()[0], zs[7]);
        assert_eq!(sub.project_batch(&p, &calib).unwrap(), zs);
    }
}
