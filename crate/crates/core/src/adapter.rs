//! Additive low-rank factors `W + A·B` on the square weight matrices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::Matrix;
use crate::model::{ModelParams, TensorKind};

/// One adapted tensor: `A` is `rows x rank` (seeded), `B` is `rank x cols`
/// (zero-initialized) so the product starts at zero.
#[derive(Debug, Clone)]
struct Factor {
    tensor: usize,
    a: Matrix,
    b: Matrix,
    vel_a: Matrix,
    vel_b: Matrix,
}

#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    base: ModelParams,
    factors: Vec<Factor>,
    pub rank: usize,
}

impl LowRankAdapter {
    /// Attaches factors to every square weight matrix (block weights, and the
    /// head when `vocab == d`). Embedding tables and biases stay frozen.
    pub fn new(base: &ModelParams, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factors = Vec::new();
        for (idx, (_, kind, t)) in base.tensors().into_iter().enumerate() {
            if kind != TensorKind::Weight || !t.is_square() {
                continue;
            }
            let (rows, cols) = (t.rows(), t.cols());
            let r = rank.min(rows).max(1);
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            let a = Matrix::from_vec(rows, r, (0..rows * r).map(|_| normal.sample(&mut rng)).collect());
            factors.push(Factor {
                tensor: idx,
                vel_a: Matrix::zeros(rows, r),
                vel_b: Matrix::zeros(r, cols),
                b: Matrix::zeros(r, cols),
                a,
            });
        }
        Self { base: base.clone(), factors, rank }
    }

    /// `W + A·B` for every adapted tensor.
    pub fn merged(&self) -> ModelParams {
        let mut p = self.base.clone();
        let mut tensors = p.tensors_mut();
        for f in &self.factors {
            let delta = f.a.matmul(&f.b);
            let t = &mut tensors[f.tensor].2;
            t.as_mut_slice().iter_mut().zip(delta.as_slice()).for_each(|(w, d)| *w += d);
        }
        p
    }

    /// One SGD step on the factors given the gradient with respect to the
    /// merged parameters: `∂A = G·Bᵀ`, `∂B = Aᵀ·G`.
    pub fn step(&mut self, grads: &ModelParams, lr: f64, momentum: f64) {
        let g_tensors = grads.tensors();
        for f in &mut self.factors {
            let g = g_tensors[f.tensor].2;
            let grad_a = g.matmul(&f.b.transpose());
            let grad_b = f.a.transpose().matmul(g);
            f.vel_a = f.vel_a.scale(momentum).add(&grad_a);
            f.vel_b = f.vel_b.scale(momentum).add(&grad_b);
            f.a = f.a.sub(&f.vel_a.scale(lr));
            f.b = f.b.sub(&f.vel_b.scale(lr));
        }
    }
}
