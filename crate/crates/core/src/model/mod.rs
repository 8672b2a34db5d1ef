//! A small autoregressive token model with exact backpropagation.
//!
//! Position `t` sees the current token and the one before it:
//!
//! ```text
//! h₀[t] = E_cur[x_t] + E_prev[x_{t-1}]        (E_prev term absent at t = 0)
//! hₗ[t] = hₗ₋₁[t] + tanh(hₗ₋₁[t]·Wₗ + bₗ)      for l = 1..L
//! logits[t] = h_L[t]·W_head + b_head
//! ```
//!
//! The bottleneck representation `r` is `h_ℓ` at the final input position.

mod corpus;
mod train;

pub use corpus::{gen_corpus, sample_corpus, Corpus, CorpusRole, MarkovChain};
pub use train::{train_lm, Sgd, TrainConfig, TrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Standard deviation of the seeded normal initialization.
pub const INIT_STD: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// 1-based index of the block whose output is the bottleneck.
    pub bottleneck_layer: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 32, hidden_dim: 32, num_layers: 4, bottleneck_layer: 2, context_len: 16, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.hidden_dim < 2 {
            return Err(Error::InvalidConfig(format!("hidden_dim {} < 2", self.hidden_dim)));
        }
        if self.bottleneck_layer < 1 || self.bottleneck_layer > self.num_layers {
            return Err(Error::InvalidConfig(format!(
                "bottleneck layer {} outside [1, {}]",
                self.bottleneck_layer, self.num_layers
            )));
        }
        if self.context_len < 1 {
            return Err(Error::InvalidConfig("context_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// `d x d`
    pub weight: Matrix,
    /// `1 x d`
    pub bias: Matrix,
}

/// How a tensor participates in pruning and noise attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
}

/// All model weights. The same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab x d`
    pub tok_emb: Matrix,
    /// `vocab x d`
    pub prev_emb: Matrix,
    pub blocks: Vec<Block>,
    /// `d x vocab`
    pub head: Matrix,
    /// `1 x vocab`
    pub head_bias: Matrix,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d) = (config.vocab_size, config.hidden_dim);
        Self {
            config: config.clone(),
            tok_emb: Matrix::zeros(v, d),
            prev_emb: Matrix::zeros(v, d),
            blocks: (0..config.num_layers)
                .map(|_| Block { weight: Matrix::zeros(d, d), bias: Matrix::zeros(1, d) })
                .collect(),
            head: Matrix::zeros(d, v),
            head_bias: Matrix::zeros(1, v),
        }
    }

    /// Normal(0, [`INIT_STD`]²) weights and embeddings, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (_, kind, t) in p.tensors_mut() {
            if kind != TensorKind::Bias {
                t.as_mut_slice().iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, TensorKind, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), TensorKind::Embedding, &self.tok_emb),
            ("prev_emb".to_string(), TensorKind::Embedding, &self.prev_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.weight", i + 1), TensorKind::Weight, &b.weight));
            out.push((format!("block{}.bias", i + 1), TensorKind::Bias, &b.bias));
        }
        out.push(("head".to_string(), TensorKind::Weight, &self.head));
        out.push(("head_bias".to_string(), TensorKind::Bias, &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorKind, &mut Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), TensorKind::Embedding, &mut self.tok_emb),
            ("prev_emb".to_string(), TensorKind::Embedding, &mut self.prev_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{}.weight", i + 1), TensorKind::Weight, &mut b.weight));
            out.push((format!("block{}.bias", i + 1), TensorKind::Bias, &mut b.bias));
        }
        out.push(("head".to_string(), TensorKind::Weight, &mut self.head));
        out.push(("head_bias".to_string(), TensorKind::Bias, &mut self.head_bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.is_finite())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.tensors();
        for ((_, _, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.as_mut_slice().iter_mut().zip(s.as_slice()).for_each(|(d, s)| *d += alpha * s);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, _, t) in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|((_, _, a), (_, _, b))| crate::linalg::dot(a.as_slice(), b.as_slice()))
            .sum()
    }
}

/// Hidden states of every layer for one input sequence.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    /// `hidden[l][t]` is `h_l` at position `t`, `l = 0..=L`.
    hidden: Vec<Vec<Vec<f64>>>,
    /// `act[l-1][t]` is `tanh(pre_l)` for block `l`.
    act: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Bottleneck representation: `h_ℓ` at the final position.
    pub fn representation(&self, bottleneck_layer: usize) -> &[f64] {
        let last = self.tokens.len() - 1;
        &self.hidden[bottleneck_layer][last]
    }

    pub fn hidden(&self, layer: usize, position: usize) -> &[f64] {
        &self.hidden[layer][position]
    }
}

fn check_tokens(params: &ModelParams, x: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if x.len() > cfg.context_len {
        return Err(Error::SequenceTooLong { len: x.len(), max: cfg.context_len });
    }
    if x.is_empty() {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    if let Some(&token) = x.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { token, vocab: cfg.vocab_size });
    }
    Ok(())
}

fn input_embedding(params: &ModelParams, x: &[usize], t: usize) -> Vec<f64> {
    let mut h = params.tok_emb.row(x[t]).to_vec();
    if t > 0 {
        h.iter_mut().zip(params.prev_emb.row(x[t - 1])).for_each(|(a, b)| *a += b);
    }
    h
}

fn block_forward(block: &Block, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pre = block.weight.tr_mat_vec(h);
    pre.iter_mut().zip(block.bias.as_slice()).for_each(|(p, b)| *p += b);
    let act: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
    let out = h.iter().zip(&act).map(|(a, b)| a + b).collect();
    (out, act)
}

fn head_forward(params: &ModelParams, h: &[f64]) -> Vec<f64> {
    let mut logits = params.head.tr_mat_vec(h);
    logits.iter_mut().zip(params.head_bias.as_slice()).for_each(|(l, b)| *l += b);
    logits
}

/// Full forward pass over an input sequence of length at most `T`.
pub fn forward_cached(params: &ModelParams, x: &[usize]) -> Result<ForwardCache> {
    check_tokens(params, x)?;
    let n = x.len();
    let num_layers = params.blocks.len();
    let mut hidden = Vec::with_capacity(num_layers + 1);
    let mut act = Vec::with_capacity(num_layers);
    hidden.push((0..n).map(|t| input_embedding(params, x, t)).collect::<Vec<_>>());
    for block in &params.blocks {
        let prev = hidden.last().expect("input layer present");
        let (outs, acts): (Vec<_>, Vec<_>) = prev.iter().map(|h| block_forward(block, h)).unzip();
        hidden.push(outs);
        act.push(acts);
    }
    let logits = hidden[num_layers].iter().map(|h| head_forward(params, h)).collect();
    Ok(ForwardCache { tokens: x.to_vec(), hidden, act, logits })
}

/// Logits per position and the bottleneck representation `r`.
pub fn forward(params: &ModelParams, x: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let cache = forward_cached(params, x)?;
    let r = cache.representation(params.config.bottleneck_layer).to_vec();
    Ok((cache.logits, r))
}

/// Bottleneck representation only; evaluates blocks `1..=ℓ` at the final position.
pub fn representation(params: &ModelParams, x: &[usize]) -> Result<Vec<f64>> {
    check_tokens(params, x)?;
    let mut h = input_embedding(params, x, x.len() - 1);
    for block in &params.blocks[..params.config.bottleneck_layer] {
        h = block_forward(block, &h).0;
    }
    Ok(h)
}

/// Splits a corpus sequence of `T + 1` tokens into inputs and targets.
pub fn split_sequence(seq: &[usize]) -> (&[usize], &[usize]) {
    assert!(seq.len() >= 2, "a training sequence needs at least two tokens");
    (&seq[..seq.len() - 1], &seq[1..])
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Summed next-token cross-entropy of one sequence and its target count.
fn sequence_loss(params: &ModelParams, seq: &[usize]) -> Result<(f64, usize)> {
    let (input, targets) = split_sequence(seq);
    let cache = forward_cached(params, input)?;
    check_tokens(params, &targets[targets.len() - 1..])?;
    let total = cache.logits.iter().zip(targets).map(|(l, &y)| -log_softmax(l)[y]).sum();
    Ok((total, targets.len()))
}

/// Mean next-token cross-entropy over every position of every sequence.
pub fn lm_loss(params: &ModelParams, batch: &[&[usize]]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut total = 0.0;
    let mut count = 0;
    for seq in batch {
        let (l, n) = sequence_loss(params, seq)?;
        total += l;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn corpus_loss(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let batch: Vec<&[usize]> = corpus.sequences.iter().map(Vec::as_slice).collect();
    lm_loss(params, &batch)
}

pub fn perplexity(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    corpus_loss(params, corpus).map(f64::exp)
}

/// Upstream gradients for one input sequence.
#[derive(Debug, Clone, Default)]
pub struct SequenceGrad {
    /// Gradient with respect to the logits at each position (may be empty).
    pub logits: Vec<Vec<f64>>,
    /// Gradient with respect to the bottleneck representation `r`.
    pub representation: Option<Vec<f64>>,
}

/// Accumulates the parameter gradient of one sequence into `grads`.
///
/// `upstream.logits`, when non-empty, must have one entry per position.
/// When it is empty only blocks `1..=ℓ` and the embeddings receive gradient.
pub fn backward(params: &ModelParams, cache: &ForwardCache, upstream: &SequenceGrad, grads: &mut ModelParams) {
    let n = cache.tokens.len();
    let d = params.config.hidden_dim;
    let ell = params.config.bottleneck_layer;
    let num_layers = params.blocks.len();

    let (mut dh, top) = if upstream.logits.is_empty() {
        (vec![vec![0.0; d]; n], ell)
    } else {
        let mut dh = Vec::with_capacity(n);
        for (t, dl) in upstream.logits.iter().enumerate() {
            let h = &cache.hidden[num_layers][t];
            for (i, &hi) in h.iter().enumerate() {
                for (g, &dlc) in grads.head.row_mut(i).iter_mut().zip(dl) {
                    *g += hi * dlc;
                }
            }
            grads.head_bias.as_mut_slice().iter_mut().zip(dl).for_each(|(g, v)| *g += v);
            dh.push(params.head.mat_vec(dl));
        }
        (dh, num_layers)
    };

    for l in (1..=top).rev() {
        if l == ell {
            if let Some(dr) = &upstream.representation {
                dh[n - 1].iter_mut().zip(dr).for_each(|(a, b)| *a += b);
            }
        }
        let block = &params.blocks[l - 1];
        let gblock = &mut grads.blocks[l - 1];
        for t in 0..n {
            let act = &cache.act[l - 1][t];
            let dpre: Vec<f64> = dh[t].iter().zip(act).map(|(g, a)| g * (1.0 - a * a)).collect();
            let h_in = &cache.hidden[l - 1][t];
            for (i, &hi) in h_in.iter().enumerate() {
                if hi == 0.0 {
                    continue;
                }
                for (g, &dp) in gblock.weight.row_mut(i).iter_mut().zip(&dpre) {
                    *g += hi * dp;
                }
            }
            gblock.bias.as_mut_slice().iter_mut().zip(&dpre).for_each(|(g, v)| *g += v);
            let back = block.weight.mat_vec(&dpre);
            dh[t].iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }
    }

    for t in 0..n {
        grads.tok_emb.row_mut(cache.tokens[t]).iter_mut().zip(&dh[t]).for_each(|(g, v)| *g += v);
        if t > 0 {
            grads.prev_emb.row_mut(cache.tokens[t - 1]).iter_mut().zip(&dh[t]).for_each(|(g, v)| *g += v);
        }
    }
}

/// `∂(mean CE)/∂logits` for one sequence, with each position weighted by `scale`.
pub fn ce_logit_grads(cache: &ForwardCache, targets: &[usize], scale: f64) -> Vec<Vec<f64>> {
    cache
        .logits
        .iter()
        .zip(targets)
        .map(|(l, &y)| {
            let mut p = softmax(l);
            p[y] -= 1.0;
            p.iter_mut().for_each(|v| *v *= scale);
            p
        })
        .collect()
}

/// Gradient of the sequence's mean next-token loss with respect to the
/// bottleneck representation, by backpropagation through the blocks above ℓ.
pub fn grad_bottleneck(params: &ModelParams, seq: &[usize]) -> Result<Vec<f64>> {
    let (input, targets) = split_sequence(seq);
    let cache = forward_cached(params, input)?;
    let last = input.len() - 1;
    let y = targets[last];
    if y >= params.config.vocab_size {
        return Err(Error::TokenOutOfRange { token: y, vocab: params.config.vocab_size });
    }
    let mut dl = softmax(&cache.logits[last]);
    dl[y] -= 1.0;
    dl.iter_mut().for_each(|v| *v /= targets.len() as f64);
    let mut dh = params.head.mat_vec(&dl);
    for l in (params.config.bottleneck_layer + 1..=params.blocks.len()).rev() {
        let act = &cache.act[l - 1][last];
        let dpre: Vec<f64> = dh.iter().zip(act).map(|(g, a)| g * (1.0 - a * a)).collect();
        let back = params.blocks[l - 1].weight.mat_vec(&dpre);
        dh.iter_mut().zip(back).for_each(|(a, b)| *a += b);
    }
    Ok(dh)
}

/// Mean loss and its gradient over a batch of sequences.
pub fn grad_lm(params: &ModelParams, batch: &[&[usize]]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut grads = params.zeros_like();
    let count: usize = batch.iter().map(|s| s.len() - 1).sum();
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for seq in batch {
        let (input, targets) = split_sequence(seq);
        let cache = forward_cached(params, input)?;
        check_tokens(params, targets)?;
        total += cache.logits.iter().zip(targets).map(|(l, &y)| -log_softmax(l)[y]).sum::<f64>();
        let upstream = SequenceGrad { logits: ce_logit_grads(&cache, targets, scale), representation: None };
        backward(params, &cache, &upstream, &mut grads);
    }
    Ok((total * scale, grads))
}

/// Gradient of an arbitrary objective given per-sequence upstream gradients.
/// `loss_fn` maps each forward cache to its upstream gradient.
pub fn grad_params<F>(params: &ModelParams, inputs: &[&[usize]], mut loss_fn: F) -> Result<ModelParams>
where
    F: FnMut(usize, &ForwardCache) -> SequenceGrad,
{
    let mut grads = params.zeros_like();
    for (i, x) in inputs.iter().enumerate() {
        let cache = forward_cached(params, x)?;
        let upstream = loss_fn(i, &cache);
        backward(params, &cache, &upstream, &mut grads);
    }
    Ok(grads)
}

/// `θ ← θ − lr·g`
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> ModelParams {
    let mut next = params.clone();
    next.axpy(-lr, grads);
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig { vocab_size: 7, hidden_dim: 5, num_layers: 3, bottleneck_layer: 2, context_len: 6, seed: 42 }
    }

    /// Random model with larger weights than the default init so every
    /// nonlinearity is exercised.
    fn random_params(cfg: &ModelConfig, std: f64) -> ModelParams {
        let mut p = ModelParams::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1000);
        let normal = Normal::new(0.0, std).unwrap();
        for (_, _, t) in p.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        p
    }

    fn reference_forward(params: &ModelParams, x: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let cfg = &params.config;
        let (d, v) = (cfg.hidden_dim, cfg.vocab_size);
        let mut logits = Vec::new();
        let mut r = Vec::new();
        for t in 0..x.len() {
            let mut h = vec![0.0; d];
            for i in 0..d {
                h[i] = params.tok_emb[(x[t], i)];
                if t > 0 {
                    h[i] += params.prev_emb[(x[t - 1], i)];
                }
            }
            for (l, block) in params.blocks.iter().enumerate() {
                let mut next = h.clone();
                for j in 0..d {
                    let mut s = block.bias[(0, j)];
                    for i in 0..d {
                        s += h[i] * block.weight[(i, j)];
                    }
                    next[j] += s.tanh();
                }
                h = next;
                if l + 1 == cfg.bottleneck_layer && t == x.len() - 1 {
                    r = h.clone();
                }
            }
            let mut out = vec![0.0; v];
            for c in 0..v {
                out[c] = params.head_bias[(0, c)];
                for i in 0..d {
                    out[c] += h[i] * params.head[(i, c)];
                }
            }
            logits.push(out);
        }
        (logits, r)
    }

    #[test]
    fn zero_params_give_zero_representation() {
        let cfg = small_config();
        let p = ModelParams::zeros(&cfg);
        let (logits, r) = forward(&p, &[1, 2, 3]).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        assert!(logits.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        assert_eq!(forward(&p, &[1, 4, 0, 6]).unwrap(), forward(&p, &[1, 4, 0, 6]).unwrap());
        assert_eq!(p, ModelParams::init(&cfg).unwrap());
    }

    #[test]
    fn forward_matches_reference() {
        let cfg = small_config();
        let p = random_params(&cfg, 0.7);
        let x = [3, 1, 4, 1, 5, 6];
        let (logits, r) = forward(&p, &x).unwrap();
        let (ref_logits, ref_r) = reference_forward(&p, &x);
        for (a, b) in r.iter().zip(&ref_r) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in logits.iter().flatten().zip(ref_logits.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(representation(&p, &x).unwrap(), r);
    }

    #[test]
    fn forward_errors() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        assert_eq!(forward(&p, &[7]).unwrap_err(), Error::TokenOutOfRange { token: 7, vocab: 7 });
        assert!(matches!(forward(&p, &[0; 7]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn representation_ignores_upper_layers() {
        let cfg = small_config();
        let p = random_params(&cfg, 0.5);
        let mut q = p.clone();
        q.blocks[2].weight.as_mut_slice().iter_mut().for_each(|w| *w += 1.0);
        q.head.as_mut_slice().iter_mut().for_each(|w| *w *= -3.0);
        let x = [0, 1, 2];
        assert_eq!(forward(&p, &x).unwrap().1, forward(&q, &x).unwrap().1);
    }

    #[test]
    fn uniform_head_loss_is_log_vocab() {
        let cfg = small_config();
        let mut p = random_params(&cfg, 0.5);
        p.head = Matrix::zeros(cfg.hidden_dim, cfg.vocab_size);
        p.head_bias = Matrix::zeros(1, cfg.vocab_size);
        let seq: Vec<usize> = vec![1, 2, 3, 4, 5];
        let loss = lm_loss(&p, &[&seq]).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
        let corpus = Corpus::new(CorpusRole::Evaluation, vec![seq]);
        assert!((perplexity(&p, &corpus).unwrap() - cfg.vocab_size as f64).abs() < 1e-10);
    }

    #[test]
    fn confident_correct_head_drives_loss_to_zero() {
        // Logits depend only on the head bias; always predicting token 2.
        let cfg = small_config();
        let mut p = ModelParams::zeros(&cfg);
        p.head_bias[(0, 2)] = 60.0;
        let loss = lm_loss(&p, &[&[2, 2, 2, 2]]).unwrap();
        assert!((0.0..1e-20).contains(&loss));
    }

    #[test]
    fn loss_matches_scalar_reference_loop() {
        let cfg = small_config();
        let p = random_params(&cfg, 0.6);
        let seqs: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3, 4, 5, 6], vec![6, 5, 4, 3, 2, 1, 0], vec![1, 1, 2, 3, 5, 1, 6], vec![3, 3, 3, 0, 0, 0, 3]];
        let batch: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for s in &seqs {
            let (logits, _) = reference_forward(&p, &s[..s.len() - 1]);
            for (t, l) in logits.iter().enumerate() {
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
                total += -(l[s[t + 1]] - m - z.ln());
                count += 1.0;
            }
        }
        assert!((lm_loss(&p, &batch).unwrap() - total / count).abs() < 1e-10);
    }

    #[test]
    fn bottleneck_gradient_matches_finite_differences() {
        let cfg = small_config();
        let p = random_params(&cfg, 0.6);
        let seq = [2, 5, 1, 0, 3, 6, 4];
        let g = grad_bottleneck(&p, &seq).unwrap();
        let (input, targets) = split_sequence(&seq);
        let r = representation(&p, input).unwrap();
        // Loss as a function of r: only the final position depends on it.
        let loss_of_r = |r: &[f64]| -> f64 {
            let mut h = r.to_vec();
            for block in &p.blocks[cfg.bottleneck_layer..] {
                h = block_forward(block, &h).0;
            }
            let logits = head_forward(&p, &h);
            -log_softmax(&logits)[targets[targets.len() - 1]] / targets.len() as f64
        };
        for i in 0..cfg.hidden_dim {
            let mut plus = r.clone();
            let mut minus = r.clone();
            plus[i] += 1e-5;
            minus[i] -= 1e-5;
            let fd = (loss_of_r(&plus) - loss_of_r(&minus)) / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn disconnected_upper_layers_give_zero_bottleneck_gradient() {
        let cfg = small_config();
        let mut p = random_params(&cfg, 0.6);
        p.blocks[2] = Block { weight: Matrix::zeros(5, 5), bias: Matrix::zeros(1, 5) };
        p.head = Matrix::zeros(5, 7);
        let g = grad_bottleneck(&p, &[1, 2, 3, 4]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let cfg = small_config();
        let p = random_params(&cfg, 0.6);
        let seq = [1, 2, 3, 4, 5];
        let (l1, g1) = grad_lm(&p, &[&seq]).unwrap();
        let (l2, g2) = grad_lm(&p, &[&seq, &seq]).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        let diff = g1.dot(&g1) - 2.0 * g1.dot(&g2) + g2.dot(&g2);
        assert!(diff.abs() < 1e-20);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = small_config();
        let p = random_params(&cfg, 0.5);
        let seqs: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3, 4, 5, 6], vec![6, 6, 5, 1, 0, 2, 3]];
        let batch: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let (_, grads) = grad_lm(&p, &batch).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _, _)| n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        use rand::Rng;
        for (ti, name) in names.iter().enumerate() {
            let len = p.tensors()[ti].2.as_slice().len();
            for _ in 0..4 {
                let idx = rng.random_range(0..len);
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    q.tensors_mut()[ti].2.as_mut_slice()[idx] += delta;
                    lm_loss(&q, &batch).unwrap()
                };
                let fd = (bump(1e-5) - bump(-1e-5)) / 2e-5;
                let an = grads.tensors()[ti].2.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-5), "{name}[{idx}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn sgd_fixed_points() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let g = p.zeros_like();
        assert_eq!(sgd_step(&p, &g, 0.5), p);
        let (_, g) = grad_lm(&p, &[&[1, 2, 3]]).unwrap();
        assert_eq!(sgd_step(&p, &g, 0.0), p);
    }
}
