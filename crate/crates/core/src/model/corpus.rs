//! Synthetic order-2 Markov corpora and plain-text token files.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// What a corpus is used for in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    Calibration,
    Embedding,
    Challenge,
    Evaluation,
    Training,
}

/// Token sequences of length `T + 1`: `T` inputs followed by one more
/// token, so that position `t` predicts token `t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub role: CorpusRole,
    pub sequences: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(role: CorpusRole, sequences: Vec<Vec<usize>>) -> Self {
        Self { role, sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for seq in &self.sequences {
            if let Some(&token) = seq.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::TokenOutOfRange { token, vocab: vocab_size });
            }
        }
        Ok(())
    }

    /// A cyclic mini-batch of `size` sequences starting at `step * size`.
    pub fn batch(&self, step: usize, size: usize) -> Vec<&[usize]> {
        let n = self.sequences.len();
        (0..size.min(n).max(1))
            .map(|i| self.sequences[(step * size + i) % n].as_slice())
            .collect()
    }

    /// One whitespace-separated token sequence per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(role: CorpusRole, text: &str) -> std::result::Result<Self, String> {
        let mut sequences = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let seq = line
                .split_whitespace()
                .map(|tok| tok.parse::<usize>().map_err(|e| format!("line {}: {e}", lineno + 1)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            sequences.push(seq);
        }
        Ok(Self { role, sequences })
    }

    /// Splits UTF-8 text into byte-level tokens (vocabulary 256) and cuts it
    /// into non-overlapping windows of `window` tokens.
    pub fn from_bytes(role: CorpusRole, text: &str, window: usize) -> Self {
        let bytes: Vec<usize> = text.bytes().map(usize::from).collect();
        let sequences = bytes.chunks_exact(window.max(1)).map(<[usize]>::to_vec).collect();
        Self { role, sequences }
    }
}

/// Order-2 Markov chain over `vocab` tokens.
///
/// `transitions[(a * vocab + b) * vocab + c]` is `P(next = c | prev = a, cur = b)`.
/// The first token of a sequence is drawn from `initial`; the second uses the
/// context `(x0, x0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub vocab: usize,
    pub initial: Vec<f64>,
    pub transitions: Vec<f64>,
}

/// Rank of the low-rank logit factors of [`MarkovChain::from_seed`].
const CHAIN_FACTOR_RANK: usize = 4;
/// Logit scale of [`MarkovChain::from_seed`]; larger values give sharper,
/// lower-entropy transitions.
const CHAIN_LOGIT_SCALE: f64 = 1.5;

impl MarkovChain {
    /// Seeded chain with logits `s·(Pₐ·Q_c + R_b·S_c)` built from low-rank
    /// Gaussian factors, so the dependence on both context tokens is
    /// additive in logit space.
    pub fn from_seed(seed: u64, vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let mut factor = |n: usize| -> Vec<f64> {
            (0..n * CHAIN_FACTOR_RANK).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let p = factor(vocab);
        let q = factor(vocab);
        let r = factor(vocab);
        let s = factor(vocab);
        let scale = CHAIN_LOGIT_SCALE / (CHAIN_FACTOR_RANK as f64).sqrt();

        let mut transitions = vec![0.0; vocab * vocab * vocab];
        let mut logits = vec![0.0; vocab];
        for a in 0..vocab {
            for b in 0..vocab {
                for (c, l) in logits.iter_mut().enumerate() {
                    let pa: f64 = factor_row(&p, a).iter().zip(factor_row(&q, c)).map(|(x, y)| x * y).sum();
                    let rb: f64 = factor_row(&r, b).iter().zip(factor_row(&s, c)).map(|(x, y)| x * y).sum();
                    *l = scale * (pa + rb);
                }
                let row = &mut transitions[(a * vocab + b) * vocab..(a * vocab + b + 1) * vocab];
                softmax_into(&logits, row);
            }
        }
        Self { vocab, initial: vec![1.0 / vocab as f64; vocab], transitions }
    }

    /// Chain that starts in `token` and never leaves it.
    pub fn absorbing(vocab: usize, token: usize) -> Self {
        let mut initial = vec![0.0; vocab];
        initial[token] = 1.0;
        let mut transitions = vec![0.0; vocab * vocab * vocab];
        for ctx in 0..vocab * vocab {
            transitions[ctx * vocab + token] = 1.0;
        }
        Self { vocab, initial, transitions }
    }

    pub fn next_distribution(&self, prev: usize, cur: usize) -> &[f64] {
        let ctx = prev * self.vocab + cur;
        &self.transitions[ctx * self.vocab..(ctx + 1) * self.vocab]
    }

    pub fn sample_sequence(&self, rng: &mut impl Rng, len: usize) -> Vec<usize> {
        let mut seq = Vec::with_capacity(len);
        if len == 0 {
            return seq;
        }
        seq.push(sample_categorical(&self.initial, rng));
        while seq.len() < len {
            let cur = seq[seq.len() - 1];
            let prev = if seq.len() >= 2 { seq[seq.len() - 2] } else { cur };
            seq.push(sample_categorical(self.next_distribution(prev, cur), rng));
        }
        seq
    }

    /// Mean per-position conditional entropy (nats) of the `targets`
    /// next-token predictions in a sequence of `targets + 1` tokens, which is
    /// the cross-entropy of the Bayes-optimal predictor on such sequences.
    pub fn conditional_entropy(&self, targets: usize) -> f64 {
        let v = self.vocab;
        let row_entropy: Vec<f64> = (0..v * v)
            .map(|ctx| {
                self.transitions[ctx * v..(ctx + 1) * v]
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum()
            })
            .collect();

        // Distribution over (prev, cur) pairs; the first context is (x0, x0).
        let mut pair = vec![0.0; v * v];
        for (a, &p) in self.initial.iter().enumerate() {
            pair[a * v + a] += p;
        }
        let mut total = 0.0;
        for _ in 0..targets {
            total += pair.iter().zip(&row_entropy).map(|(p, h)| p * h).sum::<f64>();
            let mut next = vec![0.0; v * v];
            for a in 0..v {
                for b in 0..v {
                    let w = pair[a * v + b];
                    if w == 0.0 {
                        continue;
                    }
                    for (c, &t) in self.next_distribution(a, b).iter().enumerate() {
                        next[b * v + c] += w * t;
                    }
                }
            }
            pair = next;
        }
        total / targets.max(1) as f64
    }
}

fn factor_row(m: &[f64], i: usize) -> &[f64] {
    &m[i * CHAIN_FACTOR_RANK..(i + 1) * CHAIN_FACTOR_RANK]
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples `n_sequences` sequences of `context_len + 1` tokens from `chain`.
pub fn sample_corpus(chain: &MarkovChain, seed: u64, context_len: usize, n_sequences: usize, role: CorpusRole) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..n_sequences).map(|_| chain.sample_sequence(&mut rng, context_len + 1)).collect();
    Corpus { role, sequences }
}

/// Corpus from the chain `MarkovChain::from_seed(chain_seed, vocab)`, with
/// sampling randomness from `seed`. Calling it with different `seed`s and the
/// same `chain_seed` gives disjoint draws from one distribution.
pub fn gen_corpus(chain_seed: u64, seed: u64, cfg: &ModelConfig, n_sequences: usize, role: CorpusRole) -> Corpus {
    let chain = MarkovChain::from_seed(chain_seed, cfg.vocab_size);
    sample_corpus(&chain, seed, cfg.context_len, n_sequences, role)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_corpus(1, 1, &cfg(), 2, CorpusRole::Training);
        let b = gen_corpus(1, 1, &cfg(), 2, CorpusRole::Training);
        assert_eq!(a, b);
        assert_eq!(a.sequences[0].len(), cfg().context_len + 1);
        let c = gen_corpus(1, 2, &cfg(), 2, CorpusRole::Training);
        assert_ne!(a, c);
    }

    #[test]
    fn absorbing_chain_gives_zero_sequences() {
        let chain = MarkovChain::absorbing(2, 0);
        let corpus = sample_corpus(&chain, 9, 16, 5, CorpusRole::Training);
        assert!(corpus.sequences.iter().flatten().all(|&t| t == 0));
        assert_eq!(chain.conditional_entropy(16), 0.0);
    }

    #[test]
    fn transitions_are_distributions() {
        let chain = MarkovChain::from_seed(3, 8);
        for ctx in 0..64 {
            let row = &chain.transitions[ctx * 8..(ctx + 1) * 8];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_transitions_match_chain() {
        let chain = MarkovChain::from_seed(5, 4);
        let corpus = sample_corpus(&chain, 17, 16, 10_000, CorpusRole::Training);
        let v = 4;
        let mut counts = vec![0.0; v * v * v];
        for seq in &corpus.sequences {
            for w in seq.windows(3) {
                counts[(w[0] * v + w[1]) * v + w[2]] += 1.0;
            }
        }
        for ctx in 0..v * v {
            let row = &counts[ctx * v..(ctx + 1) * v];
            let n: f64 = row.iter().sum();
            if n < 500.0 {
                continue;
            }
            let tv: f64 = row
                .iter()
                .zip(&chain.transitions[ctx * v..(ctx + 1) * v])
                .map(|(c, p)| (c / n - p).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 0.02, "context {ctx}: total variation {tv}");
        }
    }

    #[test]
    fn text_round_trip() {
        let corpus = gen_corpus(1, 4, &cfg(), 3, CorpusRole::Evaluation);
        let back = Corpus::from_text(CorpusRole::Evaluation, &corpus.to_text()).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn byte_ingestion() {
        let c = Corpus::from_bytes(CorpusRole::Training, "hello world!", 4);
        assert_eq!(c.sequences.len(), 3);
        assert_eq!(c.sequences[0], vec![104, 101, 108, 108]);
        assert!(c.validate(256).is_ok());
        assert!(c.validate(100).is_err());
    }
}
