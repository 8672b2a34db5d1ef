#![allow(dead_code)]

use fsw_core::geometry::{estimate_geometry, GeometryEstimate, OperatorSpec};
use fsw_core::model::{gen_corpus, train_lm, Corpus, CorpusRole, ModelConfig, ModelParams, TrainConfig};

pub const CHAIN_SEED: u64 = 0;

/// A trained default-size toy model with disjoint corpora from one chain.
pub struct Fixture {
    pub cfg: ModelConfig,
    pub base: ModelParams,
    pub train: Corpus,
    pub calib: Corpus,
    pub embed: Corpus,
    pub challenge: Corpus,
    pub eval: Corpus,
    pub geometry: GeometryEstimate,
}

pub fn fixture() -> Fixture {
    let cfg = ModelConfig { seed: 10, ..ModelConfig::default() };
    let corpus = |offset: u64, n: usize, role: CorpusRole| gen_corpus(CHAIN_SEED, offset, &cfg, n, role);
    let train = corpus(1, 4096, CorpusRole::Training);
    let calib = corpus(2, 512, CorpusRole::Calibration);
    let embed = corpus(3, 1024, CorpusRole::Embedding);
    let challenge = corpus(4, 64, CorpusRole::Challenge);
    let eval = corpus(5, 512, CorpusRole::Evaluation);
    let (base, _) = train_lm(&ModelParams::init(&cfg).unwrap(), &train, &TrainConfig::default()).unwrap();
    let geometry = estimate_geometry(&base, &calib, &OperatorSpec::default_family(20), 3).unwrap();
    Fixture { cfg, base, train, calib, embed, challenge, eval, geometry }
}
