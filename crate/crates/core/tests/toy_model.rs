//! End-to-end behaviour on a trained toy model. One fixture serves every
//! check, so they run in a single test.

mod common;

use fsw_core::attacks::{distill_backbone, distill_loss, lowrank_finetune, student_config, DistillConfig};
use fsw_core::model::{corpus_loss, perplexity, MarkovChain, ModelParams};
use fsw_core::subspace::{build_backbone, naive_topk_backbone};
use fsw_core::verify::decode;
use fsw_core::watermark::{embed, make_key, Ablations, EmbedConfig, Ecc};

use common::{fixture, Fixture, CHAIN_SEED};

fn trained_ppl_tracks_chain_entropy(fx: &Fixture) {
    let chain = MarkovChain::from_seed(CHAIN_SEED, fx.cfg.vocab_size);
    let floor = chain.conditional_entropy(fx.cfg.context_len).exp();
    let ppl = perplexity(&fx.base, &fx.eval).unwrap();
    assert!(ppl >= floor * 0.98 && ppl <= floor * 1.1, "PPL {ppl} vs entropy floor {floor}");
}

fn embedding_fixture_reaches_margin(fx: &Fixture) {
    let sub = build_backbone(&fx.geometry, 8, 1e-4, 0.6).unwrap();
    let key = make_key(30, 8, &[1, 0, 1, 1], 5.0, Ecc::Hamming74).unwrap();
    assert_eq!(key.m, 7);
    let cfg = EmbedConfig { steps: 500, ..EmbedConfig::default() };
    let (wm, log) = embed(&fx.base, &sub, &key, &fx.embed, &fx.challenge, &cfg, Ablations::default()).unwrap();
    let final_wm = log.steps.last().unwrap().wm;
    assert!(final_wm <= 0.1 * 5.0 * 7.0, "final L_wm {final_wm}");
    let report = decode(&wm, &sub, &key, &fx.challenge).unwrap();
    assert_eq!(report.bit_accuracy, 1.0);
    assert!(report.message_accuracy);
}

fn ablations_give_distinct_objectives(fx: &Fixture) {
    let key = make_key(30, 8, &[1, 0, 1, 1], 5.0, Ecc::Hamming74).unwrap();
    let cfg = EmbedConfig { steps: 30, ..EmbedConfig::default() };
    let full = build_backbone(&fx.geometry, 8, 1e-4, 0.6).unwrap();
    let variants = [
        (full.clone(), Ablations::default()),
        (full.clone(), Ablations { no_consistency: true, ..Ablations::default() }),
        (full.clone(), Ablations { no_anchor: true, ..Ablations::default() }),
        (build_backbone(&fx.geometry.with_identity_invariance(), 8, 1e-4, 0.6).unwrap(), Ablations { no_invariance: true, ..Ablations::default() }),
        (naive_topk_backbone(&fx.geometry, 8).unwrap(), Ablations { naive_topk: true, ..Ablations::default() }),
    ];
    let logs: Vec<Vec<f64>> = variants
        .iter()
        .map(|(sub, ab)| embed(&fx.base, sub, &key, &fx.embed, &fx.challenge, &cfg, *ab).unwrap().1.steps.iter().map(|s| s.total).collect())
        .collect();
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            assert_ne!(logs[i], logs[j], "variants {i} and {j} logged identical objectives");
        }
    }
}

fn distillation_probes(fx: &Fixture) {
    // Representation term only.
    let student_cfg = student_config(&fx.cfg, None, 7).unwrap();
    let rep_only = DistillConfig { logit_weight: 0.0, ..DistillConfig::default() };
    let init = ModelParams::init(&student_cfg).unwrap();
    let before = distill_loss(&fx.base, &init, &fx.eval).unwrap().rep;
    let student = distill_backbone(&fx.base, &student_cfg, &fx.train, &rep_only).unwrap();
    let after = distill_loss(&fx.base, &student, &fx.eval).unwrap().rep;
    assert!(after <= 0.1 * before, "representation gap {before} -> {after}");

    // Same architecture as the teacher.
    let same = student_config(&fx.cfg, Some(fx.cfg.num_layers), 7).unwrap();
    let student = distill_backbone(&fx.base, &same, &fx.train, &DistillConfig::default()).unwrap();
    let (t, s) = (perplexity(&fx.base, &fx.eval).unwrap(), perplexity(&student, &fx.eval).unwrap());
    assert!(s <= 1.1 * t, "student PPL {s} vs teacher {t}");
}

fn full_rank_adapter_fits_at_least_as_well(fx: &Fixture) {
    let before = corpus_loss(&fx.base, &fx.eval).unwrap();
    let loss_at = |rank| corpus_loss(&lowrank_finetune(&fx.base, &fx.embed, rank, 100, 0.01, 3).unwrap(), &fx.eval).unwrap();
    let (one, full) = (loss_at(1), loss_at(fx.cfg.hidden_dim));
    assert!(before - full >= before - one - 1e-9, "rank 1 drop {} vs full drop {}", before - one, before - full);
}

#[test]
fn toy_model_behaviour() {
    let fx = fixture();
    trained_ppl_tracks_chain_entropy(&fx);
    embedding_fixture_reaches_margin(&fx);
    ablations_give_distinct_objectives(&fx);
    distillation_probes(&fx);
    full_rank_adapter_fits_at_least_as_well(&fx);
}
