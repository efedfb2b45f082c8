mod common;

use keag::autodiff::Tape;
use keag::checkpoint::CheckpointError;
use keag::config::RunConfig;
use keag::model::KeagModel;
use keag::pipeline::{load_model, save_model};
use keag::text::{Vocabulary, BOS};
use keag::Error;

use common::*;

fn step_logits(model: &KeagModel, toy: &Toy) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let facts = toy.facts();
    let enc = model
        .encode(&mut tape, &toy.example.question_ids, &toy.example.passage_ids, &facts, &toy.vocab)
        .unwrap();
    let (mut state, mut input) = (enc.initial, BOS);
    let mut rows = Vec::new();
    for t in 0..toy.example.steps() {
        let out = model.step(&mut tape, &enc, &state, input).unwrap();
        for node in [out.vocab, out.source, out.attention_q, out.attention_p, out.fact.unwrap()] {
            rows.push(tape.value(node).data().to_vec());
        }
        state = out.state;
        input = toy.example.answer_ids[t];
    }
    rows
}

fn run_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = tiny_config(0.3);
    cfg.train.seed = 11;
    cfg
}

#[test]
fn reloaded_model_reproduces_outputs_exactly() {
    let toy = knowledge_toy();
    let cfg = run_config();
    let mut model = KeagModel::new(&cfg.model, toy.vocab.len(), 5);
    // move away from the seed-11 initialisation the loader starts from
    for t in model.store.tensors_mut() {
        for v in t.data_mut() {
            *v = (*v * 1.7).sin();
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&model, &cfg, &toy.vocab, 42, &path).unwrap();
    let (back, back_cfg) = load_model(&path, &toy.vocab).unwrap();
    assert_eq!(back_cfg, cfg);
    let (a, b) = (step_logits(&model, &toy), step_logits(&back, &toy));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn reload_with_another_vocabulary_is_refused() {
    let toy = knowledge_toy();
    let cfg = run_config();
    let model = KeagModel::new(&cfg.model, toy.vocab.len(), 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&model, &cfg, &toy.vocab, 1, &path).unwrap();
    let other = Vocabulary::build([vec!["something".to_string(), "else".to_string()]].iter().map(Vec::as_slice), 100).unwrap();
    assert!(matches!(load_model(&path, &other), Err(Error::Checkpoint(CheckpointError::VersionMismatch(_)))));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_model(&path, &toy.vocab), Err(Error::Checkpoint(CheckpointError::CorruptFile(_)))));
}
