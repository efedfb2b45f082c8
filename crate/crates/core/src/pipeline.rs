//! Glue shared by the command-line front end and the synthetic benchmarks.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::{GenerateSettings, Generation, Generator};
use crate::knowledge::KnowledgeBase;
use crate::metrics::token_accuracy;
use crate::model::KeagModel;
use crate::synth::Triple;
use crate::text::{encode_raw, tokenize, RawExample, Vocabulary};
use crate::trainer::TrainItem;

pub fn kb_from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Result<KnowledgeBase> {
    let mut kb = KnowledgeBase::new();
    for t in triples {
        kb.insert(&t.subject, &t.relation, &t.object)?;
    }
    Ok(kb)
}

pub fn build_items(raws: &[RawExample], vocab: &Vocabulary, kb: &KnowledgeBase, config: &RunConfig) -> Result<Vec<TrainItem>> {
    raws.iter()
        .map(|r| Ok(TrainItem::new(encode_raw(r, vocab, config.data.limits())?, kb, config.data.max_facts)))
        .collect()
}

pub fn generate_settings(config: &RunConfig, beam: usize) -> GenerateSettings {
    GenerateSettings {
        beam,
        limits: config.data.limits(),
        max_facts: config.data.max_facts,
    }
}

/// Decodes every example; runs in parallel, output order follows input.
pub fn predict(model: &KeagModel, vocab: &Vocabulary, kb: &KnowledgeBase, settings: GenerateSettings, raws: &[RawExample]) -> Result<Vec<Generation>> {
    let generator = Generator::new(model, vocab, kb, settings);
    raws.par_iter().map(|r| generator.generate(&r.question, &r.passage.joined())).collect()
}

/// Greedy token accuracy against the (truncated) reference answers.
pub fn greedy_accuracy(model: &KeagModel, vocab: &Vocabulary, kb: &KnowledgeBase, config: &RunConfig, raws: &[RawExample]) -> Result<f64> {
    let outs = predict(model, vocab, kb, generate_settings(config, 1), raws)?;
    let preds: Vec<Vec<String>> = outs.into_iter().map(|g| g.tokens).collect();
    let refs: Vec<Vec<String>> = raws
        .iter()
        .map(|r| {
            let mut t = tokenize(&r.answer);
            t.truncate(config.data.answer_limit);
            t
        })
        .collect();
    Ok(token_accuracy(&preds, &refs))
}

/// Writes the model parameters with the run config and vocabulary hash.
pub fn save_model(model: &KeagModel, config: &RunConfig, vocab: &Vocabulary, step: u64, path: &Path) -> Result<()> {
    let config_json = serde_json::to_string(config).expect("config serialises");
    Checkpoint::from_store(&model.store, step, vocab.fingerprint(), config_json).save(path)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint written by [`save_model`]. The
/// vocabulary must be the one it was trained with.
pub fn load_model(path: &Path, vocab: &Vocabulary) -> Result<(KeagModel, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_vocab(vocab.fingerprint())?;
    let config: RunConfig =
        serde_json::from_str(&ckpt.config_json).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let mut model = KeagModel::new(&config.model, vocab.len(), config.train.seed);
    ckpt.restore_into(&mut model.store)?;
    Ok((model, config))
}
