//! Word sources, the source selector, the fact selector and Gumbel-Softmax
//! relaxation of both discrete choices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::config::TauSchedule;
use crate::error::{Error, Result};
use crate::knowledge::Fact;
use crate::text::{Vocabulary, UNK};

/// Floor applied before taking logs of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Question,
    Passage,
    Vocab,
    Knowledge,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Question, Source::Passage, Source::Vocab, Source::Knowledge];

    /// Maps the 1-based indicator value used in the model description.
    pub fn from_label(label: usize) -> Result<Self> {
        match label {
            1..=4 => Ok(Self::ALL[label - 1]),
            other => Err(Error::InvalidSource(other)),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Question => "question",
            Source::Passage => "passage",
            Source::Vocab => "vocab",
            Source::Knowledge => "knowledge",
        }
    }
}

/// Output layers of the four word sources and the two selectors.
#[derive(Clone, Copy, Debug)]
pub struct SelectorParams {
    pub vocab_w: ParamId,
    pub vocab_b: ParamId,
    pub source_w: ParamId,
    pub source_b: ParamId,
}

impl SelectorParams {
    /// `feature_dim` is the width of `[c_q, c_p, s_t]`.
    pub fn register(store: &mut ParamStore, feature_dim: usize, emb_dim: usize, vocab_size: usize, range: f64, rng: &mut impl Rng) -> Self {
        let mut init = |name: &str, shape| store.add(name, Tensor::uniform(shape, -range, range, rng));
        Self {
            vocab_w: init("vocab.w", [feature_dim, vocab_size]),
            vocab_b: init("vocab.b", [1, vocab_size]),
            source_w: init("source.w", [feature_dim + emb_dim, 4]),
            source_b: init("source.b", [1, 4]),
        }
    }
}

/// `softmax(W_v [c_q, c_p, s_t] + b_v)` over the whole vocabulary.
pub fn vocab_distribution(tape: &mut Tape, store: &ParamStore, params: &SelectorParams, features: NodeId) -> Result<NodeId> {
    let w = tape.param(store, params.vocab_w);
    let b = tape.param(store, params.vocab_b);
    let logits = tape.matmul(features, w)?;
    let logits = tape.add(logits, b)?;
    Ok(tape.softmax(logits)?)
}

/// `softmax(W_y [c_q, c_p, s_t, x_t] + b_y)` as a `1 x 4` row. Without
/// knowledge the last entry is fixed at zero and the other three renormalised.
pub fn source_distribution(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SelectorParams,
    features: NodeId,
    input_emb: NodeId,
    knowledge_available: bool,
) -> Result<NodeId> {
    let w = tape.param(store, params.source_w);
    let b = tape.param(store, params.source_b);
    let x = tape.concat(&[features, input_emb], Axis::Cols)?;
    let logits = tape.matmul(x, w)?;
    let logits = tape.add(logits, b)?;
    if knowledge_available {
        return Ok(tape.softmax(logits)?);
    }
    let three = tape.slice(logits, Axis::Cols, 0, 3)?;
    let probs = tape.softmax(three)?;
    let zero = tape.constant(Tensor::zeros([1, 1]))?;
    Ok(tape.concat(&[probs, zero], Axis::Cols)?)
}

/// Probability of one emittable word.
#[derive(Clone, Debug, PartialEq)]
pub struct WordProb {
    pub token: String,
    pub prob: f64,
}

/// Attention mass gathered per distinct token, in first-occurrence order.
pub fn copy_distribution(attention: &[f64], tokens: &[String]) -> Vec<WordProb> {
    let mut out: Vec<WordProb> = Vec::new();
    for (tok, &a) in tokens.iter().zip(attention) {
        match out.iter_mut().find(|w| &w.token == tok) {
            Some(w) => w.prob += a,
            None => out.push(WordProb {
                token: tok.clone(),
                prob: a,
            }),
        }
    }
    out
}

/// A candidate fact for the knowledge source and the weight the fact
/// selector gives it.
#[derive(Clone, Debug, PartialEq)]
pub struct FactChoice {
    pub fact_id: usize,
    pub object: Vec<String>,
    pub weight: f64,
}

/// Inputs needed to read off any source's word distribution at one step.
pub struct SourceInputs<'a> {
    pub question_attention: &'a [f64],
    pub question_tokens: &'a [String],
    pub passage_attention: &'a [f64],
    pub passage_tokens: &'a [String],
    pub vocab_probs: &'a [f64],
    pub vocab: &'a Vocabulary,
    pub facts: &'a [FactChoice],
}

/// `P(w | y)` for one source. Knowledge emits the first object token of
/// each fact, weighted by the fact choice.
pub fn source_word_distribution(source: Source, inputs: &SourceInputs<'_>) -> Vec<WordProb> {
    match source {
        Source::Question => copy_distribution(inputs.question_attention, inputs.question_tokens),
        Source::Passage => copy_distribution(inputs.passage_attention, inputs.passage_tokens),
        Source::Vocab => inputs
            .vocab_probs
            .iter()
            .enumerate()
            .map(|(id, &p)| WordProb {
                token: inputs.vocab.token(id).to_string(),
                prob: p,
            })
            .collect(),
        Source::Knowledge => {
            let mut out: Vec<WordProb> = Vec::new();
            for f in inputs.facts {
                let tok = &f.object[0];
                match out.iter_mut().find(|w| &w.token == tok) {
                    Some(w) => w.prob += f.weight,
                    None => out.push(WordProb {
                        token: tok.clone(),
                        prob: f.weight,
                    }),
                }
            }
            out
        }
    }
}

/// Same as [`source_word_distribution`] but addressed by 1-based label.
pub fn source_word_distribution_by_label(label: usize, inputs: &SourceInputs<'_>) -> Result<Vec<WordProb>> {
    Ok(source_word_distribution(Source::from_label(label)?, inputs))
}

/// Fact embedding and fact selector parameters.
#[derive(Clone, Copy, Debug)]
pub struct FactParams {
    pub relation_emb: ParamId,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub select_w: ParamId,
    pub select_u: ParamId,
    pub select_b: ParamId,
    pub select_g: ParamId,
}

impl FactParams {
    pub fn register(
        store: &mut ParamStore,
        emb_dim: usize,
        relation_slots: usize,
        fact_dim: usize,
        hidden: usize,
        attn_dim: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut init = |name: &str, shape| store.add(name, Tensor::uniform(shape, -range, range, rng));
        Self {
            relation_emb: init("fact.relation", [relation_slots, emb_dim]),
            embed_w: init("fact.embed.w", [3 * emb_dim, fact_dim]),
            embed_b: init("fact.embed.b", [1, fact_dim]),
            select_w: init("fact.select.w", [fact_dim, attn_dim]),
            select_u: init("fact.select.u", [hidden, attn_dim]),
            select_b: init("fact.select.b", [1, attn_dim]),
            select_g: init("fact.select.g", [attn_dim, 1]),
        }
    }
}

/// Averaging matrix and gathered ids for mean-pooling one token list per fact.
fn pooling(groups: &[Vec<usize>]) -> (Tensor, Vec<usize>) {
    let total: usize = groups.iter().map(Vec::len).sum();
    let mut m = Tensor::zeros([groups.len(), total]);
    let mut ids = Vec::with_capacity(total);
    let mut col = 0;
    for (r, g) in groups.iter().enumerate() {
        let w = 1.0 / g.len() as f64;
        for &id in g {
            m.data_mut()[r * total + col] = w;
            ids.push(id);
            col += 1;
        }
    }
    (m, ids)
}

/// `W_e [e_s, e_r, e_o] + b_e` for every fact, one row each. Subject and
/// object vectors are averages of their word embeddings (UNK rows for words
/// outside the vocabulary).
pub fn embed_facts(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FactParams,
    word_emb: NodeId,
    facts: &[&Fact],
    vocab: &Vocabulary,
) -> Result<NodeId> {
    if facts.is_empty() {
        return Err(Error::EmptyFactSet);
    }
    let pool = |tape: &mut Tape, groups: Vec<Vec<usize>>| -> Result<NodeId> {
        let (avg, ids) = pooling(&groups);
        let rows = tape.lookup(word_emb, &ids)?;
        let avg = tape.constant(avg)?;
        Ok(tape.matmul(avg, rows)?)
    };
    let subjects = pool(tape, facts.iter().map(|f| vocab.encode(&f.subject)).collect())?;
    let objects = pool(tape, facts.iter().map(|f| vocab.encode(&f.object)).collect())?;
    let rel_table = tape.param(store, params.relation_emb);
    // relation ids past the table size share slots
    let slots = store.get(params.relation_emb).rows();
    let rel_ids: Vec<usize> = facts.iter().map(|f| f.relation % slots).collect();
    let relations = tape.lookup(rel_table, &rel_ids)?;
    let cat = tape.concat(&[subjects, relations, objects], Axis::Cols)?;
    let w = tape.param(store, params.embed_w);
    let b = tape.param(store, params.embed_b);
    let f = tape.matmul(cat, w)?;
    Ok(tape.add(f, b)?)
}

/// `W_f f_i` for every fact, shared across decoder steps.
pub fn fact_keys(tape: &mut Tape, store: &ParamStore, params: &FactParams, facts: NodeId) -> Result<NodeId> {
    let w = tape.param(store, params.select_w);
    Ok(tape.matmul(facts, w)?)
}

/// `softmax_i(g_f^T tanh(W_f f_i + U_f s_t + b_f))` as a `1 x N_f` row.
pub fn fact_distribution(tape: &mut Tape, store: &ParamStore, params: &FactParams, keys: NodeId, state: NodeId) -> Result<NodeId> {
    let u = tape.param(store, params.select_u);
    let b = tape.param(store, params.select_b);
    let g = tape.param(store, params.select_g);
    let q = tape.matmul(state, u)?;
    let q = tape.add(q, b)?;
    let pre = tape.add(keys, q)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, g)?;
    let row = tape.transpose(scores)?;
    Ok(tape.softmax(row)?)
}

/// Gumbel(0, 1) draws `-ln(-ln u)` with `u` floored at [`PROB_FLOOR`].
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros([rows, cols]);
    for v in t.data_mut() {
        let u: f64 = rng.gen::<f64>().max(PROB_FLOOR);
        *v = -(-u.ln()).ln();
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub soft: Vec<f64>,
    pub hard_index: usize,
    pub temperature: f64,
}

fn check_probs(probs: &[f64], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidSchedule(format!("temperature {tau} must be positive")));
    }
    if probs.iter().all(|&p| p <= PROB_FLOOR) {
        return Err(Error::DegenerateDistribution);
    }
    Ok(())
}

/// Relaxed categorical sample
/// `softmax((log max(pi, floor) + g) / tau)` with `hard_index` its argmax.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(probs: &[f64], tau: f64, rng: &mut R) -> Result<GumbelSample> {
    check_probs(probs, tau)?;
    let noise = gumbel_noise(rng, 1, probs.len());
    let logits: Vec<f64> = probs
        .iter()
        .zip(noise.data())
        .map(|(p, g)| (p.max(PROB_FLOOR).ln() + g) / tau)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let soft: Vec<f64> = exps.iter().map(|e| e / z).collect();
    Ok(GumbelSample {
        hard_index: argmax(&soft),
        soft,
        temperature: tau,
    })
}

/// Tape version over a `1 x K` probability row with given `M x K` noise;
/// returns `M x K` soft samples, one per noise row.
pub fn gumbel_softmax(tape: &mut Tape, probs: NodeId, tau: f64, noise: &Tensor) -> Result<NodeId> {
    check_probs(tape.value(probs).data(), tau)?;
    let logp = tape.log(probs, PROB_FLOOR)?;
    let g = tape.constant(noise.clone())?;
    let perturbed = tape.add(g, logp)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    Ok(tape.softmax(scaled)?)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `max(min, initial * exp(-rate * step))`.
pub fn anneal_temperature(step: usize, schedule: &TauSchedule) -> Result<f64> {
    if !(schedule.min > 0.0) || !(schedule.initial > 0.0) || !(schedule.rate >= 0.0) {
        return Err(Error::InvalidSchedule(format!("{schedule:?}")));
    }
    Ok((schedule.initial * (-schedule.rate * step as f64).exp()).max(schedule.min))
}

/// Log-likelihood of a target word under one source: `None` when the
/// source cannot emit it at all.
pub fn likelihood_mask(tokens: &[String], target: &str) -> Option<Tensor> {
    let mask: Vec<f64> = tokens.iter().map(|t| if t == target { 1.0 } else { 0.0 }).collect();
    mask.iter().any(|&m| m > 0.0).then(|| Tensor::column(&mask))
}

/// Vocabulary id the vocab source would have to produce for `target`, if any.
pub fn vocab_target(vocab: &Vocabulary, target: &str) -> Option<usize> {
    let id = vocab.id(target);
    (id != UNK || target == vocab.token(UNK)).then_some(id)
}
