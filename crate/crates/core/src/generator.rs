//! Beam-search decoding with explicit source choice and per-word traces.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::Result;
use crate::knowledge::{extract_related_facts, Fact, KnowledgeBase};
use crate::model::{DecoderState, Encoded, KeagModel};
use crate::selectors::{argmax, source_word_distribution, FactChoice, Source, SourceInputs};
use crate::text::{encode_example, Limits, Vocabulary, BOS, EOS_TOKEN, PAD, SPECIAL_TOKENS, UNK};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateSettings {
    pub beam: usize,
    pub limits: Limits,
    pub max_facts: usize,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            beam: 4,
            limits: Limits::default(),
            max_facts: 1000,
        }
    }
}

/// One emitted token (the terminator included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub token: String,
    /// `P(y)` over question, passage, vocab, knowledge.
    pub source_probs: [f64; 4],
    pub chosen: Source,
    /// `P(w | y)` under the chosen source.
    pub word_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fact_id: Option<usize>,
    /// Later token of a multi-word fact object, emitted without a new
    /// source choice.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub continuation: bool,
}

impl TraceRecord {
    /// `ln(P(y) P(w | y))` for the chosen source.
    pub fn log_prob(&self) -> f64 {
        (self.source_probs[self.chosen.index()] * self.word_prob).ln()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceTrace {
    pub records: Vec<TraceRecord>,
}

impl SourceTrace {
    /// Sum of per-token log-probabilities.
    pub fn score(&self) -> f64 {
        self.records.iter().map(TraceRecord::log_prob).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<String>,
    pub score: f64,
    pub trace: SourceTrace,
}

impl Generation {
    pub fn answer(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn normalized_score(&self) -> f64 {
        self.score / self.trace.records.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<String>,
    score: f64,
    state: DecoderState,
    input: usize,
    pending: VecDeque<String>,
    pending_fact: Option<usize>,
    trace: SourceTrace,
    finished: bool,
}

impl Hypothesis {
    fn into_generation(self) -> Generation {
        Generation {
            tokens: self.tokens,
            score: self.score,
            trace: self.trace,
        }
    }
}

/// Candidate words of one source, best first, ties in first-occurrence order.
fn top_words(source: Source, inputs: &SourceInputs<'_>, k: usize) -> Vec<(String, f64)> {
    let mut words: Vec<(String, f64)> = source_word_distribution(source, inputs)
        .into_iter()
        .filter(|w| !(source == Source::Vocab && SPECIAL_TOKENS[..3].contains(&w.token.as_str())))
        .filter(|w| w.prob > 0.0)
        .map(|w| (w.token, w.prob))
        .collect();
    words.sort_by(|a, b| b.1.total_cmp(&a.1));
    words.truncate(k);
    words
}

pub struct Generator<'a> {
    pub model: &'a KeagModel,
    pub vocab: &'a Vocabulary,
    pub kb: &'a KnowledgeBase,
    pub settings: GenerateSettings,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a KeagModel, vocab: &'a Vocabulary, kb: &'a KnowledgeBase, settings: GenerateSettings) -> Self {
        Self { model, vocab, kb, settings }
    }

    /// Beam search from `question` and `passage`. For `beam > 1` the greedy
    /// path is also decoded and competes in the final pick.
    pub fn generate(&self, question: &str, passage: &str) -> Result<Generation> {
        let example = encode_example(question, passage, "", self.vocab, self.settings.limits)?;
        let facts: Vec<&Fact> = extract_related_facts(self.kb, &example.question_tokens, &example.passage_tokens, self.settings.max_facts)
            .into_iter()
            .map(|s| self.kb.fact(s.fact_id))
            .collect();
        let mut tape = Tape::new();
        let enc = self.model.encode(&mut tape, &example.question_ids, &example.passage_ids, &facts, self.vocab)?;
        let best = self.search(&mut tape, &enc, &example.question_tokens, &example.passage_tokens, self.settings.beam.max(1))?;
        if self.settings.beam <= 1 {
            return Ok(best);
        }
        let greedy = self.search(&mut tape, &enc, &example.question_tokens, &example.passage_tokens, 1)?;
        Ok(if greedy.normalized_score() > best.normalized_score() { greedy } else { best })
    }

    fn search(&self, tape: &mut Tape, enc: &Encoded, q_tokens: &[String], p_tokens: &[String], beam: usize) -> Result<Generation> {
        let limit = self.settings.limits.answer;
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            state: enc.initial,
            input: BOS,
            pending: VecDeque::new(),
            pending_fact: None,
            trace: SourceTrace::default(),
            finished: false,
        }];
        let mut done: Vec<Hypothesis> = Vec::new();

        while !live.is_empty() {
            let mut candidates: Vec<Hypothesis> = Vec::new();
            for hyp in live {
                if hyp.tokens.len() >= limit {
                    done.push(Hypothesis { finished: true, ..hyp });
                    continue;
                }
                let out = self.model.step(tape, enc, &hyp.state, hyp.input)?;
                if let Some(token) = hyp.pending.front().cloned() {
                    let mut next = hyp.clone();
                    next.pending.pop_front();
                    next.state = out.state;
                    next.input = self.vocab.id(&token);
                    next.trace.records.push(TraceRecord {
                        token: token.clone(),
                        source_probs: [0.0, 0.0, 0.0, 1.0],
                        chosen: Source::Knowledge,
                        word_prob: 1.0,
                        fact_id: hyp.pending_fact,
                        continuation: true,
                    });
                    next.tokens.push(token);
                    candidates.push(next);
                    continue;
                }

                let probs = tape.value(out.source).data();
                let source_probs = [probs[0], probs[1], probs[2], probs[3]];
                let source = Source::ALL[argmax(&source_probs)];
                let fact_weights: Vec<FactChoice> = match (&enc.facts, out.fact) {
                    (Some(m), Some(pz)) => m
                        .fact_ids
                        .iter()
                        .zip(&m.objects)
                        .zip(tape.value(pz).data())
                        .map(|((&fact_id, object), &weight)| FactChoice {
                            fact_id,
                            object: object.clone(),
                            weight,
                        })
                        .collect(),
                    _ => Vec::new(),
                };
                let inputs = SourceInputs {
                    question_attention: tape.value(out.attention_q).data(),
                    question_tokens: q_tokens,
                    passage_attention: tape.value(out.attention_p).data(),
                    passage_tokens: p_tokens,
                    vocab_probs: tape.value(out.vocab).data(),
                    vocab: self.vocab,
                    facts: &fact_weights,
                };
                for (token, word_prob) in top_words(source, &inputs, beam) {
                    let mut next = hyp.clone();
                    next.state = out.state;
                    let mut record = TraceRecord {
                        token: token.clone(),
                        source_probs,
                        chosen: source,
                        word_prob,
                        fact_id: None,
                        continuation: false,
                    };
                    if source == Source::Knowledge {
                        let fact = fact_weights
                            .iter()
                            .filter(|f| f.object[0] == token)
                            .fold(None::<&FactChoice>, |best, f| match best {
                                Some(b) if b.weight >= f.weight => Some(b),
                                _ => Some(f),
                            })
                            .expect("knowledge word comes from a fact");
                        record.fact_id = Some(fact.fact_id);
                        next.pending = fact.object[1..].iter().cloned().collect();
                        next.pending_fact = Some(fact.fact_id);
                    }
                    next.score += record.log_prob();
                    next.trace.records.push(record);
                    if token == EOS_TOKEN {
                        next.finished = true;
                    } else {
                        let id = self.vocab.id(&token);
                        next.input = if id == PAD { UNK } else { id };
                        next.tokens.push(token);
                    }
                    candidates.push(next);
                }
            }
            candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
            candidates.truncate(beam);
            live = Vec::new();
            for c in candidates {
                if c.finished {
                    done.push(c);
                } else {
                    live.push(c);
                }
            }
        }

        let best = done
            .into_iter()
            .map(Hypothesis::into_generation)
            .fold(None::<Generation>, |best, g| match best {
                Some(b) if b.normalized_score() >= g.normalized_score() => Some(b),
                _ => Some(g),
            })
            .expect("search always yields a hypothesis");
        Ok(best)
    }
}

/// Table of source percentages with one column per emitted token and a last
/// row naming the chosen source.
pub fn render_trace(trace: &SourceTrace) -> String {
    let label_width = "knowledge".len();
    let cells: Vec<[String; 6]> = trace
        .records
        .iter()
        .map(|r| {
            let pct = |i: usize| format!("{:.2}", 100.0 * r.source_probs[i]);
            [r.token.clone(), pct(0), pct(1), pct(2), pct(3), r.chosen.name().to_string()]
        })
        .collect();
    let widths: Vec<usize> = cells.iter().map(|c| c.iter().map(String::len).max().unwrap_or(0)).collect();
    let labels = ["", "question", "passage", "vocab", "knowledge", "chosen"];
    let mut out = String::new();
    for (row, label) in labels.iter().enumerate() {
        let _ = write!(out, "{label:<label_width$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", c[row]);
        }
        out.push('\n');
    }
    out
}
