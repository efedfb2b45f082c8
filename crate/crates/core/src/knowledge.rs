//! Triple storage and heuristic related-fact extraction.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum KbError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("empty subject or object")]
    EmptyExpression,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub fact_id: usize,
    pub subject: Vec<String>,
    pub relation: usize,
    pub object: Vec<String>,
}

/// A line that could not be ingested.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    facts: Vec<Fact>,
    relation_names: Vec<String>,
    relation_ids: HashMap<String, usize>,
    surface_index: HashMap<String, Vec<usize>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a fact from surface text. Returns its id.
    pub fn insert(&mut self, subject: &str, relation: &str, object: &str) -> Result<usize, KbError> {
        let subject = tokenize(subject);
        let object = tokenize(object);
        if subject.is_empty() || object.is_empty() {
            return Err(KbError::EmptyExpression);
        }
        let relation = relation.trim();
        let next = self.relation_names.len();
        let rel = *self.relation_ids.entry(relation.to_string()).or_insert(next);
        if rel == next {
            self.relation_names.push(relation.to_string());
        }
        let id = self.facts.len();
        let mut seen: Vec<&String> = subject.iter().chain(&object).collect();
        seen.sort();
        seen.dedup();
        for tok in seen {
            self.surface_index.entry(tok.clone()).or_default().push(id);
        }
        self.facts.push(Fact {
            fact_id: id,
            subject,
            relation: rel,
            object,
        });
        Ok(id)
    }

    /// Reads `subject \t relation \t object` lines. Malformed lines are
    /// skipped and reported.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<(Self, Vec<MalformedLine>), KbError> {
        let mut kb = Self::new();
        let mut skipped = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields[1].trim().is_empty() {
                skipped.push(MalformedLine {
                    line: i + 1,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
                continue;
            }
            if kb.insert(fields[0], fields[1], fields[2]).is_err() {
                skipped.push(MalformedLine {
                    line: i + 1,
                    reason: "empty subject or object".into(),
                });
            }
        }
        Ok((kb, skipped))
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn fact(&self, id: usize) -> &Fact {
        &self.facts[id]
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    /// Fact ids whose subject or object contains `token`.
    pub fn facts_with_token(&self, token: &str) -> &[usize] {
        self.surface_index.get(token).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn ingest_triples(path: &Path) -> Result<(KnowledgeBase, Vec<MalformedLine>), KbError> {
    KnowledgeBase::from_reader(BufReader::new(File::open(path)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub fact_id: usize,
    pub score: u32,
}

/// Contiguous, exact token-subsequence test.
pub fn occurs(needle: &[String], haystack: &[String]) -> bool {
    !needle.is_empty() && needle.len() <= haystack.len() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Additive relevance score of one fact for a (question, passage) pair.
pub fn score_fact(fact: &Fact, question: &[String], passage: &[String]) -> u32 {
    let subj_q = occurs(&fact.subject, question);
    let subj_p = occurs(&fact.subject, passage);
    let obj_p = occurs(&fact.object, passage);
    let mut score = 0;
    if subj_q && obj_p {
        score += 4;
    }
    if subj_p && obj_p {
        score += 2;
    }
    if subj_q || subj_p {
        score += 1;
    }
    score
}

/// Facts sharing a surface token with the question or passage, scored and
/// ranked by descending score then ascending id; at most `limit` returned.
/// Zero-scored candidates are dropped.
pub fn extract_related_facts(kb: &KnowledgeBase, question: &[String], passage: &[String], limit: usize) -> Vec<ScoredFact> {
    let mut candidates: Vec<usize> = question
        .iter()
        .chain(passage)
        .flat_map(|t| kb.facts_with_token(t).iter().copied())
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    let mut scored: Vec<ScoredFact> = candidates
        .into_iter()
        .filter_map(|id| {
            let score = score_fact(kb.fact(id), question, passage);
            (score > 0).then_some(ScoredFact { fact_id: id, score })
        })
        .collect();
    scored.sort_by(|a, b| b.score.cmp(&a.score).then(a.fact_id.cmp(&b.fact_id)));
    scored.truncate(limit);
    scored
}

/// JSON shape emitted by the `extract-facts` command.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub fact_id: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub score: u32,
}

impl FactRecord {
    pub fn new(kb: &KnowledgeBase, scored: ScoredFact) -> Self {
        let f = kb.fact(scored.fact_id);
        Self {
            fact_id: f.fact_id,
            subject: f.subject.join(" "),
            relation: kb.relation_names()[f.relation].clone(),
            object: f.object.join(" "),
            score: scored.score,
        }
    }
}
