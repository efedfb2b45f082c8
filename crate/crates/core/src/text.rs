//! Tokenization, vocabulary, example encoding and word-vector loading.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];
pub const EOS_TOKEN: &str = "</s>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary capacity {0} is below the 4 reserved ids")]
    InvalidMaxSize(usize),
    #[error("question has no tokens")]
    EmptyQuestion,
    #[error("passage has no tokens")]
    EmptyPassage,
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_by_id: Vec<String>,
    id_by_token: HashMap<String, usize>,
    max_size: usize,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        Self::build_filtered(corpus, max_size, 1)
    }

    /// As [`Vocabulary::build`], dropping tokens seen fewer than `min_count` times.
    pub fn build_filtered<'a, I>(corpus: I, max_size: usize, min_count: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size < SPECIAL_TOKENS.len() {
            return Err(TextError::InvalidMaxSize(max_size));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut sentences = 0;
        for sentence in corpus {
            sentences += 1;
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if sentences == 0 {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| !SPECIAL_TOKENS.contains(t) && *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, max_size))
    }

    /// Vocabulary over every question, passage and answer token of `examples`.
    pub fn from_examples(examples: &[RawExample], max_size: usize) -> Result<Self, TextError> {
        Self::from_examples_filtered(examples, max_size, 1)
    }

    pub fn from_examples_filtered(examples: &[RawExample], max_size: usize, min_count: usize) -> Result<Self, TextError> {
        let tokenized: Vec<Vec<String>> = examples
            .iter()
            .flat_map(|e| [tokenize(&e.question), tokenize(&e.passage.joined()), tokenize(&e.answer)])
            .collect();
        if tokenized.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        Self::build_filtered(tokenized.iter().map(Vec::as_slice), max_size, min_count)
    }

    fn from_tokens(token_by_id: Vec<String>, max_size: usize) -> Self {
        let id_by_token = token_by_id.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            token_by_id,
            id_by_token,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.token_by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_by_id.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_by_token.contains_key(token)
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.id_by_token.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.token_by_id[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_by_id
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// FNV-1a over the id-ordered token list; identifies the id mapping a
    /// checkpoint was trained against.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::fnv1a64(&[]);
        for t in &self.token_by_id {
            h = crate::fnv1a64_continue(h, t.as_bytes());
            h = crate::fnv1a64_continue(h, b"\n");
        }
        h
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        for t in &self.token_by_id {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i < SPECIAL_TOKENS.len() && line != SPECIAL_TOKENS[i] {
                return Err(TextError::MalformedLine {
                    line: i + 1,
                    reason: format!("expected reserved token {}", SPECIAL_TOKENS[i]),
                });
            }
            tokens.push(line);
        }
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(TextError::MalformedLine {
                line: tokens.len() + 1,
                reason: "missing reserved tokens".into(),
            });
        }
        let n = tokens.len();
        Ok(Self::from_tokens(tokens, n))
    }
}

/// A passage field holds either one string or several passages that are
/// concatenated in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PassageField {
    One(String),
    Many(Vec<String>),
}

impl PassageField {
    pub fn joined(&self) -> String {
        match self {
            PassageField::One(s) => s.clone(),
            PassageField::Many(v) => v.join(" "),
        }
    }
}

impl Default for PassageField {
    fn default() -> Self {
        PassageField::One(String::new())
    }
}

/// One JSONL record of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub question: String,
    pub passage: PassageField,
    #[serde(default)]
    pub answer: String,
}

impl RawExample {
    pub fn new(question: impl Into<String>, passage: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            passage: PassageField::One(passage.into()),
            answer: answer.into(),
        }
    }
}

pub fn load_jsonl(path: &Path) -> Result<Vec<RawExample>, TextError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RawExample = serde_json::from_str(&line).map_err(|e| TextError::MalformedLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), TextError> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::from)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub passage: usize,
    pub answer: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            passage: 800,
            answer: 120,
        }
    }
}

/// An encoded (question, passage, answer) instance. Raw tokens are kept
/// alongside ids so that copy and knowledge sources can emit words outside
/// the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub question_tokens: Vec<String>,
    pub passage_tokens: Vec<String>,
    /// Answer words without the terminator.
    pub answer_tokens: Vec<String>,
    pub question_ids: Vec<usize>,
    pub passage_ids: Vec<usize>,
    /// Answer ids followed by `EOS`.
    pub answer_ids: Vec<usize>,
}

impl Example {
    /// Raw target word at decoding step `t` (the terminator after the last word).
    pub fn target_token(&self, t: usize) -> &str {
        self.answer_tokens.get(t).map(String::as_str).unwrap_or(EOS_TOKEN)
    }

    pub fn steps(&self) -> usize {
        self.answer_ids.len()
    }
}

pub fn encode_example(question: &str, passage: &str, answer: &str, vocab: &Vocabulary, limits: Limits) -> Result<Example, TextError> {
    let question_tokens = tokenize(question);
    if question_tokens.is_empty() {
        return Err(TextError::EmptyQuestion);
    }
    let mut passage_tokens = tokenize(passage);
    passage_tokens.truncate(limits.passage);
    if passage_tokens.is_empty() {
        return Err(TextError::EmptyPassage);
    }
    let mut answer_tokens = tokenize(answer);
    answer_tokens.truncate(limits.answer);
    let mut answer_ids = vocab.encode(&answer_tokens);
    answer_ids.push(EOS);
    Ok(Example {
        question_ids: vocab.encode(&question_tokens),
        passage_ids: vocab.encode(&passage_tokens),
        answer_ids,
        question_tokens,
        passage_tokens,
        answer_tokens,
    })
}

pub fn encode_raw(raw: &RawExample, vocab: &Vocabulary, limits: Limits) -> Result<Example, TextError> {
    encode_example(&raw.question, &raw.passage.joined(), &raw.answer, vocab, limits)
}

/// Trainable word vectors, one row per vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
}

const INIT_RANGE: f64 = 0.1;

impl EmbeddingTable {
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            matrix: Tensor::uniform([vocab_size, dim], -INIT_RANGE, INIT_RANGE, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Reads `token v1 ... vd` lines. Covered vocabulary rows are copied; every
/// other row (specials included) keeps its seeded uniform initialisation.
pub fn load_pretrained_embeddings(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable, TextError> {
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed);
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| TextError::MalformedLine {
                    line: lineno,
                    reason: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != dim {
            return Err(TextError::DimensionMismatch {
                line: lineno,
                expected: dim,
                found: values.len(),
            });
        }
        let token = token.to_lowercase();
        if let Some(&id) = vocab.id_by_token.get(&token) {
            if id >= SPECIAL_TOKENS.len() {
                table.matrix.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            }
        }
    }
    Ok(table)
}
