//! ROUGE-L and corpus BLEU-1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Recall weight of the ROUGE-L F-measure, `1.2^2`.
pub const ROUGE_BETA_SQ: f64 = 1.44;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::EmptyInput("candidate"));
    }
    if reference.is_empty() {
        return Err(MetricError::EmptyInput("reference"));
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let r = lcs / reference.len() as f64;
    let p = lcs / candidate.len() as f64;
    Ok((1.0 + ROUGE_BETA_SQ) * r * p / (r + ROUGE_BETA_SQ * p))
}

/// Clipped unigram precision over the whole corpus times the brevity penalty.
pub fn bleu_1<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyInput("corpus"));
    }
    let (mut clipped, mut cand_len, mut ref_len) = (0usize, 0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in r {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
        for t in c {
            if let Some(n) = counts.get_mut(t.as_ref()) {
                if *n > 0 {
                    *n -= 1;
                    clipped += 1;
                }
            }
        }
        cand_len += c.len();
        ref_len += r.len();
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let precision = clipped as f64 / cand_len as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    Ok(precision * bp)
}

/// Position-wise token matches over `max(len(pred), len(ref))`, pooled over
/// the corpus.
pub fn token_accuracy<S: AsRef<str>>(predictions: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        hits += p.iter().zip(r).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
        total += p.len().max(r.len());
    }
    if total == 0 {
        return 1.0;
    }
    hits as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge_l: f64,
    pub bleu_1: f64,
    pub per_example_rouge_l: Vec<f64>,
}

/// Mean ROUGE-L and corpus BLEU-1 over tokenized pairs. An empty candidate
/// scores 0 ROUGE-L.
pub fn evaluate(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<MetricReport, MetricError> {
    let bleu = bleu_1(candidates, references)?;
    let per: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| if c.is_empty() { Ok(0.0) } else { rouge_l(c, r) })
        .collect::<Result<_, _>>()?;
    Ok(MetricReport {
        rouge_l: per.iter().sum::<f64>() / per.len() as f64,
        bleu_1: bleu,
        per_example_rouge_l: per,
    })
}
