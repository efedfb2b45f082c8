//! Synthetic datasets that each exercise particular word sources.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::RawExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    CopyQ,
    CopyP,
    VocabFill,
    KbLookup,
    Mixed,
}

impl SynthTask {
    pub const ALL: [SynthTask; 5] = [SynthTask::CopyQ, SynthTask::CopyP, SynthTask::VocabFill, SynthTask::KbLookup, SynthTask::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            SynthTask::CopyQ => "copy-q",
            SynthTask::CopyP => "copy-p",
            SynthTask::VocabFill => "vocab-fill",
            SynthTask::KbLookup => "kb-lookup",
            SynthTask::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task {s:?}; expected one of copy-q, copy-p, vocab-fill, kb-lookup, mixed"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthData {
    pub examples: Vec<RawExample>,
    pub triples: Vec<Triple>,
}

impl SynthData {
    pub fn write_kb_tsv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.triples {
            writeln!(f, "{}\t{}\t{}", t.subject, t.relation, t.object)?;
        }
        f.flush()
    }
}

const WORDS: [&str; 48] = [
    "river", "stone", "green", "light", "table", "music", "paper", "cloud", "north", "glass", "horse", "bread", "chair", "dance", "field", "garden",
    "honey", "island", "jacket", "kettle", "lemon", "market", "number", "orange", "pencil", "queen", "rabbit", "silver", "tiger", "uncle", "valley",
    "window", "yellow", "zebra", "anchor", "button", "candle", "desert", "engine", "forest", "guitar", "harbor", "insect", "jungle", "ladder",
    "mirror", "needle", "ocean",
];

const FILLERS: [&str; 16] = [
    "the", "a", "of", "and", "it", "was", "in", "on", "with", "for", "by", "to", "from", "that", "this", "at",
];

const CATEGORIES: [&str; 8] = ["animal", "tool", "plant", "city", "colour", "game", "food", "metal"];

struct Builder {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Builder {
    fn pick<'a>(&mut self, pool: &[&'a str]) -> &'a str {
        pool[self.rng.gen_range(0..pool.len())]
    }

    fn words(&mut self, pool: &[&str], lo: usize, hi: usize) -> Vec<String> {
        let n = self.rng.gen_range(lo..=hi);
        (0..n).map(|_| self.pick(pool).to_string()).collect()
    }

    /// A fresh lowercase alphanumeric token never produced before.
    fn fresh(&mut self, prefix: &str) -> String {
        const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
        loop {
            let code: String = (0..6).map(|_| ALPHABET[self.rng.gen_range(0..ALPHABET.len())] as char).collect();
            let tok = format!("{prefix}{code}");
            if self.used.insert(tok.clone()) {
                return tok;
            }
        }
    }

    fn filler_passage(&mut self) -> Vec<String> {
        let mut p = self.words(&FILLERS, 2, 4);
        p.extend(self.words(&WORDS, 2, 4));
        p.push(".".into());
        p
    }
}

/// `size` examples of `task` and the triples they rely on, reproducible from `seed`.
pub fn synth_generate(task: SynthTask, size: usize, seed: u64) -> SynthData {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        used: HashSet::new(),
    };
    let mut data = SynthData::default();
    for _ in 0..size {
        let (q, p, a) = match task {
            SynthTask::CopyQ => {
                let words = b.words(&WORDS, 2, 5);
                let passage = b.filler_passage();
                (format!("{} ?", words.join(" ")), passage.join(" "), words.join(" "))
            }
            SynthTask::CopyP => {
                let span = b.words(&WORDS, 2, 4);
                let mut passage = b.filler_passage();
                passage.push("so".into());
                passage.extend(span.iter().cloned());
                passage.push(".".into());
                passage.extend(b.filler_passage());
                ("what comes after so ?".to_string(), passage.join(" "), span.join(" "))
            }
            SynthTask::VocabFill => {
                let thing = b.pick(&WORDS).to_string();
                let cat = b.pick(&CATEGORIES).to_string();
                let yes = b.rng.gen_bool(0.5);
                let mut passage = b.filler_passage();
                passage.push(thing.clone());
                passage.extend(["is".to_string()]);
                if !yes {
                    passage.push("not".into());
                }
                passage.extend(["a".to_string(), cat.clone(), ".".to_string()]);
                (format!("is {thing} a {cat} ?"), passage.join(" "), if yes { "yes" } else { "no" }.to_string())
            }
            SynthTask::KbLookup => {
                let entity = b.fresh("ent");
                let is_a = b.fresh("qq");
                let location = b.fresh("zz");
                data.triples.push(Triple {
                    subject: entity.clone(),
                    relation: "IsA".into(),
                    object: is_a.clone(),
                });
                data.triples.push(Triple {
                    subject: entity.clone(),
                    relation: "AtLocation".into(),
                    object: location.clone(),
                });
                let passage = b.filler_passage().join(" ");
                if b.rng.gen_bool(0.5) {
                    (format!("what is {entity} ?"), passage, format!("{entity} is a {is_a}"))
                } else {
                    (format!("where is {entity} ?"), passage, format!("{entity} is in {location}"))
                }
            }
            SynthTask::Mixed => {
                let entity = b.fresh("ent");
                let kind = format!("{} {}", b.fresh("qq"), b.pick(&CATEGORIES));
                let feature = b.fresh("pp");
                data.triples.push(Triple {
                    subject: entity.clone(),
                    relation: "IsA".into(),
                    object: kind.clone(),
                });
                let mut passage = b.filler_passage();
                passage.extend(["it".to_string(), "has".to_string(), feature.clone(), ".".to_string()]);
                (
                    format!("what is {entity} ?"),
                    passage.join(" "),
                    format!("{entity} is a {kind} with {feature}"),
                )
            }
        };
        data.examples.push(RawExample::new(q, p, a));
    }
    data.examples.shuffle(&mut b.rng);
    data
}
