//! Oracles and toy fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use keag::autodiff::{gradient_check, gradient_check_params, Axis, GradCheckReport, NodeId, Tape, Tensor, TensorError};
use keag::config::ModelConfig;
use keag::knowledge::{extract_related_facts, Fact, KnowledgeBase};
use keag::model::KeagModel;
use keag::selectors::gumbel_softmax_sample;
use keag::text::{encode_example, tokenize, Example, Limits, Vocabulary, BOS};
use keag::trainer::{elbo_loss, LossOutput, LossSettings, Objective, TrainItem};
use keag::Error;

pub fn tiny_config(init_range: f64) -> ModelConfig {
    ModelConfig {
        emb_dim: 4,
        hidden_dim: 3,
        attn_dim: 3,
        fact_dim: 4,
        relation_slots: 2,
        use_knowledge: true,
        init_range,
    }
}

/// A single instance with its vocabulary, knowledge base and related facts.
pub struct Toy {
    pub vocab: Vocabulary,
    pub kb: KnowledgeBase,
    pub example: Example,
    pub fact_ids: Vec<usize>,
}

impl Toy {
    pub fn new(question: &str, passage: &str, answer: &str, extra_vocab: &str, triples: &[(&str, &str, &str)]) -> Self {
        let corpus = [tokenize(question), tokenize(passage), tokenize(extra_vocab)];
        let vocab = Vocabulary::build(corpus.iter().map(Vec::as_slice), 100).unwrap();
        let mut kb = KnowledgeBase::new();
        for (s, r, o) in triples {
            kb.insert(s, r, o).unwrap();
        }
        let example = encode_example(question, passage, answer, &vocab, Limits::default()).unwrap();
        let item = TrainItem::new(example, &kb, 10);
        Self {
            vocab,
            kb,
            example: item.example,
            fact_ids: item.fact_ids,
        }
    }

    pub fn facts(&self) -> Vec<&Fact> {
        self.fact_ids.iter().map(|&id| self.kb.fact(id)).collect()
    }

    pub fn item(&self) -> TrainItem {
        TrainItem {
            example: self.example.clone(),
            fact_ids: self.fact_ids.clone(),
        }
    }

    pub fn loss(&self, tape: &mut Tape, model: &KeagModel, settings: &LossSettings, noise_seed: u64) -> keag::Result<LossOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        elbo_loss(tape, model, &self.example, &self.facts(), &self.vocab, settings, &mut rng)
    }

    /// Objective value (negated loss) under `settings`.
    pub fn objective(&self, model: &KeagModel, settings: &LossSettings, noise_seed: u64) -> f64 {
        let mut tape = Tape::new();
        let out = self.loss(&mut tape, model, settings, noise_seed).unwrap();
        -tape.value(out.loss).item()
    }

    /// `P(y)` at every teacher-forced step.
    pub fn source_probs(&self, model: &KeagModel) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let facts = self.facts();
        let enc = model
            .encode(&mut tape, &self.example.question_ids, &self.example.passage_ids, &facts, &self.vocab)
            .unwrap();
        let (mut state, mut input) = (enc.initial, BOS);
        let mut out = Vec::new();
        for t in 0..self.example.steps() {
            let step = model.step(&mut tape, &enc, &state, input).unwrap();
            out.push(tape.value(step.source).data().to_vec());
            state = step.state;
            input = self.example.answer_ids[t];
        }
        out
    }
}

/// Five decoding steps drawing on every source; "animal" is reachable only
/// through the knowledge base.
pub fn knowledge_toy() -> Toy {
    Toy::new(
        "where does the red fox live ?",
        "the red fox lives in a quiet forest .",
        "the fox is animal",
        "is",
        &[("fox", "IsA", "animal"), ("fox", "AtLocation", "forest"), ("red", "IsA", "colour")],
    )
}

/// Three decoding steps (two words and the terminator).
pub fn three_step_toy() -> Toy {
    Toy::new("red fox ?", "a red fox .", "red fox", "", &[("fox", "IsA", "red"), ("red", "RelatedTo", "fox")])
}

type Prim = fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>;

fn primitive_cases() -> Vec<(&'static str, Vec<[usize; 2]>, bool, Prim)> {
    vec![
        ("matmul", vec![[2, 3], [3, 4]], false, |t, i| t.matmul(i[0], i[1])),
        ("add", vec![[3, 4], [1, 4]], false, |t, i| t.add(i[0], i[1])),
        ("mul", vec![[3, 2], [3, 1]], false, |t, i| t.mul(i[0], i[1])),
        ("concat", vec![[2, 3], [2, 2]], false, |t, i| t.concat(&[i[0], i[1]], Axis::Cols)),
        ("tanh", vec![[2, 3]], false, |t, i| t.tanh(i[0])),
        ("sigmoid", vec![[2, 3]], false, |t, i| t.sigmoid(i[0])),
        ("softmax", vec![[2, 4]], false, |t, i| t.softmax(i[0])),
        ("log", vec![[2, 3]], true, |t, i| t.log(i[0], 1e-12)),
        ("sum", vec![[2, 3]], false, |t, i| t.sum(i[0])),
        ("lookup", vec![[4, 3]], false, |t, i| t.lookup(i[0], &[1, 3, 1])),
        ("slice", vec![[2, 5]], false, |t, i| t.slice(i[0], Axis::Cols, 1, 4)),
        ("transpose", vec![[2, 3]], false, |t, i| t.transpose(i[0])),
        ("scale", vec![[2, 3]], false, |t, i| t.scale(i[0], -1.7)),
        ("minimum", vec![[2, 3], [2, 3]], false, |t, i| t.minimum(i[0], i[1])),
    ]
}

/// Worst relative error of each tape primitive over `trials` random points,
/// each read out through a random linear functional.
pub fn primitive_gradchecks(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .into_iter()
        .map(|(name, shapes, positive, prim)| {
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                let (lo, hi) = if positive { (0.1, 1.0) } else { (-1.0, 1.0) };
                let points: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(*s, lo, hi, &mut rng)).collect();
                let probe_seed: u64 = rng.gen();
                let report = gradient_check(
                    |tape, ids| {
                        let out = prim(tape, ids)?;
                        let w = Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(probe_seed));
                        let w = tape.constant(w)?;
                        let weighted = tape.mul(out, w)?;
                        tape.sum(weighted)
                    },
                    &points,
                    1e-5,
                    1e-3,
                )
                .unwrap();
                worst = worst.max(report.max_rel_error);
            }
            (name, worst)
        })
        .collect()
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("loss failed: {other}"),
    }
}

/// Finite-difference check of the whole objective over every parameter of a
/// tiny model, with Gumbel noise and temperature held fixed.
pub fn elbo_gradcheck(objective: Objective) -> (GradCheckReport, usize) {
    let toy = knowledge_toy();
    let model = KeagModel::new(&tiny_config(0.3), toy.vocab.len(), 3);
    let settings = LossSettings {
        objective,
        tau: 0.5,
        mc_samples: 2,
        coverage_weight: 1.0,
    };
    let report = gradient_check_params(
        &model.store,
        |store, tape| {
            let mut m = model.clone();
            m.store = store.clone();
            toy.loss(tape, &m, &settings, 99).map(|o| o.loss).map_err(to_tensor_error)
        },
        1e-4,
        1e-3,
    )
    .unwrap();
    (report, model.store.num_scalars())
}

pub struct LawCheck {
    pub probs: Vec<f64>,
    pub total_variation: f64,
    pub p_value: f64,
}

/// Hard-index frequencies of `draws` Gumbel-Softmax samples for `simplexes`
/// random categoricals (the first is `[0.7, 0.2, 0.1]`), compared with the
/// target by total variation and a chi-square goodness-of-fit test.
pub fn gumbel_law(simplexes: usize, draws: usize, seed: u64) -> Vec<LawCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..simplexes)
        .map(|i| {
            let probs = if i == 0 {
                vec![0.7, 0.2, 0.1]
            } else {
                let k = rng.gen_range(2..=6);
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|r| r / total).collect()
            };
            let mut counts = vec![0usize; probs.len()];
            for _ in 0..draws {
                counts[gumbel_softmax_sample(&probs, 0.5, &mut rng).unwrap().hard_index] += 1;
            }
            let n = draws as f64;
            let total_variation = 0.5 * counts.iter().zip(&probs).map(|(&c, p)| (c as f64 / n - p).abs()).sum::<f64>();
            let chi2: f64 = counts
                .iter()
                .zip(&probs)
                .map(|(&c, p)| (c as f64 - n * p).powi(2) / (n * p))
                .sum();
            let dist = ChiSquared::new((probs.len() - 1) as f64).unwrap();
            LawCheck {
                probs,
                total_variation,
                p_value: 1.0 - dist.cdf(chi2),
            }
        })
        .collect()
}

fn contains_run(needle: &[String], haystack: &[String]) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut start = 0;
    while start + needle.len() <= haystack.len() {
        let mut all = true;
        for (j, tok) in needle.iter().enumerate() {
            if &haystack[start + j] != tok {
                all = false;
                break;
            }
        }
        if all {
            return true;
        }
        start += 1;
    }
    false
}

/// Scores every fact of the base by the literal rules and ranks them.
pub fn brute_force_related(kb: &KnowledgeBase, q: &[String], p: &[String], limit: usize) -> Vec<(usize, u32)> {
    let mut out = Vec::new();
    for fact in kb.facts() {
        let sq = contains_run(&fact.subject, q);
        let sp = contains_run(&fact.subject, p);
        let op = contains_run(&fact.object, p);
        let score = 4 * u32::from(sq && op) + 2 * u32::from(sp && op) + u32::from(sq || sp);
        if score > 0 {
            out.push((fact.fact_id, score));
        }
    }
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out.truncate(limit);
    out
}

/// Runs `instances` random (question, passage, KB) cases against the brute
/// force ranking. Returns `(instances checked, mismatches, largest KB)`.
pub fn scoring_oracle(instances: usize, seed: u64) -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let relations = ["IsA", "UsedFor", "AtLocation", "PartOf", "HasA"];
    let phrase = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> String {
        let n = rng.gen_range(lo..=hi);
        (0..n).map(|_| words[rng.gen_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ")
    };
    let kbs = 10;
    let per_kb = instances.div_ceil(kbs);
    let (mut checked, mut mismatches, mut largest) = (0, 0, 0);
    for b in 0..kbs {
        let size = if b == 0 { 10_000 } else { rng.gen_range(1..=10_000) };
        largest = largest.max(size);
        let mut kb = KnowledgeBase::new();
        for _ in 0..size {
            let s = phrase(&mut rng, 1, 2);
            let o = phrase(&mut rng, 1, 3);
            kb.insert(&s, relations[rng.gen_range(0..relations.len())], &o).unwrap();
        }
        for _ in 0..per_kb.min(instances - checked) {
            let q = tokenize(&phrase(&mut rng, 2, 8));
            let p = tokenize(&phrase(&mut rng, 4, 30));
            let limit = if rng.gen_bool(0.5) { rng.gen_range(1..=20) } else { 1000 };
            let got: Vec<(usize, u32)> = extract_related_facts(&kb, &q, &p, limit)
                .into_iter()
                .map(|s| (s.fact_id, s.score))
                .collect();
            if got != brute_force_related(&kb, &q, &p, limit) {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    (checked, mismatches, largest)
}

pub struct JensenDraw {
    pub marginal: f64,
    pub elbo: f64,
    pub non_degenerate: bool,
}

/// Exact marginal log-likelihood and exact ELBO of the three-step toy under
/// `draws` random parameter settings.
pub fn jensen_draws(draws: usize, seed: u64) -> Vec<JensenDraw> {
    let toy = three_step_toy();
    let settings = |objective| LossSettings {
        objective,
        tau: 1.0,
        mc_samples: 1,
        coverage_weight: 0.0,
    };
    (0..draws as u64)
        .map(|d| {
            let model = KeagModel::new(&tiny_config(1.0), toy.vocab.len(), seed.wrapping_add(d));
            let non_degenerate = toy.source_probs(&model).iter().all(|p| p.iter().all(|&x| x < 1.0 - 1e-9));
            JensenDraw {
                marginal: toy.objective(&model, &settings(Objective::Marginal), 0),
                elbo: toy.objective(&model, &settings(Objective::ExactElbo), 0),
                non_degenerate,
            }
        })
        .collect()
}
