//! Variational objective, optimiser and training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, NodeId, ParamStore, Tape, Tensor, TensorError};
use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::knowledge::{extract_related_facts, Fact, KnowledgeBase};
use crate::model::KeagModel;
use crate::selectors::{anneal_temperature, argmax, gumbel_noise, gumbel_softmax, likelihood_mask, vocab_target, PROB_FLOOR};
use crate::text::{Example, Vocabulary, BOS};

/// How the expectation over the source indicator is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Gumbel-Softmax samples of the source and fact choices weight the
    /// per-source log-likelihoods.
    #[default]
    Relaxed,
    /// `sum_y P(y) log P(w | y)` with the fact choice marginalised by `P(z)`.
    ExactElbo,
    /// `log sum_y P(y) P(w | y)`.
    Marginal,
}

/// Settings that stay fixed over one evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub objective: Objective,
    pub tau: f64,
    pub mc_samples: usize,
    pub coverage_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossDiagnostics {
    /// Selected source per decoding step: argmax of each soft sample for the
    /// relaxed objective, argmax of `P(y)` otherwise.
    pub source_counts: [usize; 4],
    /// Per-step value of the expectation term being maximised.
    pub step_objectives: Vec<f64>,
    pub coverage: f64,
}

pub struct LossOutput {
    pub loss: NodeId,
    pub diagnostics: LossDiagnostics,
}

/// Row mean of an `M x K` node as `1 x K`.
fn row_mean(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let m = tape.value(x).rows();
    if m == 1 {
        return Ok(x);
    }
    let w = tape.constant(Tensor::full([1, m], 1.0 / m as f64))?;
    Ok(tape.matmul(w, x)?)
}

/// Negative objective of one teacher-forced example plus the weighted
/// coverage penalty.
pub fn elbo_loss<R: rand::Rng + ?Sized>(
    tape: &mut Tape,
    model: &KeagModel,
    example: &Example,
    facts: &[&Fact],
    vocab: &Vocabulary,
    settings: &LossSettings,
    rng: &mut R,
) -> Result<LossOutput> {
    let enc = model.encode(tape, &example.question_ids, &example.passage_ids, facts, vocab)?;
    let k = if enc.knowledge_available() { 4 } else { 3 };
    let m = settings.mc_samples.max(1);
    let floor_prob = tape.constant(Tensor::zeros([1, 1]))?;

    let mut state = enc.initial;
    let mut input = BOS;
    let mut objective_terms = Vec::with_capacity(example.steps());
    let mut coverage_terms = Vec::with_capacity(example.steps());
    let mut diag = LossDiagnostics::default();

    for t in 0..example.steps() {
        let target = example.target_token(t);
        let out = model.step(tape, &enc, &state, input)?;
        coverage_terms.push(out.coverage_loss);

        let mut probs = Vec::with_capacity(k);
        for (attn, tokens) in [(out.attention_q, &example.question_tokens), (out.attention_p, &example.passage_tokens)] {
            probs.push(match likelihood_mask(tokens, target) {
                Some(mask) => {
                    let mask = tape.constant(mask)?;
                    tape.matmul(attn, mask)?
                }
                None => floor_prob,
            });
        }
        probs.push(match vocab_target(vocab, target) {
            Some(id) => tape.slice(out.vocab, Axis::Cols, id, id + 1)?,
            None => floor_prob,
        });
        if let (Some(memory), Some(pz)) = (&enc.facts, out.fact) {
            let firsts: Vec<String> = memory.objects.iter().map(|o| o[0].clone()).collect();
            probs.push(match likelihood_mask(&firsts, target) {
                Some(mask) => {
                    let weights = if settings.objective == Objective::Relaxed {
                        let noise = gumbel_noise(rng, m, firsts.len());
                        let soft = gumbel_softmax(tape, pz, settings.tau, &noise)?;
                        row_mean(tape, soft)?
                    } else {
                        pz
                    };
                    let mask = tape.constant(mask)?;
                    tape.matmul(weights, mask)?
                }
                None => floor_prob,
            });
        }
        let p_words = tape.concat(&probs, Axis::Cols)?;
        let p_source = tape.slice(out.source, Axis::Cols, 0, k)?;

        let term = match settings.objective {
            Objective::Relaxed => {
                let noise = gumbel_noise(rng, m, k);
                let soft = gumbel_softmax(tape, p_source, settings.tau, &noise)?;
                for r in 0..m {
                    diag.source_counts[argmax(tape.value(soft).row_slice(r))] += 1;
                }
                let y = row_mean(tape, soft)?;
                let logs = tape.log(p_words, PROB_FLOOR)?;
                let weighted = tape.mul(y, logs)?;
                tape.sum(weighted)?
            }
            Objective::ExactElbo | Objective::Marginal => {
                diag.source_counts[argmax(tape.value(p_source).data())] += 1;
                if settings.objective == Objective::ExactElbo {
                    let logs = tape.log(p_words, PROB_FLOOR)?;
                    let weighted = tape.mul(p_source, logs)?;
                    tape.sum(weighted)?
                } else {
                    let joint = tape.mul(p_source, p_words)?;
                    let marginal = tape.sum(joint)?;
                    tape.log(marginal, PROB_FLOOR)?
                }
            }
        };
        diag.step_objectives.push(tape.value(term).item());
        objective_terms.push(term);

        state = out.state;
        input = example.answer_ids[t];
    }

    let objective = tape.concat(&objective_terms, Axis::Cols)?;
    let objective = tape.sum(objective)?;
    let coverage = tape.concat(&coverage_terms, Axis::Cols)?;
    let coverage = tape.sum(coverage)?;
    diag.coverage = tape.value(coverage).item();
    let neg = tape.scale(objective, -1.0)?;
    let cov = tape.scale(coverage, settings.coverage_weight)?;
    let loss = tape.add(neg, cov)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(LossOutput { loss, diagnostics: diag })
}

/// An encoded example together with the ids of its related facts.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub example: Example,
    pub fact_ids: Vec<usize>,
}

impl TrainItem {
    pub fn new(example: Example, kb: &KnowledgeBase, max_facts: usize) -> Self {
        let fact_ids = extract_related_facts(kb, &example.question_tokens, &example.passage_tokens, max_facts)
            .into_iter()
            .map(|s| s.fact_id)
            .collect();
        Self { example, fact_ids }
    }

    pub fn facts<'a>(&self, kb: &'a KnowledgeBase) -> Vec<&'a Fact> {
        self.fact_ids.iter().map(|&id| kb.fact(id)).collect()
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainingConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (p, &g)) in param.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm && max_norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(k);
        }
    }
    norm
}

/// Per-example generator seed derived from the run seed, step and position.
pub fn example_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&step.to_le_bytes());
    bytes[16..].copy_from_slice(&index.to_le_bytes());
    crate::fnv1a64(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub source_freqs: [f64; 4],
    pub tau: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub skipped: bool,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: KeagModel,
    pub config: TrainingConfig,
    pub step: usize,
    pub skipped_steps: usize,
    adam: Adam,
}

struct ExampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    counts: [usize; 4],
}

impl Trainer {
    pub fn new(model: KeagModel, config: TrainingConfig) -> Self {
        let adam = Adam::new(&model.store);
        Self {
            model,
            config,
            step: 0,
            skipped_steps: 0,
            adam,
        }
    }

    pub fn settings(&self) -> Result<LossSettings> {
        Ok(LossSettings {
            objective: self.config.objective,
            tau: anneal_temperature(self.step, &self.config.tau)?,
            mc_samples: self.config.mc_samples,
            coverage_weight: self.config.coverage_weight,
        })
    }

    fn example_gradient(&self, item: &TrainItem, index: usize, kb: &KnowledgeBase, vocab: &Vocabulary, settings: &LossSettings) -> Result<ExampleResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(self.config.seed, self.step as u64, index as u64));
        let mut tape = Tape::new();
        let facts = item.facts(kb);
        let out = elbo_loss(&mut tape, &self.model, &item.example, &facts, vocab, settings, &mut rng)?;
        let loss = tape.value(out.loss).item();
        let grads = tape.backward(out.loss)?.for_params(&self.model.store);
        Ok(ExampleResult {
            loss,
            grads,
            counts: out.diagnostics.source_counts,
        })
    }

    /// One optimiser step on the mean loss of `batch`. A non-finite loss or
    /// gradient anywhere in the batch skips the update.
    pub fn train_step(&mut self, batch: &[&TrainItem], kb: &KnowledgeBase, vocab: &Vocabulary) -> Result<StepMetrics> {
        let settings = self.settings()?;
        let results: Vec<Result<ExampleResult>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, item)| self.example_gradient(item, i, kb, vocab, &settings))
            .collect();

        let mut metrics = StepMetrics {
            step: self.step,
            loss: f64::NAN,
            source_freqs: [0.0; 4],
            tau: settings.tau,
            skipped: false,
            grad_norm: f64::NAN,
        };
        let mut ok = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(r) => ok.push(r),
                Err(Error::NonFiniteLoss | Error::Tensor(TensorError::NonFiniteGradient { .. } | TensorError::NonFiniteValue { .. })) => {
                    self.skipped_steps += 1;
                    metrics.skipped = true;
                    self.step += 1;
                    return Ok(metrics);
                }
                Err(e) => return Err(e),
            }
        }

        let n = ok.len() as f64;
        let mut grads: Vec<Tensor> = self.model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut counts = [0usize; 4];
        let mut loss = 0.0;
        for r in &ok {
            loss += r.loss;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.add_assign(g);
            }
            for (c, x) in counts.iter_mut().zip(r.counts) {
                *c += x;
            }
        }
        for g in grads.iter_mut() {
            g.scale_in_place(1.0 / n);
        }
        metrics.grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        metrics.loss = loss / n;
        let total: usize = counts.iter().sum();
        for (f, c) in metrics.source_freqs.iter_mut().zip(counts) {
            *f = c as f64 / total.max(1) as f64;
        }
        self.adam.update(&mut self.model.store, &grads, &self.config);
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `max_steps` or until `on_step` returns `false`. Each epoch
    /// visits the items in an order shuffled with the run seed.
    pub fn train(
        &mut self,
        items: &[TrainItem],
        kb: &KnowledgeBase,
        vocab: &Vocabulary,
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<bool>,
    ) -> Result<()> {
        if items.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut epoch = 0u64;
        while self.step < self.config.max_steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size.min(items.len()) {
                if cursor == order.len() {
                    order = (0..items.len()).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(example_seed(self.config.seed, epoch, u64::MAX)));
                    epoch += 1;
                    cursor = 0;
                }
                batch.push(&items[order[cursor]]);
                cursor += 1;
            }
            let metrics = self.train_step(&batch, kb, vocab)?;
            if !on_step(self, &metrics)? {
                break;
            }
        }
        Ok(())
    }
}
