//! The full answer generator: parameter registry, per-instance encoding and
//! one decoding step producing every distribution the objective and the
//! beam search need.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::backbone::{decoder_step, encode, AttentionParams, BiEncoderParams, EncoderOutput, LstmParams};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::knowledge::Fact;
use crate::selectors::{embed_facts, fact_distribution, fact_keys, source_distribution, vocab_distribution, FactParams, SelectorParams};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug)]
pub struct ModelParams {
    pub word_emb: ParamId,
    pub enc_q: BiEncoderParams,
    pub enc_p: BiEncoderParams,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub decoder: LstmParams,
    pub att_q: AttentionParams,
    pub att_p: AttentionParams,
    pub selectors: SelectorParams,
    pub facts: FactParams,
}

#[derive(Clone, Debug)]
pub struct KeagModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl KeagModel {
    /// Registers every parameter with uniform `[-init_range, init_range]`
    /// values drawn from a generator seeded with `seed`.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.init_range;
        let (e, h, a) = (config.emb_dim, config.hidden_dim, config.attn_dim);
        let mut store = ParamStore::new();
        let word_emb = store.add("emb.word", Tensor::uniform([vocab_size, e], -r, r, &mut rng));
        let enc_q = BiEncoderParams::register(&mut store, "enc.q", e, h, r, &mut rng);
        let enc_p = BiEncoderParams::register(&mut store, "enc.p", e, h, r, &mut rng);
        let init_w = store.add("dec.init.w", Tensor::uniform([4 * h, 2 * h], -r, r, &mut rng));
        let init_b = store.add("dec.init.b", Tensor::uniform([1, 2 * h], -r, r, &mut rng));
        let decoder = LstmParams::register(&mut store, "dec.lstm", e + 4 * h, h, r, &mut rng);
        let att_q = AttentionParams::register(&mut store, "att.q", 2 * h, h, None, a, r, &mut rng);
        let att_p = AttentionParams::register(&mut store, "att.p", 2 * h, h, Some(2 * h), a, r, &mut rng);
        let selectors = SelectorParams::register(&mut store, 5 * h, e, vocab_size, r, &mut rng);
        let facts = FactParams::register(&mut store, e, config.relation_slots, config.fact_dim, h, a, r, &mut rng);
        Self {
            config: config.clone(),
            vocab_size,
            store,
            params: ModelParams {
                word_emb,
                enc_q,
                enc_p,
                init_w,
                init_b,
                decoder,
                att_q,
                att_p,
                selectors,
                facts,
            },
        }
    }

    /// Runs both encoders, builds the decoder's initial state and, when
    /// knowledge is enabled and `facts` is nonempty, the fact memory.
    pub fn encode(&self, tape: &mut Tape, question_ids: &[usize], passage_ids: &[usize], facts: &[&Fact], vocab: &Vocabulary) -> Result<Encoded> {
        let p = &self.params;
        let store = &self.store;
        let emb = tape.param(store, p.word_emb);
        let q = encode(tape, store, &p.enc_q, emb, question_ids)?;
        let pe = encode(tape, store, &p.enc_p, emb, passage_ids)?;
        let keys_q = p.att_q.keys(tape, store, q.states)?;
        let keys_p = p.att_p.keys(tape, store, pe.states)?;

        let fq = q.final_state(tape)?;
        let fp = pe.final_state(tape)?;
        let cat = tape.concat(&[fq, fp], Axis::Cols)?;
        let w = tape.param(store, p.init_w);
        let b = tape.param(store, p.init_b);
        let init = tape.matmul(cat, w)?;
        let init = tape.add(init, b)?;
        let h = self.config.hidden_dim;
        let h0 = tape.slice(init, Axis::Cols, 0, h)?;
        let c0 = tape.slice(init, Axis::Cols, h, 2 * h)?;

        let memory = if self.config.use_knowledge && !facts.is_empty() {
            let reps = embed_facts(tape, store, &p.facts, emb, facts, vocab)?;
            Some(FactMemory {
                keys: fact_keys(tape, store, &p.facts, reps)?,
                fact_ids: facts.iter().map(|f| f.fact_id).collect(),
                objects: facts.iter().map(|f| f.object.clone()).collect(),
            })
        } else {
            None
        };

        let zeros_ctx = tape.constant(Tensor::zeros([1, 2 * h]))?;
        let cov_q = tape.constant(Tensor::zeros([1, q.len]))?;
        let cov_p = tape.constant(Tensor::zeros([1, pe.len]))?;
        Ok(Encoded {
            emb,
            question: q,
            passage: pe,
            keys_q,
            keys_p,
            facts: memory,
            initial: DecoderState {
                h: h0,
                c: c0,
                ctx_q: zeros_ctx,
                ctx_p: zeros_ctx,
                cov_q,
                cov_p,
            },
        })
    }

    /// One decoder step fed with vocabulary id `input` (BOS at the start).
    pub fn step(&self, tape: &mut Tape, enc: &Encoded, state: &DecoderState, input: usize) -> Result<StepOutput> {
        let p = &self.params;
        let store = &self.store;
        let x = tape.lookup(enc.emb, &[input])?;
        let (h, c) = decoder_step(tape, store, &p.decoder, x, state.h, state.c, state.ctx_q, state.ctx_p)?;

        let a_q = p.att_q.attend(tape, store, enc.keys_q, h, None, state.cov_q)?;
        let ctx_q = tape.matmul(a_q, enc.question.states)?;
        let a_p = p.att_p.attend(tape, store, enc.keys_p, h, Some(ctx_q), state.cov_p)?;
        let ctx_p = tape.matmul(a_p, enc.passage.states)?;

        let min_q = tape.minimum(a_q, state.cov_q)?;
        let min_q = tape.sum(min_q)?;
        let min_p = tape.minimum(a_p, state.cov_p)?;
        let min_p = tape.sum(min_p)?;
        let coverage_loss = tape.add(min_q, min_p)?;

        let features = tape.concat(&[ctx_q, ctx_p, h], Axis::Cols)?;
        let vocab = vocab_distribution(tape, store, &p.selectors, features)?;
        let source = source_distribution(tape, store, &p.selectors, features, x, enc.facts.is_some())?;
        let fact = match &enc.facts {
            Some(m) => Some(fact_distribution(tape, store, &p.facts, m.keys, h)?),
            None => None,
        };

        let cov_q = tape.add(state.cov_q, a_q)?;
        let cov_p = tape.add(state.cov_p, a_p)?;
        Ok(StepOutput {
            state: DecoderState {
                h,
                c,
                ctx_q,
                ctx_p,
                cov_q,
                cov_p,
            },
            attention_q: a_q,
            attention_p: a_p,
            vocab,
            source,
            fact,
            coverage_loss,
        })
    }
}

/// Related facts of one instance as the fact selector sees them.
#[derive(Clone, Debug)]
pub struct FactMemory {
    pub keys: NodeId,
    pub fact_ids: Vec<usize>,
    pub objects: Vec<Vec<String>>,
}

/// Per-instance encoder outputs, shared by every decoder step.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub emb: NodeId,
    pub question: EncoderOutput,
    pub passage: EncoderOutput,
    pub keys_q: NodeId,
    pub keys_p: NodeId,
    pub facts: Option<FactMemory>,
    pub initial: DecoderState,
}

impl Encoded {
    pub fn knowledge_available(&self) -> bool {
        self.facts.is_some()
    }
}

/// Recurrent state carried between steps: LSTM state, the previous
/// contexts (fed back as input) and the two coverage rows.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: NodeId,
    pub c: NodeId,
    pub ctx_q: NodeId,
    pub ctx_p: NodeId,
    pub cov_q: NodeId,
    pub cov_p: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub attention_q: NodeId,
    pub attention_p: NodeId,
    pub vocab: NodeId,
    /// `1 x 4` over question, passage, vocab, knowledge.
    pub source: NodeId,
    pub fact: Option<NodeId>,
    /// `sum_i min(a_i, cov_i)` over both attentions at this step.
    pub coverage_loss: NodeId,
}
