//! Bidirectional LSTM encoders, the decoder cell, and additive attention with
//! coverage over question and passage states.

use rand::Rng;

use crate::autodiff::{Axis, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

fn init(store: &mut ParamStore, name: String, shape: [usize; 2], range: f64, rng: &mut impl Rng) -> ParamId {
    store.add(name, Tensor::uniform(shape, -range, range, rng))
}

/// One LSTM layer; gates are packed `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(store: &mut ParamStore, name: &str, input: usize, hidden: usize, range: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: init(store, format!("{name}.w"), [input + hidden, 4 * hidden], range, rng),
            b: init(store, format!("{name}.b"), [1, 4 * hidden], range, rng),
            hidden,
        }
    }

    /// One recurrence: `(h, c) -> (h', c')` for a `1 x input` row `x`.
    pub fn cell(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let hd = self.hidden;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xh = tape.concat(&[x, h], Axis::Cols)?;
        let pre = tape.matmul(xh, w)?;
        let gates = tape.add(pre, b)?;
        let i = tape.slice(gates, Axis::Cols, 0, hd)?;
        let f = tape.slice(gates, Axis::Cols, hd, 2 * hd)?;
        let g = tape.slice(gates, Axis::Cols, 2 * hd, 3 * hd)?;
        let o = tape.slice(gates, Axis::Cols, 3 * hd, 4 * hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiEncoderParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiEncoderParams {
    pub fn register(store: &mut ParamStore, name: &str, input: usize, hidden: usize, range: f64, rng: &mut impl Rng) -> Self {
        Self {
            forward: LstmParams::register(store, &format!("{name}.fw"), input, hidden, range, rng),
            backward: LstmParams::register(store, &format!("{name}.bw"), input, hidden, range, rng),
        }
    }
}

/// Per-token encoder states and the direction summaries used to seed the
/// decoder.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `N x 2h`: forward state then backward state for each position.
    pub states: NodeId,
    pub forward: Vec<NodeId>,
    pub backward: Vec<NodeId>,
    pub len: usize,
}

impl EncoderOutput {
    /// `1 x 2h`: last forward state and first backward state.
    pub fn final_state(&self, tape: &mut Tape) -> Result<NodeId> {
        Ok(tape.concat(&[self.forward[self.len - 1], self.backward[0]], Axis::Cols)?)
    }
}

/// Runs both directions over the embedded sequence `ids`.
pub fn encode(tape: &mut Tape, store: &ParamStore, params: &BiEncoderParams, embeddings: NodeId, ids: &[usize]) -> Result<EncoderOutput> {
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = ids.len();
    let hidden = params.forward.hidden;
    let xs = tape.lookup(embeddings, ids)?;
    let rows: Vec<NodeId> = (0..n).map(|i| tape.slice(xs, Axis::Rows, i, i + 1)).collect::<Result<_, _>>()?;

    let zero = tape.constant(Tensor::zeros([1, hidden]))?;
    let mut forward = Vec::with_capacity(n);
    let (mut h, mut c) = (zero, zero);
    for &x in &rows {
        (h, c) = params.forward.cell(tape, store, x, h, c)?;
        forward.push(h);
    }
    let mut backward = vec![zero; n];
    let (mut h, mut c) = (zero, zero);
    for i in (0..n).rev() {
        (h, c) = params.backward.cell(tape, store, rows[i], h, c)?;
        backward[i] = h;
    }
    let per_pos: Vec<NodeId> = (0..n)
        .map(|i| tape.concat(&[forward[i], backward[i]], Axis::Cols))
        .collect::<Result<_, _>>()?;
    let states = tape.concat(&per_pos, Axis::Rows)?;
    Ok(EncoderOutput {
        states,
        forward,
        backward,
        len: n,
    })
}

/// Additive attention `softmax(g^T tanh(W e_i + U s + [V c] + w_cov cov_i + b))`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w: ParamId,
    pub u: ParamId,
    /// Present only for the passage attention, which also sees the question context.
    pub v: Option<ParamId>,
    pub cov: ParamId,
    pub b: ParamId,
    pub g: ParamId,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        query_dim: usize,
        context_dim: Option<usize>,
        attn_dim: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: init(store, format!("{name}.w"), [state_dim, attn_dim], range, rng),
            u: init(store, format!("{name}.u"), [query_dim, attn_dim], range, rng),
            v: context_dim.map(|d| init(store, format!("{name}.v"), [d, attn_dim], range, rng)),
            cov: init(store, format!("{name}.cov"), [1, attn_dim], range, rng),
            b: init(store, format!("{name}.b"), [1, attn_dim], range, rng),
            g: init(store, format!("{name}.g"), [attn_dim, 1], range, rng),
        }
    }

    /// `W E`, computed once per instance and shared by every decoder step.
    pub fn keys(&self, tape: &mut Tape, store: &ParamStore, states: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        Ok(tape.matmul(states, w)?)
    }

    /// Attention distribution (`1 x N`) given precomputed keys, the decoder
    /// state `s_t`, an optional context row, and the coverage row `1 x N`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        keys: NodeId,
        query: NodeId,
        context: Option<NodeId>,
        coverage: NodeId,
    ) -> Result<NodeId> {
        let u = tape.param(store, self.u);
        let mut bias = tape.matmul(query, u)?;
        if let (Some(v), Some(ctx)) = (self.v, context) {
            let v = tape.param(store, v);
            let term = tape.matmul(ctx, v)?;
            bias = tape.add(bias, term)?;
        }
        let b = tape.param(store, self.b);
        bias = tape.add(bias, b)?;
        let cov_w = tape.param(store, self.cov);
        let cov_col = tape.transpose(coverage)?;
        let cov_term = tape.matmul(cov_col, cov_w)?;
        let pre = tape.add(keys, cov_term)?;
        let pre = tape.add(pre, bias)?;
        let act = tape.tanh(pre)?;
        let g = tape.param(store, self.g);
        let scores = tape.matmul(act, g)?;
        let row = tape.transpose(scores)?;
        Ok(tape.softmax(row)?)
    }
}

/// `sum_i a_i e_i` as a `1 x 2h` row.
pub fn context_vector(tape: &mut Tape, attention: NodeId, states: NodeId) -> Result<NodeId> {
    Ok(tape.matmul(attention, states)?)
}

/// Question and passage context vectors for one step.
pub fn context_vectors(tape: &mut Tape, a_q: NodeId, e_q: NodeId, a_p: NodeId, e_p: NodeId) -> Result<(NodeId, NodeId)> {
    Ok((context_vector(tape, a_q, e_q)?, context_vector(tape, a_p, e_p)?))
}

/// Decoder recurrence with input feeding: the cell sees the previous word
/// embedding together with the previous step's two context vectors.
pub fn decoder_step(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &LstmParams,
    prev_word: NodeId,
    prev_h: NodeId,
    prev_c: NodeId,
    ctx_q_prev: NodeId,
    ctx_p_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let input = tape.concat(&[prev_word, ctx_q_prev, ctx_p_prev], Axis::Cols)?;
    cell.cell(tape, store, input, prev_h, prev_c)
}
