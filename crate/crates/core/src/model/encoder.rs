//! Bidirectional LSTM encoder with structured self-attention.

use super::params::{EncoderParams, Lstm};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Hidden and cell state of one LSTM step, both `1 × d`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros(g: &mut Graph<'_>, d: usize) -> Self {
        let h = g.constant(crate::autodiff::Matrix::zeros(1, d));
        let c = g.constant(crate::autodiff::Matrix::zeros(1, d));
        LstmState { h, c }
    }
}

/// One LSTM step from an input row `x_t` (`1 × d_in`).
pub fn lstm_step(
    g: &mut Graph<'_>,
    cell: &Lstm<NodeId>,
    x_t: NodeId,
    prev: LstmState,
) -> Result<LstmState> {
    let x_proj = g.matmul_t(x_t, cell.w_ih)?;
    lstm_step_projected(g, cell, x_proj, prev)
}

/// LSTM step given the precomputed input projection `x_t · W_ihᵀ`.
pub(crate) fn lstm_step_projected(
    g: &mut Graph<'_>,
    cell: &Lstm<NodeId>,
    x_proj: NodeId,
    prev: LstmState,
) -> Result<LstmState> {
    let d = g.shape(prev.h).1;
    if g.shape(cell.w_hh) != (4 * d, d) || g.shape(x_proj) != (1, 4 * d) {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            lhs: g.shape(cell.w_hh),
            rhs: g.shape(x_proj),
        });
    }
    let rec = g.matmul_t(prev.h, cell.w_hh)?;
    let z = g.add(x_proj, rec)?;
    let z = g.add(z, cell.b)?;
    let zi = g.slice_cols(z, 0, d)?;
    let zf = g.slice_cols(z, d, d)?;
    let zg = g.slice_cols(z, 2 * d, d)?;
    let zo = g.slice_cols(z, 3 * d, d)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Runs `cell` over the rows of `inputs` (`T × d_in`) in the given order,
/// returning hidden states indexed by original position.
pub(crate) fn run_lstm(
    g: &mut Graph<'_>,
    cell: &Lstm<NodeId>,
    inputs: NodeId,
    reverse: bool,
    init: LstmState,
) -> Result<Vec<LstmState>> {
    let t_len = g.shape(inputs).0;
    let proj = g.matmul_t(inputs, cell.w_ih)?;
    let mut states = vec![init; t_len];
    let mut state = init;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let xp = g.slice_row(proj, t)?;
        state = lstm_step_projected(g, cell, xp, state)?;
        states[t] = state;
    }
    Ok(states)
}

/// Per-timestep encoder states.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStates {
    /// `d_cell × T`; column `t` is `max(→h_t, ←h_t)`.
    pub h: NodeId,
    /// `T × d_cell`, the transpose of `h`.
    pub h_rows: NodeId,
    /// Final forward state `→h_T`.
    pub last_fwd: NodeId,
    /// Final backward state `←h_1`.
    pub first_bwd: NodeId,
}

/// Encodes content tokens (no BOS/EOS) and returns the states and the
/// recurrent summary `h_S = max(→h_T, ←h_1)` as a `1 × d_cell` row.
pub fn encode(
    g: &mut Graph<'_>,
    enc: &EncoderParams<NodeId>,
    embed: NodeId,
    src: &[usize],
) -> Result<(EncoderStates, NodeId)> {
    if src.is_empty() {
        return Err(Error::invalid("encode", "empty source sequence"));
    }
    let d = g.shape(enc.fwd.w_hh).1;
    let x = g.gather_rows(embed, src)?;
    let init = LstmState::zeros(g, d);
    let fwd = run_lstm(g, &enc.fwd, x, false, init)?;
    let bwd = run_lstm(g, &enc.bwd, x, true, init)?;
    let fused = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| g.max2(f.h, b.h))
        .collect::<Result<Vec<_>>>()?;
    let h_rows = g.stack_rows(&fused)?;
    let h = g.transpose(h_rows);
    let last_fwd = fwd[src.len() - 1].h;
    let first_bwd = bwd[0].h;
    let h_s = g.max2(last_fwd, first_bwd)?;
    Ok((
        EncoderStates {
            h,
            h_rows,
            last_fwd,
            first_bwd,
        },
        h_s,
    ))
}

/// Attention weights and context vectors.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `n_a × T`, rows are distributions over timesteps.
    pub a: NodeId,
    /// `n_a × d_cell`, row `i` is the `i`-th context vector.
    pub c: NodeId,
}

/// `A = softmax(W_a2 · tanh(W_a1 · H))`, `C = A · Hᵀ`.
pub fn attend(
    g: &mut Graph<'_>,
    w_a1: NodeId,
    w_a2: NodeId,
    states: &EncoderStates,
) -> Result<AttentionOutput> {
    let hidden = g.matmul(w_a1, states.h)?;
    let hidden = g.tanh(hidden);
    let scores = g.matmul(w_a2, hidden)?;
    let a = g.softmax_rows(scores);
    let c = g.matmul(a, states.h_rows)?;
    Ok(AttentionOutput { a, c })
}

/// Sentence representation nodes, all row vectors.
#[derive(Clone, Copy, Debug)]
pub struct SentenceNodes {
    pub h_s: NodeId,
    pub h_a: NodeId,
    /// `concat(h_A, h_S)`, width `2·d_cell`.
    pub h: NodeId,
}

/// `h_A = max over context vectors`, `h = concat(h_A, h_S)`.
pub fn compose(g: &mut Graph<'_>, attn: &AttentionOutput, h_s: NodeId) -> Result<SentenceNodes> {
    let h_a = g.reduce_max_rows(attn.c)?;
    let h = g.concat_rows(h_a, h_s)?;
    Ok(SentenceNodes { h_s, h_a, h })
}

/// Full encoder pipeline: encode, attend, compose.
pub fn encode_sentence(
    g: &mut Graph<'_>,
    enc: &EncoderParams<NodeId>,
    embed: NodeId,
    src: &[usize],
) -> Result<(SentenceNodes, AttentionOutput)> {
    let (states, h_s) = encode(g, enc, embed, src)?;
    let attn = attend(g, enc.w_a1, enc.w_a2, &states)?;
    let rep = compose(g, &attn, h_s)?;
    Ok((rep, attn))
}
