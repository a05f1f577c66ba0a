//! Conditional LSTM language model over the target caption.

use super::encoder::{lstm_step, run_lstm, LstmState};
use super::params::{DecoderParams, ModelParameters};
use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::text::{BOS, EOS, PAD};

/// `h_0 = tanh(P_h · h)`, `c_0 = tanh(P_c · h)`.
pub fn init_state(g: &mut Graph<'_>, dec: &DecoderParams<NodeId>, h: NodeId) -> Result<LstmState> {
    let h0 = g.matmul_t(h, dec.p_h)?;
    let h0 = g.tanh(h0);
    let c0 = g.matmul_t(h, dec.p_c)?;
    let c0 = g.tanh(c0);
    Ok(LstmState { h: h0, c: c0 })
}

/// Teacher-forced negative log-likelihood of `tgt` (`BOS … EOS`, possibly
/// PAD-extended) given the sentence representation `h`, summed over
/// predicted tokens. Returns the loss node and the number of predicted tokens.
pub fn caption_nll(
    g: &mut Graph<'_>,
    dec: &DecoderParams<NodeId>,
    embed: NodeId,
    h: NodeId,
    tgt: &[usize],
) -> Result<(NodeId, usize)> {
    let real = tgt.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    let tgt = &tgt[..real];
    if tgt.len() < 2 {
        return Err(Error::invalid(
            "caption_nll",
            format!("target needs at least 2 tokens, got {}", tgt.len()),
        ));
    }
    let inputs = &tgt[..tgt.len() - 1];
    let targets: Vec<Option<usize>> = tgt[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
    let count = targets.iter().flatten().count();
    let init = init_state(g, dec, h)?;
    let x = g.gather_rows(embed, inputs)?;
    let states = run_lstm(g, &dec.cell, x, false, init)?;
    let hs: Vec<NodeId> = states.iter().map(|s| s.h).collect();
    let hdec = g.stack_rows(&hs)?;
    let logits = g.matmul_t(hdec, dec.w_o)?;
    let logits = g.add_row(logits, dec.b_o)?;
    let nll = g.nll_rows(logits, &targets)?;
    Ok((nll, count))
}

/// Argmax decoding from BOS until EOS (included) or `max_len` tokens.
pub fn greedy_decode(params: &ModelParameters, h: &[f64], max_len: usize) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let nodes = super::bind(&mut g, params);
    let hn = g.constant(Matrix::row_vector(h));
    let mut state = init_state(&mut g, &nodes.decoder, hn)?;
    let mut out = Vec::new();
    let mut prev = BOS;
    for _ in 0..max_len {
        let x = g.gather_rows(nodes.embed, &[prev])?;
        state = lstm_step(&mut g, &nodes.decoder.cell, x, state)?;
        let logits = g.matmul_t(state.h, nodes.decoder.w_o)?;
        let logits = g.add_row(logits, nodes.decoder.b_o)?;
        let row = g.value(logits).data();
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best);
        if best == EOS {
            break;
        }
        prev = best;
    }
    Ok(out)
}
