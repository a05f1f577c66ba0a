//! Composite training objectives evaluated over a mini-batch.
//!
//! Each batch member gets its own tape for the encoder (and decoder, when
//! the caption loss is active); these run independently under [`Exec`].
//! The grounding loss couples the members, so it runs on a separate head
//! tape whose inputs are the members' sentence representations. Gradients
//! with respect to those inputs are then fed back as seeds into the member
//! tapes. Reductions happen in member order, making the result independent
//! of the execution strategy.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;

use super::config::Objective;
use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::model::{self, decoder, encoder, grounding, Model, ModelParameters};
use crate::rng::{self, Stream};
use crate::text::{strip_wrapper, Batch, Sample};

/// Dropout draw for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
}

impl DropoutSpec {
    fn rng(&self) -> ChaCha8Rng {
        rng::derived(self.seed, Stream::Dropout, self.step)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub objective: Objective,
    /// `None` evaluates in eval mode (no dropout).
    pub dropout: Option<DropoutSpec>,
    pub exec: Exec,
}

impl LossOptions {
    pub fn eval(objective: Objective) -> Self {
        LossOptions {
            objective,
            dropout: None,
            exec: Exec::default(),
        }
    }
}

/// Loss values for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    /// Batch-mean caption NLL (summed over tokens per sample).
    pub caption: Option<f64>,
    pub grounding: Option<f64>,
    /// Number of predicted caption tokens in the batch.
    pub tokens: usize,
}

/// One batch member in the form the objectives consume.
#[derive(Clone, Debug)]
pub struct Member<'s> {
    pub id: &'s str,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub img: &'s [f64],
}

pub fn members<'s>(samples: &'s [Sample], batch: &Batch) -> Vec<Member<'s>> {
    batch
        .indices
        .iter()
        .enumerate()
        .map(|(k, &i)| Member {
            id: &samples[i].id,
            src: strip_wrapper(&batch.src_of(k)).to_vec(),
            tgt: batch.tgt_of(k),
            img: &samples[i].img,
        })
        .collect()
}

struct MemberTape<'p> {
    g: Graph<'p>,
    nodes: Model<NodeId>,
    h: NodeId,
    nll: Option<(NodeId, usize)>,
}

fn member_forward<'p>(
    params: &'p ModelParameters,
    m: &Member<'_>,
    caption: bool,
) -> Result<MemberTape<'p>> {
    let mut g = Graph::new();
    let nodes = model::bind(&mut g, params);
    let (rep, _) = encoder::encode_sentence(&mut g, &nodes.encoder, nodes.embed, &m.src)?;
    let nll = if caption {
        Some(decoder::caption_nll(
            &mut g,
            &nodes.decoder,
            nodes.embed,
            rep.h,
            &m.tgt,
        )?)
    } else {
        None
    };
    Ok(MemberTape {
        g,
        nodes,
        h: rep.h,
        nll,
    })
}

fn check_members(objective: Objective, members: &[Member<'_>]) -> Result<()> {
    if members.is_empty() {
        return Err(Error::invalid("composite_loss", "empty batch"));
    }
    if objective.uses_grounding() {
        if members.len() < 2 {
            return Err(Error::invalid("composite_loss", "grounding needs B >= 2"));
        }
        let ids: HashSet<&str> = members.iter().map(|m| m.id).collect();
        if ids.len() != members.len() {
            return Err(Error::invalid(
                "composite_loss",
                "grounding batch repeats a sample id",
            ));
        }
    }
    Ok(())
}

fn evaluate(
    params: &ModelParameters,
    members: &[Member<'_>],
    opts: &LossOptions,
    want_grads: bool,
) -> Result<(BatchLoss, Option<ModelParameters>)> {
    check_members(opts.objective, members)?;
    let caption = opts.objective.uses_caption();
    let b = members.len();
    let mut tapes = exec::map_indexed(opts.exec, b, |k| {
        member_forward(params, &members[k], caption)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let (caption_loss, tokens) = if caption {
        let mut sum = 0.0;
        let mut tokens = 0;
        for t in &tapes {
            let (node, count) = t.nll.expect("caption tape");
            sum += t.g.value(node).to_scalar();
            tokens += count;
        }
        (Some(sum / b as f64), tokens)
    } else {
        (None, 0)
    };

    let mut head_grads = None;
    let mut rep_grads: Vec<Option<Matrix>> = vec![None; b];
    let grounding_loss = if opts.objective.uses_grounding() {
        let mut g = Graph::new();
        let nodes = model::bind(&mut g, params);
        let leaves: Vec<NodeId> = tapes
            .iter()
            .map(|t| {
                let v = t.g.value(t.h).clone();
                if want_grads {
                    g.leaf(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        let reps = g.stack_rows(&leaves)?;
        let imgs: Vec<Vec<f64>> = members.iter().map(|m| m.img.to_vec()).collect();
        let targets = g.constant(Matrix::from_rows(&imgs));
        let mut rng = opts.dropout.map(|d| d.rng());
        let rate = opts.dropout.map_or(0.0, |d| d.rate);
        let loss = grounding::grounding_loss(
            &mut g,
            &nodes.projection,
            reps,
            targets,
            rate,
            rng.as_mut(),
        )?;
        let value = g.value(loss).to_scalar();
        if want_grads {
            g.backward(loss)?;
            head_grads = Some(nodes.map(|&id| g.grad_or_zeros(id)));
            for (slot, &leaf) in rep_grads.iter_mut().zip(&leaves) {
                *slot = Some(g.grad_or_zeros(leaf));
            }
        }
        Some(value)
    } else {
        None
    };

    let total = caption_loss.unwrap_or(0.0) + grounding_loss.unwrap_or(0.0);
    let loss = BatchLoss {
        total,
        caption: caption_loss,
        grounding: grounding_loss,
        tokens,
    };
    if !want_grads {
        return Ok((loss, None));
    }

    let inv_b = 1.0 / b as f64;
    let member_grads = exec::map_mut(opts.exec, &mut tapes, |k, t| -> Result<ModelParameters> {
        let mut seeds = Vec::with_capacity(2);
        if let Some((node, _)) = t.nll {
            seeds.push((node, Matrix::scalar(inv_b)));
        }
        if let Some(gh) = &rep_grads[k] {
            seeds.push((t.h, gh.clone()));
        }
        t.g.backward_seeded(seeds)?;
        Ok(t.nodes.map(|&id| t.g.grad_or_zeros(id)))
    });
    let mut grads = params.zeros_like();
    for mg in member_grads {
        grads.add_assign(&mg?);
    }
    if let Some(h) = head_grads {
        grads.add_assign(&h);
    }
    Ok((loss, Some(grads)))
}

/// Objective value on a batch: caption loss, grounding loss, or their sum.
pub fn composite_loss(
    params: &ModelParameters,
    members: &[Member<'_>],
    opts: &LossOptions,
) -> Result<BatchLoss> {
    evaluate(params, members, opts, false).map(|(l, _)| l)
}

/// Objective value and its gradient with respect to every parameter.
pub fn loss_and_grads(
    params: &ModelParameters,
    members: &[Member<'_>],
    opts: &LossOptions,
) -> Result<(BatchLoss, ModelParameters)> {
    let (l, g) = evaluate(params, members, opts, true)?;
    Ok((l, g.expect("gradients requested")))
}
