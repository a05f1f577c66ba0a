//! Retrieval metrics, attention salience and representation export.

mod embed;
mod retrieval;
mod salience;

pub use embed::{embed_lines, write_vectors};
pub use retrieval::{rank_of, retrieval_eval, similarity_matrix, Direction, RetrievalReport};
pub use salience::{salience, SalienceRecord};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::exec::{self, Exec};
use crate::model::{self, decoder, encoder, ModelParameters};
use crate::text::Sample;

/// Caption NLL per predicted token over `samples`, in eval mode.
pub fn mean_token_nll(params: &ModelParameters, samples: &[Sample], exec: Exec) -> Result<f64> {
    let parts = exec::map_indexed(exec, samples.len(), |k| -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let nodes = model::bind(&mut g, params);
        let (rep, _) = encoder::encode_sentence(
            &mut g,
            &nodes.encoder,
            nodes.embed,
            samples[k].src_content(),
        )?;
        let (nll, n) =
            decoder::caption_nll(&mut g, &nodes.decoder, nodes.embed, rep.h, &samples[k].tgt)?;
        Ok((g.value(nll).to_scalar(), n))
    });
    let (mut total, mut count) = (0.0, 0usize);
    for p in parts {
        let (v, n) = p?;
        total += v;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}
