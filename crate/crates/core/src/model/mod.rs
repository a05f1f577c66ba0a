//! Network definition: parameters, encoder, decoder and grounding head.

pub mod decoder;
pub mod encoder;
pub mod grounding;
pub mod params;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::Result;
pub use params::{init_params, Dims, Model, ModelParameters};

/// Puts every parameter on the tape as a borrowed leaf.
pub fn bind<'p>(g: &mut Graph<'p>, params: &'p ModelParameters) -> Model<NodeId> {
    params.map(|m| g.leaf_ref(m))
}

/// Sentence representation as plain vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRepresentation {
    pub h_s: Vec<f64>,
    pub h_a: Vec<f64>,
    /// `concat(h_A, h_S)`.
    pub h: Vec<f64>,
}

/// Encodes content tokens with frozen parameters, returning the
/// representation and the `n_a × T` attention matrix.
pub fn represent(
    params: &ModelParameters,
    src: &[usize],
) -> Result<(SentenceRepresentation, Matrix)> {
    let mut g = Graph::new();
    let nodes = bind(&mut g, params);
    let (rep, attn) = encoder::encode_sentence(&mut g, &nodes.encoder, nodes.embed, src)?;
    Ok((
        SentenceRepresentation {
            h_s: g.value(rep.h_s).data().to_vec(),
            h_a: g.value(rep.h_a).data().to_vec(),
            h: g.value(rep.h).data().to_vec(),
        },
        g.value(attn.a).clone(),
    ))
}

/// Eval-mode image-feature prediction for a batch of representations.
pub fn predict_features(params: &ModelParameters, reps: &[Vec<f64>]) -> Result<Matrix> {
    let mut g = Graph::new();
    let nodes = bind(&mut g, params);
    let rows: Vec<Vec<f64>> = reps.to_vec();
    let x = g.constant(Matrix::from_rows(&rows));
    let out = grounding::project::<ChaCha8Rng>(&mut g, &nodes.projection, x, 0.0, None)?;
    Ok(g.value(out).clone())
}
