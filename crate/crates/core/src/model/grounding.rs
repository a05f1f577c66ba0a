//! Image-feature prediction and the batch ranking loss.

use rand::Rng;

use super::params::ProjectionParams;
use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};

/// Maps sentence representations (rows of `reps`, width `2·d_cell`) into
/// image-feature space. Inverted dropout with rate `dropout` follows each
/// hidden ReLU when `rng` is given; without it the map is deterministic.
pub fn project<R: Rng>(
    g: &mut Graph<'_>,
    proj: &ProjectionParams<NodeId>,
    reps: NodeId,
    dropout: f64,
    mut rng: Option<&mut R>,
) -> Result<NodeId> {
    let mut x = reps;
    for (l, layer) in proj.layers.iter().enumerate() {
        x = g.matmul_t(x, layer.w)?;
        x = g.add_row(x, layer.b)?;
        if l < 3 {
            x = g.relu(x);
            if let Some(rng) = rng.as_deref_mut() {
                if dropout > 0.0 {
                    let (r, c) = g.shape(x);
                    let keep = 1.0 / (1.0 - dropout);
                    let mut mask = Matrix::zeros(r, c);
                    for m in mask.data_mut() {
                        *m = if rng.random::<f64>() < dropout {
                            0.0
                        } else {
                            keep
                        };
                    }
                    x = g.mul_const(x, mask)?;
                }
            }
        }
    }
    Ok(x)
}

/// Ranking loss between predicted (`B × d_img`) and target features, where
/// row `k` of each forms the positive pair and every other combination in
/// the batch, in both retrieval directions, is a negative.
pub fn ranking_loss(g: &mut Graph<'_>, predicted: NodeId, targets: NodeId) -> Result<NodeId> {
    let (bp, bt) = (g.shape(predicted).0, g.shape(targets).0);
    if bp != bt {
        return Err(Error::ShapeMismatch {
            op: "ranking_loss",
            lhs: g.shape(predicted),
            rhs: g.shape(targets),
        });
    }
    if bp < 2 {
        return Err(Error::invalid(
            "ranking_loss",
            format!("batch of {bp} has no negatives"),
        ));
    }
    let s = g.cosine_matrix(predicted, targets)?;
    g.rank_loss(s)
}

/// Projects stacked sentence representations and applies [`ranking_loss`].
pub fn grounding_loss<R: Rng>(
    g: &mut Graph<'_>,
    proj: &ProjectionParams<NodeId>,
    reps: NodeId,
    targets: NodeId,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<NodeId> {
    let predicted = project(g, proj, reps, dropout, rng)?;
    ranking_loss(g, predicted, targets)
}
