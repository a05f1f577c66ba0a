use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_guarded, Matrix};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::model::{predict_features, represent, ModelParameters};
use crate::text::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SentenceToImage,
    ImageToSentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub median_rank: f64,
    pub n: usize,
    /// 1-based rank of the true match for each query, in corpus order.
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn from_ranks(direction: Direction, ranks: Vec<usize>) -> Self {
        let n = ranks.len();
        let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        let median_rank = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        RetrievalReport {
            direction,
            recall_at_1: recall(1),
            recall_at_5: recall(5),
            recall_at_10: recall(10),
            median_rank,
            n,
            ranks,
        }
    }
}

/// Rank of candidate `target` when `scores` are sorted descending; ties go
/// to the earlier candidate.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// `S[q][i]` = cosine between predicted features of sentence `q` and image `i`.
pub fn similarity_matrix(predicted: &Matrix, images: &Matrix, exec: Exec) -> Matrix {
    let n = predicted.rows();
    let m = images.rows();
    let rows = exec::map_indexed(exec, n, |q| {
        (0..m)
            .map(|i| cosine_guarded(predicted.row(q), images.row(i)))
            .collect::<Vec<f64>>()
    });
    Matrix::from_rows(&rows)
}

/// Sentence→image and image→sentence retrieval over `samples`, where each
/// sample's own image is the single correct match.
pub fn retrieval_eval(
    params: &ModelParameters,
    samples: &[Sample],
    exec: Exec,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid(
            "retrieval_eval",
            format!("pool of {n} is degenerate"),
        ));
    }
    if samples[0].img.len() != params.d_img() {
        return Err(Error::ShapeMismatch {
            op: "retrieval_eval",
            lhs: (1, params.d_img()),
            rhs: (1, samples[0].img.len()),
        });
    }
    let reps = exec::map_indexed(exec, n, |k| {
        represent(params, samples[k].src_content()).map(|r| r.0.h)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let predicted = predict_features(params, &reps)?;
    let images = Matrix::from_rows(&samples.iter().map(|s| s.img.clone()).collect::<Vec<_>>());
    let sim = similarity_matrix(&predicted, &images, exec);
    let s2i = exec::map_indexed(exec, n, |q| rank_of(sim.row(q), q));
    let sim_t = sim.transpose();
    let i2s = exec::map_indexed(exec, n, |i| rank_of(sim_t.row(i), i));
    Ok((
        RetrievalReport::from_ranks(Direction::SentenceToImage, s2i),
        RetrievalReport::from_ranks(Direction::ImageToSentence, i2s),
    ))
}
