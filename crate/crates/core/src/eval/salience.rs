use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{represent, ModelParameters};
use crate::text::{tokenize, Vocabulary, UNK};

/// Attention over the words of one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceRecord {
    pub tokens: Vec<String>,
    /// `n_a × T`; each row is one head's distribution over tokens.
    pub attention: Vec<Vec<f64>>,
    /// Per-token maximum over heads.
    pub pooled: Vec<f64>,
}

impl SalienceRecord {
    /// Position with the highest pooled salience (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.pooled.iter().enumerate() {
            if p > self.pooled[best] {
                best = i;
            }
        }
        best
    }
}

pub fn salience(
    params: &ModelParameters,
    vocab: &Vocabulary,
    sentence: &str,
) -> Result<SalienceRecord> {
    let tokens = tokenize(sentence);
    let ids = vocab.encode(&tokens);
    if ids.iter().all(|&i| i == UNK) {
        return Err(Error::invalid(
            "salience",
            format!("no in-vocabulary tokens in {sentence:?}"),
        ));
    }
    let (_, a) = represent(params, &ids)?;
    let attention: Vec<Vec<f64>> = (0..a.rows()).map(|r| a.row(r).to_vec()).collect();
    let pooled = (0..a.cols())
        .map(|t| {
            (0..a.rows())
                .map(|r| a[(r, t)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(SalienceRecord {
        tokens,
        attention,
        pooled,
    })
}
