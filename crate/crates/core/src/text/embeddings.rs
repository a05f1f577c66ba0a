use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::vocab::{Vocabulary, PAD, RESERVED};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Word embedding matrix `V × d_e`; row [`PAD`] is kept at zero.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: Matrix,
    /// Fraction of non-reserved vocabulary tokens found in the source file.
    pub coverage: f64,
}

/// Uniform `[-0.1, 0.1]` rows with a zero PAD row.
pub fn random_embeddings(vocab_size: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = rng::derived(seed, Stream::Embeddings, 0);
    let mut w = Matrix::zeros(vocab_size, dim);
    for x in w.data_mut() {
        *x = rng.random_range(-0.1..=0.1);
    }
    w.row_mut(PAD).fill(0.0);
    w
}

/// Loads GloVe-style text vectors (`token v1 … v_dim` per line) for the
/// tokens of `vocab`. Tokens absent from the file keep a random row.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut weights = random_embeddings(vocab.len(), dim, seed);
    let file = std::fs::File::open(path)?;
    let mut found = vec![false; vocab.len()];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            continue;
        };
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let Some(id) = vocab.id(token) else {
            continue;
        };
        if id == PAD {
            continue;
        }
        for (dst, s) in weights.row_mut(id).iter_mut().zip(&values) {
            *dst = s.parse().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: format!("bad number {s:?}: {e}"),
            })?;
        }
        found[id] = true;
    }
    let content = vocab.len().saturating_sub(RESERVED.len());
    let hits = found[RESERVED.len().min(found.len())..]
        .iter()
        .filter(|&&f| f)
        .count();
    let coverage = if content == 0 {
        0.0
    } else {
        hits as f64 / content as f64
    };
    log::info!("embedding coverage {:.3} ({hits}/{content})", coverage);
    Ok(EmbeddingTable { weights, coverage })
}
