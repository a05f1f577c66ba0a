use std::io::Write;

use crate::error::Result;
use crate::exec::{self, Exec};
use crate::model::{represent, ModelParameters};
use crate::text::{tokenize, Vocabulary, UNK};

/// Sentence representation `h` for each line. A line without tokens is
/// encoded as a lone unknown token.
pub fn embed_lines(
    params: &ModelParameters,
    vocab: &Vocabulary,
    lines: &[String],
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    exec::map_indexed(exec, lines.len(), |i| {
        let mut ids = vocab.encode(&tokenize(&lines[i]));
        if ids.is_empty() {
            ids.push(UNK);
        }
        represent(params, &ids).map(|(r, _)| r.h)
    })
    .into_iter()
    .collect()
}

/// One whitespace-separated vector per line.
pub fn write_vectors(mut out: impl Write, vectors: &[Vec<f64>]) -> std::io::Result<()> {
    for v in vectors {
        let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
