use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// One caption pair with its image feature vector, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub src: String,
    pub tgt: String,
    pub img: Vec<f64>,
    /// Token known to dominate `img` (synthetic corpora only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salient: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d_img: usize,
}

/// Immutable set of records sharing one image-feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_img: usize,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn new(d_img: usize, records: Vec<Record>) -> Result<Self> {
        let c = Corpus { d_img, records };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.img.len() != self.d_img {
                return Err(Error::Config(format!(
                    "record {}: img width {} != d_img {}",
                    r.id,
                    r.img.len(),
                    self.d_img
                )));
            }
            if !r.img.iter().any(|&x| x != 0.0) || !r.img.iter().all(|x| x.is_finite()) {
                return Err(Error::Config(format!(
                    "record {}: img must be finite with nonzero norm",
                    r.id
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All caption texts (sources then targets), for vocabulary building.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .flat_map(|r| [r.src.as_str(), r.tgt.as_str()])
    }

    /// Reads the JSONL format: a `{"d_img": n}` header line followed by one
    /// record per line.
    pub fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Parse {
                path: name.clone(),
                line: 1,
                msg: format!("metadata line: {e}"),
            })?,
            None => return Err(Error::EmptyCorpus),
        };
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: name.clone(),
                line: n + 2,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Corpus::new(header.d_img, records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &Header { d_img: self.d_img })?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Token-id view of every record under `vocab`.
    pub fn encode(&self, vocab: &Vocabulary) -> Vec<Sample> {
        self.records
            .iter()
            .map(|r| Sample {
                id: r.id.clone(),
                src: vocab.encode_wrapped(&r.src),
                tgt: vocab.encode_wrapped(&r.tgt),
                img: r.img.clone(),
                salient: r.salient.as_deref().and_then(|s| vocab.id(s)),
            })
            .collect()
    }
}

/// A record in token-id form. `src` and `tgt` are `BOS … EOS` wrapped.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub img: Vec<f64>,
    pub salient: Option<usize>,
}

impl Sample {
    /// Source tokens without the BOS/EOS wrapper; this is what the encoder reads.
    pub fn src_content(&self) -> &[usize] {
        strip_wrapper(&self.src)
    }
}

pub(crate) fn strip_wrapper(ids: &[usize]) -> &[usize] {
    let start = usize::from(ids.first() == Some(&BOS));
    let end = if ids.len() > start && ids.last() == Some(&EOS) {
        ids.len() - 1
    } else {
        ids.len()
    };
    &ids[start..end]
}

/// Generated copy-task corpus plus the per-token codes that built its images.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub codes: HashMap<String, Vec<f64>>,
    /// Tokens eligible to be the salient word of a caption.
    pub salient_tokens: Vec<String>,
}

/// Weight of the salient token's code inside a synthetic image vector.
pub const SALIENT_WEIGHT: f64 = 5.0;

/// Builds a deterministic copy-task corpus.
///
/// The content vocabulary is split into `max(1, 3V/4)` "visual" tokens and
/// plain tokens. Each caption holds exactly one visual token (its salient
/// token) and 2–7 distinct plain tokens in random order; the target caption
/// equals the source. Every token owns a fixed code drawn from
/// `N(0, I/d_img)`, and the image is the unit-normalized sum of the caption's
/// codes with the salient code weighted by [`SALIENT_WEIGHT`].
pub fn gen_synthetic(
    n: usize,
    v_content: usize,
    d_img: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if v_content < 8 {
        return Err(Error::Config(format!(
            "synthetic vocabulary needs at least 8 content tokens, got {v_content}"
        )));
    }
    if d_img == 0 {
        return Err(Error::Config("d_img must be positive".into()));
    }
    let n_visual = (v_content * 3 / 4).max(1);
    let visual: Vec<String> = (0..n_visual).map(|i| format!("v{i:02}")).collect();
    let plain: Vec<String> = (0..v_content - n_visual)
        .map(|i| format!("w{i:02}"))
        .collect();

    let mut rng = rng::derived(seed, Stream::Synthetic, 0);
    let scale = 1.0 / (d_img as f64).sqrt();
    let mut codes = HashMap::new();
    for tok in visual.iter().chain(&plain) {
        let code: Vec<f64> = (0..d_img)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        codes.insert(tok.clone(), code);
    }

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(3..=8usize);
        let salient = visual.choose(&mut rng).expect("nonempty").clone();
        let mut words: Vec<String> = plain.choose_multiple(&mut rng, len - 1).cloned().collect();
        words.push(salient.clone());
        words.shuffle(&mut rng);

        let mut img = vec![0.0; d_img];
        for w in &words {
            let weight = if *w == salient { SALIENT_WEIGHT } else { 1.0 };
            for (acc, c) in img.iter_mut().zip(&codes[w]) {
                *acc += weight * c;
            }
        }
        let norm = img.iter().map(|x| x * x).sum::<f64>().sqrt();
        img.iter_mut().for_each(|x| *x /= norm);

        let text = words.join(" ");
        records.push(Record {
            id: format!("syn-{i:05}"),
            src: text.clone(),
            tgt: text,
            img,
            salient: Some(salient),
        });
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::new(d_img, records)?,
        codes,
        salient_tokens: visual,
    })
}

/// Source tokens of a record.
pub fn record_tokens(r: &Record) -> Vec<String> {
    tokenize(&r.src)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_synthetic(40, 16, 8, 11).unwrap();
        let b = gen_synthetic(40, 16, 8, 11).unwrap();
        assert_eq!(a.corpus, b.corpus);
        for (ra, rb) in a.corpus.records.iter().zip(&b.corpus.records) {
            let bits = |r: &Record| r.img.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ra), bits(rb));
        }
        let c = gen_synthetic(40, 16, 8, 12).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn images_are_unit_norm() {
        let s = gen_synthetic(100, 64, 64, 3).unwrap();
        for r in &s.corpus.records {
            let n: f64 = r.img.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn captions_have_one_salient_token() {
        let s = gen_synthetic(200, 64, 16, 5).unwrap();
        for r in &s.corpus.records {
            let toks = record_tokens(r);
            assert!((3..=8).contains(&toks.len()));
            assert_eq!(r.src, r.tgt);
            let sal = r.salient.as_ref().unwrap();
            let visual: Vec<_> = toks
                .iter()
                .filter(|t| s.salient_tokens.contains(t))
                .collect();
            assert_eq!(visual, vec![sal]);
            let uniq: HashSet<_> = toks.iter().collect();
            assert_eq!(uniq.len(), toks.len());
        }
    }

    #[test]
    fn degenerate_vocab_rejected() {
        assert!(gen_synthetic(10, 7, 8, 0).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Record {
            id: "a".into(),
            src: "x".into(),
            tgt: "x".into(),
            img: vec![1.0],
            salient: None,
        };
        assert!(Corpus::new(1, vec![r.clone(), r]).is_err());
    }

    #[test]
    fn strip_wrapper_cases() {
        assert_eq!(strip_wrapper(&[BOS, 7, 8, EOS]), &[7, 8]);
        assert_eq!(strip_wrapper(&[7, 8]), &[7, 8]);
        assert!(strip_wrapper(&[BOS, EOS]).is_empty());
    }
}
