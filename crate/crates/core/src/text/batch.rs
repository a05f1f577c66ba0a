use rand::seq::SliceRandom;

use super::corpus::Sample;
use super::vocab::PAD;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// A mini-batch of samples. Every other member of the batch is an in-batch
/// negative for a given sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the members in the sample slice the batch was drawn from.
    pub indices: Vec<usize>,
    pub src: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_indices(samples: &[Sample], indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::invalid("Batch", "needs at least two samples"));
        }
        let (src, src_mask) = pad(indices.iter().map(|&i| samples[i].src.as_slice()));
        let (tgt, tgt_mask) = pad(indices.iter().map(|&i| samples[i].tgt.as_slice()));
        Ok(Batch {
            indices,
            src,
            src_mask,
            tgt,
            tgt_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Batch positions serving as negatives for member `k`.
    pub fn negatives(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| j != k).collect()
    }

    /// Unpadded source of member `k`.
    pub fn src_of(&self, k: usize) -> Vec<usize> {
        unpad(&self.src[k], &self.src_mask[k])
    }

    /// Unpadded target of member `k`.
    pub fn tgt_of(&self, k: usize) -> Vec<usize> {
        unpad(&self.tgt[k], &self.tgt_mask[k])
    }
}

fn unpad(ids: &[usize], mask: &[bool]) -> Vec<usize> {
    ids.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&i, _)| i)
        .collect()
}

fn pad<'s>(seqs: impl Iterator<Item = &'s [usize]> + Clone) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = seqs.clone().map(<[usize]>::len).max().unwrap_or(0);
    seqs.map(|s| {
        let mut ids = s.to_vec();
        let mut mask = vec![true; s.len()];
        ids.resize(width, PAD);
        mask.resize(width, false);
        (ids, mask)
    })
    .unzip()
}

/// Shuffles sample positions for `epoch` and cuts them into batches of `b`.
/// A trailing short batch is kept when it holds at least two samples.
pub fn make_batches(samples: &[Sample], b: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if b < 2 {
        return Err(Error::invalid(
            "make_batches",
            format!("batch size {b} < 2"),
        ));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::derived(seed, Stream::Shuffle, epoch));
    order
        .chunks(b)
        .filter(|c| c.len() >= 2)
        .map(|c| Batch::from_indices(samples, c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{BOS, EOS};

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut src = vec![BOS];
                src.extend((0..=i % 4).map(|k| 4 + k));
                src.push(EOS);
                Sample {
                    id: format!("s{i}"),
                    tgt: src.clone(),
                    src,
                    img: vec![1.0, i as f64],
                    salient: None,
                }
            })
            .collect()
    }

    #[test]
    fn trailing_singleton_dropped() {
        let bs = make_batches(&samples(5), 2, 0, 0).unwrap();
        let sizes: Vec<_> = bs.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![2, 2]);
        let bs = make_batches(&samples(5), 3, 0, 0).unwrap();
        let sizes: Vec<_> = bs.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![3, 2]);
    }

    #[test]
    fn masks_match_lengths() {
        let s = samples(9);
        for b in make_batches(&s, 4, 1, 0).unwrap() {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.src_mask[k].iter().filter(|&&m| m).count(), s[i].src.len());
                assert_eq!(b.tgt_mask[k].iter().filter(|&&m| m).count(), s[i].tgt.len());
                assert_eq!(b.src_of(k), s[i].src);
            }
            let w = b.src[0].len();
            assert!(b.src.iter().all(|r| r.len() == w));
        }
    }

    #[test]
    fn shuffles_are_reproducible_and_vary() {
        let s = samples(32);
        let e0 = make_batches(&s, 8, 42, 0).unwrap();
        assert_eq!(e0, make_batches(&s, 8, 42, 0).unwrap());
        assert_ne!(e0, make_batches(&s, 8, 42, 1).unwrap());
    }

    #[test]
    fn negatives_exclude_self() {
        let b = &make_batches(&samples(6), 6, 0, 0).unwrap()[0];
        for k in 0..6 {
            let n = b.negatives(k);
            assert_eq!(n.len(), 5);
            assert!(!n.contains(&k));
        }
    }

    #[test]
    fn batch_size_below_two_rejected() {
        assert!(make_batches(&samples(4), 1, 0, 0).is_err());
    }
}
