use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::text::PAD;

/// LSTM cell weights. Gate blocks are stacked in the order input, forget,
/// candidate, output; `w_hh` therefore holds four square `d×d` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<T> {
    /// `4d × d_in`
    pub w_ih: T,
    /// `4d × d`
    pub w_hh: T,
    /// `1 × 4d`
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub fwd: Lstm<T>,
    pub bwd: Lstm<T>,
    /// `d_a × d_cell`
    pub w_a1: T,
    /// `n_a × d_a`
    pub w_a2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    /// `d_cell × 2·d_cell`
    pub p_h: T,
    /// `d_cell × 2·d_cell`
    pub p_c: T,
    pub cell: Lstm<T>,
    /// `V × d_cell`
    pub w_o: T,
    /// `1 × V`
    pub b_o: T,
}

/// Affine layer `x ↦ x·wᵀ + b` with `w: out × in`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub w: T,
    pub b: T,
}

/// Image-feature prediction head: four affine layers, ReLU and dropout after
/// the first three.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T> {
    pub layers: [Affine<T>; 4],
}

/// Every trainable tensor of the model, generic over what is stored per
/// tensor: values and gradients use `Matrix`, a bound tape uses `NodeId`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    /// Word embeddings `V × d_e`, shared by encoder and decoder.
    pub embed: T,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
    pub projection: ProjectionParams<T>,
}

pub type ModelParameters = Model<Matrix>;

pub const TENSOR_COUNT: usize = 24;

/// Stable tensor names, in [`Model::refs`] order.
pub const TENSOR_NAMES: [&str; TENSOR_COUNT] = [
    "embed",
    "encoder.fwd.w_ih",
    "encoder.fwd.w_hh",
    "encoder.fwd.b",
    "encoder.bwd.w_ih",
    "encoder.bwd.w_hh",
    "encoder.bwd.b",
    "encoder.w_a1",
    "encoder.w_a2",
    "decoder.p_h",
    "decoder.p_c",
    "decoder.cell.w_ih",
    "decoder.cell.w_hh",
    "decoder.cell.b",
    "decoder.w_o",
    "decoder.b_o",
    "projection.0.w",
    "projection.0.b",
    "projection.1.w",
    "projection.1.b",
    "projection.2.w",
    "projection.2.b",
    "projection.3.w",
    "projection.3.b",
];

/// Whether a tensor is a recurrent (hidden-to-hidden) weight.
pub fn is_recurrent(name: &str) -> bool {
    name.ends_with(".w_hh")
}

fn is_lstm_bias(name: &str) -> bool {
    matches!(name, "encoder.fwd.b" | "encoder.bwd.b" | "decoder.cell.b")
}

/// Whether a tensor is a bias.
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".b_o")
}

impl<T> Model<T> {
    pub fn refs(&self) -> [&T; TENSOR_COUNT] {
        let e = &self.encoder;
        let d = &self.decoder;
        let p = &self.projection.layers;
        [
            &self.embed,
            &e.fwd.w_ih,
            &e.fwd.w_hh,
            &e.fwd.b,
            &e.bwd.w_ih,
            &e.bwd.w_hh,
            &e.bwd.b,
            &e.w_a1,
            &e.w_a2,
            &d.p_h,
            &d.p_c,
            &d.cell.w_ih,
            &d.cell.w_hh,
            &d.cell.b,
            &d.w_o,
            &d.b_o,
            &p[0].w,
            &p[0].b,
            &p[1].w,
            &p[1].b,
            &p[2].w,
            &p[2].b,
            &p[3].w,
            &p[3].b,
        ]
    }

    pub fn refs_mut(&mut self) -> [&mut T; TENSOR_COUNT] {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        let [p0, p1, p2, p3] = &mut self.projection.layers;
        [
            &mut self.embed,
            &mut e.fwd.w_ih,
            &mut e.fwd.w_hh,
            &mut e.fwd.b,
            &mut e.bwd.w_ih,
            &mut e.bwd.w_hh,
            &mut e.bwd.b,
            &mut e.w_a1,
            &mut e.w_a2,
            &mut d.p_h,
            &mut d.p_c,
            &mut d.cell.w_ih,
            &mut d.cell.w_hh,
            &mut d.cell.b,
            &mut d.w_o,
            &mut d.b_o,
            &mut p0.w,
            &mut p0.b,
            &mut p1.w,
            &mut p1.b,
            &mut p2.w,
            &mut p2.b,
            &mut p3.w,
            &mut p3.b,
        ]
    }

    /// Inverse of [`Model::refs`] ordering.
    pub fn from_array(a: [T; TENSOR_COUNT]) -> Self {
        let [embed, f_ih, f_hh, f_b, b_ih, b_hh, b_b, w_a1, w_a2, p_h, p_c, d_ih, d_hh, d_b, w_o, b_o, w0, b0, w1, b1, w2, b2, w3, b3] =
            a;
        Model {
            embed,
            encoder: EncoderParams {
                fwd: Lstm {
                    w_ih: f_ih,
                    w_hh: f_hh,
                    b: f_b,
                },
                bwd: Lstm {
                    w_ih: b_ih,
                    w_hh: b_hh,
                    b: b_b,
                },
                w_a1,
                w_a2,
            },
            decoder: DecoderParams {
                p_h,
                p_c,
                cell: Lstm {
                    w_ih: d_ih,
                    w_hh: d_hh,
                    b: d_b,
                },
                w_o,
                b_o,
            },
            projection: ProjectionParams {
                layers: [
                    Affine { w: w0, b: b0 },
                    Affine { w: w1, b: b1 },
                    Affine { w: w2, b: b2 },
                    Affine { w: w3, b: b3 },
                ],
            },
        }
    }

    pub fn map<'s, U>(&'s self, f: impl FnMut(&'s T) -> U) -> Model<U> {
        Model::from_array(self.refs().map(f))
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &T)> {
        TENSOR_NAMES.into_iter().zip(self.refs())
    }
}

impl Model<Matrix> {
    pub fn zeros_like(&self) -> Self {
        self.map(|m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.refs_mut().into_iter().zip(other.refs()) {
            a.add_assign(b);
        }
    }

    pub fn param_count(&self) -> usize {
        self.refs().iter().map(|m| m.len()).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn d_cell(&self) -> usize {
        self.encoder.fwd.w_hh.cols()
    }

    pub fn d_img(&self) -> usize {
        self.projection.layers[3].w.rows()
    }

    pub fn all_finite(&self) -> bool {
        self.refs().iter().all(|m| m.all_finite())
    }
}

/// Layer sizes of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub d_e: usize,
    pub d_cell: usize,
    pub d_a: usize,
    pub n_a: usize,
    pub d_img: usize,
    pub d_p: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.vocab,
            self.d_e,
            self.d_cell,
            self.d_a,
            self.n_a,
            self.d_img,
            self.d_p,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        if self.vocab <= PAD + 4 {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Model<(usize, usize)> {
        let (v, e, d, g) = (self.vocab, self.d_e, self.d_cell, 4 * self.d_cell);
        let lstm = |d_in| Lstm {
            w_ih: (g, d_in),
            w_hh: (g, d),
            b: (1, g),
        };
        let (p, im) = (self.d_p, self.d_img);
        Model {
            embed: (v, e),
            encoder: EncoderParams {
                fwd: lstm(e),
                bwd: lstm(e),
                w_a1: (self.d_a, d),
                w_a2: (self.n_a, self.d_a),
            },
            decoder: DecoderParams {
                p_h: (d, 2 * d),
                p_c: (d, 2 * d),
                cell: lstm(e),
                w_o: (v, d),
                b_o: (1, v),
            },
            projection: ProjectionParams {
                layers: [
                    Affine {
                        w: (p, 2 * d),
                        b: (1, p),
                    },
                    Affine {
                        w: (p, p),
                        b: (1, p),
                    },
                    Affine {
                        w: (p, p),
                        b: (1, p),
                    },
                    Affine {
                        w: (im, p),
                        b: (1, im),
                    },
                ],
            },
        }
    }
}

/// Xavier/Glorot uniform bound for a `fan_out × fan_in` weight.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Orthogonal `n×n` matrix: Q of the QR decomposition of a Gaussian matrix,
/// with column signs fixed so that `R` has a non-negative diagonal.
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = q[(i, j)];
        }
    }
    out
}

/// Initial parameters: orthogonal recurrent blocks, Xavier-uniform for all
/// other weights, zero biases except LSTM forget gates (1.0). A provided
/// embedding matrix replaces the Xavier draw for `embed`.
pub fn init_params(dims: &Dims, seed: u64, embeddings: Option<&Matrix>) -> Result<ModelParameters> {
    dims.validate()?;
    let mut rng = rng::derived(seed, Stream::Init, 0);
    let shapes = dims.shapes();
    let d = dims.d_cell;
    let mut out = Vec::with_capacity(TENSOR_COUNT);
    for (name, &(rows, cols)) in shapes.named() {
        let m = if is_recurrent(name) {
            let mut w = Matrix::zeros(rows, cols);
            for block in 0..rows / d {
                let q = orthogonal(d, &mut rng);
                for i in 0..d {
                    w.row_mut(block * d + i).copy_from_slice(q.row(i));
                }
            }
            w
        } else if is_bias(name) {
            let mut b = Matrix::zeros(rows, cols);
            if is_lstm_bias(name) {
                b.data_mut()[d..2 * d].fill(1.0);
            }
            b
        } else {
            let bound = xavier_bound(rows, cols);
            let mut w = Matrix::zeros(rows, cols);
            for x in w.data_mut() {
                *x = rng.random_range(-bound..=bound);
            }
            w
        };
        out.push(m);
    }
    let arr: [Matrix; TENSOR_COUNT] = out.try_into().expect("tensor count");
    let mut params = Model::from_array(arr);
    if let Some(e) = embeddings {
        if e.shape() != params.embed.shape() {
            return Err(Error::ShapeMismatch {
                op: "init_params embeddings",
                lhs: params.embed.shape(),
                rhs: e.shape(),
            });
        }
        params.embed = e.clone();
    }
    params.embed.row_mut(PAD).fill(0.0);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims {
            vocab: 12,
            d_e: 4,
            d_cell: 5,
            d_a: 3,
            n_a: 2,
            d_img: 6,
            d_p: 6,
        }
    }

    #[test]
    fn names_and_refs_line_up() {
        let s = dims().shapes();
        let named: Vec<_> = s.named().map(|(n, _)| n).collect();
        assert_eq!(named, TENSOR_NAMES);
        let round = Model::from_array(s.refs().map(|x| *x));
        assert_eq!(round, s);
        assert_eq!(s.projection.layers[3].w, (6, 6));
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let p = init_params(&dims(), 3, None).unwrap();
        let d = 5;
        for (name, m) in p.named().filter(|(n, _)| is_recurrent(n)) {
            for block in 0..4 {
                let rows: Vec<Vec<f64>> = (0..d).map(|i| m.row(block * d + i).to_vec()).collect();
                let w = Matrix::from_rows(&rows);
                let wtw = w.transpose().matmul(&w).unwrap();
                let mut diff = wtw.clone();
                for i in 0..d {
                    diff[(i, i)] -= 1.0;
                }
                assert!(diff.frobenius() < 1e-5, "{name} block {block}");
            }
        }
    }

    #[test]
    fn xavier_bounds_and_biases() {
        let p = init_params(&dims(), 3, None).unwrap();
        for (name, m) in p.named() {
            if is_recurrent(name) {
                continue;
            }
            if is_bias(name) {
                let ones = m.data().iter().filter(|&&x| x == 1.0).count();
                let expected = if is_lstm_bias(name) { 5 } else { 0 };
                assert_eq!(ones, expected, "{name}");
                assert!(m.data().iter().all(|&x| x == 0.0 || x == 1.0));
            } else {
                assert!(m.max_abs() <= xavier_bound(m.rows(), m.cols()), "{name}");
            }
        }
        assert!(p.embed.row(PAD).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params(&dims(), 9, None).unwrap();
        let b = init_params(&dims(), 9, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&dims(), 10, None).unwrap());
    }
}
