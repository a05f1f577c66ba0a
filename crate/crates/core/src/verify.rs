//! Finite-difference verification of every differentiable operation and of
//! the full training objectives at tiny dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{
    extrapolated_gradient, grad_check, max_relative_error, Graph, Matrix, NodeId,
};
use crate::error::Result;
use crate::exec::Exec;
use crate::model::encoder::{self, LstmState};
use crate::model::{self, decoder, grounding, init_params, Dims, Model, ModelParameters};
use crate::text::{gen_synthetic, Sample, Vocabulary};
use crate::train::{composite_loss, loss_and_grads, DropoutSpec, LossOptions, Member, Objective};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
pub const POINTS: usize = 10;
/// Step for the full-objective checks, which use extrapolated differences.
pub const OBJECTIVE_EPS: f64 = 2e-3;
pub const REFINE_LEVELS: usize = 5;

/// Dimensions of the gradient suite.
pub const TINY: Dims = Dims {
    vocab: 0,
    d_e: 4,
    d_cell: 4,
    d_a: 3,
    n_a: 2,
    d_img: 5,
    d_p: 5,
};
pub const TINY_BATCH: usize = 3;
pub const TINY_MAX_LEN: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Parameters, vocabulary and samples for the tiny-dimension checks. Sources
/// have between 1 and 5 content tokens.
pub fn tiny_setup(seed: u64) -> Result<(ModelParameters, Vocabulary, Vec<Sample>)> {
    let synth = gen_synthetic(24, 8, TINY.d_img, seed)?;
    let vocab = Vocabulary::build(synth.corpus.texts(), 1)?;
    let samples: Vec<Sample> = synth
        .corpus
        .encode(&vocab)
        .into_iter()
        .filter(|s| s.src_content().len() <= TINY_MAX_LEN)
        .take(TINY_BATCH)
        .collect();
    let dims = Dims {
        vocab: vocab.len(),
        ..TINY
    };
    let mut params = init_params(&dims, seed, None)?;
    // Spread biases away from zero so no gradient entry is structurally tiny.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for (name, m) in crate::model::params::TENSOR_NAMES
        .iter()
        .zip(params.refs_mut())
    {
        if model::params::is_bias(name) {
            for x in m.data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
    }
    Ok((params, vocab, samples))
}

pub fn tiny_members(samples: &[Sample]) -> Vec<Member<'_>> {
    samples
        .iter()
        .map(|s| Member {
            id: &s.id,
            src: s.src_content().to_vec(),
            tgt: s.tgt.clone(),
            img: &s.img,
        })
        .collect()
}

/// Max relative error between the analytic gradient of an objective and
/// extrapolated central differences with step `eps`, over every parameter
/// entry.
pub fn check_objective(
    params: &ModelParameters,
    members: &[Member<'_>],
    opts: &LossOptions,
    eps: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_grads(params, members, opts)?;
    let mut worst = 0.0f64;
    for (t, analytic) in grads.refs().into_iter().enumerate() {
        let numeric = extrapolated_gradient(
            |theta| {
                let mut p = params.clone();
                *p.refs_mut()[t] = theta.clone();
                composite_loss(&p, members, opts).map(|l| l.total)
            },
            params.refs()[t],
            eps,
            REFINE_LEVELS,
        )?;
        worst = worst.max(max_relative_error(analytic, &numeric));
    }
    Ok(worst)
}

fn run_points(
    name: &str,
    points: usize,
    mut one: impl FnMut(u64) -> Result<f64>,
) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for p in 0..points {
        worst = worst.max(one(p as u64)?);
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        points,
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    })
}

/// `Σ R ⊙ y` for a fixed random weighting `R`, turning any op output into a
/// scalar with a generic upstream gradient.
fn weighted_sum(g: &mut Graph<'_>, y: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let (r, c) = g.shape(y);
    let w = randn(rng, r, c, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph<'_>, NodeId, &[Matrix]) -> Result<NodeId>;

fn op_check(
    name: &str,
    shape: (usize, usize),
    others: &[(usize, usize)],
    op: OpFn,
    seed: u64,
) -> Result<CheckOutcome> {
    run_points(name, POINTS, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(p));
        let theta = randn(&mut rng, shape.0, shape.1, 1.0);
        let fixed: Vec<Matrix> = others
            .iter()
            .map(|&(r, c)| randn(&mut rng, r, c, 1.0))
            .collect();
        let wseed: u64 = rng.random();
        grad_check(
            |g, x| {
                let y = op(g, x, &fixed)?;
                if g.shape(y) == (1, 1) {
                    return Ok(y);
                }
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(wseed))
            },
            &theta,
            EPS,
        )
    })
}

fn elementary_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    out.push(op_check(
        "matmul (lhs)",
        (3, 4),
        &[(4, 2)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            g.matmul(x, b)
        },
        seed,
    )?);
    out.push(op_check(
        "matmul (rhs)",
        (4, 2),
        &[(3, 4)],
        |g, x, f| {
            let a = g.constant(f[0].clone());
            g.matmul(a, x)
        },
        seed,
    )?);
    out.push(op_check(
        "matmul_t (lhs)",
        (3, 4),
        &[(2, 4)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            g.matmul_t(x, b)
        },
        seed,
    )?);
    out.push(op_check(
        "matmul_t (rhs)",
        (2, 4),
        &[(3, 4)],
        |g, x, f| {
            let a = g.constant(f[0].clone());
            g.matmul_t(a, x)
        },
        seed,
    )?);
    out.push(op_check(
        "softmax_rows",
        (3, 4),
        &[],
        |g, x, _| Ok(g.softmax_rows(x)),
        seed,
    )?);
    out.push(op_check(
        "tanh",
        (2, 3),
        &[],
        |g, x, _| Ok(g.tanh(x)),
        seed,
    )?);
    out.push(op_check(
        "sigmoid",
        (2, 3),
        &[],
        |g, x, _| Ok(g.sigmoid(x)),
        seed,
    )?);
    out.push(op_check(
        "relu",
        (2, 3),
        &[],
        |g, x, _| Ok(g.relu(x)),
        seed,
    )?);
    out.push(op_check(
        "add",
        (2, 3),
        &[(2, 3)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            g.add(x, b)
        },
        seed,
    )?);
    out.push(op_check(
        "add_row",
        (3, 4),
        &[(1, 4)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            g.add_row(x, b)
        },
        seed,
    )?);
    out.push(op_check(
        "add_row (bias)",
        (1, 4),
        &[(3, 4)],
        |g, x, f| {
            let a = g.constant(f[0].clone());
            g.add_row(a, x)
        },
        seed,
    )?);
    out.push(op_check(
        "mul",
        (2, 3),
        &[(2, 3)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            g.mul(x, b)
        },
        seed,
    )?);
    out.push(op_check(
        "max2",
        (2, 3),
        &[(2, 3)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            g.max2(x, b)
        },
        seed,
    )?);
    out.push(op_check(
        "scale",
        (2, 3),
        &[],
        |g, x, _| Ok(g.scale(x, -1.7)),
        seed,
    )?);
    out.push(op_check(
        "mul_const",
        (2, 3),
        &[(2, 3)],
        |g, x, f| g.mul_const(x, f[0].clone()),
        seed,
    )?);
    out.push(op_check(
        "reduce_max_rows",
        (4, 3),
        &[],
        |g, x, _| g.reduce_max_rows(x),
        seed,
    )?);
    out.push(op_check(
        "concat_rows",
        (1, 3),
        &[(1, 2)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            let ab = g.concat_rows(x, b)?;
            let ba = g.concat_rows(b, x)?;
            g.concat_rows(ab, ba)
        },
        seed,
    )?);
    out.push(op_check(
        "stack_rows",
        (1, 3),
        &[(1, 3)],
        |g, x, f| {
            let b = g.constant(f[0].clone());
            g.stack_rows(&[x, b, x])
        },
        seed,
    )?);
    out.push(op_check(
        "slice_cols",
        (2, 5),
        &[],
        |g, x, _| g.slice_cols(x, 1, 3),
        seed,
    )?);
    out.push(op_check(
        "slice_row",
        (3, 4),
        &[],
        |g, x, _| g.slice_row(x, 2),
        seed,
    )?);
    out.push(op_check(
        "transpose",
        (2, 3),
        &[],
        |g, x, _| Ok(g.transpose(x)),
        seed,
    )?);
    out.push(op_check(
        "gather_rows",
        (5, 3),
        &[],
        |g, x, _| g.gather_rows(x, &[4, 1, 4, 0]),
        seed,
    )?);
    out.push(op_check(
        "cosine_sim (u)",
        (1, 4),
        &[(1, 4)],
        |g, x, f| {
            let v = g.constant(f[0].clone());
            g.cosine_sim(x, v)
        },
        seed,
    )?);
    out.push(op_check(
        "cosine_sim (v)",
        (1, 4),
        &[(1, 4)],
        |g, x, f| {
            let u = g.constant(f[0].clone());
            g.cosine_sim(u, x)
        },
        seed,
    )?);
    out.push(op_check(
        "cosine_matrix",
        (3, 4),
        &[(3, 4)],
        |g, x, f| {
            let y = g.constant(f[0].clone());
            g.cosine_matrix(x, y)
        },
        seed,
    )?);
    out.push(op_check(
        "rank_loss",
        (4, 4),
        &[],
        |g, x, _| g.rank_loss(x),
        seed,
    )?);
    out.push(op_check(
        "nll_rows",
        (3, 5),
        &[],
        |g, x, _| g.nll_rows(x, &[Some(2), None, Some(0)]),
        seed,
    )?);
    Ok(out)
}

fn component_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let (params, _, samples) = tiny_setup(seed)?;
    let d = TINY.d_cell;
    let mut out = Vec::new();

    out.push(run_points("lstm_step x3 (inputs)", POINTS, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 31 * p);
        let xs = randn(&mut rng, 3, TINY.d_e, 1.0);
        let w = randn(&mut rng, 1, d, 1.0);
        grad_check(
            |g, x| {
                let nodes = frozen(g, &params);
                let mut st = LstmState::zeros(g, d);
                for t in 0..3 {
                    let xt = g.slice_row(x, t)?;
                    st = encoder::lstm_step(g, &nodes.encoder.fwd, xt, st)?;
                }
                let wc = g.constant(w.clone());
                let hc = g.add(st.h, st.c)?;
                let y = g.mul(hc, wc)?;
                Ok(g.sum(y))
            },
            &xs,
            EPS,
        )
    })?);

    out.push(run_points("attend (H)", POINTS, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 37 * p);
        let t = 1 + (p as usize % TINY_MAX_LEN);
        let h_rows = randn(&mut rng, t, d, 1.0);
        let wseed: u64 = rng.random();
        grad_check(
            |g, x| {
                let nodes = frozen(g, &params);
                let h = g.transpose(x);
                let states = encoder::EncoderStates {
                    h,
                    h_rows: x,
                    last_fwd: x,
                    first_bwd: x,
                };
                let a = encoder::attend(g, nodes.encoder.w_a1, nodes.encoder.w_a2, &states)?;
                let ca = g.weighted(a.c, wseed)?;
                let aa = g.weighted(a.a, wseed + 1)?;
                g.add(ca, aa)
            },
            &h_rows,
            EPS,
        )
    })?);

    out.push(run_points("encode_sentence (embeddings)", POINTS, |p| {
        let src = samples[p as usize % samples.len()].src_content().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 41 * p);
        let table = randn(&mut rng, params.embed.rows(), params.embed.cols(), 0.5);
        let wseed: u64 = rng.random();
        grad_check(
            |g, x| {
                let nodes = frozen(g, &params);
                let (rep, _) = encoder::encode_sentence(g, &nodes.encoder, x, &src)?;
                g.weighted(rep.h, wseed)
            },
            &table,
            EPS,
        )
    })?);

    out.push(run_points("init_state (h)", POINTS, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 43 * p);
        let h = randn(&mut rng, 1, 2 * d, 1.0);
        let wseed: u64 = rng.random();
        grad_check(
            |g, x| {
                let nodes = frozen(g, &params);
                let st = decoder::init_state(g, &nodes.decoder, x)?;
                let a = g.weighted(st.h, wseed)?;
                let b = g.weighted(st.c, wseed + 1)?;
                g.add(a, b)
            },
            &h,
            EPS,
        )
    })?);

    out.push(run_points("caption_nll (h)", POINTS, |p| {
        let tgt = samples[p as usize % samples.len()].tgt.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 47 * p);
        let h = randn(&mut rng, 1, 2 * d, 1.0);
        grad_check(
            |g, x| {
                let nodes = frozen(g, &params);
                decoder::caption_nll(g, &nodes.decoder, nodes.embed, x, &tgt).map(|r| r.0)
            },
            &h,
            EPS,
        )
    })?);

    out.push(run_points("project eval (reps)", POINTS, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 53 * p);
        let reps = randn(&mut rng, TINY_BATCH, 2 * d, 1.0);
        let wseed: u64 = rng.random();
        grad_check(
            |g, x| {
                let nodes = frozen(g, &params);
                let y = grounding::project::<ChaCha8Rng>(g, &nodes.projection, x, 0.0, None)?;
                g.weighted(y, wseed)
            },
            &reps,
            EPS,
        )
    })?);

    out.push(run_points("grounding_loss (reps)", POINTS, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 59 * p);
        let reps = randn(&mut rng, TINY_BATCH, 2 * d, 1.0);
        let targets = randn(&mut rng, TINY_BATCH, TINY.d_img, 1.0);
        let dseed: u64 = rng.random();
        grad_check(
            |g, x| {
                let nodes = frozen(g, &params);
                let t = g.constant(targets.clone());
                let mut drng = ChaCha8Rng::seed_from_u64(dseed);
                grounding::grounding_loss(g, &nodes.projection, x, t, 0.3, Some(&mut drng))
            },
            &reps,
            EPS,
        )
    })?);
    Ok(out)
}

fn objective_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let (params, _, samples) = tiny_setup(seed)?;
    let members = tiny_members(&samples);
    let mut out = Vec::new();
    for objective in [Objective::Cap2cap, Objective::Cap2img, Objective::Cap2all] {
        let opts = LossOptions {
            objective,
            dropout: Some(DropoutSpec {
                rate: 0.3,
                seed,
                step: 0,
            }),
            exec: Exec::Sequential,
        };
        let err = check_objective(&params, &members, &opts, OBJECTIVE_EPS)?;
        out.push(CheckOutcome {
            name: format!("objective {}", objective.name()),
            points: 1,
            max_rel_error: err,
            passed: err < TOLERANCE,
        });
    }
    Ok(out)
}

/// Runs every check. All outcomes are returned, passing or not.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut all = elementary_checks(seed)?;
    all.extend(component_checks(seed)?);
    all.extend(objective_checks(seed)?);
    Ok(all)
}

/// Parameters as constants on a tape of any lifetime.
fn frozen(g: &mut Graph<'_>, params: &ModelParameters) -> Model<NodeId> {
    params.map(|m| g.constant(m.clone()))
}

trait Weighted {
    fn weighted(&mut self, y: NodeId, seed: u64) -> Result<NodeId>;
}

impl Weighted for Graph<'_> {
    fn weighted(&mut self, y: NodeId, seed: u64) -> Result<NodeId> {
        weighted_sum(self, y, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}
