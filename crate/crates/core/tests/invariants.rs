use proptest::prelude::*;

use vgse::autodiff::{softmax_rows, Graph, Matrix};
use vgse::model::grounding::ranking_loss;

fn loss_of(pred: &Matrix, tgt: &Matrix) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(tgt.clone());
    let l = ranking_loss(&mut g, p, t).unwrap();
    g.value(l).to_scalar()
}

fn nonzero_rows(b: usize, d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), b).prop_map(|mut rows| {
        for r in &mut rows {
            r[0] += if r[0] >= 0.0 { 0.5 } else { -0.5 };
        }
        Matrix::from_rows(&rows)
    })
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..7, 1usize..6).prop_flat_map(|(b, d)| (nonzero_rows(b, d), nonzero_rows(b, d)))
}

proptest! {
    #[test]
    fn ranking_loss_is_positive((pred, tgt) in pair()) {
        let l = loss_of(&pred, &tgt);
        prop_assert!(l > 0.0 && l.is_finite());
    }

    #[test]
    fn ranking_loss_ignores_row_scale((pred, tgt) in pair(), scales in prop::collection::vec(0.01f64..100.0, 6)) {
        let mut scaled = pred.clone();
        for i in 0..scaled.rows() {
            let s = scales[i % scales.len()];
            scaled.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let (a, b) = (loss_of(&pred, &tgt), loss_of(&scaled, &tgt));
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn ranking_loss_ignores_batch_order((pred, tgt) in pair(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..pred.rows()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let permute = |m: &Matrix| Matrix::from_rows(&order.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>());
        let (a, b) = (loss_of(&pred, &tgt), loss_of(&permute(&pred), &permute(&tgt)));
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..9), 1..5)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let s = softmax_rows(&Matrix::from_rows(&rows));
        for i in 0..s.rows() {
            let total: f64 = s.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn cosine_stays_in_range(u in prop::collection::vec(-5.0f64..5.0, 4), v in prop::collection::vec(-5.0f64..5.0, 4)) {
        let c = vgse::autodiff::cosine_guarded(&u, &v);
        prop_assert!(c.abs() <= 1.0 + 1e-12);
    }
}

#[test]
fn ranking_loss_needs_negatives() {
    let one = Matrix::from_rows(&[vec![1.0, 0.0]]);
    let mut g = Graph::new();
    let p = g.constant(one.clone());
    let t = g.constant(one);
    assert!(ranking_loss(&mut g, p, t).is_err());
}

#[test]
fn perfect_alignment_beats_swapped() {
    let eye = Matrix::identity(3);
    let swapped = Matrix::from_rows(&[
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ]);
    assert!(loss_of(&eye, &eye) < loss_of(&swapped, &eye));
}
