use vgse::autodiff::{cosine_guarded, Matrix};
use vgse::eval::{embed_lines, retrieval_eval, salience, write_vectors};
use vgse::exec::Exec;
use vgse::model::{predict_features, represent};
use vgse::text::{gen_synthetic, make_batches, Corpus, Sample, SyntheticCorpus, PAD};
use vgse::train::{
    loss_and_grads, members, train, Checkpoint, DropoutSpec, LossOptions, Objective, TrainConfig,
    Trainer,
};

fn synth(n: usize) -> SyntheticCorpus {
    gen_synthetic(n, 16, 16, 5).unwrap()
}

fn small_config(objective: Objective) -> TrainConfig {
    TrainConfig {
        objective,
        d_e: 8,
        d_cell: 8,
        d_a: 4,
        n_a: 2,
        d_img: 16,
        batch_size: 8,
        epochs: 3,
        seed: 11,
        dropout: 0.2,
        ..TrainConfig::default()
    }
}

fn trainer(n: usize, objective: Objective) -> Trainer {
    Trainer::new(small_config(objective), &synth(n).corpus, Exec::Sequential).unwrap()
}

fn grads(t: &Trainer, objective: Objective, exec: Exec) -> (f64, Vec<Matrix>) {
    let batch = &make_batches(&t.samples, 8, 1, 0).unwrap()[0];
    let ms = members(&t.samples, batch);
    let opts = LossOptions {
        objective,
        dropout: Some(DropoutSpec {
            rate: 0.2,
            seed: 4,
            step: 0,
        }),
        exec,
    };
    let (l, g) = loss_and_grads(&t.params, &ms, &opts).unwrap();
    (l.total, g.refs().into_iter().cloned().collect())
}

#[test]
fn combined_gradient_is_sum_of_parts() {
    let t = trainer(32, Objective::Cap2all);
    let (la, all) = grads(&t, Objective::Cap2all, Exec::Sequential);
    let (lc, cap) = grads(&t, Objective::Cap2cap, Exec::Sequential);
    let (li, img) = grads(&t, Objective::Cap2img, Exec::Sequential);
    assert!((la - lc - li).abs() < 1e-9);
    for ((a, c), i) in all.iter().zip(&cap).zip(&img) {
        for ((x, y), z) in a.data().iter().zip(c.data()).zip(i.data()) {
            assert!((x - y - z).abs() < 1e-9);
        }
    }
}

#[test]
fn execution_strategy_does_not_change_gradients() {
    let t = trainer(32, Objective::Cap2all);
    let (ls, seq) = grads(&t, Objective::Cap2all, Exec::Sequential);
    let (lp, par) = grads(&t, Objective::Cap2all, Exec::Parallel);
    assert_eq!(ls.to_bits(), lp.to_bits());
    assert_eq!(seq, par);
}

#[test]
fn padding_embedding_stays_zero() {
    let mut t = trainer(32, Objective::Cap2all);
    for _ in 0..2 {
        t.train_epoch().unwrap();
    }
    assert!(t.params.embed.row(PAD).iter().all(|&x| x == 0.0));
    assert!(t.params.all_finite());
}

#[test]
fn epoch_record_adds_up() {
    let mut t = trainer(32, Objective::Cap2all);
    let rec = t.train_epoch().unwrap();
    assert_eq!(rec.epoch, 0);
    assert_eq!(t.epoch, 1);
    assert!((rec.loss - rec.loss_c.unwrap() - rec.loss_vg.unwrap()).abs() < 1e-9);
    let json = serde_json::to_value(&rec).unwrap();
    for key in ["epoch", "objective", "loss", "loss_c", "loss_vg", "wall_ms"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn synthetic_images_are_recoverable_from_token_codes() {
    let s = gen_synthetic(128, 64, 64, 9).unwrap();
    let records = &s.corpus.records;
    let guesses: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let mut v = vec![0.0; 64];
            for w in r.src.split_whitespace() {
                for (a, c) in v.iter_mut().zip(&s.codes[w]) {
                    *a += c;
                }
            }
            v
        })
        .collect();
    let hits = guesses
        .iter()
        .enumerate()
        .filter(|(k, g)| {
            let own = cosine_guarded(g, &records[*k].img);
            records
                .iter()
                .enumerate()
                .all(|(j, r)| j == *k || cosine_guarded(g, &r.img) < own)
        })
        .count();
    assert!(hits as f64 / records.len() as f64 >= 0.95, "{hits}");
}

#[test]
fn corpus_file_round_trip() {
    let s = synth(20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    s.corpus.write(&path).unwrap();
    let first = std::fs::read_to_string(&path).unwrap();
    assert_eq!(first.lines().next().unwrap(), r#"{"d_img":16}"#);
    let back = Corpus::read(&path).unwrap();
    assert_eq!(back, s.corpus);
}

#[test]
fn corpus_rejects_wrong_image_width() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    std::fs::write(
        &path,
        "{\"d_img\":3}\n{\"id\":\"a\",\"src\":\"x y\",\"tgt\":\"x y\",\"img\":[1.0,0.0]}\n",
    )
    .unwrap();
    assert!(Corpus::read(&path).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(32).corpus;
    let (ckpt, log) = train(
        small_config(Objective::Cap2all),
        &corpus,
        Some(dir.path()),
        Exec::Parallel,
    )
    .unwrap();
    assert_eq!(log.len(), 3);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let path = dir.path().join("checkpoint.bin");
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes, ckpt.to_bytes().unwrap());
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = trainer(32, Objective::Cap2img);
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut future = bytes;
    future[8] = 99;
    assert!(Checkpoint::from_bytes(&future).is_err());
}

#[test]
fn resume_rejects_mismatched_corpus() {
    let t = trainer(32, Objective::Cap2img);
    let other = gen_synthetic(32, 16, 12, 5).unwrap().corpus;
    assert!(Trainer::resume(t.checkpoint(), &other, Exec::Sequential).is_err());
}

fn brute_force_ranks(pred: &Matrix, samples: &[Sample]) -> (Vec<usize>, Vec<usize>) {
    let n = samples.len();
    let s = |q: usize, i: usize| cosine_guarded(pred.row(q), &samples[i].img);
    let rank = |score: &dyn Fn(usize) -> f64, target: usize| {
        1 + (0..n)
            .filter(|&j| score(j) > score(target) || (score(j) == score(target) && j < target))
            .count()
    };
    let s2i = (0..n).map(|q| rank(&|i| s(q, i), q)).collect();
    let i2s = (0..n).map(|i| rank(&|q| s(q, i), i)).collect();
    (s2i, i2s)
}

#[test]
fn retrieval_matches_brute_force() {
    let t = trainer(16, Objective::Cap2img);
    let samples = &t.samples;
    let reps: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| represent(&t.params, s.src_content()).unwrap().0.h)
        .collect();
    let pred = predict_features(&t.params, &reps).unwrap();
    let (s2i, i2s) = brute_force_ranks(&pred, samples);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let (a, b) = retrieval_eval(&t.params, samples, exec).unwrap();
        assert_eq!(a.ranks, s2i);
        assert_eq!(b.ranks, i2s);
        assert_eq!(a.n, 16);
    }
}

#[test]
fn untrained_retrieval_on_random_images_is_at_chance() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let t = trainer(256, Objective::Cap2img);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let mut samples = t.samples.clone();
    for s in &mut samples {
        s.img = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
    }
    let (a, _) = retrieval_eval(&t.params, &samples, Exec::Parallel).unwrap();
    let n = samples.len() as f64;
    let p = 10.0 / n;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!(
        (a.recall_at_10 - p).abs() <= 3.0 * sigma,
        "{}",
        a.recall_at_10
    );
}

#[test]
fn retrieval_needs_two_samples() {
    let t = trainer(16, Objective::Cap2img);
    assert!(retrieval_eval(&t.params, &t.samples[..1], Exec::Sequential).is_err());
}

#[test]
fn embeddings_are_deterministic_and_sized() {
    let t = trainer(32, Objective::Cap2all);
    let lines: Vec<String> = vec!["v01 w02 w03".into(), "".into(), "unseen".into()];
    let a = embed_lines(&t.params, &t.vocab, &lines, Exec::Parallel).unwrap();
    let b = embed_lines(&t.params, &t.vocab, &lines, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|v| v.len() == 16));
    assert_eq!(a[1], a[2]);
    assert!(embed_lines(&t.params, &t.vocab, &[], Exec::Parallel)
        .unwrap()
        .is_empty());

    let mut out = Vec::new();
    write_vectors(&mut out, &a).unwrap();
    let text = String::from_utf8(out).unwrap();
    let parsed: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(' ').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(parsed, a);
}

#[test]
fn salience_shapes_and_errors() {
    let t = trainer(32, Objective::Cap2img);
    let rec = salience(&t.params, &t.vocab, "w01 v02 w03").unwrap();
    assert_eq!(rec.tokens, vec!["w01", "v02", "w03"]);
    assert_eq!(rec.attention.len(), 2);
    assert!(rec.attention.iter().all(|r| r.len() == 3));
    for (i, &p) in rec.pooled.iter().enumerate() {
        let m = rec
            .attention
            .iter()
            .map(|r| r[i])
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(p, m);
    }
    let json = serde_json::to_value(&rec).unwrap();
    assert_eq!(json.as_object().unwrap().len(), 3);
    assert!(salience(&t.params, &t.vocab, "nothing here").is_err());
}
