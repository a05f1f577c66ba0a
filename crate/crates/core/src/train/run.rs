use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::objective::{loss_and_grads, members, BatchLoss, DropoutSpec, LossOptions};
use super::optim::{adam_step, clip_gradients, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{init_params, ModelParameters};
use crate::text::{load_embeddings, make_batches, Corpus, Sample, Vocabulary, PAD};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: String,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub loss_c: Option<f64>,
    pub loss_vg: Option<f64>,
    pub wall_ms: u64,
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub samples: Vec<Sample>,
    pub params: ModelParameters,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub exec: Exec,
}

fn check_corpus(config: &TrainConfig, corpus: &Corpus) -> Result<()> {
    if corpus.d_img != config.d_img {
        return Err(Error::Config(format!(
            "corpus d_img {} does not match config d_img {}",
            corpus.d_img, config.d_img
        )));
    }
    if corpus.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &Corpus, exec: Exec) -> Result<Self> {
        config.validate()?;
        check_corpus(&config, corpus)?;
        let vocab = Vocabulary::build(corpus.texts(), config.min_count)?;
        let embeddings = match &config.embeddings {
            Some(p) => {
                Some(load_embeddings(Path::new(p), &vocab, config.d_e, config.seed)?.weights)
            }
            None => None,
        };
        let params = init_params(&config.dims(vocab.len()), config.seed, embeddings.as_ref())?;
        let adam = AdamState::new(params.refs());
        let samples = corpus.encode(&vocab);
        Ok(Trainer {
            config,
            vocab,
            samples,
            params,
            adam,
            epoch: 0,
            exec,
        })
    }

    pub fn resume(ckpt: Checkpoint, corpus: &Corpus, exec: Exec) -> Result<Self> {
        check_corpus(&ckpt.config, corpus)?;
        let samples = corpus.encode(&ckpt.vocab);
        Ok(Trainer {
            config: ckpt.config,
            vocab: ckpt.vocab,
            samples,
            params: ckpt.params,
            adam: ckpt.adam,
            epoch: ckpt.epoch,
            exec,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
        }
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.config.lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        }
    }

    /// Runs one epoch: forward, backward, clip and Adam per batch.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let cfg = &self.config;
        let batches = make_batches(&self.samples, cfg.batch_size, cfg.seed, self.epoch as u64)?;
        let adam_cfg = self.adam_config();
        let mut sums = (0.0, 0.0, 0.0);
        for batch in &batches {
            let opts = LossOptions {
                objective: cfg.objective,
                dropout: Some(DropoutSpec {
                    rate: cfg.dropout,
                    seed: cfg.seed,
                    step: self.adam.step,
                }),
                exec: self.exec,
            };
            let m = members(&self.samples, batch);
            let (loss, mut grads) = loss_and_grads(&self.params, &m, &opts)?;
            if !loss.total.is_finite() {
                return Err(Error::Config(format!(
                    "non-finite loss at step {}",
                    self.adam.step
                )));
            }
            grads.embed.row_mut(PAD).fill(0.0);
            clip_gradients(grads.refs_mut(), cfg.clip);
            adam_step(
                self.params.refs_mut(),
                grads.refs(),
                &mut self.adam,
                &adam_cfg,
            );
            self.params.embed.row_mut(PAD).fill(0.0);
            accumulate(&mut sums, &loss);
        }
        let n = batches.len() as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            objective: cfg.objective.name().to_string(),
            loss: sums.0 / n,
            loss_c: cfg.objective.uses_caption().then(|| sums.1 / n),
            loss_vg: cfg.objective.uses_grounding().then(|| sums.2 / n),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        self.epoch += 1;
        log::info!(
            "epoch {} loss {:.6} ({} ms)",
            record.epoch,
            record.loss,
            record.wall_ms
        );
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete. With `out_dir`, the
    /// metrics log is appended to `metrics.jsonl` and `checkpoint.bin` is
    /// rewritten after every epoch.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<EpochRecord>> {
        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("metrics.jsonl"))?,
                )
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            let rec = self.train_epoch()?;
            if let (Some(dir), Some(f)) = (out_dir, log_file.as_mut()) {
                serde_json::to_writer(&mut *f, &rec)?;
                writeln!(f)?;
                self.checkpoint().save(&dir.join("checkpoint.bin"))?;
            }
            records.push(rec);
        }
        Ok(records)
    }
}

fn accumulate(sums: &mut (f64, f64, f64), l: &BatchLoss) {
    sums.0 += l.total;
    sums.1 += l.caption.unwrap_or(0.0);
    sums.2 += l.grounding.unwrap_or(0.0);
}

/// Trains from scratch and returns the final checkpoint with the epoch log.
pub fn train(
    config: TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut t = Trainer::new(config, corpus, exec)?;
    let log = t.run(out_dir)?;
    Ok((t.checkpoint(), log))
}
