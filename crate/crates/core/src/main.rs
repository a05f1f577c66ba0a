use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vgse::eval::{embed_lines, retrieval_eval, salience, write_vectors, RetrievalReport};
use vgse::text::{gen_synthetic, Corpus};
use vgse::train::{Checkpoint, Objective, TrainConfig, Trainer};
use vgse::{verify, Exec};

#[derive(Parser)]
#[command(name = "vgse", version, about = "Visually grounded sentence encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with a known salient token per sentence.
    GenSynth(GenSynthArgs),
    /// Train a model and write metrics.jsonl and checkpoint.bin.
    Train(TrainArgs),
    /// Sentence/image retrieval over a corpus.
    Eval(EvalArgs),
    /// Attention weights over the words of a sentence, as JSON.
    Salience(SalienceArgs),
    /// One sentence representation per input line.
    Embed(EmbedArgs),
    /// Finite-difference gradient checks at tiny dimensions.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    v_content: usize,
    #[arg(long, default_value_t = 64)]
    d_img: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Objective::Cap2all)]
    objective: Objective,
    #[arg(long, default_value_t = 32)]
    d_e: usize,
    #[arg(long, default_value_t = 32)]
    d_cell: usize,
    #[arg(long, default_value_t = 16)]
    d_a: usize,
    #[arg(long, default_value_t = 4)]
    n_a: usize,
    /// Projection hidden width; defaults to the corpus d_img.
    #[arg(long)]
    d_p: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// GloVe-format word vectors of width d_e.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from a checkpoint; `--epochs` is the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Process batch members one at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluate on the first N records only.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SalienceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sentence: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn report_json(r: &RetrievalReport) -> serde_json::Value {
    json!({
        "recall_at_1": r.recall_at_1,
        "recall_at_5": r.recall_at_5,
        "recall_at_10": r.recall_at_10,
        "median_rank": r.median_rank,
        "n": r.n,
    })
}

fn gen_synth(a: GenSynthArgs) -> anyhow::Result<()> {
    let synth = gen_synthetic(a.n, a.v_content, a.d_img, a.seed)?;
    synth.corpus.write(&a.out)?;
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let corpus = Corpus::read(&a.corpus)?;
    let exec = exec_for(a.sequential);
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            ckpt.config.epochs = a.epochs;
            Trainer::resume(ckpt, &corpus, exec)?
        }
        None => {
            let config = TrainConfig {
                objective: a.objective,
                d_e: a.d_e,
                d_cell: a.d_cell,
                d_a: a.d_a,
                n_a: a.n_a,
                d_img: corpus.d_img,
                d_p: a.d_p,
                batch_size: a.batch_size,
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                adam_eps: a.adam_eps,
                clip: a.clip,
                epochs: a.epochs,
                seed: a.seed,
                dropout: a.dropout,
                min_count: a.min_count,
                embeddings: a.embeddings.as_ref().map(|p| p.display().to_string()),
            };
            Trainer::new(config, &corpus, exec)?
        }
    };
    trainer.run(Some(&a.out_dir))?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::read(&a.corpus)?;
    let mut samples = corpus.encode(&ckpt.vocab);
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let (s2i, i2s) = retrieval_eval(&ckpt.params, &samples, exec_for(a.sequential))?;
    let out = json!({
        "sentence_to_image": report_json(&s2i),
        "image_to_sentence": report_json(&i2s),
    });
    println!("{out}");
    Ok(())
}

fn salience_cmd(a: SalienceArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let rec = salience(&ckpt.params, &ckpt.vocab, &a.sentence)?;
    println!("{}", serde_json::to_string(&rec)?);
    Ok(())
}

fn embed(a: EmbedArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let file =
        File::open(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let lines = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?;
    let vectors = embed_lines(&ckpt.params, &ckpt.vocab, &lines, exec_for(a.sequential))?;
    let mut out = BufWriter::new(File::create(&a.output)?);
    write_vectors(&mut out, &vectors)?;
    out.flush()?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let outcomes = verify::run_suite(a.seed)?;
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{} {:<32} max_rel_error={:.3e}",
            if o.passed { "ok  " } else { "FAIL" },
            o.name,
            o.max_rel_error
        );
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        bail!(
            "{failed} of {} gradient checks exceed {:e}",
            outcomes.len(),
            verify::TOLERANCE
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Salience(a) => salience_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
