//! `lift`: command-line front end for corpus generation, training,
//! decoding, evaluation and confidence analysis.
//!
//! Values come from built-in defaults, then the `--config` file, then flags.
//! Failures print one JSON line on stderr and exit with a code specific to
//! the error class.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lift_core::analysis;
use lift_core::config::RunConfigFile;
use lift_core::corpus::{self, Example, Task, Tokenization, Vocabulary};
use lift_core::diffusion::RhoStrategy;
use lift_core::eval;
use lift_core::rng::{self, Stream};
use lift_core::sampler::{self, RemaskStrategy, SpecialIds};
use lift_core::trainer::Trainer;
use lift_core::{Checkpoint, Denoiser, Error, ObjectiveKind, Result};

#[derive(Parser, Debug)]
#[command(name = "lift", version, about = "Masked diffusion LM training with learnability-informed token selection")]
struct Cli {
    /// Run-config JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads for corpus, eval and analysis.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task corpus (train.jsonl and eval.jsonl).
    GenCorpus(GenCorpusArgs),
    /// Build vocab.json from a corpus file.
    BuildVocab(BuildVocabArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Decode a response for one prompt.
    Generate(GenerateArgs),
    /// Evaluate exact match and pass@k on an eval set.
    Eval(EvalArgs),
    /// Bin ground-truth confidences by token frequency and diffusion time.
    Analyze(AnalyzeArgs),
    /// Print the effective configuration.
    ShowConfig(ShowConfigArgs),
}

#[derive(Args, Debug, Default)]
struct ObjectiveFlags {
    /// vanilla, lift, lift_a, top_k, bottom_k, random2, random3, gift or cart.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long = "H")]
    h: Option<u64>,
    /// uniform, fixed or truncated_uniform.
    #[arg(long)]
    rho_kind: Option<String>,
    #[arg(long)]
    rho_k: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct DecodeFlags {
    #[arg(long)]
    gen_len: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tokens_per_step: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// confidence or random.
    #[arg(long)]
    remask: Option<String>,
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// copy, reverse, addition_cot or mini_countdown.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Corpus file (.jsonl records, anything else plain text); default <out>/train.jsonl.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// char or whitespace.
    #[arg(long)]
    tokenization: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    objective: ObjectiveFlags,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Eval set; default <out>/eval.jsonl.
    #[arg(long)]
    eval_set: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated k values, e.g. 1,8,16.
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    samples_per_example: Option<usize>,
}

#[derive(Args, Debug)]
struct ShowConfigArgs {
    #[command(flatten)]
    objective: ObjectiveFlags,
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
}

fn parse_rho(kind: &str, k: Option<f64>) -> Result<RhoStrategy> {
    let need = || k.ok_or_else(|| Error::Config(format!("--rho-k is required for rho kind {kind}")));
    match kind {
        "uniform" => Ok(RhoStrategy::Uniform),
        "fixed" => Ok(RhoStrategy::Fixed(need()?)),
        "truncated_uniform" => Ok(RhoStrategy::TruncatedUniform(need()?)),
        other => Err(Error::Config(format!("unknown rho kind {other:?}"))),
    }
}

fn apply_objective(cfg: &mut RunConfigFile, f: &ObjectiveFlags) -> Result<()> {
    let o = &mut cfg.train.objective;
    if let Some(k) = &f.objective {
        o.kind = k.parse::<ObjectiveKind>()?;
    }
    if let Some(h) = f.h {
        o.h = h;
    }
    match (&f.rho_kind, f.rho_k) {
        (Some(kind), k) => o.rho = parse_rho(kind, k)?,
        (None, Some(k)) => {
            o.rho = match o.rho {
                RhoStrategy::Uniform => return Err(Error::Config("--rho-k needs --rho-kind fixed or truncated_uniform".into())),
                RhoStrategy::Fixed(_) => RhoStrategy::Fixed(k),
                RhoStrategy::TruncatedUniform(_) => RhoStrategy::TruncatedUniform(k),
            }
        }
        (None, None) => {}
    }
    if let Some(e) = f.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = f.lr {
        cfg.train.learning_rate = lr;
    }
    Ok(())
}

fn apply_decode(cfg: &mut RunConfigFile, f: &DecodeFlags) -> Result<()> {
    let d = &mut cfg.decode;
    if let Some(v) = f.gen_len {
        d.gen_len = v;
    }
    if let Some(v) = f.steps {
        d.steps = v;
    }
    if let Some(v) = f.tokens_per_step {
        d.tokens_per_step = v;
    }
    if let Some(v) = f.temperature {
        d.temperature = v;
    }
    if let Some(r) = &f.remask {
        d.remask_strategy = match r.as_str() {
            "confidence" => RemaskStrategy::Confidence,
            "random" => RemaskStrategy::Random,
            other => return Err(Error::Config(format!("unknown remask strategy {other:?}"))),
        };
    }
    Ok(())
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse()
}

fn parse_tokenization(s: &str) -> Result<Tokenization> {
    match s {
        "char" => Ok(Tokenization::Char),
        "whitespace" => Ok(Tokenization::Whitespace),
        other => Err(Error::Config(format!("unknown tokenization {other:?}"))),
    }
}

struct Ctx {
    cfg: RunConfigFile,
    out: PathBuf,
}

impl Ctx {
    fn path_or(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn seed(&self) -> u64 {
        self.cfg.train.seed
    }
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<Denoiser> {
    let model = Checkpoint::load(path)?.into_model()?;
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint expects {} tokens, vocabulary has {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

fn emit(value: serde_json::Value) {
    print_line(&value.to_string());
}

fn print_line(s: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{s}");
}

fn gen_corpus(ctx: &Ctx, a: &GenCorpusArgs) -> Result<()> {
    let mut c = ctx.cfg.corpus.clone();
    if let Some(t) = &a.task {
        c.task = parse_task(t)?;
    }
    if let Some(n) = a.count {
        c.train_count = n;
    }
    if let Some(n) = a.eval_count {
        c.eval_count = n;
    }
    let all = corpus::generate_synthetic_with(c.task, c.train_count + c.eval_count, ctx.seed(), c.params)?;
    let (train, evals) = all.split_at(c.train_count);
    std::fs::create_dir_all(&ctx.out)?;
    corpus::write_jsonl(&ctx.out.join("train.jsonl"), train)?;
    corpus::write_jsonl(&ctx.out.join("eval.jsonl"), evals)?;
    emit(serde_json::json!({
        "train": ctx.out.join("train.jsonl"),
        "eval": ctx.out.join("eval.jsonl"),
        "train_count": train.len(),
        "eval_count": evals.len(),
        "corpus_hash": corpus::corpus_hash(train),
    }));
    Ok(())
}

fn build_vocab(ctx: &Ctx, a: &BuildVocabArgs) -> Result<()> {
    let tok = match &a.tokenization {
        Some(t) => parse_tokenization(t)?,
        None => ctx.cfg.corpus.tokenization,
    };
    let path = ctx.path_or(&a.corpus, "train.jsonl");
    let data = corpus::read_corpus(&path)?;
    let vocab = Vocabulary::build(&data, tok)?;
    std::fs::create_dir_all(&ctx.out)?;
    let dest = ctx.out.join("vocab.json");
    vocab.save(&dest)?;
    emit(serde_json::json!({"vocab": dest, "size": vocab.len(), "hash": vocab.hash()}));
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let vocab = Vocabulary::load(&ctx.path_or(&a.vocab, "vocab.json"))?;
    let examples = corpus::read_corpus(&ctx.path_or(&a.corpus, "train.jsonl"))?;
    if examples.is_empty() {
        return Err(Error::Ingestion("training corpus is empty".into()));
    }
    let data = vocab.encode_all(&examples)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(Checkpoint::load(p)?, data, &vocab)?,
        None => {
            let model = Denoiser::new(ctx.cfg.model.with_vocab(vocab.len()), ctx.seed())?;
            Trainer::new(ctx.cfg.train.clone(), model, data, &vocab)?
        }
    };
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(ctx.out.join("config.json"), ctx.cfg.to_json())?;
    trainer = trainer
        .with_output(&ctx.out)?
        .with_config_echo(serde_json::to_value(&ctx.cfg)?);
    trainer.run()?;
    trainer.save_checkpoint()?;
    let last = trainer.records().iter().rev().find(|r| !r.skipped);
    emit(serde_json::json!({
        "steps": trainer.step(),
        "final_loss": last.map(|r| r.loss),
        "checkpoint": ctx.out.join("last.ckpt"),
        "manifest": ctx.out.join("manifest.json"),
    }));
    Ok(())
}

fn generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    let vocab = Vocabulary::load(&ctx.path_or(&a.vocab, "vocab.json"))?;
    let model = load_model(&ctx.path_or(&a.checkpoint, "last.ckpt"), &vocab)?;
    let prompt = vocab.encode_text(&a.prompt)?;
    let ids = SpecialIds {
        mask_id: vocab.mask_id(),
        pad_id: vocab.pad_id(),
    };
    let mut r = rng::stream(ctx.seed(), Stream::Decode, &[0, 0]);
    let out = sampler::generate(&model, &prompt, &ctx.cfg.decode, ids, &mut r)?;
    emit(serde_json::json!({"prompt": a.prompt, "response": vocab.decode(&out)}));
    Ok(())
}

fn evaluate(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let vocab = Vocabulary::load(&ctx.path_or(&a.vocab, "vocab.json"))?;
    let model = load_model(&ctx.path_or(&a.checkpoint, "last.ckpt"), &vocab)?;
    let task = match &a.task {
        Some(t) => parse_task(t)?,
        None => ctx.cfg.corpus.task,
    };
    let set: Vec<Example> = corpus::read_corpus(&ctx.path_or(&a.eval_set, "eval.jsonl"))?;
    if set.is_empty() {
        return Err(Error::Ingestion("evaluation set is empty".into()));
    }
    let report = eval::evaluate(
        &model,
        &vocab,
        task,
        &set,
        &ctx.cfg.decode,
        &ctx.cfg.eval.k_list,
        ctx.seed(),
        ctx.cfg.eval.batch_size,
    )?;
    report.write(&ctx.out)?;
    emit(serde_json::json!({
        "accuracy": report.accuracy,
        "pass_at_k": report.pass_at_k,
        "avg_at_k": report.avg_at_k,
        "report": ctx.out.join("eval_report.json"),
    }));
    Ok(())
}

fn analyze(ctx: &Ctx, a: &AnalyzeArgs) -> Result<()> {
    let mut acfg = ctx.cfg.analysis.clone();
    if let Some(n) = a.samples_per_example {
        acfg.samples_per_example = n;
    }
    acfg.validate()?;
    let examples = corpus::read_corpus(&ctx.path_or(&a.corpus, "train.jsonl"))?;
    if examples.is_empty() {
        return Err(Error::Ingestion("analysis corpus is empty".into()));
    }
    let vocab = Vocabulary::load(&ctx.path_or(&a.vocab, "vocab.json"))?;
    let model = load_model(&ctx.path_or(&a.checkpoint, "last.ckpt"), &vocab)?;
    let data = vocab.encode_all(&examples)?;
    let records = analysis::collect(&model, &data, &vocab, &acfg, ctx.seed())?;
    let grid = analysis::bin(&records, &acfg.grid()?)?;
    let dir = ctx.out.join("analysis");
    let summary = analysis::report(&grid, Some(&vocab), acfg.top_tokens_per_bin, &dir)?;
    emit(serde_json::json!({"dir": dir, "records": summary.records, "occupied_cells": summary.occupied_cells, "warnings": summary.warnings}));
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfigFile> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    match &cli.command {
        Command::Train(a) => apply_objective(&mut cfg, &a.objective)?,
        Command::Generate(a) => apply_decode(&mut cfg, &a.decode)?,
        Command::Eval(a) => {
            apply_decode(&mut cfg, &a.decode)?;
            if let Some(k) = &a.k_list {
                cfg.eval.k_list = k.clone();
            }
        }
        Command::ShowConfig(a) => {
            apply_objective(&mut cfg, &a.objective)?;
            apply_decode(&mut cfg, &a.decode)?;
            if let Some(k) = &a.k_list {
                cfg.eval.k_list = k.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    let ctx = Ctx { cfg, out: cli.out.clone() };
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&ctx, a),
        Command::BuildVocab(a) => build_vocab(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Eval(a) => evaluate(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::ShowConfig(_) => {
            print_line(&ctx.cfg.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "code": e.exit_code(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
