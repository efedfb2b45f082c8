use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use keag::config::RunConfig;
use keag::generator::{render_trace, SourceTrace};
use keag::knowledge::{extract_related_facts, ingest_triples, FactRecord, KnowledgeBase};
use keag::metrics::evaluate;
use keag::model::KeagModel;
use keag::pipeline::{build_items, generate_settings, load_model, predict, save_model};
use keag::synth::{synth_generate, SynthTask};
use keag::text::{load_jsonl, tokenize, write_jsonl, RawExample, Vocabulary};
use keag::trainer::{Objective, Trainer};
use keag::{Error, Result};

#[derive(Parser)]
#[command(name = "keag", version, about = "Knowledge-enriched answer generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary of a JSONL dataset.
    Prepare(PrepareArgs),
    /// Rank the knowledge-base facts related to each question and passage.
    ExtractFacts(ExtractArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Decode answers for a JSONL dataset.
    Generate(GenerateArgs),
    /// Score predictions against references with ROUGE-L and BLEU-1.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset and its knowledge base.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary output, one token per line.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    kb: PathBuf,
    /// JSONL dataset; each output record carries its example index.
    #[arg(long, conflicts_with_all = ["question", "passage"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "passage")]
    question: Option<String>,
    #[arg(long, requires = "question")]
    passage: Option<String>,
    /// Facts kept per instance.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Existing vocabulary; built from the data when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint path. The vocabulary is written next to it with a `.vocab` suffix.
    #[arg(long)]
    out: PathBuf,
    /// Also append the per-step metrics to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    #[arg(long)]
    no_knowledge: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the checkpoint path with a `.vocab` suffix.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    /// Print each answer's source table to stderr.
    #[arg(long)]
    trace: bool,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSONL records with an `answer` field, e.g. the output of `generate`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    references: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = |s: &str| s.parse::<SynthTask>())]
    task: SynthTask,
    #[arg(long, default_value_t = 200)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes `<out>.jsonl` and `<out>.kb.tsv`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    match s {
        "relaxed" => Ok(Objective::Relaxed),
        "exact-elbo" => Ok(Objective::ExactElbo),
        "marginal" => Ok(Objective::Marginal),
        _ => Err(format!("unknown objective {s:?}; expected relaxed, exact-elbo or marginal")),
    }
}

fn log(value: serde_json::Value) {
    eprintln!("{value}");
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a readable file", path.display())))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_kb(path: Option<&Path>) -> Result<KnowledgeBase> {
    let Some(path) = path else {
        return Ok(KnowledgeBase::new());
    };
    let (kb, malformed) = ingest_triples(path)?;
    if !malformed.is_empty() {
        log(json!({"event": "kb_malformed_lines", "count": malformed.len(), "first_line": malformed[0].line}));
    }
    log(json!({"event": "kb_loaded", "facts": kb.len(), "relations": kb.relation_count()}));
    Ok(kb)
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_line<T: Serialize>(w: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(io::Error::from)?;
    writeln!(w)?;
    Ok(())
}

fn prepare(args: PrepareArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    require_file(&args.data)?;
    if let Some(v) = args.vocab_size {
        cfg.data.vocab_size = v;
    }
    if let Some(v) = args.min_count {
        cfg.data.min_count = v;
    }
    cfg.validate()?;
    let raws = load_jsonl(&args.data)?;
    let vocab = Vocabulary::from_examples_filtered(&raws, cfg.data.vocab_size, cfg.data.min_count)?;
    vocab.save(&args.out)?;
    let (mut answer_tokens, mut answer_oov) = (0usize, 0usize);
    for r in &raws {
        for t in tokenize(&r.answer) {
            answer_tokens += 1;
            answer_oov += usize::from(!vocab.contains(&t));
        }
    }
    log(json!({
        "event": "prepared",
        "examples": raws.len(),
        "vocab": vocab.len(),
        "answer_oov_rate": if answer_tokens == 0 { 0.0 } else { answer_oov as f64 / answer_tokens as f64 },
    }));
    eprintln!("wrote {} tokens to {}", vocab.len(), args.out.display());
    Ok(())
}

fn extract_facts(args: ExtractArgs) -> Result<()> {
    let cfg = args.config.load()?;
    require_file(&args.kb)?;
    let limit = args.limit.unwrap_or(cfg.data.max_facts);
    if limit == 0 {
        return Err(Error::Config("--limit must be at least 1".into()));
    }
    let kb = load_kb(Some(&args.kb))?;
    let mut out = writer(args.out.as_deref())?;
    match (&args.data, &args.question, &args.passage) {
        (Some(data), _, _) => {
            require_file(data)?;
            for (i, r) in load_jsonl(data)?.iter().enumerate() {
                let facts = extract_related_facts(&kb, &tokenize(&r.question), &tokenize(&r.passage.joined()), limit);
                for f in facts {
                    let rec = FactRecord::new(&kb, f);
                    write_line(&mut out, &json!({"example": i, "fact_id": rec.fact_id, "subject": rec.subject,
                        "relation": rec.relation, "object": rec.object, "score": rec.score}))?;
                }
            }
        }
        (None, Some(q), Some(p)) => {
            for f in extract_related_facts(&kb, &tokenize(q), &tokenize(p), limit) {
                write_line(&mut out, &FactRecord::new(&kb, f))?;
            }
        }
        _ => return Err(Error::Config("give --data or both --question and --passage".into())),
    }
    out.flush()?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.objective {
        cfg.train.objective = v;
    }
    if args.no_knowledge {
        cfg.model.use_knowledge = false;
    }
    cfg.validate()?;
    require_file(&args.data)?;
    for p in args.kb.iter().chain(&args.vocab) {
        require_file(p)?;
    }

    let raws = load_jsonl(&args.data)?;
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::from_examples_filtered(&raws, cfg.data.vocab_size, cfg.data.min_count)?,
    };
    let kb = load_kb(args.kb.as_deref())?;
    let items = build_items(&raws, &vocab, &kb, &cfg)?;
    let model = KeagModel::new(&cfg.model, vocab.len(), cfg.train.seed);
    log(json!({"event": "train_start", "examples": items.len(), "vocab": vocab.len(), "params": model.store.num_scalars()}));

    let mut metrics_file = match &args.metrics {
        Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let mut trainer = Trainer::new(model, cfg.train.clone());
    let mut last_loss = f64::NAN;
    trainer.train(&items, &kb, &vocab, |_, m| {
        let line = serde_json::to_string(m).map_err(io::Error::from)?;
        eprintln!("{line}");
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{line}")?;
        }
        if !m.skipped {
            last_loss = m.loss;
        }
        Ok(true)
    })?;
    if let Some(mut f) = metrics_file {
        f.flush()?;
    }

    save_model(&trainer.model, &cfg, &vocab, trainer.step as u64, &args.out)?;
    let vocab_path = with_suffix(&args.out, ".vocab");
    vocab.save(&vocab_path)?;
    eprintln!(
        "trained {} steps ({} skipped), final loss {:.4}; checkpoint {}, vocabulary {}",
        trainer.step,
        trainer.skipped_steps,
        last_loss,
        args.out.display(),
        vocab_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GenerateRecord<'a> {
    question: &'a str,
    answer: String,
    trace: &'a SourceTrace,
}

fn generate(args: GenerateArgs) -> Result<()> {
    require_file(&args.checkpoint)?;
    require_file(&args.data)?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| with_suffix(&args.checkpoint, ".vocab"));
    require_file(&vocab_path)?;
    if let Some(p) = &args.kb {
        require_file(p)?;
    }
    let vocab = Vocabulary::load(&vocab_path)?;
    let (model, cfg) = load_model(&args.checkpoint, &vocab)?;
    let beam = args.beam.unwrap_or(cfg.generate.beam);
    if beam == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let kb = load_kb(args.kb.as_deref())?;
    let raws = load_jsonl(&args.data)?;
    let outs = predict(&model, &vocab, &kb, generate_settings(&cfg, beam), &raws)?;
    let mut out = writer(args.out.as_deref())?;
    for (r, g) in raws.iter().zip(&outs) {
        write_line(&mut out, &GenerateRecord {
            question: &r.question,
            answer: g.answer(),
            trace: &g.trace,
        })?;
        if args.trace {
            eprintln!("{}\n{}", r.question, render_trace(&g.trace));
        }
    }
    out.flush()?;
    Ok(())
}

/// The `answer` field of every nonblank JSONL line.
fn read_answers(path: &Path) -> Result<Vec<Vec<String>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let answer = value
            .get("answer")
            .and_then(|a| a.as_str())
            .ok_or_else(|| Error::Data(format!("{}:{}: no string field \"answer\"", path.display(), i + 1)))?;
        out.push(tokenize(answer));
    }
    Ok(out)
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    require_file(&args.predictions)?;
    require_file(&args.references)?;
    let preds = read_answers(&args.predictions)?;
    let refs = read_answers(&args.references)?;
    let report = evaluate(&preds, &refs)?;
    let mut out = writer(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(io::Error::from)?;
    writeln!(out)?;
    out.flush()?;
    eprintln!("rouge_l {:.4} bleu_1 {:.4} over {} answers", report.rouge_l, report.bleu_1, preds.len());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.size == 0 {
        return Err(Error::Config("--size must be at least 1".into()));
    }
    let data = synth_generate(args.task, args.size, args.seed);
    let jsonl = with_suffix(&args.out, ".jsonl");
    let tsv = with_suffix(&args.out, ".kb.tsv");
    write_jsonl::<RawExample>(&jsonl, &data.examples)?;
    data.write_kb_tsv(&tsv)?;
    log(json!({"event": "synth", "task": args.task.name(), "examples": data.examples.len(), "triples": data.triples.len()}));
    eprintln!("wrote {} and {}", jsonl.display(), tsv.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::ExtractFacts(a) => extract_facts(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log(json!({"event": "error", "message": e.to_string(), "exit_code": e.exit_code()}));
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
