//! `coe`: command-line driver for dataset generation, training, evaluation
//! and inspection.
//!
//! Machine-readable output goes to stdout (JSONL or CSV); summaries go to
//! stderr. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric or
//! training failure.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use coe_core::datagen::{emit_dataset, load_dataset, read_reward_references, Dataset, TrainingSample};
use coe_core::decoder::{Sampling, Vocab};
use coe_core::diagnostics::gradient_suite;
use coe_core::model::CoeModel;
use coe_core::numerics::Rng;
use coe_core::protocol::parse_response;
use coe_core::reward::score_text;
use coe_core::trainer::{
    build_vocab, evaluate, load_model, write_jsonl, write_rl_log, write_sft_log, EvalReport, PhaseReport,
    SampleEval, Session, Settings,
};
use coe_core::CoeError;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;

#[derive(Parser)]
#[command(name = "coe", version, about = "Evidence-grounded reasoning on synthetic event videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed of every random stream.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Human-readable output instead of JSON.
    #[arg(long)]
    pretty: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Supervised phase: train from scratch, write sft.ckpt and logs.
    TrainSft {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Preference phase starting from (and referenced to) an SFT checkpoint.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// The SFT checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Greedy evaluation on the held-out split; per-sample JSONL on stdout.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Ground then generate the response for one sample.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "N")]
        sample_id: u64,
    },
    /// Per-frame importance of one sample as CSV.
    InspectAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "N")]
        sample_id: u64,
    },
    /// Finite-difference check of every analytic gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Score candidate responses against reference annotations.
    RewardScore {
        #[command(flatten)]
        common: Common,
        /// JSONL with `sample_id` and `response` fields.
        #[arg(long, value_name = "PATH")]
        candidates: PathBuf,
        /// JSONL of annotated records (sft.jsonl, eval.jsonl or rl_ref.jsonl).
        #[arg(long, value_name = "PATH")]
        reference: PathBuf,
    },
}

/// Failures mapped onto exit codes.
enum Failure {
    /// Downstream reader went away, as with `| head`.
    Closed,
    Data(String),
    Numeric(String),
}

impl From<CoeError> for Failure {
    fn from(e: CoeError) -> Self {
        match e {
            CoeError::Divergence(_)
            | CoeError::Probe(_)
            | CoeError::Dimension { .. }
            | CoeError::SequenceLength { .. }
            | CoeError::TokenOutOfRange { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Failure::Closed;
        }
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn settings(common: &Common) -> Result<Settings, Failure> {
    let s = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    Ok(match common.seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn emit<T: Serialize>(value: &T, pretty: bool) -> String {
    let text = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    };
    text.expect("serializable value")
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn find<'a>(ds: &'a Dataset, id: u64) -> Result<&'a TrainingSample, Failure> {
    ds.find(id)
        .ok_or_else(|| Failure::Data(format!("no sample with id {id} in the dataset")))
}

/// Loads a checkpoint and insists its vocabulary matches the dataset's.
fn model_for(path: &Path, ds: &Dataset) -> Result<(CoeModel, Vocab), Failure> {
    let (model, vocab) = load_model(path, ds)?;
    if vocab != build_vocab(ds)? {
        return Err(Failure::Data(format!(
            "{}: vocabulary differs from the dataset's",
            path.display()
        )));
    }
    Ok((model, vocab))
}

fn print_report(report: &EvalReport, pretty: bool) {
    eprintln!("{}", emit(report, pretty));
}

fn write_report(path: &Path, phase: &str, report: EvalReport) -> Result<(), Failure> {
    let text = emit(
        &PhaseReport {
            phase: phase.into(),
            report,
        },
        true,
    );
    fs::write(path, text + "\n").map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn datagen(common: &Common, out: &Path) -> Outcome {
    let s = settings(common)?;
    let ds = emit_dataset(&s.datagen, out)?;
    let summary = serde_json::json!({
        "out": out,
        "seed": s.datagen.seed,
        "n_sft": ds.sft.len(),
        "n_rl": ds.rl.len(),
        "n_eval": ds.eval.len(),
        "feature_dim": ds.meta.d_v,
    });
    println!("{}", emit(&summary, common.pretty));
    Ok(())
}

fn train_sft(common: &Common, dataset: &Path, out: &Path) -> Outcome {
    let s = settings(common)?;
    let ds = load_dataset(dataset)?;
    create_dir(out)?;
    let session = Session::new(&ds, s.train)?;
    let mut model = session.init_model()?;
    let mut log = Vec::new();
    session.train_sft(&mut model, |m| log.push(*m))?;
    session.checkpoint(&model, "sft").save(&out.join("sft.ckpt"))?;
    write_sft_log(&out.join("sft_log.csv"), &log)?;
    let (report, rows) = session.evaluate(&model)?;
    write_jsonl(&out.join("eval_sft.jsonl"), &rows)?;
    write_report(&out.join("report_sft.json"), "sft", report)?;
    print_report(&report, common.pretty);
    Ok(())
}

fn train_rl(common: &Common, dataset: &Path, checkpoint: &Path, out: &Path) -> Outcome {
    let s = settings(common)?;
    let ds = load_dataset(dataset)?;
    let (sft, _) = model_for(checkpoint, &ds)?;
    create_dir(out)?;
    // The architecture comes from the checkpoint, not the settings file.
    let stored = coe_core::checkpoint::Checkpoint::load(checkpoint)?.meta.model;
    let mut cfg = s.train;
    cfg.num_queries = stored.num_queries;
    cfg.num_layers = stored.num_layers;
    cfg.d_embed = stored.d_embed;
    cfg.d_pos = stored.d_pos;
    cfg.hidden = stored.hidden;
    cfg.max_len = stored.max_len;
    cfg.egm_init_scale = stored.egm_init_scale;
    let session = Session::new(&ds, cfg)?;
    let mut log = Vec::new();
    let rl = session.train_rl(&sft, cfg.weights, |m| log.push(*m))?;
    session.checkpoint(&rl, "rl").save(&out.join("rl.ckpt"))?;
    write_rl_log(&out.join("rl_log.csv"), &log)?;
    let (report, rows) = session.evaluate(&rl)?;
    write_jsonl(&out.join("eval_rl.jsonl"), &rows)?;
    write_report(&out.join("report_rl.json"), "rl", report)?;
    print_report(&report, common.pretty);
    Ok(())
}

#[derive(Serialize)]
struct Breakdown {
    sample_id: u64,
    f1: f64,
    iou: f64,
    answer: u8,
    reward: f64,
}

impl From<&SampleEval> for Breakdown {
    fn from(e: &SampleEval) -> Self {
        Self {
            sample_id: e.sample_id,
            f1: e.f1,
            iou: e.iou,
            answer: e.answer,
            reward: e.reward,
        }
    }
}

fn eval(common: &Common, dataset: &Path, checkpoint: &Path) -> Outcome {
    let s = settings(common)?;
    let ds = load_dataset(dataset)?;
    let (model, vocab) = model_for(checkpoint, &ds)?;
    let (report, rows) = evaluate(&model, &ds.eval, &vocab, &ds.question_encoder(), &s.train.weights)?;
    let mut out = io::stdout().lock();
    for r in &rows {
        writeln!(out, "{}", emit(&Breakdown::from(r), false))?;
    }
    print_report(&report, common.pretty);
    Ok(())
}

fn infer(common: &Common, dataset: &Path, checkpoint: &Path, id: u64) -> Outcome {
    let ds = load_dataset(dataset)?;
    let (model, vocab) = model_for(checkpoint, &ds)?;
    let sample = find(&ds, id)?;
    let q = ds.question_encoder().encode(&sample.question)?;
    let max_len = model.decoder.dims()?.max_len;
    let seed = common.seed.unwrap_or(0);
    let (seq, _) = model.generate(&sample.features, &q, Sampling::Greedy, &mut Rng::new(seed), max_len)?;
    let text = vocab.detokenize(&seq.ids);
    if common.pretty {
        println!("question: {}", sample.question);
        println!("response: {text}");
        match parse_response(&text) {
            Ok(r) => {
                let anchors: Vec<String> = r
                    .anchors
                    .iter()
                    .map(|a| format!("[{}s, {}s)", a.start_s(), a.end_s()))
                    .collect();
                println!("anchors:  {}", anchors.join(" "));
                println!("answer:   {} (reference {})", r.answer, sample.answer);
            }
            Err(e) => println!("invalid:  {e}"),
        }
    } else {
        println!("{text}");
    }
    Ok(())
}

fn inspect_attention(common: &Common, dataset: &Path, checkpoint: &Path, id: u64) -> Outcome {
    let ds = load_dataset(dataset)?;
    let (model, _) = model_for(checkpoint, &ds)?;
    let sample = find(&ds, id)?;
    let q = ds.question_encoder().encode(&sample.question)?;
    let enc = model.encode(&sample.features, &q)?;
    let mut out = io::stdout().lock();
    writeln!(out, "frame_index,time_seconds,importance")?;
    for (i, imp) in enc.state.importance.iter().enumerate() {
        let t = i as f64 / sample.features.fps;
        if common.pretty {
            let bar = "#".repeat((imp * 40.0).round() as usize);
            writeln!(out, "{i:>3},{t:>6.2},{imp:.4} {bar}")?;
        } else {
            writeln!(out, "{i},{t},{imp}")?;
        }
    }
    Ok(())
}

fn grad_check(common: &Common) -> Outcome {
    let suite = gradient_suite(common.seed.unwrap_or(0), GRAD_INSTANCES)?;
    let mut worst = 0.0f64;
    for e in &suite {
        println!("{}", emit(e, common.pretty));
        worst = worst.max(e.max_rel_error);
    }
    println!("max rel err {worst:.3e}");
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= {GRAD_TOLERANCE:e}"
        )))
    }
}

#[derive(serde::Deserialize)]
struct Candidate {
    sample_id: u64,
    response: String,
}

fn reward_score(common: &Common, candidates: &Path, reference: &Path) -> Outcome {
    let s = settings(common)?;
    let refs = read_reward_references(reference)?;
    let file = File::open(candidates).map_err(|e| Failure::Data(format!("{}: {e}", candidates.display())))?;
    let mut out = io::stdout().lock();
    let mut totals: HashMap<&str, f64> = HashMap::new();
    let mut n = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Candidate = serde_json::from_str(&line)
            .map_err(|e| Failure::Data(format!("{}:{}: {e}", candidates.display(), i + 1)))?;
        let gt = refs.get(&c.sample_id).ok_or_else(|| {
            Failure::Data(format!("no reference for sample {} in {}", c.sample_id, reference.display()))
        })?;
        let r = score_text(&c.response, gt, &s.train.weights);
        let b = Breakdown {
            sample_id: c.sample_id,
            f1: r.f1_grounding,
            iou: r.iou_process,
            answer: r.answer_correct,
            reward: r.total,
        };
        writeln!(out, "{}", emit(&b, false))?;
        *totals.entry("mean_reward").or_default() += b.reward;
        *totals.entry("mean_f1").or_default() += b.f1;
        *totals.entry("mean_iou").or_default() += b.iou;
        *totals.entry("answer_accuracy").or_default() += f64::from(b.answer);
        n += 1;
    }
    let mut summary = serde_json::Map::new();
    summary.insert("n".into(), n.into());
    for key in ["mean_reward", "mean_f1", "mean_iou", "answer_accuracy"] {
        let mean = totals.get(key).copied().unwrap_or(0.0) / n.max(1) as f64;
        summary.insert(key.into(), mean.into());
    }
    eprintln!("{}", emit(&summary, common.pretty));
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Datagen { common, out } => datagen(common, out),
        Command::TrainSft { common, dataset, out } => train_sft(common, dataset, out),
        Command::TrainRl {
            common,
            dataset,
            checkpoint,
            out,
        } => train_rl(common, dataset, checkpoint, out),
        Command::Eval {
            common,
            dataset,
            checkpoint,
        } => eval(common, dataset, checkpoint),
        Command::Infer {
            common,
            dataset,
            checkpoint,
            sample_id,
        } => infer(common, dataset, checkpoint, *sample_id),
        Command::InspectAttention {
            common,
            dataset,
            checkpoint,
            sample_id,
        } => inspect_attention(common, dataset, checkpoint, *sample_id),
        Command::GradCheck { common } => grad_check(common),
        Command::RewardScore {
            common,
            candidates,
            reference,
        } => reward_score(common, candidates, reference),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) | Err(Failure::Closed) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
