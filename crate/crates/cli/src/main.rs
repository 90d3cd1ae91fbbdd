use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use slu_core::config::{keys_help, ExperimentConfig};
use slu_core::corpus::{
    generate_corpus_with, read_dataset, read_semantic_dataset, split_dataset, write_dataset, write_semantic_dataset,
    CompiledGrammar, CorpusConfig, Grammar, Inventory, Utterance,
};
use slu_core::decode::{beam_decode, greedy_decode};
use slu_core::exec::Execution;
use slu_core::gradcheck::grad_check;
use slu_core::model::{checkpoint, InterfaceMode, ModelParameters};
use slu_core::seqloss::{Estimator, Method, SeqLossConfig};
use slu_core::toy::{nbest_check, sampling_check, ToyProblem};
use slu_core::trainer::{
    default_max_len, evaluate, evaluate_on_transcripts, prepare, train_stage, transcript_free_update, RunLog, Stage,
    StagePlan,
};

#[derive(Parser)]
#[command(name = "slu", version, about = "Joint ASR-NLU training with sequence-level losses")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn config_help() -> String {
    format!("Config keys (`key = value` lines in --config, or --set key=value):\n{}", keys_help())
}

#[derive(Args)]
struct Common {
    /// Run seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    GenData {
        /// `default` or a grammar JSON file.
        #[arg(long, default_value = "default")]
        grammar: String,
        #[arg(long, default_value_t = 3000)]
        n: usize,
    },
    /// Shuffle a dataset into train/dev/test, plus transcript-free copies.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        grammar: String,
        #[arg(long, default_value_t = 2.0 / 3.0)]
        train_fraction: f64,
        #[arg(long, default_value_t = 1.0 / 6.0)]
        dev_fraction: f64,
    },
    /// Cross-entropy stages: ASR pretraining, NLU training, joint training.
    Train {
        #[command(flatten)]
        data: TrainData,
        /// Start from a checkpoint instead of a fresh initialisation.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Sequence-loss fine-tuning from a checkpoint.
    SeqTrain {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        from: PathBuf,
        /// Overrides the config's `method`.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Transcript-free fine-tuning on NLU labels only.
    TranscriptFreeTrain {
        /// Transcript-free train records.
        #[arg(long)]
        train: PathBuf,
        /// Transcript-free dev records.
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value = "default")]
        grammar: String,
        #[arg(long)]
        from: PathBuf,
    },
    /// Beam-decode a dataset.
    Decode {
        #[command(flatten)]
        model: ModelData,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Corpus WER, SemER, IRER and ICER of greedy decodes.
    Evaluate {
        #[command(flatten)]
        model: ModelData,
        /// Run the NLU on the gold transcripts instead of decodes.
        #[arg(long)]
        gold_transcripts: bool,
    },
    /// Finite-difference check of every differentiable loss.
    GradCheck {
        #[arg(long, default_value_t = 120)]
        configurations: usize,
        #[arg(long, default_value_t = 8)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Sampling and n-best estimators against exhaustive enumeration on a toy model.
    EstimatorCheck {
        #[arg(long, default_value_t = 3)]
        vocab: usize,
        #[arg(long, default_value_t = 2)]
        max_len: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        /// Samples per estimator call.
        #[arg(long, default_value_t = 4)]
        per_call: usize,
        #[arg(long, value_delimiter = ',', default_value = "mWER,mSemER,mSLU")]
        methods: Vec<Method>,
    },
}

#[derive(Args)]
struct TrainData {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long, default_value = "default")]
    grammar: String,
}

#[derive(Args)]
struct ModelData {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "default")]
    grammar: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut exp = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for pair in &common.overrides {
        exp.set_pair(pair).with_context(|| format!("--set {pair}"))?;
    }
    if let Some(s) = common.seed {
        exp.seed = s;
    }
    Ok(exp)
}

fn grammar(spec: &str) -> Result<CompiledGrammar> {
    Grammar::load(spec)
        .and_then(|g| g.compile())
        .with_context(|| format!("grammar {spec}"))
}

fn load_ckpt(path: &Path) -> Result<ModelParameters> {
    let p = if !path.exists() && path.extension().is_none() {
        path.with_extension("ckpt")
    } else {
        path.to_path_buf()
    };
    checkpoint::load(&p, None).with_context(|| format!("checkpoint {}", p.display()))
}

fn read_data(path: &Path, inv: &Inventory) -> Result<Vec<Utterance>> {
    read_dataset(path, inv).with_context(|| format!("dataset {}", path.display()))
}

/// The decode limit: explicit config, the one recorded beside the
/// checkpoint, or twice the longest training transcript.
fn max_len(exp: &ExperimentConfig, from: Option<&Path>, train: Option<&[Utterance]>) -> Result<usize> {
    if exp.max_len > 0 {
        return Ok(exp.max_len);
    }
    if let Some(dir) = from.and_then(Path::parent) {
        let recorded = dir.join("config.txt");
        if recorded.exists() {
            let c = ExperimentConfig::load(&recorded).with_context(|| format!("config {}", recorded.display()))?;
            if c.max_len > 0 {
                return Ok(c.max_len);
            }
        }
    }
    match train {
        Some(t) if !t.is_empty() => Ok(default_max_len(t)),
        _ => bail!("max_len is 0 and no recorded config.txt beside the checkpoint; pass --set max_len=N"),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn save(params: &ModelParameters, path: &Path) -> Result<()> {
    checkpoint::save(params, path).with_context(|| format!("writing {}", path.display()))
}

fn finish_run(out: &Path, exp: &ExperimentConfig, max_len: usize, log: &RunLog) -> Result<()> {
    let mut resolved = exp.clone();
    resolved.max_len = max_len;
    write(&out.join("config.txt"), resolved.to_text())?;
    write(&out.join("runlog.jsonl"), log.to_jsonl())?;
    if let Some(dev) = log.last_dev() {
        println!(
            "dev WER {:.4} SemER {:.4} IRER {:.4} ICER {:.4}",
            dev.wer, dev.semer, dev.irer, dev.icer
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads.max(1))
        .build_global()
        .context("thread pool")?;
    let exp = experiment(common)?;
    let out = &common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let execution = Execution::default();

    match &cli.command {
        Command::GenData { grammar: spec, n } => {
            let g = grammar(spec)?;
            let cc = CorpusConfig {
                frame_dim: exp.frame_dim,
                noise_sigma: exp.noise_sigma,
                ..CorpusConfig::default()
            };
            let utts = generate_corpus_with(&g, *n, exp.seed, &cc)?;
            write_dataset(&utts, &g.inventory, &out.join("data.jsonl"))?;
            let mut per_intent = vec![0usize; g.inventory.intents.len()];
            utts.iter().for_each(|u| per_intent[u.intent] += 1);
            let manifest = json!({
                "data": "data.jsonl",
                "grammar": spec,
                "utterances": n,
                "seed": exp.seed,
                "corpus": cc,
                "templates": g.n_templates(),
                "vocabulary": g.inventory.vocabulary,
                "slot_tags": g.inventory.slot_tags,
                "intents": g.inventory.intents,
                "per_intent": per_intent,
            });
            write_json(&out.join("manifest.json"), &manifest)?;
            println!("wrote {} utterances to {}", n, out.join("data.jsonl").display());
        }
        Command::Split {
            data,
            grammar: spec,
            train_fraction,
            dev_fraction,
        } => {
            let g = grammar(spec)?;
            let inv = &g.inventory;
            let utts = read_data(data, inv)?;
            let fr = [*train_fraction, *dev_fraction, 1.0 - train_fraction - dev_fraction];
            let (tr, dv, te) = split_dataset(&utts, fr, exp.seed)?;
            for (name, part) in [("train", &tr), ("dev", &dv), ("test", &te)] {
                write_dataset(part, inv, &out.join(format!("{name}.jsonl")))?;
                let sem: Vec<_> = part.iter().map(|u| u.semantics(inv)).collect();
                write_semantic_dataset(&sem, inv, &out.join(format!("{name}.semantic.jsonl")))?;
            }
            println!("train {} / dev {} / test {}", tr.len(), dv.len(), te.len());
        }
        Command::Train { data, from } => {
            let g = grammar(&data.grammar)?;
            let inv = &g.inventory;
            let (tr, dv) = (read_data(&data.train, inv)?, read_data(&data.dev, inv)?);
            let ml = max_len(&exp, None, Some(&tr))?;
            let mut cfg = exp.train_config(ml);
            cfg.execution = execution;
            let mut params = match from {
                Some(p) => load_ckpt(p)?,
                None => ModelParameters::init(&exp.model_config(inv))?,
            };
            let (train, dev) = (prepare(&tr, inv), prepare(&dv, inv));
            let mut log = RunLog::default();
            for plan in exp.ce_plan() {
                let (p, l) = train_stage(&params, &plan, &train, &dev, inv, &cfg)?;
                save(&p, &out.join(format!("{}.ckpt", plan.stage)))?;
                params = p;
                log.extend(l);
            }
            finish_run(out, &exp, ml, &log)?;
        }
        Command::SeqTrain { data, from, method } => {
            let g = grammar(&data.grammar)?;
            let inv = &g.inventory;
            let (tr, dv) = (read_data(&data.train, inv)?, read_data(&data.dev, inv)?);
            let method = method.unwrap_or(exp.method);
            if method == Method::TranscriptFree {
                bail!("use transcript-free-train for the transcript-free method");
            }
            let start = load_ckpt(from)?;
            let ml = max_len(&exp, Some(from), Some(&tr))?;
            let mut cfg = exp.train_config(ml);
            cfg.execution = execution;
            let plan = StagePlan::seq(Stage::JointSeqLoss, exp.epochs.seq, exp.seq_config(method, ml));
            let (p, log) = train_stage(&start, &plan, &prepare(&tr, inv), &prepare(&dv, inv), inv, &cfg)?;
            save(&p, &out.join(format!("{}.ckpt", method.name())))?;
            let mut exp = exp.clone();
            exp.method = method;
            finish_run(out, &exp, ml, &log)?;
        }
        Command::TranscriptFreeTrain {
            train,
            dev,
            grammar: spec,
            from,
        } => {
            let g = grammar(spec)?;
            let inv = &g.inventory;
            let read = |p: &Path| read_semantic_dataset(p, inv).with_context(|| format!("dataset {}", p.display()));
            let (tr, dv) = (read(train)?, read(dev)?);
            let start = load_ckpt(from)?;
            let ml = max_len(&exp, Some(from), None)?;
            let mut cfg = exp.train_config(ml);
            cfg.execution = execution;
            let seq = exp.seq_config(Method::TranscriptFree, ml);
            let (p, log) = transcript_free_update(&start, &tr, &dv, inv, &seq, exp.epochs.transcript_free, &cfg)?;
            save(&p, &out.join("transcript_free.ckpt"))?;
            let mut exp = exp.clone();
            exp.method = Method::TranscriptFree;
            finish_run(out, &exp, ml, &log)?;
        }
        Command::Decode { model, beam } => {
            let g = grammar(&model.grammar)?;
            let inv = &g.inventory;
            let params = load_ckpt(&model.ckpt)?;
            let utts = read_data(&model.data, inv)?;
            let ml = max_len(&exp, Some(&model.ckpt), None)?;
            let decoded = execution.map(&utts, |_, u| {
                let frames = u.frames_tensor();
                if *beam <= 1 {
                    greedy_decode(&params, &frames, ml).map(|c| (vec![c], vec![1.0]))
                } else {
                    beam_decode(&params, &frames, *beam, ml).map(|n| (n.candidates, n.renorm_probs))
                }
            });
            let mut lines = String::new();
            for (u, d) in utts.iter().zip(decoded) {
                let (cands, probs) = d?;
                let hyps: Vec<_> = cands
                    .iter()
                    .zip(probs)
                    .map(|(c, p)| {
                        json!({
                            "words": inv.words(&c.tokens),
                            "ended": c.ended,
                            "slots": c.slots(inv),
                            "intent": inv.intents[c.intent],
                            "asr_logprob": c.asr_logprob,
                            "joint_logprob": c.joint_logprob(),
                            "renorm_prob": p,
                        })
                    })
                    .collect();
                lines += &serde_json::to_string(&json!({ "id": u.id, "hypotheses": hyps }))?;
                lines.push('\n');
            }
            write(&out.join("decode.jsonl"), lines)?;
            println!("decoded {} utterances to {}", utts.len(), out.join("decode.jsonl").display());
        }
        Command::Evaluate { model, gold_transcripts } => {
            let g = grammar(&model.grammar)?;
            let inv = &g.inventory;
            let params = load_ckpt(&model.ckpt)?;
            let data = prepare(&read_data(&model.data, inv)?, inv);
            let report = if *gold_transcripts {
                evaluate_on_transcripts(&params, &data, inv, execution)?
            } else {
                let ml = max_len(&exp, Some(&model.ckpt), None)?;
                evaluate(&params, &data, inv, ml, execution)?
            };
            write_json(&out.join("metrics.json"), &report)?;
            println!(
                "WER {:.4} SemER {:.4} IRER {:.4} ICER {:.4} over {} utterances",
                report.wer, report.semer, report.irer, report.icer, report.utterances
            );
        }
        Command::GradCheck {
            configurations,
            coords,
            eps,
            tolerance,
        } => {
            let r = grad_check(*configurations, exp.seed, *coords, *eps, execution)?;
            write_json(&out.join("grad_check.json"), &r)?;
            for p in &r.per_path {
                println!("{:?}: {} coordinates, max rel error {:.2e}", p.path, p.checked, p.max_rel_error);
            }
            if r.max_rel_error > *tolerance {
                bail!("max relative error {:.3e} exceeds {:.1e}", r.max_rel_error, tolerance);
            }
            println!("max relative error {:.2e} <= {:.1e}", r.max_rel_error, tolerance);
        }
        Command::EstimatorCheck {
            vocab,
            max_len,
            samples,
            per_call,
            methods,
        } => {
            let interface = match exp.interface {
                InterfaceMode::GumbelToken { .. } => InterfaceMode::Neural,
                i => i,
            };
            let toy = ToyProblem::new(exp.seed, *vocab, *max_len, interface);
            let mut reports = Vec::new();
            let mut failures = Vec::new();
            for &method in methods {
                if method == Method::TranscriptFree {
                    bail!("estimator-check covers methods with a transcript reference");
                }
                let mut cfg: SeqLossConfig = exp.seq_config(method, *max_len);
                cfg.estimator = Estimator::Sampling { samples: *per_call };
                let s = sampling_check(&toy, &cfg, *samples, exp.seed, execution)?;
                let n = nbest_check(&toy, &cfg)?;
                println!(
                    "{}: sampling {}/{} coordinates within 3 SE ({:.1}%), n-best value error {:.1e}, gradient error {:.1e}",
                    s.method,
                    s.within_3se,
                    s.coordinates,
                    100.0 * s.fraction_within,
                    n.value_error,
                    n.max_gradient_error
                );
                if s.fraction_within < 0.95 {
                    failures.push(format!("{method} sampling {:.3}", s.fraction_within));
                }
                if n.value_error.max(n.max_gradient_error) > 1e-6 {
                    failures.push(format!("{method} n-best {:.1e}", n.value_error.max(n.max_gradient_error)));
                }
                reports.push(json!({ "sampling": s, "nbest": n }));
            }
            write_json(&out.join("estimator_check.json"), &reports)?;
            if !failures.is_empty() {
                bail!("estimator check failed: {}", failures.join(", "));
            }
        }
    }
    Ok(())
}
