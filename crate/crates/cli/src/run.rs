//! Command pipelines. Each `cmd_*` prints the effective configuration,
//! does its work and writes its artifacts under the output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gatedkv::checkpoint;
use gatedkv::corpus::{ingest_corpus, synthetic_corpus, tokenize, windows, Window};
use gatedkv::export::{attention_heatmap, eviction_grid, write_cache_csv, write_flags_csv};
use gatedkv::metrics::{evaluate, matched_budget, prompt_len, retention_trend, trend_violations};
use gatedkv::policy::streaming_split;
use gatedkv::train::{self, StepMetrics};
use gatedkv::{GateMode, GateStats, Model, Parallelism, PolicySpec, TokenId};

use crate::args::{Cli, Command, Common};
use crate::config::{self, RunConfig};
use crate::report::{self, BenchRow};
use crate::{CliResult, Failure};

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Eval {
            common,
            checkpoint,
            policy,
        } => cmd_eval(&common, checkpoint, &policy),
        Command::Bench {
            common,
            checkpoint,
            policy,
        } => cmd_bench(&common, checkpoint, &policy),
        Command::Viz {
            common,
            checkpoint,
            text,
            input,
        } => cmd_viz(&common, checkpoint, text, input),
        Command::GenCorpus { common } => cmd_gen_corpus(&common),
    }
}

fn setup(common: &Common) -> CliResult<RunConfig> {
    let cfg = config::load(common.config.as_deref(), &common.overrides, common.seed)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Training windows from the configured file or the synthetic generator.
pub fn train_windows(cfg: &RunConfig) -> CliResult<Vec<Window>> {
    let seq = cfg.train.seq_len;
    let w = match &cfg.corpus.train {
        Some(p) => ingest_corpus(p, seq)?,
        None => windows(&tokenize(&synthetic_corpus(cfg.corpus.synthetic_len, cfg.corpus.synthetic_seed)), seq),
    };
    if w.is_empty() {
        return Err(Failure::usage(format!("training corpus is shorter than one window of {seq} tokens")));
    }
    Ok(w)
}

/// Held-out windows of `train.seq_len` tokens.
pub fn held_out_windows(cfg: &RunConfig) -> CliResult<Vec<Window>> {
    let seq = cfg.train.seq_len;
    let mut w = match &cfg.corpus.held_out {
        Some(p) => ingest_corpus(p, seq)?,
        None => windows(&tokenize(&synthetic_corpus(cfg.corpus.held_out_len, cfg.corpus.held_out_seed)), seq),
    };
    if let Some(max) = cfg.corpus.max_held_out_windows {
        w.truncate(max);
    }
    if w.is_empty() {
        return Err(Failure::usage(format!("held-out corpus is shorter than one window of {seq} tokens")));
    }
    Ok(w)
}

/// Label of the held-out source for report rows.
pub fn corpus_label(cfg: &RunConfig) -> String {
    match &cfg.corpus.held_out {
        Some(p) => p.display().to_string(),
        None => format!("synthetic-{}-{}", cfg.corpus.held_out_seed, cfg.corpus.held_out_len),
    }
}

pub struct Trained {
    pub model: Model,
    pub pretrain: Vec<StepMetrics>,
    pub history: Vec<StepMetrics>,
}

/// Optional pretraining stage, then the main stage, from a fresh model.
pub fn train_model(cfg: &RunConfig, mut on_step: impl FnMut(&str, &StepMetrics)) -> CliResult<Trained> {
    let data = train_windows(cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let pretrain = match &cfg.pretrain {
        Some(stage) => train::train(&mut model, &data, &stage.train, &stage.loss, |r| on_step("pretrain", r))?,
        None => Vec::new(),
    };
    let history = train::train(&mut model, &data, &cfg.train, &cfg.loss, |r| on_step("train", r))?;
    Ok(Trained {
        model,
        pretrain,
        history,
    })
}

fn progress(stage: &str, r: &StepMetrics) {
    if r.step % 100 == 0 {
        eprintln!(
            "{stage} step {:>5} lm {:.4} evict {:.4} retention {:.4}",
            r.step, r.lm_loss, r.evict_loss, r.mean_retention
        );
    }
}

pub fn cmd_train(common: &Common) -> CliResult<()> {
    let cfg = setup(common)?;
    let t = train_model(&cfg, progress)?;
    let out = &common.out;
    let n_layers = cfg.model.n_layers;
    if cfg.pretrain.is_some() {
        report::write_history(&t.pretrain, n_layers, create(&out.join("pretrain_metrics.csv"))?)?;
    }
    report::write_history(&t.history, n_layers, create(&out.join("metrics.csv"))?)?;
    checkpoint::save(&t.model, &out.join("model.ckpt"))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let tail = &t.history[t.history.len().saturating_sub(50)..];
    let mean = |f: fn(&StepMetrics) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "final lm_loss {:.4} mean eviction {:.4} ({} steps)",
        mean(|r| r.lm_loss),
        1.0 - mean(|r| r.mean_retention),
        t.history.len()
    );
    Ok(())
}

fn load_checkpoint(common: &Common, checkpoint: Option<PathBuf>) -> CliResult<Model> {
    let path = checkpoint.unwrap_or_else(|| common.out.join("model.ckpt"));
    if !path.is_file() {
        return Err(Failure::usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(checkpoint::load(&path)?)
}

/// Held-out windows checked against the checkpoint's context length.
fn eval_windows(cfg: &RunConfig, model: &Model) -> CliResult<Vec<Window>> {
    if cfg.train.seq_len > model.config.max_seq {
        return Err(Failure::usage(format!(
            "train.seq_len {} exceeds the checkpoint's max_seq {}",
            cfg.train.seq_len, model.config.max_seq
        )));
    }
    if cfg.train.seq_len < 2 {
        return Err(Failure::usage("train.seq_len must be at least 2 to evaluate"));
    }
    held_out_windows(cfg)
}

/// Policy names accepted by `--policy`.
pub const POLICY_NAMES: [&str; 6] = ["none", "ag", "streaming_llm", "h2o", "local", "random"];

pub fn parse_policies(names: &[String]) -> CliResult<Vec<String>> {
    let mut out = Vec::new();
    for raw in names {
        let name = raw.trim();
        if name == "all" {
            out.extend(POLICY_NAMES.iter().map(|s| s.to_string()));
        } else if POLICY_NAMES.contains(&name) {
            out.push(name.to_string());
        } else {
            return Err(Failure::usage(format!(
                "unknown policy `{name}` (expected one of {})",
                POLICY_NAMES.join(", ")
            )));
        }
    }
    if out.is_empty() {
        return Err(Failure::usage("no policies given"));
    }
    Ok(out)
}

/// The baseline `name` with `budget` retained prefill entries per head.
pub fn matched_policy(name: &str, budget: usize, sinks: usize, seed: u64) -> CliResult<PolicySpec> {
    let budget = budget.max(1);
    Ok(match name {
        "none" => PolicySpec::None,
        "ag" => PolicySpec::AttentionGate,
        "local" => PolicySpec::Local { window: budget },
        "h2o" => PolicySpec::H2o {
            budget,
            window: budget / 2,
        },
        "streaming_llm" => {
            let (sinks, window) = streaming_split(budget, sinks);
            PolicySpec::StreamingLlm { sinks, window }
        }
        "random" => PolicySpec::Random { budget, seed },
        other => return Err(Failure::usage(format!("unknown policy `{other}`"))),
    })
}

/// Evaluates the gate first, then every baseline at the gate's measured
/// eviction ratio.
pub fn bench(model: &Model, held: &[Window], cfg: &RunConfig, names: &[String], par: Parallelism) -> CliResult<Vec<BenchRow>> {
    let m = prompt_len(held[0].input.len());
    let ag = evaluate(model, held, &PolicySpec::AttentionGate, par)?;
    let budget = matched_budget(ag.eviction_ratio_mean, m);
    let corpus = corpus_label(cfg);
    names
        .iter()
        .map(|name| {
            let policy = matched_policy(name, budget, cfg.bench.sinks, cfg.seed)?;
            let (metrics, budget) = match policy {
                PolicySpec::AttentionGate => (ag.clone(), budget),
                PolicySpec::None => (evaluate(model, held, &policy, par)?, m),
                _ => (evaluate(model, held, &policy, par)?, budget.max(1)),
            };
            Ok(BenchRow {
                config: cfg.name.clone(),
                corpus: corpus.clone(),
                policy,
                budget,
                prompt_len: m,
                metrics,
            })
        })
        .collect()
}

fn print_rows(rows: &[BenchRow]) {
    for r in rows {
        println!(
            "{:<14} budget {:>3}/{:<3} eviction {:.4} perplexity {:.4}",
            r.policy.name(),
            r.budget,
            r.prompt_len,
            r.metrics.eviction_ratio_mean,
            r.metrics.perplexity
        );
    }
}

pub fn cmd_bench(common: &Common, checkpoint: Option<PathBuf>, policies: &[String]) -> CliResult<()> {
    let cfg = setup(common)?;
    let names = parse_policies(policies)?;
    let model = load_checkpoint(common, checkpoint)?;
    let held = eval_windows(&cfg, &model)?;
    let rows = bench(&model, &held, &cfg, &names, Parallelism::from_env())?;
    report::write_bench(&rows, create(&common.out.join("bench.csv"))?)?;
    print_rows(&rows);
    Ok(())
}

pub fn cmd_eval(common: &Common, checkpoint: Option<PathBuf>, policies: &[String]) -> CliResult<()> {
    let cfg = setup(common)?;
    let names = parse_policies(policies)?;
    let model = load_checkpoint(common, checkpoint)?;
    let held = eval_windows(&cfg, &model)?;
    let par = Parallelism::from_env();
    let rows = bench(&model, &held, &cfg, &names, par)?;
    print_rows(&rows);
    let ag = evaluate(&model, &held, &PolicySpec::AttentionGate, par)?;
    report::write_eviction(&ag.eviction_per_layer_head, create(&common.out.join("eviction.csv"))?)?;
    let trend = retention_trend(&model, &held, &cfg.bench.trend, par)?;
    report::write_trend(&trend, create(&common.out.join("trend.csv"))?)?;
    for p in &trend {
        println!("retention {:.2} perplexity {:.4}", p.retention, p.perplexity);
    }
    println!("trend violations {}", trend_violations(&trend));
    Ok(())
}

/// Writes eviction grids, pre-eviction attention heatmaps, flags and the
/// pruned cache for `tokens`. Returns the eviction ratio of each layer.
pub fn viz(model: &Model, tokens: &[TokenId], out: &Path) -> CliResult<Vec<f64>> {
    let cfg = &model.config;
    if tokens.is_empty() || tokens.len() > cfg.max_seq {
        return Err(Failure::usage(format!(
            "input has {} tokens; expected 1..={}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    let n = tokens.len();
    let gated = model.prefill(tokens, GateMode::Gated)?;
    let open = model.prefill(tokens, GateMode::Open)?;
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            eviction_grid(&gated.flags, l, h, n, cfg.n_heads, cfg.recent_window)?
                .write_pgm(create(&out.join(format!("evict_l{l}_h{h}.pgm")))?)?;
            attention_heatmap(&open.attention[l][h]).write_pgm(create(&out.join(format!("attention_l{l}_h{h}.pgm")))?)?;
        }
    }
    write_flags_csv(&gated.flags, create(&out.join("flags.csv"))?)?;
    write_cache_csv(&gated.cache, create(&out.join("cache.csv"))?)?;
    Ok(GateStats::from_flags([&gated.flags], cfg.n_layers, cfg.n_heads).per_layer_eviction)
}

pub fn cmd_viz(common: &Common, checkpoint: Option<PathBuf>, text: Option<String>, input: Option<PathBuf>) -> CliResult<()> {
    let cfg = setup(common)?;
    let model = load_checkpoint(common, checkpoint)?;
    let tokens = match (text, input) {
        (Some(t), _) => tokenize(&t),
        (None, Some(p)) => tokenize(
            &fs::read_to_string(&p).map_err(|e| Failure::usage(format!("input {}: {e}", p.display())))?,
        ),
        (None, None) => eval_windows(&cfg, &model)?.swap_remove(0).input,
    };
    let per_layer = viz(&model, &tokens, &common.out)?;
    for (l, e) in per_layer.iter().enumerate() {
        println!("layer {l} eviction {e:.4}");
    }
    Ok(())
}

pub fn cmd_gen_corpus(common: &Common) -> CliResult<()> {
    let cfg = setup(common)?;
    let c = &cfg.corpus;
    fs::write(common.out.join("train.txt"), synthetic_corpus(c.synthetic_len, c.synthetic_seed))?;
    fs::write(common.out.join("held_out.txt"), synthetic_corpus(c.held_out_len, c.held_out_seed))?;
    println!("wrote train.txt and held_out.txt to {}", common.out.display());
    Ok(())
}
