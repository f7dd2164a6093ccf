//! The `sidiff` command line.
//!
//! Machine output is one JSON object per line on stdout. Failures print a
//! `{"kind", "message"}` object on stderr.

use std::collections::HashSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::agent::{AgentContext, AgentOptions};
use crate::backends::embed_text;
use crate::config::{CliConfig, Overrides};
use crate::engine::{
    default_run_id, guidance_active, validate_run_id, write_run_manifest, Engine, RunResult,
};
use crate::error::{Error, Result};
use crate::guidance::{judge_retrieval, mean_score, JudgeMode};
use crate::memory::{KnowledgeBase, SharedKb, StoreId};
use crate::prompts::Templates;

#[derive(Debug, Parser)]
#[command(name = "sidiff", version, about = "Self-improving prompt-to-image workflow")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Knowledge base directory.
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    /// Use deterministic in-process backends; no network access.
    #[arg(long, global = true)]
    pub mock: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub max_edits: Option<u32>,
    /// Retrieval depth. `eval-retrieval` accepts a comma-separated sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Episode label recorded with every stored trajectory.
    #[arg(long, global = true)]
    pub episode: Option<String>,
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Output root for run manifests, quarantine and batch summaries.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overall scores the mock evaluator returns in order, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub mock_scores: Vec<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one prompt.
    Run {
        prompt: String,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Run every prompt of a JSONL spec ({id, prompt, seed?} per line).
    Batch { spec: PathBuf },
    /// Inspect or export the knowledge base.
    Memory {
        #[command(subcommand)]
        command: MemoryCommand,
    },
    /// Judge retrieval quality for the queries in a file (one per line).
    EvalRetrieval {
        queries: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value = "gen")]
        store: StoreId,
    },
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    /// Per-store counts and guidance activation.
    Stats,
    /// Write one store as JSONL.
    Export {
        #[arg(long, default_value = "gen")]
        store: StoreId,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Group,
    Individual,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<JudgeMode> {
        match self {
            ModeArg::Group => vec![JudgeMode::Group],
            ModeArg::Individual => vec![JudgeMode::Individual],
            ModeArg::Both => vec![JudgeMode::Group, JudgeMode::Individual],
        }
    }
}

/// Exit status for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::EmptyPrompt
        | Error::DuplicateId(_)
        | Error::NeedsTrajectories
        | Error::Config(_)
        | Error::DimensionMismatch { .. } => 2,
        _ => 1,
    }
}

pub fn error_json(e: &Error) -> Value {
    json!({"kind": e.kind(), "message": e.to_string()})
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(stderr, "{e}");
            return code;
        }
    };
    match execute(&cli, |k| std::env::var(k).ok(), stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_json(&e));
            exit_code(&e)
        }
    }
}

fn overrides(g: &GlobalArgs) -> Overrides {
    Overrides {
        kb: g.kb.clone(),
        out: g.out.clone(),
        mock: g.mock,
        mock_scores: (!g.mock_scores.is_empty()).then(|| g.mock_scores.clone()),
        seed: g.seed,
        tau: g.tau,
        max_edits: g.max_edits,
        k: g.k.first().copied(),
        episode: g.episode.clone(),
        concurrency: g.concurrency,
    }
}

pub fn execute(
    cli: &Cli,
    env: impl Fn(&str) -> Option<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32> {
    let cfg = CliConfig::resolve(cli.global.config.as_deref(), env, &overrides(&cli.global))?;
    let single_k = || -> Result<()> {
        if cli.global.k.len() > 1 {
            return Err(Error::Config("--k takes a list only for eval-retrieval".into()));
        }
        Ok(())
    };
    match &cli.command {
        Command::Run { prompt, run_id } => {
            single_k()?;
            cmd_run(&cfg, prompt, run_id.as_deref(), stdout)
        }
        Command::Batch { spec } => {
            single_k()?;
            cmd_batch(&cfg, spec, stdout, stderr)
        }
        Command::Memory { command } => match command {
            MemoryCommand::Stats => cmd_memory_stats(&cfg, stdout),
            MemoryCommand::Export { store, output } => cmd_memory_export(&cfg, *store, output, stdout),
        },
        Command::EvalRetrieval { queries, mode, store } => {
            let ks = if cli.global.k.is_empty() {
                vec![cfg.workflow.retrieval_k]
            } else {
                cli.global.k.clone()
            };
            cmd_eval_retrieval(&cfg, queries, &ks, *mode, *store, stdout)
        }
    }
}

fn emit(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{v}")?;
    Ok(())
}

fn templates(cfg: &CliConfig) -> Result<Templates> {
    match &cfg.templates_dir {
        Some(dir) => Templates::load_dir(dir),
        None => Ok(Templates::builtin()),
    }
}

fn open_kb(cfg: &CliConfig) -> Result<SharedKb> {
    Ok(KnowledgeBase::open(&cfg.kb, cfg.embed_dim())?.into_shared())
}

fn engine(cfg: &CliConfig, kb: &SharedKb, templates: &Templates) -> Result<Engine> {
    Ok(Engine::new(cfg.backends()?, kb.clone(), cfg.workflow.clone())?
        .with_templates(templates.clone())
        .with_quarantine_dir(cfg.quarantine_dir()))
}

fn result_json(r: &RunResult, manifest: &Path) -> Value {
    json!({
        "run_id": r.run_id,
        "score": r.final_score(),
        "edits_used": r.edits_used,
        "trajectory_id_gen": r.trajectory_id_gen,
        "trajectory_id_edit": r.trajectory_id_edit,
        "guidance_active": r.guidance_active,
        "manifest": manifest.display().to_string(),
    })
}

fn cmd_run(cfg: &CliConfig, prompt: &str, run_id: Option<&str>, out: &mut dyn Write) -> Result<i32> {
    if prompt.trim().is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let run_id = run_id.map_or_else(|| default_run_id(prompt, cfg.workflow.seed), str::to_string);
    validate_run_id(&run_id)?;
    let kb = open_kb(cfg)?;
    let engine = engine(cfg, &kb, &templates(cfg)?)?;
    let result = engine.run(prompt, &run_id)?;
    let manifest = write_run_manifest(&cfg.out, &result)?;
    let mut line = result_json(&result, &manifest);
    line["config"] = serde_json::to_value(&cfg.workflow).expect("config serializes");
    emit(out, &line)?;
    Ok(0)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct BatchItem {
    #[serde(deserialize_with = "id_string")]
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn id_string<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("id must be a string or number, got {other}"))),
    }
}

/// Reads and validates a batch spec: ids unique and usable as directory names.
pub fn read_batch_spec(path: &Path) -> Result<Vec<BatchItem>> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: BatchItem = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        validate_run_id(&item.id)?;
        if !seen.insert(item.id.clone()) {
            return Err(Error::DuplicateId(item.id));
        }
        items.push(item);
    }
    Ok(items)
}

fn cmd_batch(cfg: &CliConfig, spec: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let items = read_batch_spec(spec)?;
    let kb = open_kb(cfg)?;
    let templates = templates(cfg)?;
    // fail on backend misconfiguration before any run starts
    cfg.backends()?;
    let results: Vec<Mutex<Option<Result<Value>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.concurrency.min(items.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let outcome = engine(cfg, &kb, &templates).and_then(|e| {
                    let r = e.run_with_seed(&item.prompt, &item.id, item.seed.unwrap_or(cfg.workflow.seed))?;
                    let manifest = write_run_manifest(&cfg.out, &r)?;
                    Ok(result_json(&r, &manifest))
                });
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    std::fs::create_dir_all(&cfg.out)?;
    let mut summary = String::new();
    let mut failures = 0;
    for (item, slot) in items.iter().zip(results) {
        let line = match slot.into_inner().unwrap().expect("every item ran") {
            Ok(v) => json!({
                "id": item.id,
                "score": v["score"],
                "edits": v["edits_used"],
                "trajectory_id_gen": v["trajectory_id_gen"],
                "trajectory_id_edit": v["trajectory_id_edit"],
                "guidance_active": v["guidance_active"],
            }),
            Err(e) => {
                failures += 1;
                let mut ej = error_json(&e);
                ej["id"] = json!(item.id);
                writeln!(err, "{ej}")?;
                json!({"id": item.id, "error": error_json(&e)})
            }
        };
        summary.push_str(&line.to_string());
        summary.push('\n');
    }
    std::fs::write(cfg.out.join("summary.jsonl"), &summary)?;
    out.write_all(summary.as_bytes())?;
    Ok(if failures > 0 { 1 } else { 0 })
}

fn cmd_memory_stats(cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    let kb = KnowledgeBase::open_existing(&cfg.kb)?;
    let gen = kb.trajectory_count(StoreId::Gen)?;
    let edit = kb.trajectory_count(StoreId::Edit)?;
    emit(
        out,
        &json!({
            "kb": cfg.kb.display().to_string(),
            "gen": gen,
            "edit": edit,
            "dim": kb.dim(),
            "activation_threshold": cfg.workflow.activation_threshold,
            "active": guidance_active(&kb, &cfg.workflow)?,
        }),
    )?;
    Ok(0)
}

fn cmd_memory_export(cfg: &CliConfig, store: StoreId, path: &Path, out: &mut dyn Write) -> Result<i32> {
    let kb = KnowledgeBase::open_existing(&cfg.kb)?;
    let n = kb.export_trajectories(store, path)?;
    emit(out, &json!({"store": store, "exported": n, "path": path.display().to_string()}))?;
    Ok(0)
}

fn read_queries(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| match serde_json::from_str::<Value>(l) {
            Ok(Value::Object(m)) => m
                .get("prompt")
                .or_else(|| m.get("query"))
                .and_then(Value::as_str)
                .unwrap_or(l)
                .to_string(),
            _ => l.to_string(),
        })
        .collect())
}

fn mode_name(m: JudgeMode) -> &'static str {
    match m {
        JudgeMode::Group => "group",
        JudgeMode::Individual => "individual",
    }
}

fn cmd_eval_retrieval(
    cfg: &CliConfig,
    queries: &Path,
    ks: &[usize],
    mode: ModeArg,
    store: StoreId,
    out: &mut dyn Write,
) -> Result<i32> {
    if let Some(k) = ks.iter().find(|k| **k == 0) {
        return Err(Error::Config(format!("k must be at least 1, got {k}")));
    }
    let queries = read_queries(queries)?;
    let kb = KnowledgeBase::open_existing(&cfg.kb).map_err(|e| match e {
        Error::Io(_) => Error::NeedsTrajectories,
        other => other,
    })?;
    if kb.trajectory_count(store)? == 0 {
        return Err(Error::NeedsTrajectories);
    }
    let backends = cfg.backends()?;
    let ctx = AgentContext::new(
        backends.chat.clone(),
        Arc::new(templates(cfg)?),
        AgentOptions {
            seed: Some(cfg.workflow.seed),
            repair_attempts: cfg.workflow.retries,
            ..Default::default()
        },
    );
    let mut failures = 0;
    for &k in ks {
        let modes = mode.modes();
        let mut per_mode: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
        for q in &queries {
            let hits = embed_text(backends.embed.as_ref(), q, kb.dim()).and_then(|v| kb.retrieve_similar(store, &v, k));
            let hits = match hits {
                Ok(h) => h,
                Err(e) => {
                    failures += 1;
                    emit(out, &json!({"query": q, "k": k, "error": error_json(&e)}))?;
                    continue;
                }
            };
            let mut line = json!({
                "query": q,
                "k": k,
                "hits": hits.iter().map(|h| json!({"id": h.id(), "similarity": h.similarity})).collect::<Vec<_>>(),
            });
            for (slot, m) in modes.iter().enumerate() {
                let key = format!("{}_score", mode_name(*m));
                match judge_retrieval(&ctx, q, &hits, *m) {
                    Ok(scores) => {
                        let mean = mean_score(&scores);
                        per_mode[slot].push(mean);
                        line[key] = json!(mean);
                    }
                    Err(e) => {
                        failures += 1;
                        line[key] = Value::Null;
                        line[format!("{}_error", mode_name(*m))] = error_json(&e);
                    }
                }
            }
            emit(out, &line)?;
        }
        let mut agg = json!({"aggregate": true, "k": k, "store": store, "queries": queries.len()});
        for (m, scores) in modes.iter().zip(&per_mode) {
            let mean = if scores.is_empty() {
                Value::Null
            } else {
                json!(scores.iter().sum::<f64>() / scores.len() as f64)
            };
            agg[format!("{}_mean", mode_name(*m))] = mean;
            agg[format!("{}_judged", mode_name(*m))] = json!(scores.len());
        }
        emit(out, &agg)?;
    }
    Ok(if failures > 0 { 1 } else { 0 })
}
