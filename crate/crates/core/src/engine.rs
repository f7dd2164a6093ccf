//! The workflow state machine: guidance retrieval, preprocessing, generation,
//! the score-gated edit loop, and learning from the finished run.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{AgentContext, AgentOptions};
use crate::backends::{
    edit_image, embed_text, generate_image, BackendSet, EmbeddingVector, GenerationParams,
    ImageArtifact, DEFAULT_GUIDANCE_SCALE, DEFAULT_NEGATIVE_WEIGHT,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_image, needs_edit, summarize, EvaluationReport, ScoreSummary};
use crate::guidance::{
    condense_trajectory, formulate_guidance, packet_entry, render_node_guidance, to_record,
    GuidancePacket, NodeGuidance,
};
use crate::memory::{KnowledgeBase, RankedHit, SharedKb, StoreId};
use crate::orchestrator::{Orchestrator, PromptBundle};
use crate::prompts::Templates;
use crate::trace::{DecisionNode, FullRunTrace, HitRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkflowConfig {
    pub tau: f64,
    pub max_edits: u32,
    pub retrieval_k: usize,
    pub activation_threshold: usize,
    pub guidance_scale: f64,
    pub negative_weight: f64,
    pub seed: u64,
    /// Total structured-output attempts per agent call.
    pub retries: u32,
    /// Recorded only; the pipeline never waits for a human.
    pub human_in_loop: bool,
    pub width: u32,
    pub height: u32,
    pub gen_model: String,
    pub edit_model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode: Option<String>,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            tau: 8.0,
            max_edits: 2,
            retrieval_k: 5,
            activation_threshold: 200,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            negative_weight: DEFAULT_NEGATIVE_WEIGHT,
            seed: 0,
            retries: 3,
            human_in_loop: false,
            width: 1024,
            height: 1024,
            gen_model: "Qwen-Image".into(),
            edit_model: "Qwen-Image-Edit".into(),
            episode: None,
        }
    }
}

impl WorkflowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau <= 10.0) {
            return bad(format!("tau must be in (0, 10], got {}", self.tau));
        }
        if self.retrieval_k < 1 {
            return bad("retrieval_k must be at least 1".into());
        }
        if self.activation_threshold < 1 {
            return bad("activation_threshold must be at least 1".into());
        }
        if self.retries < 1 {
            return bad("retries must be at least 1".into());
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale > 0.0) {
            return bad(format!("guidance_scale must be positive, got {}", self.guidance_scale));
        }
        if !(self.negative_weight.is_finite() && self.negative_weight >= 0.0) {
            return bad(format!("negative_weight must be >= 0, got {}", self.negative_weight));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        Ok(())
    }

    pub fn generation_params(&self) -> GenerationParams {
        GenerationParams {
            guidance_scale: self.guidance_scale,
            negative_weight: self.negative_weight,
            width: self.width,
            height: self.height,
        }
    }
}

/// Source of record timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// UTC ISO-8601 with millisecond precision.
pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub final_image: Arc<ImageArtifact>,
    pub bundle: PromptBundle,
    pub reports: Vec<EvaluationReport>,
    pub summaries: Vec<ScoreSummary>,
    pub edits_used: u32,
    pub trajectory_id_gen: Option<i64>,
    pub trajectory_id_edit: Option<i64>,
    pub guidance_active: bool,
    pub wall_time: Duration,
    pub trace: FullRunTrace,
}

impl RunResult {
    pub fn final_score(&self) -> f64 {
        self.summaries.last().map_or(0.0, |s| s.overall)
    }
}

pub fn guidance_active(kb: &KnowledgeBase, cfg: &WorkflowConfig) -> Result<bool> {
    Ok(kb.trajectory_count(StoreId::Gen)? >= cfg.activation_threshold)
}

/// Runs one prompt end to end with a fresh engine.
pub fn run_workflow(prompt: &str, cfg: &WorkflowConfig, kb: &SharedKb, backends: &BackendSet) -> Result<RunResult> {
    let engine = Engine::new(backends.clone(), kb.clone(), cfg.clone())?;
    engine.run(prompt, &default_run_id(prompt, cfg.seed))
}

/// Run id derived from the prompt and seed.
pub fn default_run_id(prompt: &str, seed: u64) -> String {
    let digest = crate::backends::hex_digest(format!("{seed}\u{0}{prompt}").as_bytes());
    format!("run-{}", &digest[..12])
}

/// Run ids name directories: ASCII letters, digits, `.`, `_` and `-`, not
/// starting with `.`.
pub fn validate_run_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "run id {id:?} must be non-empty ASCII letters, digits, '.', '_' or '-' and not start with '.'"
        )))
    }
}

#[derive(Clone)]
pub struct Engine {
    backends: BackendSet,
    kb: SharedKb,
    templates: Arc<Templates>,
    cfg: WorkflowConfig,
    clock: Arc<dyn Clock>,
    quarantine_dir: PathBuf,
}

struct Packets {
    workflow_text: String,
    gen: Option<GuidancePacket>,
    edit: Option<GuidancePacket>,
}

impl Packets {
    fn node(&self, node: DecisionNode, edit_phase: bool) -> Result<NodeGuidance> {
        fn pick(p: &Option<GuidancePacket>, node: DecisionNode) -> Option<&GuidancePacket> {
            p.as_ref().filter(|p| packet_entry(p.kind(), node).is_some())
        }
        let packet = if edit_phase {
            pick(&self.edit, node).or_else(|| pick(&self.gen, node))
        } else {
            pick(&self.gen, node)
        };
        render_node_guidance(&self.workflow_text, packet, node)
    }
}

impl Engine {
    pub fn new(backends: BackendSet, kb: SharedKb, cfg: WorkflowConfig) -> Result<Self> {
        cfg.validate()?;
        let quarantine_dir = kb.lock().unwrap().dir().join("quarantine");
        kb.lock().unwrap().set_max_edits(cfg.max_edits);
        Ok(Self {
            backends,
            kb,
            templates: Arc::new(Templates::builtin()),
            cfg,
            clock: Arc::new(SystemClock),
            quarantine_dir,
        })
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_quarantine_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.quarantine_dir = dir.into();
        self
    }

    pub fn config(&self) -> &WorkflowConfig {
        &self.cfg
    }

    pub fn kb(&self) -> &SharedKb {
        &self.kb
    }

    pub fn quarantine_dir(&self) -> &Path {
        &self.quarantine_dir
    }

    fn context(&self, seed: u64) -> AgentContext {
        AgentContext::new(
            self.backends.chat.clone(),
            self.templates.clone(),
            AgentOptions {
                seed: Some(seed),
                repair_attempts: self.cfg.retries,
                ..Default::default()
            },
        )
    }

    pub fn guidance_active(&self) -> Result<bool> {
        guidance_active(&self.kb.lock().unwrap(), &self.cfg)
    }

    pub fn run(&self, prompt: &str, run_id: &str) -> Result<RunResult> {
        self.run_with_seed(prompt, run_id, self.cfg.seed)
    }

    /// Runs the workflow for one prompt. On failure the partial trace is
    /// written to the quarantine directory and nothing reaches the
    /// knowledge base.
    pub fn run_with_seed(&self, prompt: &str, run_id: &str, seed: u64) -> Result<RunResult> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        validate_run_id(run_id)?;
        let started = Instant::now();
        let mut cfg = self.cfg.clone();
        cfg.seed = seed;
        let config_json = serde_json::to_value(&cfg).expect("config serializes");
        let mut trace = FullRunTrace::new(run_id, prompt, seed, config_json);
        match self.execute(prompt, seed, &mut trace) {
            Ok((final_image, embedding)) => {
                let (gen_id, edit_id) = self.finalize_and_learn(&trace, embedding)?;
                Ok(RunResult {
                    run_id: run_id.to_string(),
                    final_image,
                    bundle: trace.bundle.clone().expect("completed run has a bundle"),
                    reports: trace.reports.clone(),
                    summaries: trace.summaries.clone(),
                    edits_used: trace.edits_used,
                    trajectory_id_gen: gen_id,
                    trajectory_id_edit: edit_id,
                    guidance_active: trace.guidance.active,
                    wall_time: started.elapsed(),
                    trace,
                })
            }
            Err(e) => {
                trace.error = Some(format!("{}: {e}", e.kind()));
                // the original error matters more than a failed quarantine write
                let _ = self.quarantine(&trace);
                Err(e)
            }
        }
    }

    fn execute(
        &self,
        prompt: &str,
        seed: u64,
        trace: &mut FullRunTrace,
    ) -> Result<(Arc<ImageArtifact>, Option<EmbeddingVector>)> {
        let ctx = self.context(seed);
        let orch = Orchestrator::new(ctx.clone());
        let params = self.cfg.generation_params();
        let (active, dim) = {
            let kb = self.kb.lock().unwrap();
            (guidance_active(&kb, &self.cfg)?, kb.dim())
        };
        trace.guidance.active = active;

        let mut embedding = None;
        let mut packets = Packets {
            workflow_text: self.templates.workflow_guidance().to_string(),
            gen: None,
            edit: None,
        };
        if active {
            let q = embed_text(self.backends.embed.as_ref(), prompt, dim)?;
            let hits = self.retrieve(StoreId::Gen, &q)?;
            trace.guidance.gen_hits = hit_refs(&hits);
            if !hits.is_empty() {
                packets.gen = Some(formulate_guidance(&ctx, prompt, &hits, StoreId::Gen)?);
                trace.guidance.gen_packet = packets.gen.clone();
            }
            embedding = Some(q);
        }

        let g = |node| packets.node(node, false);
        let creativity = orch.assess_creativity(prompt, &g(DecisionNode::Creativity)?)?;
        trace.record(
            DecisionNode::Creativity,
            0,
            json!({ "prompt": prompt }),
            to_value(&creativity),
            None,
        );
        let spec = orch.analyze_intent(prompt, &creativity, &g(DecisionNode::Intent)?)?;
        trace.record(
            DecisionNode::Intent,
            0,
            json!({ "prompt": prompt, "creativity_level": creativity.level }),
            to_value(&spec),
            None,
        );
        let positive = orch.refine_prompt(prompt, creativity.level, &spec, &g(DecisionNode::Refine)?)?;
        trace.record(
            DecisionNode::Refine,
            0,
            json!({ "prompt": prompt, "creativity_level": creativity.level }),
            to_value(&positive),
            None,
        );
        let negative = orch.build_negative_prompt(prompt, &positive, &g(DecisionNode::Negative)?)?;
        trace.record(
            DecisionNode::Negative,
            0,
            json!({ "prompt": prompt, "refined_prompt": positive.text }),
            to_value(&negative),
            None,
        );
        let mut bundle = PromptBundle {
            original: prompt.to_string(),
            creativity,
            spec,
            positive,
            negative,
        };

        // Generation takes no guidance input; its packet entry still reaches
        // the trace through the guidance record.
        let mut image = Arc::new(generate_image(
            self.backends.gen.as_ref(),
            &bundle.positive.text,
            &bundle.negative.text,
            seed,
            &params,
        )?);
        let index = trace.push_image(image.clone());
        trace.record(
            DecisionNode::Generate,
            0,
            json!({
                "positive_prompt": bundle.positive.text,
                "negative_prompt": bundle.negative.text,
                "seed": seed,
                "guidance_scale": params.guidance_scale,
            }),
            json!({ "image": index, "sha256": image.sha256_hex() }),
            None,
        );
        let mut summary = self.evaluate(&ctx, &image, &bundle, &packets, 0, trace)?;

        let mut edits = 0u32;
        let mut edit_packet_tried = false;
        loop {
            let below = needs_edit(&summary, self.cfg.tau);
            let edit = below && edits < self.cfg.max_edits;
            trace.record(
                DecisionNode::EditDecision,
                edits,
                json!({ "overall": summary.overall, "tau": self.cfg.tau, "edits_used": edits, "max_edits": self.cfg.max_edits }),
                json!({ "edit": edit }),
                Some(summary.overall),
            );
            if !edit {
                break;
            }
            let cycle = edits + 1;
            if active && !edit_packet_tried {
                edit_packet_tried = true;
                let q = embedding.as_ref().expect("embedding computed when active");
                let hits = self.retrieve(StoreId::Edit, q)?;
                trace.guidance.edit_hits = hit_refs(&hits);
                if !hits.is_empty() {
                    packets.edit = Some(formulate_guidance(&ctx, prompt, &hits, StoreId::Edit)?);
                    trace.guidance.edit_packet = packets.edit.clone();
                }
            }
            let report = trace.last_report().expect("evaluated").clone();
            let (positive, negative) = orch.synthesize_edit_instruction(
                &bundle,
                &report,
                &packets.node(DecisionNode::Refine, true)?,
                &packets.node(DecisionNode::Negative, true)?,
            )?;
            trace.record(
                DecisionNode::Refine,
                cycle,
                json!({
                    "previous_refined_prompt": bundle.positive.text,
                    "improvement_suggestions": report.improvement_suggestions,
                    "missing_elements": report.missing_elements,
                }),
                to_value(&positive),
                None,
            );
            trace.record(
                DecisionNode::Negative,
                cycle,
                json!({
                    "previous_negative_prompt": bundle.negative.text,
                    "detected_artifacts": report.artifacts.detected_artifacts,
                }),
                to_value(&negative),
                None,
            );
            bundle.positive = positive;
            bundle.negative = negative;

            let base = image.clone();
            image = Arc::new(edit_image(
                self.backends.edit.as_ref(),
                Some(&base),
                &bundle.positive.text,
                &bundle.negative.text,
                seed,
                &params,
            )?);
            let index = trace.push_image(image.clone());
            trace.record(
                DecisionNode::Edit,
                cycle,
                json!({
                    "base_image": index - 1,
                    "instruction": bundle.positive.text,
                    "negative_prompt": bundle.negative.text,
                    "seed": seed,
                }),
                json!({ "image": index, "sha256": image.sha256_hex() }),
                None,
            );
            edits = cycle;
            trace.edits_used = edits;
            summary = self.evaluate(&ctx, &image, &bundle, &packets, cycle, trace)?;
        }

        trace.bundle = Some(bundle);
        trace.completed = true;
        Ok((image, embedding))
    }

    fn evaluate(
        &self,
        ctx: &AgentContext,
        image: &ImageArtifact,
        bundle: &PromptBundle,
        packets: &Packets,
        cycle: u32,
        trace: &mut FullRunTrace,
    ) -> Result<ScoreSummary> {
        let g = packets.node(DecisionNode::Evaluate, cycle > 0)?;
        let report = evaluate_image(ctx, image, &bundle.original, &bundle.positive.text, &g)?;
        let summary = summarize(&report);
        trace.record(
            DecisionNode::Evaluate,
            cycle,
            json!({ "image": trace.images.len() - 1, "refined_prompt": bundle.positive.text }),
            json!({ "report": report, "summary": summary }),
            Some(summary.overall),
        );
        trace.reports.push(report);
        trace.summaries.push(summary);
        Ok(summary)
    }

    fn retrieve(&self, store: StoreId, q: &EmbeddingVector) -> Result<Vec<RankedHit>> {
        self.kb
            .lock()
            .unwrap()
            .retrieve_similar(store, q, self.cfg.retrieval_k)
    }

    /// Condenses the run per image model, appends the records (GEN always,
    /// EDIT iff the run edited) and indexes the original-prompt embedding.
    /// A condensation failure quarantines the trace and stores nothing.
    pub fn finalize_and_learn(
        &self,
        trace: &FullRunTrace,
        embedding: Option<EmbeddingVector>,
    ) -> Result<(Option<i64>, Option<i64>)> {
        if !trace.completed {
            return Err(Error::Precondition("cannot learn from an incomplete run".into()));
        }
        let ctx = self.context(trace.seed);
        let mut stores = vec![(StoreId::Gen, self.cfg.gen_model.as_str())];
        if trace.edits_used > 0 {
            stores.push((StoreId::Edit, self.cfg.edit_model.as_str()));
        }
        let mut analyses = Vec::new();
        for (store, model) in &stores {
            match condense_trajectory(&ctx, trace, *store, model) {
                Ok(a) => analyses.push((*store, a)),
                Err(e) => {
                    let mut failed = trace.clone();
                    failed.error = Some(format!("condensation failed: {}: {e}", e.kind()));
                    self.quarantine(&failed)?;
                    return Ok((None, None));
                }
            }
        }
        let dim = self.kb.lock().unwrap().dim();
        let embedding = match embedding {
            Some(e) => e,
            None => embed_text(self.backends.embed.as_ref(), &trace.prompt, dim)?,
        };
        let timestamp = format_timestamp(self.clock.now());
        let records = analyses
            .iter()
            .map(|(store, a)| Ok((*store, to_record(trace, a, *store, timestamp.clone())?)))
            .collect::<Result<Vec<_>>>()?;

        let mut kb = self.kb.lock().unwrap();
        let mut ids = (None, None);
        for (store, rec) in records {
            let id = kb.append_trajectory(store, &rec)?;
            kb.index_embedding(store, id, &embedding)?;
            match store {
                StoreId::Gen => ids.0 = Some(id),
                StoreId::Edit => ids.1 = Some(id),
            }
        }
        Ok(ids)
    }

    fn quarantine(&self, trace: &FullRunTrace) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.quarantine_dir)?;
        let stamp = self.clock.now().format("%Y%m%dT%H%M%S%.3fZ");
        let name: String = trace
            .run_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let path = self.quarantine_dir.join(format!("{stamp}_{name}.json"));
        let text = serde_json::to_string_pretty(trace).expect("trace serializes");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable output")
}

fn hit_refs(hits: &[RankedHit]) -> Vec<HitRef> {
    hits.iter()
        .map(|h| HitRef {
            id: h.id(),
            similarity: h.similarity,
        })
        .collect()
}

/// Writes `{root}/runs/{run_id}/` with every image, the trace and the
/// evaluation reports. Returns the run directory.
pub fn write_run_manifest(root: &Path, result: &RunResult) -> Result<PathBuf> {
    let dir = root.join("runs").join(&result.run_id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("final.png"), &result.final_image.bytes)?;
    for (rec, art) in result.trace.images.iter().zip(&result.trace.artifacts) {
        std::fs::write(dir.join(&rec.file), &art.bytes)?;
    }
    let trace = serde_json::to_string_pretty(&result.trace).expect("trace serializes");
    std::fs::write(dir.join("trace.json"), trace + "\n")?;
    let reports = serde_json::to_string_pretty(&result.reports).expect("reports serialize");
    std::fs::write(dir.join("reports.json"), reports + "\n")?;
    Ok(dir)
}
