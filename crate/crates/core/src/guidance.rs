//! Self-improvement from past runs: trajectory condensation, guidance
//! formulation from retrieved neighbors, per-node guidance rendering, and the
//! retrieval-quality judge.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::agent::AgentContext;
use crate::backends::schema::{lenient_string, value_to_f64, value_to_text, Checked};
use crate::backends::SchemaId;
use crate::error::{Error, Result};
use crate::memory::{RankedHit, StoreId, TrajectoryRecord};
use crate::prompts::{SlotMap, TemplateId};
use crate::trace::{DecisionNode, FullRunTrace};

/// Keys of the trajectory-analysis maps.
pub const ANALYSIS_STEP_KEYS: [&str; 6] = [
    "creativity_level",
    "intention_analysis",
    "prompt_refinement",
    "negative_prompt",
    "generation",
    "evaluation",
];

/// `step_analysis` keys of a generation-model guidance packet.
pub const GEN_STEP_KEYS: [&str; 7] = [
    "creativity_level_determination",
    "intention_analysis",
    "prompt_refinement",
    "negative_model_selection",
    "image_generation",
    "quality_evaluation",
    "regeneration_decision",
];

/// `step_analysis` keys of an edit-model guidance packet.
pub const EDIT_STEP_KEYS: [&str; 2] = ["image_editing", "quality_evaluation"];

pub const SELECTION_REASONING: &str = "fixed generate/edit pipeline";
pub const DEFAULT_CONFIDENCE: f64 = 5.0;

fn lenient_score_map<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, f64>, D::Error> {
    let m = Map::<String, Value>::deserialize(d)?;
    m.into_iter()
        .map(|(k, v)| {
            value_to_f64(&v)
                .map(|x| (k.clone(), x))
                .ok_or_else(|| serde::de::Error::custom(format!("step_scores.{k}: expected a number, got {v}")))
        })
        .collect()
}

fn lenient_text_map<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, String>, D::Error> {
    let m = Map::<String, Value>::deserialize(d)?;
    Ok(m.into_iter().map(|(k, v)| (k, value_to_text(&v))).collect())
}

fn lenient_score<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    crate::backends::schema::lenient_f64(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAnalysis {
    #[serde(deserialize_with = "lenient_string")]
    pub trajectory_reasoning: String,
    #[serde(deserialize_with = "lenient_score_map")]
    pub step_scores: BTreeMap<String, f64>,
    #[serde(deserialize_with = "lenient_text_map")]
    pub successes: BTreeMap<String, String>,
    #[serde(deserialize_with = "lenient_text_map")]
    pub pitfalls: BTreeMap<String, String>,
    #[serde(deserialize_with = "lenient_score")]
    pub overall_rating: f64,
}

fn exact_keys<'a>(field: &str, got: impl Iterator<Item = &'a String>, want: &[&str]) -> std::result::Result<(), String> {
    let got: BTreeSet<&str> = got.map(String::as_str).collect();
    let want: BTreeSet<&str> = want.iter().copied().collect();
    if got != want {
        return Err(format!("{field} has keys {got:?}, expected exactly {want:?}"));
    }
    Ok(())
}

impl Checked for TrajectoryAnalysis {
    fn check(&self) -> std::result::Result<(), String> {
        exact_keys("step_scores", self.step_scores.keys(), &ANALYSIS_STEP_KEYS)?;
        exact_keys("successes", self.successes.keys(), &ANALYSIS_STEP_KEYS)?;
        exact_keys("pitfalls", self.pitfalls.keys(), &ANALYSIS_STEP_KEYS)?;
        for (k, v) in &self.step_scores {
            if !(1.0..=10.0).contains(v) {
                return Err(format!("step_scores.{k} = {v} is outside [1, 10]"));
            }
        }
        if !(1.0..=10.0).contains(&self.overall_rating) {
            return Err(format!("overall_rating {} is outside [1, 10]", self.overall_rating));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepGuidance {
    #[serde(default, deserialize_with = "lenient_string")]
    pub success_patterns: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub failure_patterns: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub impact_on_next: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub preventive_guidance: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub recommended_score: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkflowInsights {
    #[serde(default, deserialize_with = "lenient_string")]
    pub critical_dependencies: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub common_failure_chains: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub success_combinations: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub overall_rating_prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidancePacket {
    pub step_analysis: BTreeMap<String, StepGuidance>,
    #[serde(default)]
    pub workflow_insights: WorkflowInsights,
}

impl Checked for GuidancePacket {}

impl GuidancePacket {
    /// Checks that the step keys are exactly those of `kind`.
    pub fn check_kind(&self, kind: StoreId) -> std::result::Result<(), String> {
        exact_keys("step_analysis", self.step_analysis.keys(), step_keys(kind))
    }

    pub fn kind(&self) -> StoreId {
        if self.step_analysis.contains_key("image_editing") {
            StoreId::Edit
        } else {
            StoreId::Gen
        }
    }
}

pub fn step_keys(kind: StoreId) -> &'static [&'static str] {
    match kind {
        StoreId::Gen => &GEN_STEP_KEYS,
        StoreId::Edit => &EDIT_STEP_KEYS,
    }
}

/// The packet entry that guides `node`, or `None` if the packet kind does not
/// cover it.
pub fn packet_entry(kind: StoreId, node: DecisionNode) -> Option<&'static str> {
    use DecisionNode::*;
    match (kind, node) {
        (StoreId::Gen, Creativity) => Some("creativity_level_determination"),
        (StoreId::Gen, Intent) => Some("intention_analysis"),
        (StoreId::Gen, Refine) => Some("prompt_refinement"),
        (StoreId::Gen, Negative) => Some("negative_model_selection"),
        (StoreId::Gen, Generate) => Some("image_generation"),
        (StoreId::Gen, Evaluate) => Some("quality_evaluation"),
        (StoreId::Gen, EditDecision) => Some("regeneration_decision"),
        (StoreId::Edit, Edit) => Some("image_editing"),
        (StoreId::Edit, Evaluate) => Some("quality_evaluation"),
        _ => None,
    }
}

/// Guidance injected into one agent call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeGuidance {
    pub workflow_text: String,
    pub corrective_text: String,
}

impl NodeGuidance {
    pub fn static_only(workflow_text: &str) -> Self {
        Self {
            workflow_text: workflow_text.to_string(),
            corrective_text: String::new(),
        }
    }
}

fn push_line(out: &mut String, label: &str, text: &str) {
    if !text.trim().is_empty() {
        let _ = writeln!(out, "- {label}: {}", text.trim());
    }
}

/// Renders the guidance for `node`: the static workflow text plus, when a
/// packet is present, the node's entry and the packet's workflow insights.
pub fn render_node_guidance(
    workflow_text: &str,
    packet: Option<&GuidancePacket>,
    node: DecisionNode,
) -> Result<NodeGuidance> {
    if workflow_text.trim().is_empty() {
        return Err(Error::Precondition("workflow guidance text is empty".into()));
    }
    let Some(packet) = packet else {
        return Ok(NodeGuidance::static_only(workflow_text));
    };
    let kind = packet.kind();
    let key = packet_entry(kind, node).ok_or_else(|| {
        Error::UnknownNode(format!("{node} has no entry in a {kind} guidance packet"))
    })?;
    let entry = packet.step_analysis.get(key).cloned().unwrap_or_default();
    let mut out = format!("CORRECTIVE GUIDANCE FROM SIMILAR PAST RUNS ({key}):\n");
    push_line(&mut out, "Success patterns", &entry.success_patterns);
    push_line(&mut out, "Failure patterns", &entry.failure_patterns);
    push_line(&mut out, "Impact on next step", &entry.impact_on_next);
    push_line(&mut out, "Preventive guidance", &entry.preventive_guidance);
    push_line(&mut out, "Recommended target score", &entry.recommended_score);
    let wi = &packet.workflow_insights;
    let mut insights = String::new();
    push_line(&mut insights, "Critical dependencies", &wi.critical_dependencies);
    push_line(&mut insights, "Common failure chains", &wi.common_failure_chains);
    push_line(&mut insights, "Success combinations", &wi.success_combinations);
    push_line(&mut insights, "Predicted overall rating", &wi.overall_rating_prediction);
    if !insights.is_empty() {
        out.push_str("WORKFLOW INSIGHTS:\n");
        out.push_str(&insights);
    }
    Ok(NodeGuidance {
        workflow_text: workflow_text.to_string(),
        corrective_text: out.trim_end().to_string(),
    })
}

fn describe_run(trace: &FullRunTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "The prompt passed through creativity analysis, intention analysis, prompt refinement and negative prompt construction, then one image was generated and evaluated."
    );
    for (i, s) in trace.summaries.iter().enumerate() {
        if i == 0 {
            let _ = writeln!(
                out,
                "Initial generation scored {:.2} (aesthetic {:.2}, alignment {:.2}).",
                s.overall, s.aesthetic_mean, s.alignment_mean
            );
        } else {
            let _ = writeln!(
                out,
                "Edit {i} rewrote the prompts from the evaluator's feedback, edited the previous image and scored {:.2} (aesthetic {:.2}, alignment {:.2}).",
                s.overall, s.aesthetic_mean, s.alignment_mean
            );
        }
    }
    let verdict = if trace.edits_used == 0 {
        "accepted without editing".to_string()
    } else {
        format!("finished after {} edit(s)", trace.edits_used)
    };
    let _ = write!(out, "The run {verdict}.");
    out
}

/// Binds the trajectory-analysis template slots for a finished run.
pub fn trajectory_slots(trace: &FullRunTrace, kind: StoreId, model_name: &str) -> Result<SlotMap> {
    let bundle = trace
        .bundle
        .as_ref()
        .ok_or_else(|| Error::Precondition("trace has no prompt bundle".into()))?;
    let first = trace
        .images
        .first()
        .ok_or_else(|| Error::Precondition("trace has no images".into()))?;
    let last = trace.images.last().unwrap_or(first);
    let summary = trace
        .last_summary()
        .ok_or_else(|| Error::Precondition("trace has no evaluation".into()))?;
    let (image, reference) = match kind {
        StoreId::Gen => (first, "No".to_string()),
        StoreId::Edit => {
            let parent = last.parent.map(|p| trace.images[p].file.clone()).unwrap_or_default();
            (last, format!("Yes ({parent})"))
        }
    };
    let refinement_quality = if bundle.positive.reasoning.trim().is_empty() {
        "not stated".to_string()
    } else {
        bundle.positive.reasoning.clone()
    };
    let suggestions = trace
        .last_report()
        .map(|r| r.improvement_suggestions.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "None".to_string());
    let attempts = (trace.edits_used + 1).to_string();
    let pairs = [
        ("model_name", model_name.to_string()),
        ("process_summary", describe_run(trace)),
        ("creativity_level", bundle.creativity.level.to_string()),
        ("original_prompt", trace.prompt.clone()),
        ("refined_prompt", image.positive_prompt.clone()),
        ("refinement_quality", refinement_quality),
        ("negative_prompt", image.negative_prompt.clone()),
        ("chosen_model", model_name.to_string()),
        ("selection_reasoning", SELECTION_REASONING.to_string()),
        ("confidence_score", format!("{DEFAULT_CONFIDENCE:.1}")),
        ("reference_image_used", reference),
        ("seed", image.seed.to_string()),
        ("evaluation_score", format!("{:.2}", summary.overall)),
        ("user_feedback", "None (autonomous run)".to_string()),
        ("current_attempt", attempts.clone()),
        ("total_attempts", attempts),
        ("improvement_suggestions", suggestions),
        ("human_oversight", "Disabled".to_string()),
    ];
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Condenses a finished run into node-wise scores, successes and pitfalls
/// from the point of view of one image model. Every image of the run is
/// attached.
pub fn condense_trajectory(
    ctx: &AgentContext,
    trace: &FullRunTrace,
    kind: StoreId,
    model_name: &str,
) -> Result<TrajectoryAnalysis> {
    if !trace.completed {
        return Err(Error::Precondition("trace is not complete".into()));
    }
    if trace.artifacts.is_empty() {
        return Err(Error::Precondition("trace has no image artifacts".into()));
    }
    let slots = trajectory_slots(trace, kind, model_name)?;
    let template = match kind {
        StoreId::Gen => TemplateId::TrajGen,
        StoreId::Edit => TemplateId::TrajEdit,
    };
    let images: Vec<&[u8]> = trace.artifacts.iter().map(|a| a.bytes.as_slice()).collect();
    ctx.call(template, SchemaId::TrajectoryAnalysis, &slots, &Value::Null, None, &images)
}

/// Builds the stored record for one store from a condensed run.
pub fn to_record(
    trace: &FullRunTrace,
    analysis: &TrajectoryAnalysis,
    kind: StoreId,
    timestamp: String,
) -> Result<TrajectoryRecord> {
    let first = trace
        .images
        .first()
        .ok_or_else(|| Error::Precondition("trace has no images".into()))?;
    let last = trace.images.last().unwrap_or(first);
    let summary = trace
        .last_summary()
        .ok_or_else(|| Error::Precondition("trace has no evaluation".into()))?;
    let path = |file: &str| format!("{}/{file}", trace.run_id);
    let (image, reference) = match kind {
        StoreId::Gen => (first, None),
        StoreId::Edit => {
            let parent = last.parent.unwrap_or(0);
            (last, Some(path(&trace.images[parent].file)))
        }
    };
    Ok(TrajectoryRecord {
        id: None,
        timestamp,
        image_index: path(&image.file),
        original_prompt: trace.prompt.clone(),
        refined_prompt: image.positive_prompt.clone(),
        evaluation_score: summary.overall,
        confidence_score: DEFAULT_CONFIDENCE,
        regeneration_count: trace.edits_used,
        reference_image: reference,
        trajectory_reasoning: analysis.trajectory_reasoning.clone(),
        step_scores: to_json(&analysis.step_scores),
        successes: to_json(&analysis.successes),
        pitfalls: to_json(&analysis.pitfalls),
        overall_rating: analysis.overall_rating,
        config_data: trace.config.to_string(),
        process_summary: describe_run(trace),
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("map serializes")
}

/// Decodes the analysis stored in a record.
pub fn analysis_from_record(rec: &TrajectoryRecord) -> Result<TrajectoryAnalysis> {
    let parse = |field: &str, text: &str| -> Result<Value> {
        serde_json::from_str(text).map_err(|e| Error::InvariantViolation(format!("{field}: {e}")))
    };
    let v = serde_json::json!({
        "trajectory_reasoning": rec.trajectory_reasoning,
        "step_scores": parse("step_scores", &rec.step_scores)?,
        "successes": parse("successes", &rec.successes)?,
        "pitfalls": parse("pitfalls", &rec.pitfalls)?,
        "overall_rating": rec.overall_rating,
    });
    serde_json::from_value(v).map_err(|e| Error::InvariantViolation(e.to_string()))
}

/// One numbered block per neighbor, built only from condensed fields.
pub fn similar_data_text(hits: &[RankedHit]) -> String {
    let mut out = String::new();
    for (i, hit) in hits.iter().enumerate() {
        let r = &hit.record;
        let _ = writeln!(out, "[{}] Original prompt: \"{}\"", i + 1, r.original_prompt);
        let _ = writeln!(out, "    Similarity: {:.3}", hit.similarity);
        let _ = writeln!(out, "    Evaluation score: {:.2}", r.evaluation_score);
        let _ = writeln!(out, "    Overall rating: {:.1}", r.overall_rating);
        let _ = writeln!(out, "    Edits used: {}", r.regeneration_count);
        match analysis_from_record(r) {
            Ok(a) => {
                let scores: Vec<String> = ANALYSIS_STEP_KEYS
                    .iter()
                    .filter_map(|k| a.step_scores.get(*k).map(|s| format!("{k}={s}")))
                    .collect();
                let _ = writeln!(out, "    Step scores: {}", scores.join(", "));
                let _ = writeln!(out, "    Successes:");
                for k in ANALYSIS_STEP_KEYS {
                    let _ = writeln!(out, "      - {k}: {}", a.successes.get(k).map_or("", |s| s.as_str()));
                }
                let _ = writeln!(out, "    Pitfalls:");
                for k in ANALYSIS_STEP_KEYS {
                    let _ = writeln!(out, "      - {k}: {}", a.pitfalls.get(k).map_or("", |s| s.as_str()));
                }
            }
            Err(_) => {
                let _ = writeln!(out, "    Successes: {}", r.successes);
                let _ = writeln!(out, "    Pitfalls: {}", r.pitfalls);
            }
        }
        if i + 1 < hits.len() {
            out.push('\n');
        }
    }
    out
}

fn task_focus(prompt: &str, kind: StoreId) -> String {
    match kind {
        StoreId::Gen => format!(
            "NEW PROMPT TO GUIDE:\n\"{prompt}\"\n\nProvide guidance for every step of the generation workflow as it applies to this prompt."
        ),
        StoreId::Edit => format!(
            "NEW PROMPT TO GUIDE:\n\"{prompt}\"\n\nThe image generated for this prompt fell below the quality threshold and will be corrected with the image-editing model. Provide guidance for the editing and evaluation steps."
        ),
    }
}

/// Synthesizes a guidance packet for `new_prompt` from its retrieved
/// neighbors in store `kind`.
pub fn formulate_guidance(
    ctx: &AgentContext,
    new_prompt: &str,
    hits: &[RankedHit],
    kind: StoreId,
) -> Result<GuidancePacket> {
    if hits.is_empty() {
        return Err(Error::Precondition("guidance formulation needs at least one neighbor".into()));
    }
    let (template, schema) = match kind {
        StoreId::Gen => (TemplateId::GuideGen, SchemaId::GuidanceGen),
        StoreId::Edit => (TemplateId::GuideEdit, SchemaId::GuidanceEdit),
    };
    let slots: SlotMap = [
        ("similar_data_text", similar_data_text(hits)),
        ("workflow_description", ctx.templates.workflow_guidance().trim_end().to_string()),
        ("task_focus", task_focus(new_prompt, kind)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    ctx.call(template, schema, &slots, &Value::Null, None, &[])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    Group,
    Individual,
}

impl std::str::FromStr for JudgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group" => Ok(JudgeMode::Group),
            "individual" => Ok(JudgeMode::Individual),
            _ => Err(Error::Config(format!("unknown judge mode {s:?}, expected group or individual"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub overall_score: i64,
    #[serde(default, deserialize_with = "lenient_string")]
    pub reasoning: String,
}

impl Checked for JudgeScore {
    fn check(&self) -> std::result::Result<(), String> {
        if !(1..=5).contains(&self.overall_score) {
            return Err(format!("overall_score {} is outside 1-5", self.overall_score));
        }
        Ok(())
    }
}

fn retrieved_text(hits: &[&RankedHit]) -> String {
    hits.iter()
        .enumerate()
        .map(|(i, h)| format!("{}. \"{}\"", i + 1, h.record.original_prompt))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Group mode: one score for all hits. Individual mode: one score per hit.
pub fn judge_retrieval(
    ctx: &AgentContext,
    query: &str,
    hits: &[RankedHit],
    mode: JudgeMode,
) -> Result<Vec<JudgeScore>> {
    if hits.is_empty() {
        return Err(Error::Precondition("nothing retrieved to judge".into()));
    }
    let call = |template: TemplateId, group: &[&RankedHit]| -> Result<JudgeScore> {
        let slots: SlotMap = [
            ("query".to_string(), query.to_string()),
            ("retrieved_text".to_string(), retrieved_text(group)),
        ]
        .into_iter()
        .collect();
        ctx.call(template, SchemaId::Judge, &slots, &Value::Null, None, &[])
    };
    let all: Vec<&RankedHit> = hits.iter().collect();
    match mode {
        JudgeMode::Group => Ok(vec![call(TemplateId::JudgeGroup, &all)?]),
        JudgeMode::Individual => all
            .iter()
            .map(|h| call(TemplateId::JudgeIndividual, std::slice::from_ref(h)))
            .collect(),
    }
}

pub fn mean_score(scores: &[JudgeScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.overall_score as f64).sum::<f64>() / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{eval_reply, MockChat, MockImageModel};
    use crate::backends::{edit_image, generate_image, validate_schema, GenerationParams};
    use crate::evaluator::{summarize, EvaluationReport};
    use crate::memory::tests::sample_record;
    use crate::orchestrator::{CreativityAssessment, NegativePrompt, PromptBundle, RefinedPrompt};
    use crate::prompts::{render, Templates};
    use serde_json::json;
    use std::sync::Arc;

    fn ctx(chat: Arc<MockChat>) -> AgentContext {
        AgentContext::new(chat, Arc::new(Templates::builtin()), Default::default())
    }

    pub(crate) fn finished_trace(edits: u32) -> FullRunTrace {
        let mut t = FullRunTrace::new("run-1", "a fox in a misty forest", 7, json!({"tau": 8.0}));
        t.bundle = Some(PromptBundle {
            original: t.prompt.clone(),
            creativity: serde_json::from_value(json!({
                "creativity_level": "HIGH", "reasoning": "short",
                "prompt_characteristics": {"detail_level": "low", "specificity": "vague", "artistic_freedom": "open"}
            }))
            .unwrap(),
            spec: serde_json::from_value(json!({"identified_elements": {}})).unwrap(),
            positive: RefinedPrompt { text: "a red fox in dense mist".into(), reasoning: "added mist".into() },
            negative: NegativePrompt { text: "low quality, blurry".into(), reasoning: String::new() },
        });
        let m = MockImageModel::new();
        let cfg = GenerationParams::default();
        let mut img = Arc::new(generate_image(&m, "a red fox in dense mist", "low quality, blurry", 7, &cfg).unwrap());
        t.push_image(img.clone());
        let mut scores = vec![7.0];
        for i in 0..edits {
            img = Arc::new(edit_image(&m, Some(&img), &format!("edit {i}"), "low quality", 7, &cfg).unwrap());
            t.push_image(img.clone());
            scores.push(7.5);
        }
        for s in scores {
            let r: EvaluationReport = serde_json::from_value(eval_reply(s)).unwrap();
            t.summaries.push(summarize(&r));
            t.reports.push(r);
        }
        t.edits_used = edits;
        t.completed = true;
        t
    }

    #[test]
    fn regeneration_status_golden() {
        let t = finished_trace(2);
        let slots = trajectory_slots(&t, StoreId::Edit, "Qwen-Image-Edit").unwrap();
        let text = render(Templates::builtin().get(TemplateId::TrajEdit), &slots).unwrap();
        assert!(text.contains("- Current attempt: #3 of 3 total\n"));
        assert!(text.contains("Analyze the Qwen-Image-Edit model's performance"));
        assert!(text.contains("- Reference image used: Yes (intermediate_1.png)"));
        assert!(text.contains("- Refined prompt: \"edit 1\""));
        let gen = trajectory_slots(&finished_trace(0), StoreId::Gen, "Qwen-Image").unwrap();
        assert_eq!(gen["current_attempt"], "1");
        assert_eq!(gen["reference_image_used"], "No");
        assert_eq!(gen["refined_prompt"], "a red fox in dense mist");
    }

    #[test]
    fn condensation_attaches_all_images_and_round_trips() {
        let chat = Arc::new(MockChat::new());
        let c = ctx(chat.clone());
        let t = finished_trace(2);
        let a = condense_trajectory(&c, &t, StoreId::Edit, "Qwen-Image-Edit").unwrap();
        let req = &chat.requests()[0];
        assert_eq!(req.tag.as_deref(), Some("traj_edit"));
        assert_eq!(req.messages.last().unwrap().image_count(), 3);
        let rec = to_record(&t, &a, StoreId::Edit, "2026-01-01T00:00:00.000Z".into()).unwrap();
        rec.validate(StoreId::Edit, 2).unwrap();
        assert_eq!(rec.reference_image.as_deref(), Some("run-1/intermediate_1.png"));
        assert_eq!(rec.image_index, "run-1/intermediate_2.png");
        assert_eq!(analysis_from_record(&rec).unwrap(), a);
    }

    #[test]
    fn incomplete_trace_is_rejected() {
        let mut t = finished_trace(0);
        t.completed = false;
        assert!(condense_trajectory(&ctx(Arc::new(MockChat::new())), &t, StoreId::Gen, "m").is_err());
    }

    #[test]
    fn analysis_schema_requires_exact_keys() {
        let mut v: Value = serde_json::to_value(TrajectoryAnalysis {
            trajectory_reasoning: "r".into(),
            step_scores: ANALYSIS_STEP_KEYS.iter().map(|k| (k.to_string(), 7.0)).collect(),
            successes: ANALYSIS_STEP_KEYS.iter().map(|k| (k.to_string(), "s".into())).collect(),
            pitfalls: ANALYSIS_STEP_KEYS.iter().map(|k| (k.to_string(), "p".into())).collect(),
            overall_rating: 7.0,
        })
        .unwrap();
        assert!(validate_schema(SchemaId::TrajectoryAnalysis, &v).is_ok());
        v["step_scores"]["generation"] = json!("9/10");
        assert!(validate_schema(SchemaId::TrajectoryAnalysis, &v).is_ok());
        v["step_scores"]["generation"] = json!(11);
        assert!(validate_schema(SchemaId::TrajectoryAnalysis, &v).is_err());
        v["step_scores"]["generation"] = json!(8);
        v["pitfalls"].as_object_mut().unwrap().remove("evaluation");
        assert!(validate_schema(SchemaId::TrajectoryAnalysis, &v).is_err());
    }

    fn hits(n: usize) -> Vec<RankedHit> {
        (0..n)
            .map(|i| {
                let mut r = sample_record(StoreId::Gen, &format!("neighbor prompt {i}"));
                r.id = Some(i as i64 + 1);
                RankedHit { record: r, similarity: 0.9 - i as f64 * 0.1 }
            })
            .collect()
    }

    #[test]
    fn gen_and_edit_packets_have_their_key_sets() {
        let chat = Arc::new(MockChat::new());
        let c = ctx(chat.clone());
        let g = formulate_guidance(&c, "a fox", &hits(3), StoreId::Gen).unwrap();
        assert_eq!(g.step_analysis.len(), 7);
        assert_eq!(g.kind(), StoreId::Gen);
        let e = formulate_guidance(&c, "a fox", &hits(3), StoreId::Edit).unwrap();
        assert_eq!(e.step_analysis.keys().collect::<Vec<_>>(), ["image_editing", "quality_evaluation"]);
        let sys = chat.requests()[0].system_text();
        assert!(sys.contains("[3] Original prompt: \"neighbor prompt 2\""));
        assert!(sys.contains("NEW PROMPT TO GUIDE:\n\"a fox\""));
        assert!(sys.contains("WORKFLOW GUIDANCE"));
        assert!(matches!(formulate_guidance(&c, "a fox", &[], StoreId::Gen), Err(Error::Precondition(_))));
    }

    #[test]
    fn wrong_kind_packet_is_a_schema_violation() {
        let chat = Arc::new(MockChat::new());
        let edit_like = json!({"step_analysis": {"image_editing": {}, "quality_evaluation": {}}});
        chat.script("guide_gen", vec![edit_like.to_string(); 3]);
        let err = formulate_guidance(&ctx(chat), "x", &hits(1), StoreId::Gen).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { schema: SchemaId::GuidanceGen, .. }));
    }

    fn packet(kind: StoreId) -> GuidancePacket {
        GuidancePacket {
            step_analysis: step_keys(kind)
                .iter()
                .map(|k| {
                    (k.to_string(), StepGuidance {
                        preventive_guidance: format!("prevent-{k}"),
                        ..Default::default()
                    })
                })
                .collect(),
            workflow_insights: WorkflowInsights {
                critical_dependencies: "deps".into(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn node_mapping_is_total() {
        let wf = Templates::builtin().workflow_guidance().to_string();
        let gen = packet(StoreId::Gen);
        let edit = packet(StoreId::Edit);
        let cases = [
            (&gen, DecisionNode::Creativity, "creativity_level_determination"),
            (&gen, DecisionNode::Intent, "intention_analysis"),
            (&gen, DecisionNode::Refine, "prompt_refinement"),
            (&gen, DecisionNode::Negative, "negative_model_selection"),
            (&gen, DecisionNode::Generate, "image_generation"),
            (&gen, DecisionNode::Evaluate, "quality_evaluation"),
            (&gen, DecisionNode::EditDecision, "regeneration_decision"),
            (&edit, DecisionNode::Edit, "image_editing"),
            (&edit, DecisionNode::Evaluate, "quality_evaluation"),
        ];
        for (p, node, key) in cases {
            let g = render_node_guidance(&wf, Some(p), node).unwrap();
            assert!(g.corrective_text.contains(&format!("prevent-{key}")), "{node}");
            assert!(g.corrective_text.contains("deps"));
            assert_eq!(g.workflow_text, wf);
        }
        assert!(matches!(render_node_guidance(&wf, Some(&gen), DecisionNode::Edit), Err(Error::UnknownNode(_))));
        assert!(matches!(render_node_guidance(&wf, Some(&edit), DecisionNode::Refine), Err(Error::UnknownNode(_))));
        let none = render_node_guidance(&wf, None, DecisionNode::Creativity).unwrap();
        assert_eq!(none.corrective_text, "");
        assert_eq!(none.workflow_text, wf);
    }

    #[test]
    fn judge_modes() {
        let chat = Arc::new(MockChat::new());
        let c = ctx(chat.clone());
        let ind = judge_retrieval(&c, "a fox", &hits(5), JudgeMode::Individual).unwrap();
        assert_eq!(ind.len(), 5);
        assert_eq!(mean_score(&ind), 4.0);
        let grp = judge_retrieval(&c, "a fox", &hits(5), JudgeMode::Group).unwrap();
        assert_eq!(grp.len(), 1);
        let last = chat.requests().pop().unwrap();
        assert_eq!(last.tag.as_deref(), Some("judge_group"));
        assert!(last.system_text().contains("5. \"neighbor prompt 4\""));
        assert!(last.system_text().contains("\"a fox\""));

        let bad = Arc::new(MockChat::new().with_judge_score(6));
        let err = judge_retrieval(&ctx(bad), "a fox", &hits(1), JudgeMode::Group).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { schema: SchemaId::Judge, .. }));
    }

    #[test]
    fn creativity_fixture_is_valid() {
        let c: CreativityAssessment = finished_trace(0).bundle.unwrap().creativity;
        assert_eq!(c.level.as_str(), "HIGH");
    }
}
