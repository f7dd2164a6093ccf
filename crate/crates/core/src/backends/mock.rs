//! Deterministic in-process backends.
//!
//! Identical inputs always produce byte-identical outputs, and every mock is
//! safe to share across threads. [`MockChat`] answers each agent template
//! (keyed by [`ChatRequest::tag`]) with a plausible schema-valid reply unless a
//! test has scripted explicit replies for that tag.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{
    solid_png, BackendSet, ChatBackend, ChatRequest, ContentPart, EmbedBackend, GenerationParams,
    ImageArtifact, ImageEditor, ImageGenerator,
};
use crate::error::{Error, Result};

pub const MOCK_IMAGE_SIZE: u32 = 64;
pub const MOCK_EMBED_DIM: usize = 64;

#[derive(Default)]
struct ChatState {
    scripts: HashMap<String, VecDeque<String>>,
    eval_schedule: VecDeque<f64>,
    scheduled: bool,
    log: Vec<ChatRequest>,
}

pub const SCHEDULE_EXHAUSTED_SCORE: f64 = 10.0;

/// Scriptable chat/vision mock.
pub struct MockChat {
    state: Mutex<ChatState>,
    judge_score: i64,
}

impl Default for MockChat {
    fn default() -> Self {
        Self::new()
    }
}

impl MockChat {
    pub fn new() -> Self {
        Self {
            state: Mutex::new(ChatState::default()),
            judge_score: 4,
        }
    }

    /// Queues raw replies for requests tagged `tag`, consumed in order before
    /// falling back to the default reply.
    pub fn script<I, S>(&self, tag: &str, replies: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut st = self.state.lock().unwrap();
        st.scripts
            .entry(tag.to_string())
            .or_default()
            .extend(replies.into_iter().map(Into::into));
    }

    /// Overall scores returned by successive evaluator calls. Once a
    /// non-empty schedule runs out every further evaluation scores
    /// `SCHEDULE_EXHAUSTED_SCORE`.
    pub fn with_eval_schedule(self, scores: impl IntoIterator<Item = f64>) -> Self {
        let mut st = self.state.lock().unwrap();
        st.eval_schedule = scores.into_iter().collect();
        st.scheduled = !st.eval_schedule.is_empty();
        drop(st);
        self
    }

    pub fn with_judge_score(mut self, score: i64) -> Self {
        self.judge_score = score;
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn total_calls(&self) -> usize {
        self.state.lock().unwrap().log.len()
    }

    pub fn calls_for(&self, tag: &str) -> usize {
        self.state
            .lock()
            .unwrap()
            .log
            .iter()
            .filter(|r| r.tag.as_deref() == Some(tag))
            .count()
    }

    fn next_eval_score(&self, req: &ChatRequest) -> f64 {
        let mut st = self.state.lock().unwrap();
        if let Some(s) = st.eval_schedule.pop_front() {
            return s;
        }
        if st.scheduled {
            return SCHEDULE_EXHAUSTED_SCORE;
        }
        drop(st);
        // 6.0..=10.0 in steps of 0.1, derived from the request content
        let h = request_digest(req);
        let n = u16::from_le_bytes([h[0], h[1]]) % 41;
        6.0 + f64::from(n) / 10.0
    }

    fn default_reply(&self, req: &ChatRequest) -> Result<String> {
        let tag = req.tag.as_deref().unwrap_or("");
        let payload = payload_of(req);
        let reply = match tag {
            "s_cre" => creativity_reply(&text_field(&payload, "prompt", &req.user_text())),
            "s_int" => intent_reply(&payload),
            "s_ref" => refine_reply(&payload),
            "s_neg" => negative_reply(&payload),
            "eval" => eval_reply(self.next_eval_score(req)),
            "traj_gen" | "traj_edit" => trajectory_reply(),
            "guide_gen" => guidance_reply(&crate::guidance::GEN_STEP_KEYS),
            "guide_edit" => guidance_reply(&crate::guidance::EDIT_STEP_KEYS),
            "judge_group" | "judge_individual" => {
                json!({"overall_score": self.judge_score, "reasoning": "mock judge"})
            }
            other => {
                return Err(Error::Protocol(format!(
                    "mock chat has no reply for tag {other:?}"
                )))
            }
        };
        Ok(reply.to_string())
    }
}

impl ChatBackend for MockChat {
    fn chat_complete(&self, req: &ChatRequest) -> Result<String> {
        let scripted = {
            let mut st = self.state.lock().unwrap();
            st.log.push(req.clone());
            req.tag
                .as_deref()
                .and_then(|t| st.scripts.get_mut(t))
                .and_then(VecDeque::pop_front)
        };
        match scripted {
            Some(reply) => Ok(reply),
            None => self.default_reply(req),
        }
    }
}

fn request_digest(req: &ChatRequest) -> [u8; 32] {
    let mut h = Sha256::new();
    for m in &req.messages {
        h.update(m.role.as_str());
        for p in &m.parts {
            match p {
                ContentPart::Text(t) => h.update(t.as_bytes()),
                ContentPart::Image { data, .. } => h.update(data),
            }
        }
    }
    h.finalize().into()
}

fn payload_of(req: &ChatRequest) -> Map<String, Value> {
    match serde_json::from_str::<Value>(&req.user_text()) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}

fn text_field(payload: &Map<String, Value>, key: &str, fallback: &str) -> String {
    payload
        .get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| fallback.to_string())
}

fn creativity_reply(prompt: &str) -> Value {
    let words = prompt.split_whitespace().count();
    let (level, chars) = if words < 10 {
        ("HIGH", ("low", "vague", "open"))
    } else if words <= 25 {
        ("MEDIUM", ("medium", "moderate", "balanced"))
    } else {
        ("LOW", ("high", "precise", "constrained"))
    };
    json!({
        "creativity_level": level,
        "reasoning": format!("Prompt has {words} words."),
        "prompt_characteristics": {
            "detail_level": chars.0,
            "specificity": chars.1,
            "artistic_freedom": chars.2
        }
    })
}

fn intent_reply(payload: &Map<String, Value>) -> Value {
    let prompt = text_field(payload, "prompt", "");
    let level = text_field(payload, "creativity_level", "MEDIUM");
    let ambiguous = match level.as_str() {
        "HIGH" => json!([{
            "element": "visual details",
            "reason": "Prompt leaves most visual details unspecified",
            "suggested_questions": ["What style and setting are intended?"],
            "creative_fill": "natural lighting, balanced composition, photorealistic style"
        }]),
        "MEDIUM" => json!([{
            "element": "background",
            "reason": "No background details provided",
            "suggested_questions": ["What kind of background do you envision?"],
            "creative_fill": "simple complementary background"
        }]),
        _ => json!([]),
    };
    json!({
        "identified_elements": {
            "main_subjects": [{"subject": prompt, "spatial_relationships": ""}],
            "background": "",
            "composition": "",
            "color_harmony": "",
            "lighting": "",
            "focus_sharpness": "",
            "emotional_impact": "",
            "uniqueness_creativity": "",
            "visual_style": "",
            "references": {"content": [], "style": ""}
        },
        "ambiguous_elements": ambiguous
    })
}

fn refine_reply(payload: &Map<String, Value>) -> Value {
    let prompt = text_field(payload, "prompt", "");
    if let Some(prev) = payload.get("previous_refined_prompt").and_then(Value::as_str) {
        let suggestions = text_field(payload, "improvement_suggestions", "");
        let missing: Vec<String> = payload
            .get("missing_elements")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default();
        let mut text = prev.to_string();
        if !suggestions.is_empty() {
            text.push_str(&format!(". Edit: {suggestions}"));
        }
        if !missing.is_empty() {
            text.push_str(&format!(". Fix: {}", missing.join(", ")));
        }
        return json!({
            "refined_prompt": text,
            "reasoning": "Applied evaluator feedback to the previous refined prompt."
        });
    }
    let fills: Vec<String> = payload
        .get("semantic_analysis")
        .and_then(|s| s.get("ambiguous_elements"))
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|e| e.get("creative_fill").and_then(Value::as_str))
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    let text = if fills.is_empty() {
        prompt
    } else {
        format!("{prompt}, {}", fills.join(", "))
    };
    json!({
        "refined_prompt": text,
        "reasoning": "Kept every original subject and resolved ambiguities with creative fills."
    })
}

fn negative_reply(payload: &Map<String, Value>) -> Value {
    let refined = text_field(payload, "refined_prompt", "").to_lowercase();
    let mut terms: Vec<String> = vec!["low quality".into(), "blurry".into()];
    let rules: [(&[&str], &str); 4] = [
        (&["blue sky"], "clouds, dark clouds"),
        (&["alone"], "extra people, crowd"),
        (&["portrait", "headshot", "face"], "distorted face, multiple heads, extra limbs"),
        (&["landscape"], "people, buildings, oversaturated"),
    ];
    for (keys, negs) in rules {
        if keys.iter().any(|k| refined.contains(k)) {
            terms.extend(negs.split(", ").map(str::to_string));
        }
    }
    if let Some(arts) = payload.get("detected_artifacts").and_then(Value::as_array) {
        terms.extend(arts.iter().filter_map(Value::as_str).map(str::to_lowercase));
    }
    terms.push("text".into());
    json!({
        "negative_prompt": terms.join(", "),
        "reasoning": "Quality safeguards plus scene-specific exclusions."
    })
}

/// Evaluation report whose ten subscores all equal `score`, so that the
/// summarized overall score is exactly `score`.
pub fn eval_reply(score: f64) -> Value {
    let passing = score >= 8.0;
    json!({
        "aesthetic_reasoning": "mock aesthetic assessment",
        "aesthetic_score": {
            "Composition": score,
            "Color Harmony": score,
            "Lighting & Exposure": score,
            "Focus & Sharpness": score,
            "Emotional Impact": score,
            "Uniqueness & Creativity": score
        },
        "alignment_reasoning": "mock alignment assessment",
        "alignment_score": {
            "Presence of Main Subjects": score,
            "Accuracy of Spatial Relationships": score,
            "Adherence to Style Requirements": score,
            "Background Representation": score
        },
        "artifacts": {
            "detected_artifacts": if passing { json!([]) } else { json!(["texture noise"]) },
            "artifact_reasoning": if passing { "none visible" } else { "faint noise in flat regions" }
        },
        "main_subjects_present": true,
        "missing_elements": if passing { json!([]) } else { json!(["Lighting detail underrepresented"]) },
        "improvement_suggestions": if passing { "" } else { "Strengthen lighting and subject detail." },
        "overall_reasoning": format!("mock overall {score:.1}")
    })
}

fn trajectory_reply() -> Value {
    let keys = crate::guidance::ANALYSIS_STEP_KEYS;
    let scores: Map<String, Value> = keys.iter().map(|k| (k.to_string(), json!(7))).collect();
    let successes: Map<String, Value> = keys
        .iter()
        .map(|k| (k.to_string(), json!(format!("{k} handled the prompt adequately"))))
        .collect();
    let pitfalls: Map<String, Value> = keys
        .iter()
        .map(|k| (k.to_string(), json!(format!("{k} missed minor details"))))
        .collect();
    json!({
        "trajectory_reasoning": "mock trajectory analysis",
        "step_scores": scores,
        "successes": successes,
        "pitfalls": pitfalls,
        "overall_rating": 7
    })
}

fn guidance_reply(keys: &[&str]) -> Value {
    let steps: Map<String, Value> = keys
        .iter()
        .map(|k| {
            (
                k.to_string(),
                json!({
                    "success_patterns": format!("{k}: keep subjects explicit"),
                    "failure_patterns": format!("{k}: vague lighting"),
                    "impact_on_next": format!("{k}: shapes the next step"),
                    "preventive_guidance": format!("{k}: state lighting and composition"),
                    "recommended_score": "8"
                }),
            )
        })
        .collect();
    json!({
        "step_analysis": steps,
        "workflow_insights": {
            "critical_dependencies": "refinement depends on intent analysis",
            "common_failure_chains": "vague intent leads to weak refinement",
            "success_combinations": "explicit subjects with targeted negatives",
            "overall_rating_prediction": "8"
        }
    })
}

/// Bag-of-words hashing embedder: texts sharing words get nearby vectors.
pub struct MockEmbedder {
    dim: usize,
    calls: AtomicUsize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn hashed_direction(&self, token: &str, out: &mut [f32], weight: f32) {
        let mut block = 0u32;
        let mut filled = 0;
        while filled < self.dim {
            let mut h = Sha256::new();
            h.update(token.as_bytes());
            h.update(block.to_le_bytes());
            let digest = h.finalize();
            for chunk in digest.chunks_exact(4) {
                if filled == self.dim {
                    break;
                }
                let u = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                let x = (f64::from(u) / f64::from(u32::MAX)) * 2.0 - 1.0;
                out[filled] += weight * x as f32;
                filled += 1;
            }
            block += 1;
        }
    }
}

impl EmbedBackend for MockEmbedder {
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut v = vec![0f32; self.dim];
        let lower = text.to_lowercase();
        for token in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            self.hashed_direction(token, &mut v, 1.0);
        }
        self.hashed_direction(&format!("\u{0}{lower}"), &mut v, 0.25);
        Ok(v)
    }
}

/// Solid-color PNG generator and editor.
#[derive(Default)]
pub struct MockImageModel {
    generate_calls: AtomicUsize,
    edit_calls: AtomicUsize,
}

impl MockImageModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    pub fn edit_calls(&self) -> usize {
        self.edit_calls.load(Ordering::SeqCst)
    }

    fn color(parts: &[&[u8]]) -> [u8; 3] {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        let d = h.finalize();
        [d[0], d[1], d[2]]
    }

    fn artifact(rgb: [u8; 3], pos: &str, neg: &str, seed: u64, cfg: &GenerationParams) -> ImageArtifact {
        ImageArtifact {
            bytes: solid_png(rgb, MOCK_IMAGE_SIZE, MOCK_IMAGE_SIZE),
            width: MOCK_IMAGE_SIZE,
            height: MOCK_IMAGE_SIZE,
            seed,
            positive_prompt: pos.into(),
            negative_prompt: neg.into(),
            guidance_scale: cfg.guidance_scale,
            parent: None,
        }
    }
}

impl ImageGenerator for MockImageModel {
    fn generate(&self, pos: &str, neg: &str, seed: u64, cfg: &GenerationParams) -> Result<ImageArtifact> {
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        let rgb = Self::color(&[pos.as_bytes(), neg.as_bytes(), &seed.to_le_bytes()]);
        Ok(Self::artifact(rgb, pos, neg, seed, cfg))
    }
}

impl ImageEditor for MockImageModel {
    fn edit(
        &self,
        base: &Arc<ImageArtifact>,
        pos: &str,
        neg: &str,
        seed: u64,
        cfg: &GenerationParams,
    ) -> Result<ImageArtifact> {
        self.edit_calls.fetch_add(1, Ordering::SeqCst);
        let rgb = Self::color(&[&base.bytes, pos.as_bytes(), neg.as_bytes(), &seed.to_le_bytes()]);
        let mut img = Self::artifact(rgb, pos, neg, seed, cfg);
        img.parent = Some(Arc::clone(base));
        Ok(img)
    }
}

/// A full mock backend set with handles kept for call-count assertions.
#[derive(Clone)]
pub struct MockSet {
    pub chat: Arc<MockChat>,
    pub embed: Arc<MockEmbedder>,
    pub images: Arc<MockImageModel>,
}

impl MockSet {
    pub fn new(chat: MockChat) -> Self {
        Self {
            chat: Arc::new(chat),
            embed: Arc::new(MockEmbedder::new(MOCK_EMBED_DIM)),
            images: Arc::new(MockImageModel::new()),
        }
    }

    pub fn backends(&self) -> BackendSet {
        BackendSet {
            chat: self.chat.clone(),
            embed: self.embed.clone(),
            gen: self.images.clone(),
            edit: self.images.clone(),
        }
    }
}

impl Default for MockSet {
    fn default() -> Self {
        Self::new(MockChat::new())
    }
}
